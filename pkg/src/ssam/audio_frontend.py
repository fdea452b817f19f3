"""Log-mel spectrograms, patch grids and audio file readers.

Feature recipe (16 kHz mono input):

* 25 ms periodic Hann window (400 samples) centred in a 512-point FFT
* 10 ms hop (160 samples), reflect padding of 256 samples on both sides,
  ``T = floor(n / 160 + 1/2)`` frames, so 2 s of audio gives 200 frames
* power spectrum -> 80 triangular HTK-mel filters over 0-8000 Hz
  (``mel = 2595 log10(1 + f / 700)``, unnormalized triangles)
* ``log(energy + 1e-5)``, then per-instance standardization with the
  standard deviation floored at 1e-6

Patches are cut time-major: grid row ``i`` (time) and column ``j``
(frequency) become patch ``i * grid_f + j``, and each patch is flattened
time-then-frequency.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, GeometryError, ParameterError

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
LOG_OFFSET = 1e-5
STD_FLOOR = 1e-6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray  # [T, F]
    degenerate: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class PatchGrid:
    patches: np.ndarray  # [N_p, patch_t * patch_f]
    patch_t: int
    patch_f: int
    grid_t: int
    grid_f: int

    @property
    def n_patches(self) -> int:
        return self.grid_t * self.grid_f


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """``n_mels + 2`` edge frequencies in Hz; filter ``m`` peaks at edge ``m + 1``."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


def mel_center_frequencies(n_mels: int = N_MELS) -> np.ndarray:
    return mel_band_edges(n_mels)[1:-1]


def mel_filterbank(n_fft: int = N_FFT, n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Triangular filters as a ``[n_fft // 2 + 1, n_mels]`` matrix."""
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_band_edges(n_mels, f_min, f_max)
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    rising = (freqs[:, None] - lo) / (mid - lo)
    falling = (hi - freqs[:, None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _window() -> np.ndarray:
    n = np.arange(WIN_LENGTH)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_LENGTH)
    offset = (N_FFT - WIN_LENGTH) // 2
    win = np.zeros(N_FFT)
    win[offset:offset + WIN_LENGTH] = hann
    return win


_FILTERBANK = mel_filterbank()
_WINDOW = _window()


def n_frames(n_samples: int) -> int:
    return (n_samples + HOP_LENGTH // 2) // HOP_LENGTH


def standardize(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Zero-mean, unit-std over the whole instance. Returns ``(values, degenerate)``.

    An instance whose std is below the floor is flagged degenerate and comes
    back as all zeros.
    """
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    if std < STD_FLOOR:
        return np.zeros_like(values), True
    return (values - values.mean()) / std, False


def log_mel(w: Waveform, dtype=np.float32) -> Spectrogram:
    n = w.samples.size
    if n == 0:
        raise DataError("empty waveform")
    if n < HOP_LENGTH:
        raise DataError(f"waveform shorter than one hop ({n} < {HOP_LENGTH} samples)")
    T = n_frames(n)
    padded = np.pad(w.samples, N_FFT // 2, mode="reflect")
    idx = np.arange(T)[:, None] * HOP_LENGTH + np.arange(N_FFT)
    frames = padded[idx] * _WINDOW
    power = np.abs(np.fft.rfft(frames, axis=-1)) ** 2
    logmel = np.log(power @ _FILTERBANK + LOG_OFFSET)
    values, degenerate = standardize(logmel)
    return Spectrogram(values.astype(dtype), degenerate)


def _check_geometry(T: int, F: int, patch_t: int, patch_f: int) -> None:
    if patch_t < 1 or patch_f < 1:
        raise GeometryError(f"patch shape must be positive, got ({patch_t}, {patch_f})")
    if T % patch_t or F % patch_f:
        raise GeometryError(f"spectrogram [{T}, {F}] is not divisible by patch ({patch_t}, {patch_f})")


def patchify_array(values: np.ndarray, patch_t: int, patch_f: int) -> np.ndarray:
    """``[..., T, F] -> [..., N_p, patch_t * patch_f]``."""
    *lead, T, F = values.shape
    _check_geometry(T, F, patch_t, patch_f)
    gt, gf = T // patch_t, F // patch_f
    x = values.reshape(*lead, gt, patch_t, gf, patch_f)
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*lead, gt * gf, patch_t * patch_f)


def unpatchify_array(patches: np.ndarray, patch_t: int, patch_f: int, grid_t: int,
                     grid_f: int) -> np.ndarray:
    *lead, n, d = patches.shape
    if n != grid_t * grid_f or d != patch_t * patch_f:
        raise GeometryError(f"patches {patches.shape} inconsistent with grid "
                            f"{grid_t}x{grid_f} of ({patch_t}, {patch_f})")
    x = patches.reshape(*lead, grid_t, grid_f, patch_t, patch_f)
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*lead, grid_t * patch_t, grid_f * patch_f)


def patchify(s: Spectrogram, patch_t: int, patch_f: int) -> PatchGrid:
    T, F = s.values.shape
    _check_geometry(T, F, patch_t, patch_f)
    return PatchGrid(patchify_array(s.values, patch_t, patch_f), patch_t, patch_f,
                     T // patch_t, F // patch_f)


def unpatchify(p: PatchGrid) -> Spectrogram:
    return Spectrogram(unpatchify_array(p.patches, p.patch_t, p.patch_f, p.grid_t, p.grid_f))


# audio files

def read_wav(path: str | Path) -> Waveform:
    """Mono 16-bit PCM WAV at 16 kHz."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise DataError(f"{path}: unreadable WAV ({exc or type(exc).__name__})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise DataError(f"{path}: no samples")
    return Waveform(samples, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def read_raw_f32(path: str | Path) -> Waveform:
    """Raw little-endian float32 samples plus a one-line JSON sidecar.

    The sidecar ``<file>.meta`` holds ``{"samples": n, "sample_rate": hz}``.
    """
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text().splitlines()[0])
        n, rate = int(meta["samples"]), int(meta["sample_rate"])
        samples = np.fromfile(path, dtype="<f4")
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise DataError(f"{path}: unreadable raw audio ({exc})") from exc
    if samples.size != n:
        raise DataError(f"{path}: sidecar says {n} samples, file has {samples.size}")
    return Waveform(samples, rate)


def write_raw_f32(path: str | Path, w: Waveform) -> None:
    path = Path(path)
    w.samples.astype("<f4").tofile(path)
    _sidecar(path).write_text(json.dumps({"samples": int(w.samples.size),
                                          "sample_rate": int(w.sample_rate)}) + "\n")


AUDIO_SUFFIXES = (".wav", ".f32")


def load_audio(path: str | Path) -> Waveform:
    suffix = Path(path).suffix.lower()
    if suffix == ".wav":
        return read_wav(path)
    if suffix == ".f32":
        return read_raw_f32(path)
    raise ParameterError(f"unsupported audio file type {suffix!r}")
