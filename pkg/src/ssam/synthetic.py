"""Synthetic audio for tests, smoke runs and benchmarks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_frontend import SAMPLE_RATE, Waveform, write_wav
from .numerics import Rng

FUNDAMENTALS = (220.0, 330.0, 440.0, 660.0)


def harmonic_clip(rng: Rng, seconds: float = 3.0, n_harmonics: int = 4,
                  noise: float = 0.01) -> Waveform:
    """A stationary harmonic tone with a random fundamental and light noise."""
    n = int(round(seconds * SAMPLE_RATE))
    g = rng.generator
    f0 = FUNDAMENTALS[int(g.integers(len(FUNDAMENTALS)))]
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        x += np.sin(2 * np.pi * k * f0 * t + g.uniform(0, 2 * np.pi)) / k
    x *= 0.3 / np.abs(x).max()
    x += noise * g.standard_normal(n)
    return Waveform(np.clip(x, -1.0, 1.0))


def write_dataset(directory: str | Path, n_clips: int, seed: int = 0, seconds: float = 3.0) -> list[Path]:
    """Write ``n_clips`` harmonic WAV files named ``clip_0000.wav`` ..."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_clips):
        path = directory / f"clip_{i:04d}.wav"
        write_wav(path, harmonic_clip(Rng(seed, i), seconds))
        paths.append(path)
    return paths
