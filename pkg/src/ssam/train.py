"""Pretraining loop: AdamW with warmup + cosine schedule, and checkpoints.

All randomness is addressed by ``Rng(seed, stream)`` with streams derived
from the epoch or step index, so a run resumed from a checkpoint replays
exactly the crops and masks of an uninterrupted run.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .audio_frontend import (AUDIO_SUFFIXES, SAMPLE_RATE, Spectrogram, Waveform, load_audio,
                             log_mel, n_frames, patchify_array, standardize)
from .container import load_tensors, save_tensors
from .errors import DataError, GeometryError, ParameterError, ShapeError
from .model import ModelConfig, ModelWeights, build_mask_plan, forward_pretrain, init_weights
from .numerics import Rng

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "ssam-checkpoint"
CHECKPOINT_VERSION = 1
FEATURE_SUFFIX = ".ssam"
METRICS_FILE = "metrics.ndjson"
CHECKPOINT_FILE = "checkpoint.ssam"

# stream ids; per-epoch and per-step streams are offset by the index
SUBSET_STREAM = 1
EPOCH_STREAM = 1 << 32
STEP_STREAM = 2 << 32


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 0.05
    peak_lr: float | None = None
    warmup_epochs: int = 10
    seed: int = 0
    crop_seconds: float = 2.0
    data_fraction: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    checkpoint_every: int = 0  # steps; 0 writes only at the end

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ParameterError("need 0 <= warmup_epochs <= epochs")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ParameterError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")
        if self.crop_seconds <= 0:
            raise ParameterError("crop_seconds must be positive")

    @property
    def lr(self) -> float:
        """Peak learning rate; defaults to 1e-3 scaled by batch_size / 1024."""
        return 1e-3 * self.batch_size / 1024 if self.peak_lr is None else self.peak_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ParameterError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# optimizer

NO_DECAY_NAMES = ("cls_token", "mask_token")


def decays(name: str) -> bool:
    """Weight decay applies to everything except norm scales, biases and the tokens."""
    return not (name.endswith(".scale") or name.endswith("bias") or name in NO_DECAY_NAMES)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
               moments: AdamState, lr: float, weight_decay: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               decay_filter=decays) -> AdamState:
    """One in-place AdamW update of ``params``; returns the advanced moments.

    Decay is decoupled: ``p <- p (1 - lr wd)`` first, then the bias-corrected
    Adam step. A missing gradient counts as zero.
    """
    b1, b2 = betas
    moments.t += 1
    c1 = 1.0 - b1 ** moments.t
    c2 = 1.0 - b2 ** moments.t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m, v = moments.m[name], moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and decay_filter(name):
            p *= 1.0 - lr * weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return moments


# checkpoints

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    step: int
    rng_state: dict
    train_config: TrainConfig | None = None
    format_version: int = CHECKPOINT_VERSION

    def weights(self, requires_grad: bool = True) -> ModelWeights:
        return ModelWeights.from_arrays(self.model_config, self.params, requires_grad)


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    arrays = {f"param/{k}": v for k, v in ck.params.items()}
    arrays.update({f"adam.m/{k}": v for k, v in ck.adam.m.items()})
    arrays.update({f"adam.v/{k}": v for k, v in ck.adam.v.items()})
    meta = {"kind": CHECKPOINT_KIND, "checkpoint_version": ck.format_version,
            "model_config": ck.model_config.to_dict(), "step": ck.step, "adam_t": ck.adam.t,
            "rng_state": ck.rng_state,
            "train_config": ck.train_config.to_dict() if ck.train_config else None}
    save_tensors(path, arrays, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, meta = load_tensors(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise DataError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('checkpoint_version')}")
    group = {"param": {}, "adam.m": {}, "adam.v": {}}
    for key, arr in arrays.items():
        prefix, _, name = key.partition("/")
        if prefix not in group:
            raise DataError(f"{path}: unexpected tensor {key!r}")
        group[prefix][name] = arr
    tc = meta.get("train_config")
    return Checkpoint(ModelConfig.from_dict(meta["model_config"]), group["param"],
                      AdamState(group["adam.m"], group["adam.v"], int(meta["adam_t"])),
                      int(meta["step"]), meta["rng_state"],
                      TrainConfig.from_dict(tc) if tc else None)


# data

def list_dataset(dataset_dir: str | Path) -> list[Path]:
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    suffixes = AUDIO_SUFFIXES + (FEATURE_SUFFIX,)
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in suffixes)
    if not files:
        raise DataError(f"no audio or feature files in {root}")
    return files


def select_subset(files: list, fraction: float, seed: int) -> list:
    """``round(fraction * n)`` files (at least one), chosen by seed, in original order."""
    n = len(files)
    k = max(1, round(fraction * n))
    if k >= n:
        return list(files)
    idx = np.sort(Rng(seed, SUBSET_STREAM).permutation(n)[:k])
    return [files[i] for i in idx]


def _load_item(path: Path):
    if path.suffix.lower() == FEATURE_SUFFIX:
        arrays, _ = load_tensors(path)
        if "spectrogram" not in arrays:
            raise DataError(f"{path}: feature file without a spectrogram tensor")
        return Spectrogram(arrays["spectrogram"])
    return load_audio(path)


def load_dataset(files: list[Path]) -> tuple[list, list[tuple[Path, str]]]:
    """Readable items plus ``(path, reason)`` for every skipped file."""
    items, skipped = [], []
    for path in files:
        try:
            items.append(_load_item(path))
        except DataError as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append((path, str(exc)))
    if not items:
        raise DataError("no readable files in dataset")
    return items, skipped


def random_crop(item, rng: Rng, crop_samples: int, frames: int, dtype=np.float32) -> np.ndarray:
    """Uniform-offset crop as a standardized ``[frames, F]`` spectrogram."""
    if isinstance(item, Waveform):
        x = item.samples
        if x.size > crop_samples:
            start = int(rng.integers(0, x.size - crop_samples + 1))
            x = x[start:start + crop_samples]
        else:
            x = np.pad(x, (0, crop_samples - x.size))
        return log_mel(Waveform(x, SAMPLE_RATE), dtype).values
    v = item.values
    if v.shape[0] > frames:
        start = int(rng.integers(0, v.shape[0] - frames + 1))
        v = v[start:start + frames]
    else:
        v = np.pad(v, ((0, frames - v.shape[0]), (0, 0)))
    return standardize(v)[0].astype(dtype)


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    losses: list[float]
    skipped: list[tuple[Path, str]]
    n_files: int
    step: int


def _read_metrics(path: Path, before_step: int) -> list[str]:
    if not path.exists():
        return []
    kept = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line)["step"] < before_step:
            kept.append(line)
    return kept


def pretrain(train_cfg: TrainConfig, model_cfg: ModelConfig, dataset_dir: str | Path,
             out_dir: str | Path, resume_from: str | Path | None = None,
             stop_after: int | None = None, dtype=np.float32) -> TrainResult:
    """Masked-reconstruction pretraining; writes a metrics log and a checkpoint.

    ``stop_after`` halts once that many total steps are done (a simulated
    interruption); ``resume_from`` continues from a checkpoint, keeping the
    metrics of earlier steps and replaying the same data order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = select_subset(list_dataset(dataset_dir), train_cfg.data_fraction, train_cfg.seed)
    items, skipped = load_dataset(files)

    crop_samples = int(round(train_cfg.crop_seconds * SAMPLE_RATE))
    frames = n_frames(crop_samples)
    if frames != model_cfg.input_frames:
        raise GeometryError(f"{train_cfg.crop_seconds} s crops give {frames} frames, "
                            f"model expects {model_cfg.input_frames}")

    n = len(items)
    bs = train_cfg.batch_size
    steps_per_epoch = -(-n // bs)
    total = train_cfg.epochs * steps_per_epoch
    warmup = train_cfg.warmup_epochs * steps_per_epoch

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.model_config.to_dict() != model_cfg.to_dict():
            raise ParameterError("checkpoint model config differs from the requested one")
        weights = ck.weights()
        adam = ck.adam
        step = ck.step
    else:
        weights = init_weights(model_cfg, train_cfg.seed, dtype)
        adam = AdamState.zeros_like(weights.arrays())
        step = 0

    metrics_path = out / METRICS_FILE
    lines = _read_metrics(metrics_path, step) if resume_from is not None else []
    losses = [json.loads(line)["loss"] for line in lines]
    end = total if stop_after is None else min(total, stop_after)
    params = weights.arrays()
    ck_path = out / CHECKPOINT_FILE

    def checkpoint():
        save_checkpoint(ck_path, Checkpoint(model_cfg, params, adam, step,
                                            {"seed": train_cfg.seed, "next_step": step},
                                            train_cfg))

    with open(metrics_path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")
        while step < end:
            t0 = time.perf_counter()
            epoch, pos = divmod(step, steps_per_epoch)
            order = Rng(train_cfg.seed, EPOCH_STREAM + epoch).permutation(n)
            batch_idx = order[pos * bs:(pos + 1) * bs]
            rng = Rng(train_cfg.seed, STEP_STREAM + step)
            mels, plans = [], []
            for i in batch_idx:
                mels.append(random_crop(items[i], rng, crop_samples, frames, dtype))
                plans.append(build_mask_plan(rng, model_cfg.n_patches, model_cfg.mask_ratio))
            x = patchify_array(np.stack(mels), model_cfg.patch_t, model_cfg.patch_f)

            for p in weights.params.values():
                p.grad = None
            _, _, loss = forward_pretrain(model_cfg, weights, x, plans)
            loss.backward()
            lr = lr_at(step, total, warmup, train_cfg.lr)
            grads = {k: p.grad for k, p in weights.params.items()}
            adamw_step(params, grads, adam, lr, train_cfg.weight_decay, train_cfg.betas,
                       train_cfg.eps)

            value = float(loss.data)
            if not math.isfinite(value):
                raise DataError(f"non-finite loss at step {step}")
            losses.append(value)
            wall_ms = (time.perf_counter() - t0) * 1e3
            fh.write(json.dumps({"step": step, "lr": lr, "loss": value,
                                 "wall_ms": round(wall_ms, 3)}) + "\n")
            fh.flush()
            step += 1
            if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                checkpoint()
    checkpoint()
    return TrainResult(ck_path, metrics_path, losses, skipped, n, step)


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def deterministic_view(records: list[dict]) -> list[dict]:
    """Metrics with the wall-clock field removed, for run-to-run comparison."""
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]
