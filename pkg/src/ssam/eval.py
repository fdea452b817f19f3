"""Downstream evaluation: clip embeddings, MLP probes and normalized scores.

A clip is cut into consecutive 2 s chunks (the last one zero-padded), each
chunk is encoded and mean-pooled over its patch tokens, and the chunk
vectors are averaged. Probes are ``d_m -> 1024 -> classes`` MLPs trained
with AdamW on frozen embeddings. The aggregated score of model ``m`` is

    s(m) = 100 / |T| * sum_t (x_t(m) - min_t) / (max_t - min_t)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_frontend import SAMPLE_RATE, Waveform, log_mel, n_frames, patchify_array
from .container import load_tensors, save_tensors, write_text_atomic
from .errors import DataError, DegenerateTaskError, ParameterError, ShapeError
from .model import ModelConfig, ModelWeights, encode, pool
from .numerics import Rng, Tensor, bce_with_logits, cross_entropy, gelu
from .train import AdamState, adamw_step

CHUNK_SECONDS = 2.0


@dataclass
class ClipEmbedding:
    vector: np.ndarray
    clip_id: str = ""
    model_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector)
        if self.vector.ndim != 1:
            raise ShapeError(f"embedding must be 1-d, got {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise DataError(f"embedding for {self.clip_id!r} is not finite")


def chunk_waveform(w: Waveform, chunk_seconds: float = CHUNK_SECONDS) -> np.ndarray:
    """``[n_chunks, chunk_samples]``; the tail is zero-padded, an empty clip gives one silent chunk."""
    size = int(round(chunk_seconds * w.sample_rate))
    n = max(1, math.ceil(w.samples.size / size))
    padded = np.zeros(n * size)
    padded[:w.samples.size] = w.samples
    return padded.reshape(n, size)


def chunk_vectors(cfg: ModelConfig, w: ModelWeights, mels: np.ndarray, pooling: str = "mean",
                  chunk_len=-1) -> np.ndarray:
    """Pooled encoder output per chunk for ``[n_chunks, T, F]`` spectrograms."""
    x = patchify_array(mels, cfg.patch_t, cfg.patch_f)
    z = encode(cfg, w, x, chunk_len)
    return pool(z.data, pooling)


def mean_over_chunks(vectors: np.ndarray) -> np.ndarray:
    """Order-independent mean: each column is summed in sorted order."""
    return np.sort(vectors.astype(np.float64), axis=0).sum(axis=0) / vectors.shape[0]


def embed_clip(cfg: ModelConfig, w: ModelWeights, waveform: Waveform, pooling: str = "mean",
               clip_id: str = "", model_id: str = "") -> ClipEmbedding:
    chunks = chunk_waveform(waveform)
    if n_frames(chunks.shape[1]) != cfg.input_frames:
        raise ParameterError(f"{CHUNK_SECONDS} s chunks do not give {cfg.input_frames} frames")
    mels = np.stack([log_mel(Waveform(c, SAMPLE_RATE), w.dtype).values for c in chunks])
    return ClipEmbedding(mean_over_chunks(chunk_vectors(cfg, w, mels, pooling)), clip_id, model_id)


def save_embeddings(path: str | Path, embeddings: Sequence[ClipEmbedding], meta: dict | None = None) -> Path:
    """One ``[n_clips, d_m]`` tensor plus a newline-delimited clip-id manifest ``<path>.ids``."""
    if not embeddings:
        raise DataError("no embeddings to save")
    matrix = np.stack([e.vector for e in embeddings])
    model_ids = sorted({e.model_id for e in embeddings})
    save_tensors(path, {"embeddings": matrix}, {"kind": "embeddings", "model_id": model_ids,
                                                **(meta or {})})
    ids = manifest_path(path)
    write_text_atomic(ids, "".join(e.clip_id + "\n" for e in embeddings))
    return ids


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def load_embeddings(path: str | Path) -> tuple[np.ndarray, list[str], dict]:
    arrays, meta = load_tensors(path)
    if "embeddings" not in arrays:
        raise DataError(f"{path}: no embeddings tensor")
    try:
        ids = manifest_path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: missing clip-id manifest") from exc
    matrix = arrays["embeddings"]
    if len(ids) != matrix.shape[0]:
        raise DataError(f"{path}: {matrix.shape[0]} embeddings but {len(ids)} clip ids")
    return matrix, ids, meta


# probes

@dataclass
class ProbeConfig:
    hidden: int = 1024
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.01
    holdout_fraction: float = 0.2


@dataclass
class ProbeResult:
    weights: dict[str, np.ndarray]
    metric: float
    metric_name: str
    classes: list
    losses: list[float] = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        x = (np.asarray(embeddings, dtype=np.float32) - self.mean) / self.std
        return _probe_forward(self.weights, Tensor(x)).data


def _encode_labels(labels, classes=None):
    """Integer targets for single-label data, a 0/1 matrix for multi-label data."""
    labels = list(labels)
    multi = bool(labels) and isinstance(labels[0], (list, tuple, set, frozenset))
    if multi:
        if classes is None:
            classes = sorted({c for row in labels for c in row})
        index = {c: i for i, c in enumerate(classes)}
        y = np.zeros((len(labels), len(classes)), dtype=np.float32)
        for r, row in enumerate(labels):
            for c in row:
                if c in index:
                    y[r, index[c]] = 1.0
        return y, classes, True
    if classes is None:
        classes = sorted(set(labels))
    index = {c: i for i, c in enumerate(classes)}
    unknown = set(labels) - set(index)
    if unknown:
        raise ParameterError(f"labels {sorted(unknown)} not seen in training data")
    return np.array([index[c] for c in labels], dtype=np.int64), classes, False


def _probe_forward(w, x: Tensor) -> Tensor:
    return gelu(x @ w["fc1.weight"] + w["fc1.bias"]) @ w["fc2.weight"] + w["fc2.bias"]


def _init_probe(d: int, hidden: int, n_out: int, rng: Rng) -> dict[str, np.ndarray]:
    b1, b2 = 1 / math.sqrt(d), 1 / math.sqrt(hidden)
    return {"fc1.weight": rng.uniform((d, hidden), -b1, b1), "fc1.bias": rng.uniform(hidden, -b1, b1),
            "fc2.weight": rng.uniform((hidden, n_out), -b2, b2), "fc2.bias": rng.uniform(n_out, -b2, b2)}


def accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y))


def mean_average_precision(scores: np.ndarray, y: np.ndarray) -> float:
    """Mean over classes with at least one positive of the average precision."""
    from sklearn.metrics import average_precision_score

    keep = y.sum(axis=0) > 0
    if not keep.any():
        raise DataError("no positive labels in evaluation set")
    return float(np.mean([average_precision_score(y[:, j], scores[:, j]) for j in np.flatnonzero(keep)]))


def train_probe(pcfg: ProbeConfig, embeddings: np.ndarray, labels, eval_embeddings=None,
                eval_labels=None) -> ProbeResult:
    """Train an MLP probe and report accuracy (single-label) or mAP (multi-label).

    Without an explicit evaluation set, a seeded ``holdout_fraction`` split of
    the training data is held out. Inputs are standardized with training
    statistics.
    """
    X = np.asarray(embeddings, dtype=np.float32)
    if X.ndim != 2:
        raise ShapeError(f"embeddings must be [n, d], got {X.shape}")
    labels = list(labels)
    if len(labels) != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} embeddings but {len(labels)} labels")
    if eval_embeddings is None:
        order = Rng(pcfg.seed, 1).permutation(X.shape[0])
        n_eval = max(1, int(round(pcfg.holdout_fraction * X.shape[0])))
        ev, tr = order[:n_eval], order[n_eval:]
        eval_embeddings, eval_labels = X[ev], [labels[i] for i in ev]
        X, labels = X[tr], [labels[i] for i in tr]
    Xe = np.asarray(eval_embeddings, dtype=np.float32)
    if Xe.ndim != 2 or Xe.shape[1] != X.shape[1]:
        raise ShapeError(f"eval embeddings {Xe.shape} do not match training dim {X.shape[1]}")
    y, classes, multi = _encode_labels(labels)
    if len(classes) < 2:
        raise ParameterError("probe needs at least two classes")
    ye, _, _ = _encode_labels(eval_labels, classes)

    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd = np.where(sd < 1e-6, 1.0, sd)
    X, Xe = (X - mu) / sd, (Xe - mu) / sd

    weights = _init_probe(X.shape[1], pcfg.hidden, len(classes), Rng(pcfg.seed, 0))
    params = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
    adam = AdamState.zeros_like(weights)
    n = X.shape[0]
    losses = []
    for epoch in range(pcfg.epochs):
        order = Rng(pcfg.seed, 2 + epoch).permutation(n)
        for start in range(0, n, pcfg.batch_size):
            idx = order[start:start + pcfg.batch_size]
            for p in params.values():
                p.grad = None
            logits = _probe_forward(params, Tensor(X[idx]))
            loss = bce_with_logits(logits, y[idx]) if multi else cross_entropy(logits, y[idx])
            loss.backward()
            adamw_step(weights, {k: p.grad for k, p in params.items()}, adam, pcfg.lr,
                       pcfg.weight_decay, decay_filter=lambda name: name.endswith("weight"))
            losses.append(float(loss.data))
    scores = _probe_forward(params, Tensor(Xe)).data
    if multi:
        metric, name = mean_average_precision(scores, ye), "mAP"
    else:
        metric, name = accuracy(scores, ye), "accuracy"
    return ProbeResult(weights, metric, name, classes, losses, mu, sd)


# aggregated score

@dataclass
class ScoreTable:
    tasks: list[str]
    models: list[str]
    values: np.ndarray  # [n_models, n_tasks]
    minima: np.ndarray | None = None
    maxima: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.models), len(self.tasks)):
            raise ShapeError(f"values {self.values.shape} do not match "
                             f"{len(self.models)} models x {len(self.tasks)} tasks")
        for name in ("minima", "maxima"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape != (len(self.tasks),):
                    raise ShapeError(f"{name} must have one entry per task")
                setattr(self, name, v)

    def extrema(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-task (min, max): supplied values where given, else over the models present."""
        lo = self.values.min(axis=0) if self.minima is None else self.minima
        hi = self.values.max(axis=0) if self.maxima is None else self.maxima
        return lo, hi


def aggregate_score(table: ScoreTable, model: str) -> float:
    try:
        row = table.values[table.models.index(model)]
    except ValueError:
        raise ParameterError(f"model {model!r} not in score table") from None
    lo, hi = table.extrema()
    for t, task in enumerate(table.tasks):
        if hi[t] == lo[t]:
            raise DegenerateTaskError(task)
        if hi[t] < lo[t]:
            raise ParameterError(f"task {task!r} has max below min")
    if np.any(row < lo) or np.any(row > hi):
        raise ParameterError(f"model {model!r} has results outside the supplied extrema")
    return float(np.mean(100.0 * (row - lo) / (hi - lo)))


EXTREMA_ROWS = ("min", "max")


def read_score_table(path: str | Path) -> ScoreTable:
    """CSV with header ``model,<task>...``; rows named ``min``/``max`` supply extrema."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(rows) < 2 or rows[0][0] != "model":
        raise DataError(f"{path}: expected a header starting with 'model' and at least one row")
    tasks = rows[0][1:]
    models, values, extrema = [], [], {}
    for r in rows[1:]:
        if not r:
            continue
        if len(r) != len(tasks) + 1:
            raise DataError(f"{path}: row {r[0]!r} has {len(r) - 1} values, expected {len(tasks)}")
        try:
            nums = [float(v) for v in r[1:]]
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric value in row {r[0]!r}") from exc
        if r[0] in EXTREMA_ROWS:
            extrema[r[0]] = nums
        else:
            models.append(r[0])
            values.append(nums)
    if not models:
        raise DataError(f"{path}: no model rows")
    return ScoreTable(tasks, models, np.array(values), extrema.get("min"), extrema.get("max"))


def read_labels(path: str | Path) -> tuple[list[str], list, bool]:
    """``clip_id,label`` (single-label) or ``clip_id,labels`` with ``;``-separated labels."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if header[:1] != ["clip_id"] or len(header) != 2 or header[1] not in ("label", "labels"):
        raise DataError(f"{path}: header must be 'clip_id,label' or 'clip_id,labels'")
    multi = header[1] == "labels"
    ids = [r["clip_id"] for r in rows]
    if multi:
        labels = [tuple(x for x in r["labels"].split(";") if x) for r in rows]
    else:
        labels = [r["label"] for r in rows]
    return ids, labels, multi


def align_labels(ids: Sequence[str], label_ids: Sequence[str], labels: Sequence) -> list:
    lookup = dict(zip(label_ids, labels))
    missing = [i for i in ids if i not in lookup]
    if missing:
        raise DataError(f"no labels for clips {missing[:5]}")
    return [lookup[i] for i in ids]
