"""Masked-spectrogram pretraining model built on Mamba blocks.

Token sequence fed to the encoder, for ``N`` patches::

    [cls, e_1, ..., e_N] + E_pos     e_i = patch_i @ W + b, or mask_token if masked

``E_pos`` is a fixed sinusoidal table whose row 0 belongs to ``cls``. The
encoder is ``depth`` residual blocks followed by an RMS norm. The
reconstruction head ``Linear(d_m) -> GELU -> Linear(t*f)`` runs on every
token; dropping the cls row gives one reconstruction per patch, scored
with mean-squared error against the input patches.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_frontend import N_MELS, PatchGrid
from .errors import GeometryError, ParameterError
from .mamba_block import MambaBlockConfig, block_forward, init_block_weights
from .numerics import (DEFAULT_DTYPE, Rng, Tensor, broadcast_to, concat, gelu, mse, rms_norm)

PRESETS = {
    "tiny": dict(d_m=192, depth=12),
    "small": dict(d_m=384, depth=12),
    "base": dict(d_m=768, depth=12),
    # desk-scale stand-in used by tests and the training smoke run
    "toy": dict(d_m=32, depth=2, block=dict(d_m=32, E=3, d_state=8, d_conv=4)),
}


@dataclass
class ModelConfig:
    d_m: int = 192
    depth: int = 12
    block: MambaBlockConfig | dict | None = None
    patch_t: int = 4
    patch_f: int = 16
    input_frames: int = 200
    n_mels: int = N_MELS
    mask_ratio: float = 0.5
    variant: str = "mamba"
    masked_only_loss: bool = False

    def __post_init__(self):
        if self.variant not in ("mamba", "vim"):
            raise ParameterError(f"variant must be 'mamba' or 'vim', got {self.variant!r}")
        bidirectional = self.variant == "vim"
        if self.block is None:
            self.block = MambaBlockConfig(d_m=self.d_m, bidirectional=bidirectional)
        elif isinstance(self.block, dict):
            self.block = MambaBlockConfig(**{"bidirectional": bidirectional, **self.block})
        if self.block.d_m != self.d_m:
            raise ParameterError(f"block d_m={self.block.d_m} != model d_m={self.d_m}")
        if self.block.bidirectional != bidirectional:
            raise ParameterError("block.bidirectional must match variant")
        if self.d_m % 2:
            raise ParameterError("d_m must be even for sinusoidal positions")
        if self.depth < 1:
            raise ParameterError("depth must be >= 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ParameterError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.input_frames % self.patch_t or self.n_mels % self.patch_f:
            raise GeometryError(f"[{self.input_frames}, {self.n_mels}] input is not divisible "
                                f"by patch ({self.patch_t}, {self.patch_f})")

    @property
    def grid_t(self) -> int:
        return self.input_frames // self.patch_t

    @property
    def grid_f(self) -> int:
        return self.n_mels // self.patch_f

    @property
    def n_patches(self) -> int:
        return self.grid_t * self.grid_f

    @property
    def patch_dim(self) -> int:
        return self.patch_t * self.patch_f

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        try:
            base = dict(PRESETS[name])
        except KeyError:
            raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block"] = self.block.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown ModelConfig fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> ModelConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def sinusoidal_positions(n_positions: int, d_m: int) -> np.ndarray:
    """``E[p, 2i] = sin(p w_i)``, ``E[p, 2i+1] = cos(p w_i)``, ``w_i = 10000^(-2i/d_m)``."""
    if d_m % 2:
        raise ParameterError(f"d_m must be even, got {d_m}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d_m, 2, dtype=np.float64) / d_m)
    table = np.empty((n_positions, d_m))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


@dataclass
class ModelWeights:
    params: dict[str, Tensor]
    pos_embed: np.ndarray
    _blocks: dict[int, dict[str, Tensor]] = field(default_factory=dict, repr=False)

    def block(self, i: int) -> dict[str, Tensor]:
        if i not in self._blocks:
            prefix = f"blocks.{i}."
            self._blocks[i] = {k[len(prefix):]: v for k, v in self.params.items()
                               if k.startswith(prefix)}
        return self._blocks[i]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self) -> np.dtype:
        return self.pos_embed.dtype

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray],
                    requires_grad: bool = True) -> ModelWeights:
        expected = set(init_weights(cfg, seed=0, as_arrays=True))
        if set(arrays) != expected:
            missing, extra = expected - set(arrays), set(arrays) - expected
            raise ParameterError(f"weight names mismatch: missing {sorted(missing)}, "
                                 f"unexpected {sorted(extra)}")
        dtype = next(iter(arrays.values())).dtype
        params = {k: Tensor(np.array(v, dtype=dtype), requires_grad=requires_grad, name=k)
                  for k, v in arrays.items()}
        pos = sinusoidal_positions(cfg.n_patches + 1, cfg.d_m).astype(dtype)
        return cls(params, pos)

    def to_dtype(self, dtype) -> ModelWeights:
        return ModelWeights({k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
                             for k, v in self.params.items()}, self.pos_embed.astype(dtype))


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE,
                 zero_out_proj: bool = False, as_arrays: bool = False):
    """Fresh weights. Each tensor group draws from its own ``Rng(seed, stream)``."""
    d, tf = cfg.d_m, cfg.patch_dim
    arrays: dict[str, np.ndarray] = {}

    rng = Rng(seed, 0)
    arrays["patch_embed.weight"] = rng.uniform((tf, d), -1 / math.sqrt(tf), 1 / math.sqrt(tf), dtype)
    arrays["patch_embed.bias"] = rng.uniform(d, -1 / math.sqrt(tf), 1 / math.sqrt(tf), dtype)
    arrays["cls_token"] = rng.normal(d, 0.0, 0.02, dtype)
    arrays["mask_token"] = rng.normal(d, 0.0, 0.02, dtype)
    for i in range(cfg.depth):
        block = init_block_weights(cfg.block, Rng(seed, 1 + i), dtype,
                                   residual_scale=1.0 / math.sqrt(cfg.depth),
                                   zero_out_proj=zero_out_proj)
        arrays.update({f"blocks.{i}.{k}": v for k, v in block.items()})
    rng = Rng(seed, 1 + cfg.depth)
    arrays["final_norm.scale"] = np.ones(d, dtype=dtype)
    arrays["head.fc1.weight"] = rng.uniform((d, d), -1 / math.sqrt(d), 1 / math.sqrt(d), dtype)
    arrays["head.fc1.bias"] = rng.uniform(d, -1 / math.sqrt(d), 1 / math.sqrt(d), dtype)
    arrays["head.fc2.weight"] = rng.uniform((d, tf), -1 / math.sqrt(d), 1 / math.sqrt(d), dtype)
    arrays["head.fc2.bias"] = rng.uniform(tf, -1 / math.sqrt(d), 1 / math.sqrt(d), dtype)
    if as_arrays:
        return arrays
    return ModelWeights.from_arrays(cfg, arrays)


@dataclass
class MaskPlan:
    masked_indices: np.ndarray
    n_patches: int
    seed: tuple[int, int] | None = None

    def as_mask(self) -> np.ndarray:
        m = np.zeros(self.n_patches, dtype=bool)
        m[self.masked_indices] = True
        return m


def build_mask_plan(rng: Rng, n_patches: int, mask_ratio: float) -> MaskPlan:
    """Uniformly choose ``floor(mask_ratio * n_patches)`` distinct patches."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ParameterError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    k = math.floor(mask_ratio * n_patches)
    idx = np.sort(rng.choice(n_patches, k)) if k else np.zeros(0, dtype=np.int64)
    return MaskPlan(idx.astype(np.int64), n_patches, (rng.seed, rng.stream))


def empty_plan(n_patches: int) -> MaskPlan:
    return MaskPlan(np.zeros(0, dtype=np.int64), n_patches)


def _as_batch(cfg: ModelConfig, patches) -> tuple[np.ndarray, bool]:
    if isinstance(patches, PatchGrid):
        if (patches.patch_t, patches.patch_f) != (cfg.patch_t, cfg.patch_f):
            raise GeometryError(f"patch shape ({patches.patch_t}, {patches.patch_f}) "
                                f"!= config ({cfg.patch_t}, {cfg.patch_f})")
        patches = patches.patches
    x = np.asarray(patches)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != cfg.patch_dim:
        raise GeometryError(f"patches must be [B, N, {cfg.patch_dim}], got {x.shape}")
    if x.shape[1] > cfg.n_patches:
        raise GeometryError(f"{x.shape[1]} patches exceed the positional table "
                            f"({cfg.n_patches})")
    return x, single


def _mask_matrix(plans, batch: int, n: int) -> np.ndarray:
    if plans is None:
        return np.zeros((batch, n), dtype=bool)
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if len(plans) != batch:
        raise GeometryError(f"{len(plans)} mask plans for a batch of {batch}")
    mats = []
    for p in plans:
        if p.n_patches != n:
            raise GeometryError(f"mask plan covers {p.n_patches} patches, input has {n}")
        mats.append(p.as_mask())
    return np.stack(mats)


def embed_tokens(cfg: ModelConfig, w: ModelWeights, x: np.ndarray, mask: np.ndarray) -> Tensor:
    """Encoder input ``[B, N + 1, d_m]``: masked substitution, cls prepended, positions added."""
    p = w.params
    xt = Tensor(x.astype(w.dtype, copy=False))
    emb = xt @ p["patch_embed.weight"] + p["patch_embed.bias"]
    m = mask[..., None].astype(w.dtype)
    tokens = emb * (1.0 - m) + p["mask_token"] * m
    B, N = x.shape[:2]
    cls = broadcast_to(p["cls_token"], (B, 1, cfg.d_m))
    return concat([cls, tokens], axis=1) + w.pos_embed[: N + 1]


def run_encoder(cfg: ModelConfig, w: ModelWeights, seq: Tensor, chunk_len=-1) -> Tensor:
    for i in range(cfg.depth):
        seq = block_forward(cfg.block, w.block(i), seq, chunk_len)
    return rms_norm(seq, w.params["final_norm.scale"])


def reconstruct(w: ModelWeights, z: Tensor) -> Tensor:
    p = w.params
    hidden = gelu(z @ p["head.fc1.weight"] + p["head.fc1.bias"])
    return (hidden @ p["head.fc2.weight"] + p["head.fc2.bias"])[:, 1:]


def forward_pretrain(cfg: ModelConfig, w: ModelWeights, patches, plan=None, chunk_len=-1):
    """Masked reconstruction pass. Returns ``(y, z, loss)`` as tensors.

    ``patches`` is a :class:`PatchGrid`, an ``[N, t*f]`` array or a batch
    ``[B, N, t*f]``; ``plan`` is one :class:`MaskPlan` per batch item.
    Single-item inputs give unbatched ``y`` and ``z``.
    """
    x, single = _as_batch(cfg, patches)
    mask = _mask_matrix(plan, x.shape[0], x.shape[1])
    z = run_encoder(cfg, w, embed_tokens(cfg, w, x, mask), chunk_len)
    y = reconstruct(w, z)
    target = x.astype(w.dtype, copy=False)
    if cfg.masked_only_loss:
        loss = mse(y, target, weights=mask[..., None])
    else:
        loss = mse(y, target)
    if single:
        return y[0], z[0], loss
    return y, z, loss


def encode(cfg: ModelConfig, w: ModelWeights, patches, chunk_len=-1) -> Tensor:
    """Unmasked encoder output ``z`` of shape ``[(B,) N + 1, d_m]``; no head."""
    x, single = _as_batch(cfg, patches)
    mask = np.zeros(x.shape[:2], dtype=bool)
    z = run_encoder(cfg, w, embed_tokens(cfg, w, x, mask), chunk_len)
    return z[0] if single else z


def pool(z: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Clip vector from encoder output: mean of patch rows, or the cls row."""
    if mode == "mean":
        return z[..., 1:, :].mean(axis=-2)
    if mode == "cls":
        return z[..., 0, :]
    raise ParameterError(f"unknown pooling mode {mode!r}")


def batch_plans(rng_factory, n_items: int, n_patches: int, mask_ratio: float) -> Sequence[MaskPlan]:
    return [build_mask_plan(rng_factory(i), n_patches, mask_ratio) for i in range(n_items)]
