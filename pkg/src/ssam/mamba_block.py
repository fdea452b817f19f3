"""Wide Mamba residual block and its bidirectional (Vim) variant.

Block layout, for input ``u [..., L, d_m]``::

    v      = rms_norm(u) * scale
    x, z   = split(v @ in_proj)                      # each [..., L, d_inner]
    x      = silu(causal_depthwise_conv(x))
    dt, B, C = split(x @ x_proj)                     # [dt_rank, N, N]
    delta  = softplus(dt @ dt_proj + dt_bias)
    y      = selective_scan(x, delta, -exp(A_log), B, C, D_skip)
    out    = u + (y * silu(z)) @ out_proj

The Vim variant runs a second conv/scan branch with its own weights over the
time-reversed ``x``, flips its output back, and sums both branch outputs
before the shared gate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import (DEFAULT_DTYPE, Rng, Tensor, exp, flip, record, rms_norm, silu,
                       softplus)
from .selective_scan import selective_scan

BRANCH_KEYS = ("conv.weight", "conv.bias", "x_proj", "dt_proj.weight", "dt_proj.bias",
               "A_log", "D_skip")
BACKWARD_PREFIX = "bwd."


@dataclass
class MambaBlockConfig:
    d_m: int
    E: int = 3
    d_state: int = 24
    d_conv: int = 4
    dt_rank: int | None = None
    bidirectional: bool = False
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        if self.dt_rank is None:
            self.dt_rank = math.ceil(self.d_m / 16)
        if min(self.d_m, self.E, self.d_state, self.d_conv, self.dt_rank) < 1:
            raise ParameterError(f"block dimensions must be positive: {self}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ParameterError("need 0 < dt_min <= dt_max")

    @property
    def d_inner(self) -> int:
        return self.E * self.d_m

    def to_dict(self) -> dict:
        return asdict(self)


def causal_depthwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution along axis -2, zero left-padded.

    ``y[t, d] = bias[d] + sum_k weight[d, k] * x[t - K + 1 + k, d]``.
    """
    K = weight.shape[1]
    L = x.shape[-2]
    if weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"conv weight {weight.shape} does not match channels {x.shape[-1]}")
    pad = np.zeros(x.shape[:-2] + (K - 1, x.shape[-1]), dtype=x.dtype)
    xp = np.concatenate([pad, x.data], axis=-2)
    w = weight.data
    y = np.broadcast_to(bias.data, x.shape).copy()
    for k in range(K):
        y += xp[..., k:k + L, :] * w[:, k]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        flat_g = g.reshape(-1, g.shape[-1])
        for k in range(K):
            gxp[..., k:k + L, :] += g * w[:, k]
            gw[:, k] = (flat_g * xp[..., k:k + L, :].reshape(flat_g.shape)).sum(axis=0)
        return gxp[..., K - 1:, :], gw, flat_g.sum(axis=0)

    return record(y, (x, weight, bias), backward, "causal_conv")


def _ssm_branch(cfg: MambaBlockConfig, w, x: Tensor, prefix: str, chunk_len) -> Tensor:
    xc = silu(causal_depthwise_conv(x, w[prefix + "conv.weight"], w[prefix + "conv.bias"]))
    dbc = xc @ w[prefix + "x_proj"]
    R, N = cfg.dt_rank, cfg.d_state
    dt_raw, B_t, C_t = dbc[..., :R], dbc[..., R:R + N], dbc[..., R + N:]
    delta = softplus(dt_raw @ w[prefix + "dt_proj.weight"] + w[prefix + "dt_proj.bias"])
    A = -exp(w[prefix + "A_log"])
    return selective_scan(xc, delta, A, B_t, C_t, w[prefix + "D_skip"], chunk_len=chunk_len)


def _check_input(cfg: MambaBlockConfig, u: Tensor) -> None:
    if u.ndim < 2 or u.shape[-1] != cfg.d_m or u.shape[-2] < 1:
        raise ShapeError(f"block input must be [..., L>=1, {cfg.d_m}], got {u.shape}")


def _gated_output(w, u: Tensor, y: Tensor, z: Tensor) -> Tensor:
    return u + (y * silu(z)) @ w["out_proj"]


def mamba_block_forward(cfg: MambaBlockConfig, w, u: Tensor, chunk_len=-1) -> Tensor:
    """Unidirectional block; backward-branch weights, if any, are ignored."""
    _check_input(cfg, u)
    v = rms_norm(u, w["norm.scale"])
    xz = v @ w["in_proj"]
    Di = cfg.d_inner
    x, z = xz[..., :Di], xz[..., Di:]
    y = _ssm_branch(cfg, w, x, "", chunk_len)
    return _gated_output(w, u, y, z)


def vim_block_forward(cfg: MambaBlockConfig, w, u: Tensor, chunk_len=-1) -> Tensor:
    if not cfg.bidirectional:
        raise ParameterError("vim_block_forward needs a bidirectional config")
    _check_input(cfg, u)
    v = rms_norm(u, w["norm.scale"])
    xz = v @ w["in_proj"]
    Di = cfg.d_inner
    x, z = xz[..., :Di], xz[..., Di:]
    y_fwd = _ssm_branch(cfg, w, x, "", chunk_len)
    y_bwd = flip(_ssm_branch(cfg, w, flip(x, -2), BACKWARD_PREFIX, chunk_len), -2)
    return _gated_output(w, u, y_fwd + y_bwd, z)


def block_forward(cfg: MambaBlockConfig, w, u: Tensor, chunk_len=-1) -> Tensor:
    if cfg.bidirectional:
        return vim_block_forward(cfg, w, u, chunk_len)
    return mamba_block_forward(cfg, w, u, chunk_len)


def _uniform(rng: Rng, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(shape, -bound, bound, dtype)


def _init_branch(cfg: MambaBlockConfig, rng: Rng, dtype) -> dict[str, np.ndarray]:
    Di, N, R, K = cfg.d_inner, cfg.d_state, cfg.dt_rank, cfg.d_conv
    dt = np.exp(rng.uniform(Di, math.log(cfg.dt_min), math.log(cfg.dt_max), np.float64))
    dt = np.maximum(dt, 1e-4)
    return {
        "conv.weight": _uniform(rng, (Di, K), 1.0 / math.sqrt(K), dtype),
        "conv.bias": _uniform(rng, (Di,), 1.0 / math.sqrt(K), dtype),
        "x_proj": _uniform(rng, (Di, R + 2 * N), 1.0 / math.sqrt(Di), dtype),
        "dt_proj.weight": _uniform(rng, (R, Di), R ** -0.5, dtype),
        # inverse softplus, so softplus(bias) lands in [dt_min, dt_max]
        "dt_proj.bias": (dt + np.log(-np.expm1(-dt))).astype(dtype),
        "A_log": np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (Di, 1)).astype(dtype),
        "D_skip": np.ones(Di, dtype=dtype),
    }


def init_block_weights(cfg: MambaBlockConfig, rng: Rng, dtype=DEFAULT_DTYPE,
                       residual_scale: float = 1.0, zero_out_proj: bool = False
                       ) -> dict[str, np.ndarray]:
    """Fresh block parameters as plain arrays keyed by local name.

    ``A_log`` starts at log(n + 1) so that A[d, n] = -(n + 1); ``out_proj``
    is scaled by ``residual_scale`` (typically 1/sqrt(depth)).
    """
    d_m, Di = cfg.d_m, cfg.d_inner
    w = {
        "norm.scale": np.ones(d_m, dtype=dtype),
        "in_proj": _uniform(rng, (d_m, 2 * Di), 1.0 / math.sqrt(d_m), dtype),
    }
    w.update(_init_branch(cfg, rng, dtype))
    if cfg.bidirectional:
        w.update({BACKWARD_PREFIX + k: v for k, v in _init_branch(cfg, rng, dtype).items()})
    out = _uniform(rng, (Di, d_m), residual_scale / math.sqrt(Di), dtype)
    w["out_proj"] = np.zeros_like(out) if zero_out_proj else out
    return w


def block_parameter_count(cfg: MambaBlockConfig) -> int:
    d_m, Di, N, R, K = cfg.d_m, cfg.d_inner, cfg.d_state, cfg.dt_rank, cfg.d_conv
    branch = Di * K + Di + Di * (R + 2 * N) + R * Di + Di + Di * N + Di
    shared = d_m + d_m * 2 * Di + Di * d_m
    return shared + branch * (2 if cfg.bidirectional else 1)


def count_parameters(cfg: MambaBlockConfig, depth: int, patch_dims: tuple[int, int],
                     d_m: int | None = None) -> int:
    """Trainable scalars of the full pretraining model.

    Patch embedding (+bias), cls and mask tokens, ``depth`` blocks, final
    norm and the two-layer reconstruction head. Positional embeddings are
    fixed and not counted.
    """
    d_m = cfg.d_m if d_m is None else d_m
    if d_m != cfg.d_m:
        raise ParameterError(f"d_m={d_m} disagrees with block config d_m={cfg.d_m}")
    tf = patch_dims[0] * patch_dims[1]
    embed = tf * d_m + d_m
    tokens = 2 * d_m
    final_norm = d_m
    head = d_m * d_m + d_m + d_m * tf + tf
    return embed + tokens + depth * block_parameter_count(cfg) + final_norm + head
