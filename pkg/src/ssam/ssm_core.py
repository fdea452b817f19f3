"""Linear time-invariant diagonal state-space model.

A continuous system ``h' = A h + B x``, ``y = C h`` with diagonal real ``A``
is discretized with step ``delta`` and evaluated either as a recurrence or
as a causal convolution with its materialized kernel. The two routes are
equal up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

SERIES_THRESHOLD = 1e-4


@dataclass(frozen=True)
class SsmParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    def __post_init__(self):
        A, B, C = (_float_vector(v) for v in (self.A, self.B, self.C))
        if not (A.shape == B.shape == C.shape) or A.ndim != 1:
            raise ShapeError(f"A, B, C must be equal-length vectors, got {A.shape}, {B.shape}, {C.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def state_size(self) -> int:
        return self.A.shape[0]


def _float_vector(v) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v))
    return arr if np.issubdtype(arr.dtype, np.floating) else arr.astype(np.float64)


@dataclass(frozen=True)
class DiscretizedSsm:
    A_bar: np.ndarray
    B_bar: np.ndarray


def expm1_over_x(x: np.ndarray) -> np.ndarray:
    """(exp(x) - 1) / x with the removable singularity at 0 filled in.

    For |x| < 1e-4 the truncated series 1 + x/2 + x^2/6 + x^3/24 is used; its
    truncation error there is below 1e-18.
    """
    x = _float_vector(x)
    small = np.abs(x) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x * (1.0 / 2.0 + x * (1.0 / 6.0 + x / 24.0)), np.expm1(safe) / safe)


def discretize_zoh(p: SsmParams) -> DiscretizedSsm:
    """Zero-order hold: A_bar = exp(dA), B_bar = (dA)^-1 (exp(dA) - 1) dB."""
    _check_params(p)
    x = p.delta * p.A
    return DiscretizedSsm(A_bar=np.exp(x), B_bar=expm1_over_x(x) * p.delta * p.B)


def discretize_euler(p: SsmParams) -> DiscretizedSsm:
    """Exact A_bar with the simplified B_bar = delta * B used by selective scans."""
    _check_params(p)
    return DiscretizedSsm(A_bar=np.exp(p.delta * p.A), B_bar=p.delta * p.B)


def discretize(p: SsmParams, rule: str = "zoh") -> DiscretizedSsm:
    if rule == "zoh":
        return discretize_zoh(p)
    if rule == "euler":
        return discretize_euler(p)
    raise ParameterError(f"unknown discretization rule {rule!r}")


def _check_params(p: SsmParams) -> None:
    values = np.concatenate([p.A, p.B, p.C, [p.delta]])
    if not np.all(np.isfinite(values)):
        raise ParameterError("SSM parameters must be finite")
    if p.delta < 0:
        raise ParameterError(f"delta must be non-negative, got {p.delta}")


def ssm_recurrence(d: DiscretizedSsm, C, x, h0=None) -> np.ndarray:
    """Sequential h_t = A_bar h_{t-1} + B_bar x_t, y_t = C . h_t."""
    x = np.asarray(x)
    C = np.asarray(C)
    if x.ndim != 1:
        raise ShapeError("x must be a 1-d sequence")
    if not (d.A_bar.shape == d.B_bar.shape == C.shape):
        raise ShapeError("A_bar, B_bar and C must have the same length")
    dtype = np.result_type(x.dtype, d.A_bar.dtype)
    h = np.zeros(C.shape, dtype=dtype) if h0 is None else np.array(h0, dtype=dtype)
    if h.shape != C.shape:
        raise ShapeError(f"h0 has shape {h.shape}, expected {C.shape}")
    a, b, c = (v.astype(dtype) for v in (d.A_bar, d.B_bar, C))
    y = np.empty(x.shape[0], dtype=dtype)
    for t in range(x.shape[0]):
        h = a * h + b * x[t]
        y[t] = c @ h
    return y


def materialize_kernel(d: DiscretizedSsm, C, M: int) -> np.ndarray:
    """K[j] = sum_n C_n A_bar_n^j B_bar_n for j < M, by iterated powers."""
    if M < 1:
        raise ParameterError(f"kernel length must be >= 1, got {M}")
    C = np.asarray(C)
    if not (d.A_bar.shape == d.B_bar.shape == C.shape):
        raise ShapeError("A_bar, B_bar and C must have the same length")
    K = np.empty(M, dtype=np.result_type(d.A_bar.dtype, C.dtype))
    cb = C * d.B_bar
    power = np.ones_like(d.A_bar)
    for j in range(M):
        K[j] = cb @ power
        power = power * d.A_bar
    return K


def causal_convolve(x, K, method: str = "direct") -> np.ndarray:
    """y_t = sum_{j<=t} K[j] x_{t-j} for a kernel truncated to len(x)."""
    x = np.asarray(x)
    K = np.asarray(K)
    if x.ndim != 1 or K.shape != x.shape:
        raise ShapeError(f"kernel length {K.shape} must equal input length {x.shape}")
    M = x.shape[0]
    if method == "direct":
        y = np.zeros(M, dtype=np.result_type(x.dtype, K.dtype))
        for j in range(M):
            y[j:] += K[j] * x[:M - j]
        return y
    if method == "fft":
        n = 1 << int(np.ceil(np.log2(2 * M)))
        y = np.fft.irfft(np.fft.rfft(x, n) * np.fft.rfft(K, n), n)[:M]
        return y.astype(np.result_type(x.dtype, K.dtype))
    raise ParameterError(f"unknown convolution method {method!r}")
