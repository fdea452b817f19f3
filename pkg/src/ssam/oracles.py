"""Slow, independent reference implementations used by tests and the selftest.

Nothing here is on a training path; each function trades speed for an
evaluation route that shares no code with the production kernels.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm


def dense_zoh(A: np.ndarray, B: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for a general square ``A`` via one augmented matrix exponential.

    ``expm(delta [[A, B], [0, 0]])`` holds ``exp(delta A)`` in its top-left
    block and ``int_0^delta exp(s A) ds B`` in its top-right column, which is
    well defined even for singular ``A``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.asarray(B, dtype=np.float64).reshape(-1)
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n] = B
    E = expm(delta * M)
    return E[:n, :n], E[:n, n]


def dense_recurrence(A_bar: np.ndarray, B_bar: np.ndarray, C: np.ndarray, x: np.ndarray,
                     h0: np.ndarray | None = None) -> np.ndarray:
    """``h_t = A_bar @ h_{t-1} + B_bar x_t``, ``y_t = C @ h_t`` with a full matrix ``A_bar``."""
    n = A_bar.shape[0]
    h = np.zeros(n) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty(len(x))
    for t, xt in enumerate(x):
        h = A_bar @ h + B_bar * xt
        y[t] = C @ h
    return y


def selective_scan_loops(x, delta, A, B_t, C_t, D_skip, h0=None):
    """Scalar-loop selective scan over one sequence: ``x [L, D]``, ``A [D, N]``."""
    x, delta, A, B_t, C_t, D_skip = (np.asarray(v, dtype=np.float64)
                                     for v in (x, delta, A, B_t, C_t, D_skip))
    L, D = x.shape
    N = A.shape[1]
    h = np.zeros((D, N)) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty((L, D))
    for t in range(L):
        for d in range(D):
            acc = 0.0
            for n in range(N):
                h[d, n] = np.exp(delta[t, d] * A[d, n]) * h[d, n] + delta[t, d] * B_t[t, n] * x[t, d]
                acc += C_t[t, n] * h[d, n]
            y[t, d] = acc + D_skip[d] * x[t, d]
    return y, h


def mel_center_oracle(n_mels: int = 80, f_max: float = 8000.0) -> np.ndarray:
    """Filter centre frequencies straight from ``m = 2595 log10(1 + f / 700)``."""
    top = 2595.0 * np.log10(1.0 + f_max / 700.0)
    mels = np.array([top * (i + 1) / (n_mels + 1) for i in range(n_mels)])
    return 700.0 * (10.0 ** (mels / 2595.0) - 1.0)
