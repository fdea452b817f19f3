"""Selective (input-conditioned) diagonal SSM scan.

Per channel ``d`` and step ``t``::

    a_t = exp(delta[t, d] * A[d, :])
    h_t = a_t * h_{t-1} + delta[t, d] * x[t, d] * B_t[t, :]
    y[t, d] = C_t[t, :] . h_t + D_skip[d] * x[t, d]

Arrays may carry leading batch axes: ``x`` and ``delta`` are ``[..., L, D]``,
``B_t`` and ``C_t`` are ``[..., L, N]``, ``A`` is ``[D, N]`` and ``D_skip``
is ``[D]``. States are ``[..., D, N]``.

Internally everything is time-major. The linear recurrence
``h_t = a_t h_{t-1} + b_t`` is the fold of affine maps ``h -> a h + b``
under :func:`compose`; the chunked path folds each chunk independently
(all chunks vectorized together) and then threads the carried state
through the chunk summaries in a fixed left-to-right order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import Tensor, record

ScanState = np.ndarray  # [..., D, N]


@dataclass
class SelectiveScanInput:
    x: np.ndarray
    delta: np.ndarray
    B_t: np.ndarray
    C_t: np.ndarray
    A: np.ndarray
    D_skip: np.ndarray

    def __post_init__(self):
        x, delta, B_t, C_t, A, D = self.x, self.delta, self.B_t, self.C_t, self.A, self.D_skip
        if x.ndim < 2 or x.shape[-2] < 1:
            raise ShapeError(f"x must be [..., L, D] with L >= 1, got {x.shape}")
        if delta.shape != x.shape:
            raise ShapeError(f"delta shape {delta.shape} != x shape {x.shape}")
        L, Dm = x.shape[-2:]
        if A.ndim != 2 or A.shape[0] != Dm:
            raise ShapeError(f"A must be [D={Dm}, N], got {A.shape}")
        N = A.shape[1]
        expected = x.shape[:-1] + (N,)
        if B_t.shape != expected or C_t.shape != expected:
            raise ShapeError(f"B_t/C_t must be {expected}, got {B_t.shape}, {C_t.shape}")
        if D.shape != (Dm,):
            raise ShapeError(f"D_skip must be [{Dm}], got {D.shape}")
        for name in ("x", "delta", "B_t", "C_t", "A", "D_skip"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"{name} contains non-finite values")
        if np.any(delta <= 0):
            raise ParameterError("delta must be strictly positive")

    @property
    def length(self) -> int:
        return self.x.shape[-2]

    @property
    def state_shape(self) -> tuple[int, ...]:
        return self.x.shape[:-2] + self.A.shape

    @property
    def dtype(self) -> np.dtype:
        return np.result_type(self.x, self.delta, self.B_t, self.C_t, self.A)


def compose(outer, inner):
    """Affine maps h -> a h + b: ``(a, b) o (a', b') = (a a', a b' + b)``.

    ``inner`` is applied first.
    """
    a, b = outer
    a2, b2 = inner
    return a * a2, a * b2 + b


def _time_major(s: SelectiveScanInput):
    delta = np.moveaxis(s.delta, -2, 0)
    x = np.moveaxis(s.x, -2, 0)
    B = np.moveaxis(s.B_t, -2, 0)
    a = np.exp(delta[..., None] * s.A)
    b = (delta * x)[..., None] * B[..., None, :]
    return a, b


def _initial_state(s: SelectiveScanInput, h0) -> np.ndarray:
    if h0 is None:
        return np.zeros(s.state_shape, dtype=s.dtype)
    h0 = np.asarray(h0, dtype=s.dtype)
    if h0.shape != s.state_shape:
        raise ShapeError(f"h0 shape {h0.shape} != {s.state_shape}")
    return h0


def _readout(H: np.ndarray, s: SelectiveScanInput) -> np.ndarray:
    C = np.moveaxis(s.C_t, -2, 0)
    y = np.einsum("l...dn,l...n->l...d", H, C)
    return np.moveaxis(y, 0, -2) + s.D_skip * s.x


def scan_states_ref(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """All states of h_t = a_t h_{t-1} + b_t, strictly sequentially (time axis 0)."""
    H = np.empty_like(b)
    h = h0
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        H[t] = h
    return H


def scan_states_chunked(a: np.ndarray, b: np.ndarray, h0: np.ndarray, chunk_len: int) -> np.ndarray:
    """Same states as :func:`scan_states_ref`, folded chunk by chunk.

    Chunk 0 starts from ``h0`` and every other chunk from the identity map,
    so ``chunk_len >= L`` performs exactly the reference operations.
    """
    if chunk_len < 1:
        raise ParameterError(f"chunk_len must be >= 1, got {chunk_len}")
    L = a.shape[0]
    c = min(chunk_len, L)
    n = -(-L // c)
    rest = a.shape[1:]
    pad = n * c - L
    if pad:
        a = np.concatenate([a, np.ones((pad,) + rest, dtype=a.dtype)])
        b = np.concatenate([b, np.zeros((pad,) + rest, dtype=b.dtype)])
    a = a.reshape((n, c) + rest)
    b = b.reshape((n, c) + rest)

    p = np.ones((n,) + rest, dtype=a.dtype)
    h = np.zeros((n,) + rest, dtype=b.dtype)
    h[0] = h0
    H = np.empty((n, c) + rest, dtype=b.dtype)
    P = np.empty((n, c) + rest, dtype=a.dtype) if n > 1 else None
    for i in range(c):
        p, h = compose((a[:, i], b[:, i]), (p, h))
        H[:, i] = h
        if P is not None:
            P[:, i] = p

    if n > 1:
        carries = np.empty((n - 1,) + rest, dtype=b.dtype)
        state = H[0, -1]
        for k in range(1, n):
            carries[k - 1] = state
            state = P[k, -1] * state + H[k, -1]
        H[1:] = P[1:] * carries[:, None] + H[1:]
    return H.reshape((n * c,) + rest)[:L]


def default_chunk_len(L: int, step_size: int = 1) -> int:
    """About sqrt(L); a single chunk once one step already fills the vector units."""
    if step_size >= 8192:
        return L
    return max(1, round(math.sqrt(L)))


def _states(s: SelectiveScanInput, h0, chunk_len: int | None):
    a, b = _time_major(s)
    h0 = _initial_state(s, h0)
    if chunk_len is None:
        H = scan_states_ref(a, b, h0)
    else:
        H = scan_states_chunked(a, b, h0, chunk_len)
    return a, H, h0


def selective_scan_ref(s: SelectiveScanInput, h0: ScanState | None = None):
    """Sequential reference scan. Returns ``(y [..., L, D], h_L [..., D, N])``."""
    _, H, _ = _states(s, h0, None)
    return _readout(H, s), H[-1].copy()


def selective_scan_chunked(s: SelectiveScanInput, h0: ScanState | None = None,
                           chunk_len: int | None = None):
    """Chunked scan, equal to :func:`selective_scan_ref` up to rounding."""
    if chunk_len is None:
        chunk_len = default_chunk_len(s.length)
    _, H, _ = _states(s, h0, chunk_len)
    return _readout(H, s), H[-1].copy()


def selective_scan_backward(s: SelectiveScanInput, h0: ScanState | None, dy: np.ndarray,
                            dh_last: np.ndarray | None = None, chunk_len: int | None = None,
                            _cache=None) -> dict[str, np.ndarray]:
    """Adjoint of the scan.

    Returns gradients for ``x, delta, B_t, C_t, A, D_skip`` and ``h0`` given
    the output cotangent ``dy`` (and optionally one for the final state).
    """
    if dy.shape != s.x.shape:
        raise ShapeError(f"dy shape {dy.shape} != {s.x.shape}")
    if _cache is None:
        a, H, h0 = _states(s, h0, chunk_len)
    else:
        a, H, h0 = _cache
    dtype = H.dtype
    dy_tm = np.moveaxis(dy, -2, 0).astype(dtype, copy=False)
    x = np.moveaxis(s.x, -2, 0)
    delta = np.moveaxis(s.delta, -2, 0)
    B = np.moveaxis(s.B_t, -2, 0)
    C = np.moveaxis(s.C_t, -2, 0)

    # g_t = dL/dh_t satisfies g_t = a_{t+1} g_{t+1} + dy_t C_t: a reversed scan
    e = dy_tm[..., None] * C[..., None, :]
    alpha = np.concatenate([np.ones_like(a[:1]), a[:0:-1]])
    g0 = np.zeros(H.shape[1:], dtype=dtype) if dh_last is None else np.asarray(dh_last, dtype)
    rev = e[::-1]
    if chunk_len is None:
        G = scan_states_ref(alpha, rev, g0)
    else:
        G = scan_states_chunked(alpha, rev, g0, chunk_len)
    G = G[::-1]

    H_prev = np.concatenate([h0[None], H[:-1]])
    da_a = G * H_prev * a  # dL/d(delta*A) elementwise
    gB = np.einsum("l...dn,l...n->l...d", G, B)
    batch_axes = tuple(range(x.ndim - 1))

    grads = {
        "x": np.moveaxis(delta * gB + s.D_skip * dy_tm, 0, -2),
        "delta": np.moveaxis(np.einsum("l...dn,dn->l...d", da_a, s.A) + x * gB, 0, -2),
        "B_t": np.moveaxis(np.einsum("l...dn,l...d->l...n", G, delta * x), 0, -2),
        "C_t": np.moveaxis(np.einsum("l...d,l...dn->l...n", dy_tm, H), 0, -2),
        "A": (da_a * delta[..., None]).reshape((-1,) + s.A.shape).sum(axis=0),
        "D_skip": (dy_tm * x).sum(axis=batch_axes),
        "h0": G[0] * a[0],
    }
    return grads


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B_t: Tensor, C_t: Tensor,
                   D_skip: Tensor, chunk_len: int | None = -1) -> Tensor:
    """Differentiable scan on tensors; returns ``y`` only.

    ``chunk_len=-1`` picks :func:`default_chunk_len`; ``None`` forces the
    sequential reference.
    """
    s = SelectiveScanInput(x.data, delta.data, B_t.data, C_t.data, A.data, D_skip.data)
    if chunk_len == -1:
        chunk_len = default_chunk_len(s.length, int(np.prod(s.state_shape)))
    cache = _states(s, None, chunk_len)
    y = _readout(cache[1], s)

    def backward(g):
        gr = selective_scan_backward(s, None, g, chunk_len=chunk_len, _cache=cache)
        return gr["x"], gr["delta"], gr["A"], gr["B_t"], gr["C_t"], gr["D_skip"]

    return record(y, (x, delta, A, B_t, C_t, D_skip), backward, "selective_scan")
