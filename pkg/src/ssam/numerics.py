"""Dense tensors over numpy with tape-based reverse-mode differentiation.

Every differentiable operation builds its output with :func:`record`, which
stores the parent tensors and a backward function mapping the output
gradient to one gradient per parent. :class:`GradTape` orders the recorded
graph topologically and replays the backward functions in reverse.

Training runs in float32; oracle tests and gradient checks use float64.
Operations preserve the dtype of their tensor operands.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from typing import Any

import numpy as np
from scipy import special

from .errors import EvaluationError, ParameterError, ShapeError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An n-d float array that may take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_ufunc__ = None  # make ``ndarray * Tensor`` dispatch to Tensor.__rmul__

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None,
                 dtype: Any = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        GradTape(self).backward(grad)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, op={self._op or 'leaf'})"

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one gradient (or None) per parent, each with
    that parent's shape. Nothing is recorded when no parent requires grad.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


class GradTape:
    """Reverse topological replay of the graph that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._topological(output)
        self.visits: dict[int, int] = {}

    @staticmethod
    def _topological(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Propagate ``grad`` (default 1 for scalar outputs) to every leaf.

        Leaf gradients are accumulated into ``leaf.grad`` and also returned,
        keyed by ``id(leaf)``.
        """
        out = self.output
        if grad is None:
            if out.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(out.data)
        pending: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        leaves: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            self.visits[id(node)] = self.visits.get(id(node), 0) + 1
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[id(node)] = node.grad
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        return leaves


def as_tensor(x: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# elementwise unary ops

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    s = special.expit(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return record(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


def silu(a: Tensor) -> Tensor:
    s = special.expit(a.data)
    out = a.data * s
    return record(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    out = (x * cdf).astype(a.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(a.dtype, copy=False),)

    return record(out, (a,), backward, "gelu")


# reductions and shape ops

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    return record(np.broadcast_to(a.data, shape), (a,),
                  lambda g: (unbroadcast(g, a.shape),), "broadcast")


def flip(a: Tensor, axis: int) -> Tensor:
    return record(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),), "flip")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if _is_basic_index(idx):
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                  lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b``; ``b`` is typically a 2-d weight ``[in, out]``."""
    a, b = _pair(a, b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else y + bias


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-5) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * scale over the last axis."""
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    n = x.data * r
    out = n * scale.data

    def backward(g):
        gn = g * scale.data
        gx = r * (gn - n * np.mean(gn * n, axis=-1, keepdims=True))
        gs = (g * n).reshape(-1, scale.shape[-1]).sum(axis=0) if scale.requires_grad else None
        return gx.astype(x.dtype, copy=False), gs

    return record(out.astype(x.dtype, copy=False), (x, scale), backward, "rms_norm")


# losses

def mse(pred: Tensor, target, weights=None) -> Tensor:
    """Mean of (pred - target)^2, optionally with per-element ``weights``."""
    diff = pred - as_tensor(target, like=pred)
    sq = square(diff)
    if weights is None:
        return mean(sq)
    w = np.broadcast_to(np.asarray(weights, dtype=pred.dtype), pred.shape)
    return sum_(sq * w) * (1.0 / max(float(w.sum()), 1.0))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy against integer class labels."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy for multi-label targets in {0, 1}."""
    x = logits.data
    t = targets.astype(x.dtype)
    loss = (np.logaddexp(0.0, x) - x * t).mean()

    def backward(g):
        return ((special.expit(x) - t) * (g / x.size),)

    return record(np.asarray(loss, dtype=x.dtype), (logits,), backward, "bce")


# randomness

class Rng:
    """Deterministic PCG64 generator addressed by ``(seed, stream)``.

    The bit stream comes from ``SeedSequence(seed, spawn_key=(stream,))`` so
    distinct streams are statistically independent. Normal variates use
    numpy's ziggurat sampler. Samples are drawn in float64 and cast, so the
    float32 and float64 modes see the same underlying values.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not (0 <= seed < 2**64 and 0 <= stream < 2**64):
            raise ParameterError("seed and stream must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return (mean + std * self._gen.standard_normal(size=shape)).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly at random."""
        return self._gen.choice(n, size=k, replace=False)

    def get_state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream,
                "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: Mapping) -> Rng:
        rng = cls(state["seed"], state["stream"])
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng


def sample_uniform(rng: Rng, shape, low: float = 0.0, high: float = 1.0,
                   dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(rng.uniform(shape, low, high, dtype))


def sample_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0,
                  dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(rng.normal(shape, mean, std, dtype))


# gradient checking

def _scalar(out: Any) -> float:
    value = float(out.data) if isinstance(out, Tensor) else float(out)
    if not math.isfinite(value):
        raise EvaluationError(f"function returned non-finite value {value}")
    return value


def _check_eps(eps: float) -> None:
    if not 1e-6 <= eps <= 1e-2:
        raise ParameterError(f"eps must lie in [1e-6, 1e-2], got {eps}")


def grad_check(f: Callable[[Tensor], Tensor], x: Any, eps: float = 1e-4) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a float64 tensor to a scalar tensor. The error per coordinate
    is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    _check_eps(eps)
    x64 = np.array(x, dtype=np.float64)
    leaf = Tensor(x64.copy(), requires_grad=True)
    out = f(leaf)
    _scalar(out)
    out.backward()
    analytic = np.zeros_like(x64) if leaf.grad is None else leaf.grad
    numeric = np.empty_like(x64)
    flat = x64.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(Tensor(x64.copy())))
        flat[i] = orig - eps
        fm = _scalar(f(Tensor(x64.copy())))
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    return _relative_error(analytic, numeric)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check_params(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-4,
                      max_coords: int | None = None, rng: Rng | None = None) -> dict[str, float]:
    """Per-parameter max relative gradient error for a closure over ``params``.

    Parameters are perturbed in place (and restored). With ``max_coords``,
    only that many randomly chosen coordinates per tensor are probed.
    """
    _check_eps(eps)
    for p in params.values():
        if p.dtype != np.float64:
            raise ParameterError("grad_check_params requires float64 parameters")
        p.grad = None
    out = f()
    _scalar(out)
    out.backward()
    errors: dict[str, float] = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or Rng(0)).choice(flat.size, max_coords)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f())
            flat[i] = orig - eps
            fm = _scalar(f())
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(num)))
        errors[name] = worst
        p.grad = None
    return errors
