"""Dense tensors with a dynamic reverse-mode tape, a seeded RNG and AdamW.

Arrays are numpy float32 by default. float64 tensors are accepted as-is so
finite-difference checks can run without float32 round-off swamping the
difference quotient. ``tsum`` and ``mean`` accumulate in float64 and cast
back; the per-row statistics inside normalization use the working dtype.
"""

from __future__ import annotations

import contextlib
import zlib
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

FLOAT = np.float32
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(FLOAT)
    return arr


class Tensor:
    """An n-d array that records how it was produced.

    ``grad`` is filled by :func:`backward` for every reachable tensor with
    ``requires_grad``; repeated backward calls accumulate into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # --- bookkeeping -------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # --- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else FLOAT
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if grad.ndim == 2 and shape in ((grad.shape[1],), (1, grad.shape[1])):
        return _col_sum(grad).reshape(shape)
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Fast reductions for the shapes that dominate training: numpy's generic
# reduce is slow along a short last axis or down a tall first axis, while
# the BLAS matrix-vector product and pairwise column ufuncs are not.
def _row_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims."""
    if x.ndim != 2:
        return x.sum(axis=-1, keepdims=True)
    if x.shape[1] <= 8:
        out = x[:, 0].copy()
        for j in range(1, x.shape[1]):
            out += x[:, j]
        return out[:, None]
    return (x @ np.ones(x.shape[1], dtype=x.dtype))[:, None]


def _row_mean(x: np.ndarray) -> np.ndarray:
    return _row_sum(x) * x.dtype.type(1.0 / x.shape[-1])


def _row_max(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] > 8:
        return x.max(axis=-1, keepdims=True)
    out = x[:, 0].copy()
    for j in range(1, x.shape[1]):
        np.maximum(out, x[:, j], out=out)
    return out[:, None]


def _col_sum(g: np.ndarray) -> np.ndarray:
    """Sum over the first axis of a 2-d array."""
    if g.ndim != 2:
        return g.sum(axis=0)
    return np.ones(g.shape[0], dtype=g.dtype) @ g


# --- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), bw)


def reciprocal(a: Tensor) -> Tensor:
    data = 1.0 / a.data
    return _node(data, (a,), lambda g: (-g * data * data,))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(data.astype(x.dtype, copy=False), (a,), bw)


# --- linear algebra and shape ---------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` as one tape node; ``weight`` is ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear dimension mismatch: input {x.shape}, weight {weight.shape}")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = _col_sum(g) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(data, parents, bw)


def rearrange(a: Tensor, shape, axes, out_shape) -> Tensor:
    """``a.reshape(shape).transpose(axes).reshape(out_shape)`` as one node."""
    data = np.ascontiguousarray(a.data.reshape(shape).transpose(axes)).reshape(out_shape)
    inv = tuple(np.argsort(axes))
    mid = tuple(shape[i] for i in axes)

    def bw(g):
        return (np.ascontiguousarray(g.reshape(mid).transpose(inv)).reshape(a.shape),)

    return _node(data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _node(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(data, (a,), lambda g: (np.transpose(g, inv),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if a.ndim == 2 and axis == 0 and not keepdims:
        data = (np.ones(a.shape[0]) @ a.data.astype(np.float64)).astype(a.dtype)
    else:
        data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _node(np.asarray(data), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Select ``a[i, index[i]]`` from a 2-d tensor."""
    index = np.asarray(index)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick needs (n, c) and (n,), got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])
    data = a.data[rows, index]

    def bw(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return _node(data, (a,), bw)


# --- normalization and softmax --------------------------------------------------------
def normalize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance along the last axis (no affine)."""
    x = a.data
    xc = x - _row_mean(x)
    inv = 1.0 / np.sqrt(_row_mean(xc * xc) + eps)
    xhat = xc * inv

    def bw(g):
        return (inv * (g - _row_mean(g) - xhat * _row_mean(g * xhat)),)

    return _node(xhat.astype(x.dtype, copy=False), (a,), bw)


def layer_norm(a: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Last-axis normalization followed by a per-channel affine map."""
    x = a.data
    xc = x - _row_mean(x)
    inv = 1.0 / np.sqrt(_row_mean(xc * xc) + eps)
    xhat = xc * inv
    data = xhat * weight.data + bias.data

    def bw(g):
        gh = g * weight.data
        return (
            inv * (gh - _row_mean(gh) - xhat * _row_mean(gh * xhat)),
            _col_sum(g * xhat) if weight.requires_grad else None,
            _col_sum(g) if bias.requires_grad else None,
        )

    return _node(data.astype(x.dtype, copy=False), (a, weight, bias), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, a.ndim - 1):
        raise ShapeError("softmax is taken over the last axis")
    x = a.data
    e = np.exp(x - _row_max(x))
    s = e / _row_sum(e)

    def bw(g):
        return (s * (g - _row_sum(g * s)),)

    return _node(s, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, a.ndim - 1):
        raise ShapeError("log_softmax is taken over the last axis")
    x = a.data
    shifted = x - _row_max(x)
    data = shifted - np.log(_row_sum(np.exp(shifted)))

    def bw(g):
        return (g - np.exp(data) * _row_sum(g),)

    return _node(data, (a,), bw)


# --- tape -----------------------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` ancestor of a scalar."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy() if node._backward is None else g
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# --- randomness -------------------------------------------------------------------
def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


class Rng:
    """Seeded generator: numpy PCG64 fed by a SeedSequence.

    ``Rng(seed, *key)`` derives an independent stream; string key parts are
    folded in through CRC32 so derivation is stable across processes.
    """

    def __init__(self, seed: int, *key):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(_key_int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def child(self, *key) -> Rng:
        return Rng(self.seed, *self.key, *key)

    def uniform(self, low=0.0, high=1.0, size=None, dtype=FLOAT):
        return np.asarray(self._gen.uniform(low, high, size), dtype=dtype)[()]

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=FLOAT):
        return np.asarray(self._gen.normal(loc, scale, size), dtype=dtype)[()]

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)


# --- optimizer -------------------------------------------------------------------
class AdamState:
    """First/second moments and step count per parameter name."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update with decoupled weight decay, in place."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"parameter {missing[0]!r} has no gradient")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * update).astype(p.dtype)


class AdamW:
    """Holds the parameters and moment state for :func:`adam_step`."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.betas, self.eps, self.weight_decay)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
