"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine: every primitive records its parents and a
vector-Jacobian closure on the output tensor. ``backward`` rebuilds the
tape from the root (creation order is a valid topological order) and
walks it once in reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ComputationTape", "ShapeError", "NonFiniteError", "tensor",
    "as_tensor", "precision", "default_dtype", "no_grad", "grad_enabled",
    "matmul", "add", "sub", "mul", "div", "neg", "scale", "exp", "log",
    "relu", "gelu", "softmax", "layernorm", "conv2d", "transpose",
    "reshape", "gather", "concat", "sum", "mean", "sqrt", "abs",
    "clampmin", "clampmax", "backward", "gradcheck",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite result in op '{op}'")
        self.op = op


_DTYPE = np.float32
_GRAD_ENABLED = True
_counter = itertools.count()


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (float32 or float64)."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_op", "_id")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf"
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, axes=None): return transpose(self, axes)
    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=_DTYPE)


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t._op = op
    t._id = next(_counter)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make("scale", a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0).astype(out.dtype),)
    return _make("sqrt", out, (a,), vjp)


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def vjp(g):
        d_inner = _GELU_C * (1 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * d_inner),)
    return _make("gelu", out.astype(x.dtype), (a,), vjp)


def clampmin(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data > lo
    return _make("clampmin", np.where(keep, a.data, a.data.dtype.type(lo)), (a,), lambda g: (g * keep,))


def clampmax(a, hi: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data < hi
    return _make("clampmax", np.where(keep, a.data, a.data.dtype.type(hi)), (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make("sum", np.asarray(out, dtype=a.dtype), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = a.data.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)
    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _norm_axis(axis, a.ndim)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)
    return _make("softmax", y, (a,), vjp)


def layernorm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    a = as_tensor(a)
    _norm_axis(axis, a.ndim)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return ((inv * (g - gm - y * gy)).astype(x.dtype),)
    return _make("layernorm", y.astype(x.dtype), (a,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))
    return _make("matmul", out, (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {a.shape}")
    inv = np.argsort(axes)
    return _make("transpose", np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make("reshape", out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def gather(a, index, axis: int = 0) -> Tensor:
    """Select entries of ``a`` along ``axis`` with an integer index array."""
    a = as_tensor(a)
    (axis,) = _norm_axis(axis, a.ndim)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (ga,)
    return _make("gather", out, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make("concat", out, ts, vjp)


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W); w: (O, C, k, k); zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # (N, C, ho, wo, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wm = w.data.reshape(o, c * k * k)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gm.T @ cols).reshape(w.shape)
        gcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += \
                    gcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)
    return _make("conv2d", out, parents, vjp)


# ------------------------------------------------------------------ autodiff

class ComputationTape:
    """Topologically ordered list of nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]


def backward(root: Tensor, tape: ComputationTape | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward on a detached root: empty tape")
    tape = tape or ComputationTape.record(root)
    if not tape.nodes:
        raise ValueError("backward on a detached root: empty tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.astype(node.dtype) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


FD_FLOOR = 1e4  # relative errors are taken against at least this many central-difference resolutions


def _rel_err(ana, num, fp, fm, h) -> float:
    """|ana - num| / (|ana| + |num|), with the denominator floored at FD_FLOOR times the rounding
    resolution of the central difference, eps * |f| / h. Below that scale a difference quotient
    cannot tell a zero gradient from one ulp of the loss."""
    res = np.finfo(np.float64).eps * max(abs_(fp), abs_(fm), 1.0) / h
    return abs_(ana - num) / max(1e-8, FD_FLOOR * res, abs_(ana) + abs_(num))


def gradcheck(f: Callable[[Tensor], Tensor], x, h: float = 1e-6,
              components: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is evaluated in float64. ``components`` limits the check to a
    random subset of coordinates of ``x``.
    """
    with precision(np.float64):
        x0 = np.array(np.asarray(x.data if isinstance(x, Tensor) else x), dtype=np.float64)
        xt = Tensor(x0, requires_grad=True)
        y = f(xt)
        if not np.isfinite(y.data).all():
            raise NonFiniteError("gradcheck")
        backward(y)
        analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
        flat = x0.reshape(-1)
        idx = np.arange(flat.size)
        if components is not None and components < flat.size:
            idx = np.sort(np.random.default_rng(seed).choice(flat.size, components, replace=False))
        worst = 0.0
        with no_grad():
            for i in idx:
                xp, xm = flat.copy(), flat.copy()
                xp[i] += h
                xm[i] -= h
                fp = f(Tensor(xp.reshape(x0.shape))).item()
                fm = f(Tensor(xm.reshape(x0.shape))).item()
                num = (fp - fm) / (2 * h)
                ana = analytic.reshape(-1)[i]
                worst = max(worst, _rel_err(ana, num, fp, fm, h))
        return worst


def abs_(v: float) -> float:
    return v if v >= 0 else -v


def parameters_gradcheck(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-6,
                         components: int = 20, seed: int = 0) -> float:
    """Gradcheck over a random subset of coordinates drawn from several parameter tensors.

    Parameters must already be float64 and require grad; they are perturbed in place
    and restored.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    sizes = np.array([p.data.size for p in params])
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(sizes.sum(), min(components, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with no_grad():
        for fid in np.sort(flat_ids):
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            p, j = params[k], int(fid - offsets[k])
            ana = 0.0 if p.grad is None else float(p.grad.reshape(-1)[j])
            flat = p.data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_fn().item()
            flat[j] = orig - h
            fm = loss_fn().item()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(ana, num, fp, fm, h))
    return worst
