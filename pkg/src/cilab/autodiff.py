"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient
the output remembers its parents and a closure mapping the upstream
gradient to one gradient per parent.  :func:`backward` walks the graph in
reverse topological order and accumulates (``+=``) into ``.grad``.

Ops accept an optional leading batch axis where it makes sense (conv,
pool, normalisation) but never broadcast: elementwise operands must have
identical shapes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateInputError, DimensionError

EPS_NORM = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise DegenerateInputError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(arr: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{op} produced NaN or Inf")
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, requires)
    out.op = op
    if requires:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph traversal


def build_graph(loss: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``loss`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = build_graph(loss)
    # Intermediate nodes get fresh gradients; leaves keep accumulating.
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def mul_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(x.data * s, (x,), lambda g: (g * s,), "mul_scalar")


def add_scalar(x: Tensor, s: float) -> Tensor:
    return _result(x.data + float(s), (x,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = np.array([x.data.sum()])
        return _result(out, (x,), lambda g: (np.full(x.shape, g[0]),), "reduce_sum")
    ax = axis % x.data.ndim
    summed = x.data.sum(axis=ax)
    kept = np.shape(summed)
    out = np.atleast_1d(summed)

    def _bw(g):
        return (np.broadcast_to(np.expand_dims(g.reshape(kept), ax), x.shape),)

    return _result(out, (x,), _bw, "reduce_sum")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError(f"dot expects vectors, got {a.shape} and {b.shape}")
    _same_shape(a, b, "dot")
    out = np.array([a.data @ b.data])
    return _result(out, (a, b), lambda g: (g[0] * b.data, g[0] * a.data), "dot")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, indices) -> Tensor:
    """Gather along the first axis; repeated indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.intp)

    def _bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), _bw, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("stack of zero tensors")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)

    def _bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, _bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, _bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), _bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape ``[n, k]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape}, expected ({weight.shape[1]},)")

    def _bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), _bw, "linear")


def batched_dot(a: Tensor, c: Tensor) -> Tensor:
    """Row-wise dot products: ``a[N,D]`` against ``c[N,M,D]`` gives ``[N,M]``."""
    if a.data.ndim != 2 or c.data.ndim != 3 or c.shape[0] != a.shape[0] or c.shape[2] != a.shape[1]:
        raise DimensionError(f"batched_dot: incompatible shapes {a.shape} and {c.shape}")
    out = np.einsum("nd,nmd->nm", a.data, c.data)

    def _bw(g):
        return np.einsum("nm,nmd->nd", g, c.data), g[:, :, None] * a.data[:, None, :]

    return _result(out, (a, c), _bw, "batched_dot")


def l2_normalize(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Unit-normalise along the last axis."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateInputError("l2_normalize: vector norm below epsilon")
    y = x.data / norm

    def _bw(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _result(y, (x,), _bw, "l2_normalize")


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax along the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def _bw(g):
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return _result(out, (x,), _bw, "log_softmax")


# ---------------------------------------------------------------------------
# convolution and pooling (c,h,w or n,c,h,w)


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise DimensionError(f"{op}: expected (c,h,w) or (n,c,h,w), got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1, plus per-channel bias."""
    xb, single = _batched(x, "conv2d")
    n, c, h, w = xb.shape
    if kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernels must be (c_out,c_in,3,3), got {kernels.shape}")
    c_out = kernels.shape[0]
    if kernels.shape[1] != c:
        raise DimensionError(f"conv2d: {c} input channels vs kernel expecting {kernels.shape[1]}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({c_out},)")
    if h < 3 or w < 3:
        raise DimensionError(f"conv2d: spatial size {h}x{w} below 3x3")

    xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n,c,h,w,3,3
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    wmat = kernels.data.reshape(c_out, c * 9)
    out = (cols @ wmat.T + bias.data).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    if single:
        out = out[0]
    out = np.ascontiguousarray(out)

    def _bw(g):
        gb = g[None] if single else g
        g2 = gb.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
        dw = (g2.T @ cols).reshape(kernels.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, 1:-1, 1:-1]
        if single:
            dx = dx[0]
        return dx, dw, db

    return _result(out, (x, kernels, bias), _bw, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first position."""
    xb, single = _batched(x, "maxpool2d")
    n, c, h, w = xb.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2d: spatial size {h}x{w} below 2x2")
    h2, w2 = h // 2, w // 2
    windows = (
        xb[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    arg = np.argmax(windows, axis=-1)[..., None]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]
    if single:
        out = out[0]

    def _bw(g):
        gb = g[None] if single else g
        gw = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gw, arg, gb[..., None], axis=-1)
        gx = np.zeros((n, c, h, w))
        gx[:, :, : 2 * h2, : 2 * w2] = (
            gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return (gx[0] if single else gx,)

    return _result(out, (x,), _bw, "maxpool2d")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    Per coordinate the error is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    ``coords`` restricts the comparison to a subset of flat indices.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    g_ad = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.requires_grad = was
    x.grad = None

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            g_fd = (fp - fm) / (2 * h)
            err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst
