"""Dense tensors with recorded reverse-mode differentiation.

Every tensor wraps a read-only numpy array.  Operations on tensors that
require gradients record their parents and a local vector-Jacobian product;
:func:`backward` replays the record in reverse topological order.

Layout is row-major with batch axes leftmost and the feature axis last.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from typing import Union

import numpy as np

LAYER_NORM_EPS = 1e-5

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradientError(RuntimeError):
    """A gradient was requested that the recorded graph cannot provide."""


class Tensor:
    """Immutable n-dimensional array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data), copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
        out = cls.__new__(cls)
        data = np.asarray(data)
        data.flags.writeable = False
        out.data = data
        out.name = None
        tracked = any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = parents if tracked else ()
        out._vjp = vjp if tracked else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return swap_last(self)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float64


def as_tensor(x: ArrayLike, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Broadcast addition; extent-1 axes stretch."""
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


add_broadcast = add


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    return Tensor._result(xd**exponent, (x,), lambda g: (g * exponent * xd ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (g / (2.0 * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _pair(a: ArrayLike, b: ArrayLike) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for tensor of rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean along ``axis`` (an int, a tuple, or None for all)."""
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._result(x.data.mean(axis=axes, keepdims=keepdims), (x,), vjp)


# --------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(src),))


def swap_last(x: Tensor) -> Tensor:
    """Transpose the two rightmost axes."""
    if x.ndim < 2:
        raise ShapeError(f"swap_last: need rank >= 2, got shape {x.shape}")
    return Tensor._result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = np.broadcast_to(x.data, tuple(shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (_unbroadcast(g, src),))


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` by integer index (gradient scatters back)."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * (axis % len(shape)) + (index,), g)
        return (full,)

    return Tensor._result(np.take(x.data, index, axis=axis), (x,), vjp)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[..., i, index[i]]`` for a 2-D ``x``: one entry per row."""
    if x.ndim != 2:
        raise ShapeError(f"pick: expected a 2-D tensor, got shape {x.shape}")
    index = np.asarray(index, dtype=np.intp)
    if index.shape != (x.shape[0],):
        raise ShapeError(f"pick: index shape {index.shape} does not match rows of {x.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, index] = g
        return (full,)

    return Tensor._result(x.data[rows, index], (x,), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product ``[..., r, s] @ [..., s, t] -> [..., r, t]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(ad @ bd, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return Tensor._result(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layer_normalize(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain`` and ``bias``."""
    m = x.shape[-1]
    if gain.shape != (m,) or bias.shape != (m,):
        raise ShapeError(f"layer_normalize: gain {gain.shape} / bias {bias.shape} do not match feature extent {m}")
    centered = sub(x, mean(x, axis=-1, keepdims=True))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = mul(centered, power(add(var, eps), -0.5))
    return add(mul(normed, gain), bias)


def euclidean_sq(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared distances ``[..., p, m] x [..., r, m] -> [..., p, r]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"euclidean_sq: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[..., :, None, :] - b.data[..., None, :, :]
    sa, sb = a.shape, b.shape

    def vjp(g):
        weighted = 2.0 * g[..., None] * diff
        return _unbroadcast(weighted.sum(axis=-2), sa), _unbroadcast(-weighted.sum(axis=-3), sb)

    return Tensor._result((diff * diff).sum(axis=-1), (a, b), vjp)


def euclidean(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Pairwise distances; ``eps`` keeps the gradient finite at coincident points."""
    return sqrt(add(euclidean_sq(a, b), eps))


# ------------------------------------------------------------------ convolution


def conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """Stride-1, zero-padded ('same') 2-D convolution.

    ``x`` is ``[B, H, W, C_in]`` and ``weight`` is ``[kh, kw, C_in, C_out]``
    with odd kernel extents.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[-1] != weight.shape[2]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {weight.shape}")
    b, h, w, _ = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    # windows: [B, H, W, C_in, kh, kw] -> columns ordered (kh, kw, C_in)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(b, h, w, cout)

    def vjp(g):
        g2 = g.reshape(b * h * w, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(b, h, w, kh, kw, cin)
        gpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gpad[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
        return gpad[:, ph : ph + h, pw : pw + w, :], gw

    return Tensor._result(out, (x, weight), vjp)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over ``[B, H, W, C]``; odd edges are cropped."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2x2: expected [B, H, W, C], got {x.shape}")
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"max_pool2x2: spatial extent too small in {x.shape}")
    cropped = x.data[:, : 2 * h2, : 2 * w2, :]
    win = cropped.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def vjp(g):
        gwin = np.zeros((b, h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gcrop = gwin.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * h2, 2 * w2, c)
        full = np.zeros(shape, dtype=g.dtype)
        full[:, : 2 * h2, : 2 * w2, :] = gcrop
        return (full,)

    return Tensor._result(out, (x,), vjp)


# -------------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params):
    """Gradients of a scalar ``loss`` with respect to each tensor in ``params``.

    ``params`` may be a sequence (a list of arrays is returned in the same
    order) or a mapping of names to tensors (a dict is returned).
    """
    if loss.size != 1:
        raise GradientError(f"backward: loss must be a scalar, got shape {loss.shape}")
    named = isinstance(params, Mapping)
    items = list(params.items()) if named else list(enumerate(params))

    order = _topological(loss)
    on_path = {id(t) for t in order}
    for key, p in items:
        if id(p) not in on_path or not p.requires_grad:
            label = p.name or key
            raise GradientError(f"backward: parameter {label!r} is not on the recorded path of the loss")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=parent.dtype)

    result = []
    for key, p in items:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        result.append((key, np.asarray(g, dtype=p.dtype).reshape(p.shape)))
    if named:
        return dict(result)
    return [g for _, g in result]


def finite_difference_grad(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``fn`` with respect to ``array``, perturbed in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a-n| / (|a|+|n|)`` over entries where ``|a|+|n| > floor``."""
    denom = np.abs(analytic) + np.abs(numeric)
    mask = denom > floor
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric)[mask] / denom[mask]).max())
