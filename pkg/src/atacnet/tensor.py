"""Small reverse-mode autodiff engine over numpy arrays.

Every op produces a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Nodes carry a
monotonically increasing sequence number, so the recorded graph is ordered by
execution and :meth:`Tensor.backward` simply walks the reachable nodes in
reverse sequence order.

Storage defaults to float32.  Gradient checks switch to float64 with
:func:`precision`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "GradCheckReport",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "no_grad",
    "strict",
    "make_rng",
    "zero_grad",
    "conv2d",
    "pad2d",
    "matmul",
    "relu",
    "leaky_relu",
    "softmax",
    "reduce",
    "bilinear_resize",
    "grad",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent.

    ``dim`` names the offending dimension so callers can report it.
    """

    def __init__(self, message: str, dim: str | None = None, expected=None, got=None):
        super().__init__(message)
        self.dim = dim
        self.expected = expected
        self.got = got


class GraphError(RuntimeError):
    """Raised for misuse of the differentiation graph."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_SEQ = itertools.count()


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def strict():
    """Force single-threaded BLAS so numeric paths are bit-reproducible."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def make_rng(seed) -> np.random.Generator:
    """Seeded generator: numpy's PCG64 bit generator (PCG XSL RR 128/64).

    ``seed`` may be an int or a sequence of ints (hashed by ``SeedSequence``),
    which is how per-epoch and per-image streams are derived.
    """
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    """N-dimensional array node in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "retains_grad", "_parents", "_backward", "_seq", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.retains_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_SEQ)
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.retains_grad = False
        out._seq = next(_SEQ)
        out._op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}", dim="size")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    # ---------------------------------------------------------------- backward
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if self.data.size != 1 and grad is None:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}", dim="loss")
        if not self.requires_grad:
            raise GraphError("loss is detached from the graph (no input requires grad)")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        def sink(node, g):
            if node._backward is None or node.retains_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g

        _backprop(self, seed, sink)

    # ---------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, "max", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _ancestors(root: Tensor) -> list[Tensor]:
    seen = {id(root)}
    stack = [root]
    out = []
    while stack:
        node = stack.pop()
        out.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    return out


def _backprop(root: Tensor, seed: np.ndarray, sink: Callable[[Tensor, np.ndarray], None]) -> None:
    nodes = _ancestors(root)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    pending: dict[int, np.ndarray] = {id(root): seed}
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        sink(node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. arbitrary graph nodes.

    Unlike :meth:`Tensor.backward` nothing is written to ``.grad``.  Raises
    :class:`GraphError` if a requested node is not an ancestor of ``output``.
    """
    if output.data.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}", dim="output")
    if not output.requires_grad:
        raise GraphError("output is detached from the graph")
    reachable = {id(t) for t in _ancestors(output)}
    for t in wrt:
        if id(t) not in reachable:
            raise GraphError(f"{t!r} is not part of the graph that produced the output")
    found = {id(t): np.zeros_like(t.data) for t in wrt}

    def sink(node, g):
        if id(node) in found:
            found[id(node)] = found[id(node)] + g

    _backprop(output, np.ones_like(output.data), sink)
    return [found[id(t)] for t in wrt]


def zero_grad(params: Iterable[Tensor]) -> None:
    """Drop accumulated gradients; parameter values are untouched."""
    for p in params:
        p.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad**exponent

    def backward(g):
        return (g * exponent * ad ** (exponent - 1),)

    return Tensor._from_op(out, (a,), backward, "pow")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """``x`` where positive, ``slope * x`` elsewhere (including exactly 0)."""
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor._from_op(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


# ------------------------------------------------------------------- shaping
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[index]), (x,), backward, "getitem")


def pad2d(x: Tensor, pad: int, mode: str = "reflect") -> Tensor:
    """Pad the two trailing axes of an N x C x H x W tensor by ``pad`` cells.

    ``reflect`` mirrors without repeating the edge (numpy's "reflect");
    ``zeros`` fills with zeros.
    """
    if pad == 0:
        return x
    if mode == "zeros":
        return _zero_pad(x, pad)
    if mode != "reflect":
        raise ValueError(f"unknown padding mode {mode!r}")
    H, W = x.shape[-2:]
    if pad >= min(H, W):
        raise ShapeError(f"reflect padding {pad} needs spatial size > {pad}, got {H}x{W}", dim="height", expected=pad + 1, got=min(H, W))
    iy = np.pad(np.arange(H), pad, mode="reflect")
    ix = np.pad(np.arange(W), pad, mode="reflect")
    return getitem(x, (slice(None), slice(None), iy[:, None], ix[None, :]))


def _zero_pad(x: Tensor, pad: int) -> Tensor:
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]

    def backward(g):
        return (g[..., pad:-pad, pad:-pad],)

    return Tensor._from_op(np.pad(x.data, widths), (x,), backward, "pad")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor", dim="axis", expected=ndim, got=a)
        out.append(a % ndim)
    return tuple(sorted(out))


def reduce(x: Tensor, kind: str, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (``None`` reduces everything).

    The max backward routes the whole gradient to the first maximal element
    along the reduced axes, in row-major order.
    """
    axes = _norm_axis(axis, x.ndim)
    xd = x.data
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    if kind == "sum":
        out = xd.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape), xd.shape).astype(xd.dtype),)

    elif kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        out = xd.mean(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, xd.shape).astype(xd.dtype),)

    elif kind == "max":
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        moved = xd.transpose(rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            out = out.reshape(kept_shape)

        def backward(g):
            gflat = np.zeros(flat.shape, dtype=xd.dtype)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (gmoved.transpose(np.argsort(rest + axes)),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return Tensor._from_op(np.asarray(out, dtype=xd.dtype), (x,), backward, f"reduce_{kind}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    (axis,) = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), backward, "softmax")


# ---------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over shared leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims", dim="ndim")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape[-1]} vs {b.shape[-2]}",
            dim="inner",
            expected=a.shape[-1],
            got=b.shape[-2],
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape[:-2]} vs {b.shape[:-2]}", dim="batch")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an NCHW batch with an OIKK kernel.

    Output extent per spatial axis is ``(H + 2*padding - K) // stride + 1``.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.shape}", dim="ndim", expected=4, got=x.ndim)
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be OIKK, got {weight.shape}", dim="ndim", expected=4, got=weight.ndim)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, weight expects {i}", dim="channels", expected=i, got=c
        )
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}", dim="bias", expected=o, got=bias.shape)
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise ShapeError(f"kernel height {kh} exceeds padded input height {hp}", dim="height", expected=hp, got=kh)
    if kw > wp:
        raise ShapeError(f"kernel width {kw} exceeds padded input width {wp}", dim="width", expected=wp, got=kw)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # cols: N, C, Ho, Wo, KH, KW (a strided view; tensordot copies as needed)
    cols = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    wd = weight.data
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])).astype(wd.dtype)
        if x.requires_grad:
            gcols = np.tensordot(g, wd, axes=([1], [0]))  # N, Ho, Wo, C, KH, KW
            gpad = np.zeros((n, c, hp, wp), dtype=xd.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    gpad[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += gcols[
                        :, :, :, :, ki, kj
                    ].transpose(0, 3, 1, 2)
            gx = gpad[:, :, padding : padding + h, padding : padding + w] if padding else gpad
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._from_op(out, parents, backward, "conv2d")


# ---------------------------------------------------------------- resampling
def _resize_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor | np.ndarray, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NCHW batch (align-corners off, edge-clamped).

    Source coordinate for output index ``i`` is ``(i + 0.5) * in/out - 0.5``
    clamped into the input.  Images are graph constants, so inputs that
    require grad are rejected.  Resizing to the same size is an exact copy.
    """
    if isinstance(x, Tensor):
        if x.requires_grad:
            raise GraphError("bilinear_resize is forward-only; its input must not require grad")
        xd = x.data
    else:
        xd = np.asarray(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}", dim="size")
    if xd.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW, got {xd.shape}", dim="ndim", expected=4, got=xd.ndim)
    dtype = xd.dtype if np.issubdtype(xd.dtype, np.floating) else _DEFAULT_DTYPE
    h, w = xd.shape[2:]
    if (h, w) == (out_h, out_w):
        return Tensor(xd.copy(), dtype=dtype)
    src = xd.astype(np.float64)
    y0, y1, fy = _resize_weights(h, out_h)
    x0, x1, fx = _resize_weights(w, out_w)
    rows = src[:, :, y0, :] * (1 - fy)[:, None] + src[:, :, y1, :] * fy[:, None]
    out = rows[:, :, :, x0] * (1 - fx) + rows[:, :, :, x1] * fx
    return Tensor(out, dtype=dtype)


# ---------------------------------------------------------------- grad check
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    def __init__(self, max_rel_error: float, tol: float, checked: int, skipped: int, worst: tuple | None):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.checked = checked
        self.skipped = skipped
        self.worst = worst

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= self.tol

    def __repr__(self) -> str:
        return (
            f"GradCheckReport(passed={self.passed}, max_rel_error={self.max_rel_error:.3g}, "
            f"tol={self.tol}, checked={self.checked}, skipped={self.skipped})"
        )


def grad_check(
    f: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    n_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    is_valid_probe: Callable[[], bool] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated after perturbing ``inputs`` in place.  Relative error
    per coordinate is ``|a - n| / max(|a|, |n|, floor)``.  Coordinates whose
    probes land on a kink (the h and h/2 differences disagree) or for which
    ``is_valid_probe`` returns False are skipped and counted.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    coords = [(ti, j) for ti, t in enumerate(inputs) for j in range(t.data.size)]
    if n_coords is not None and n_coords < len(coords):
        rng = make_rng(seed)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    def probe(t, j, step):
        flat = t.data.reshape(-1)
        old = flat[j]
        flat[j] = old + step
        with no_grad():
            value = float(f().data.reshape(-1)[0])
            ok = is_valid_probe() if is_valid_probe else True
        flat[j] = old
        return value, ok

    worst_err, worst, checked, skipped = 0.0, None, 0, 0
    for ti, j in coords:
        t = inputs[ti]
        fp, ok1 = probe(t, j, h)
        fm, ok2 = probe(t, j, -h)
        fp2, ok3 = probe(t, j, h / 2)
        fm2, ok4 = probe(t, j, -h / 2)
        if not (ok1 and ok2 and ok3 and ok4):
            skipped += 1
            continue
        num = (fp - fm) / (2 * h)
        num_half = (fp2 - fm2) / h
        a = float(analytic[ti].reshape(-1)[j])
        scale = max(abs(a), abs(num), floor)
        if abs(num - num_half) / max(abs(num), abs(num_half), floor) > tol:
            # a kink between the probes makes the difference quotient meaningless
            skipped += 1
            continue
        err = abs(a - num) / scale
        checked += 1
        if err > worst_err:
            worst_err, worst = err, (ti, j, a, num)
    return GradCheckReport(worst_err, tol, checked, skipped, worst)
