"""Float64 tensors with reverse-mode gradients.

Every forward operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` orders the reachable graph topologically (the tape) and
replays it in reverse. Gradients accumulate into ``Tensor.grad`` of leaves
that have ``requires_grad`` set; call :func:`zero_grad` between steps.

The graph lives on the tensors themselves, so each thread that builds its
own graph also owns its own tape.
"""

from __future__ import annotations

import contextlib
import contextvars
import io
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, CorruptionError, DimensionError, FormatError, GeometryError

DTYPE = np.float64

_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation only)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _raise_scalar(shape):
    raise ContractError(f"expected a single-element tensor, got shape {shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``parents``.

    ``backward(grad_out)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.grad = None
    out.name = None
    out.requires_grad = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF from ``erf``."""
    cdf = erf(x.data * _SQRT_HALF)
    cdf += 1.0
    cdf *= 0.5

    def backward(g):
        slope = np.square(x.data)
        slope *= -0.5
        np.exp(slope, out=slope)
        slope *= _INV_SQRT_2PI
        slope *= x.data
        slope += cdf
        slope *= g
        return (slope,)

    return custom_op(x.data * cdf, (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dims, got shape {x.shape}")
    return custom_op(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return custom_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data @ b.data, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op(p, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return custom_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``w`` is
    ``[C_out, C_in, kh, kw]`` with odd kernel sides.
    """
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D, got {w.shape}")
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d input {x.shape} does not match weight {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise GeometryError(f"kernel sides must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise GeometryError(f"invalid stride {stride} / pad {pad}")
    n, _, h, wd = x.shape
    span_h, span_w = h + 2 * pad - kh, wd + 2 * pad - kw
    if span_h < 0 or span_w < 0:
        raise GeometryError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})")
    if span_h % stride or span_w % stride:
        raise GeometryError(f"stride {stride} does not tile padded input {h}x{wd} with kernel {kh}x{kw}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    if b is not None and b.shape != (c_out,):
        raise DimensionError(f"conv2d bias {b.shape} does not match {c_out} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # per-sample im2col: rows (c_in, i, j) match w's layout, columns are output pixels
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c_in * kh * kw, ho * wo)
    w_mat = w.data.reshape(c_out, -1)
    out = w_mat @ cols
    if b is not None:
        out += b.data[:, None]

    def backward(g):
        g3 = g.reshape(n, c_out, ho * wo)
        gw = (g3 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w_mat.T @ g3).reshape(n, c_in, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    y = custom_op(out.reshape(n, c_out, ho, wo), parents, backward)
    if unbatched:
        y = reshape(y, y.shape[1:])
    return y


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` average pooling over the last two axes."""
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise GeometryError(f"pool size {k} does not divide spatial dims {h}x{w}")
    lead = x.shape[:-2]
    out = np.zeros(lead + (h // k, w // k))
    for i in range(k):
        for j in range(k):
            out += x.data[..., i::k, j::k]
    out *= 1.0 / (k * k)

    def backward(g):
        g = np.broadcast_to((g / (k * k))[..., :, None, :, None], lead + (h // k, k, w // k, k))
        return (g.reshape(x.shape),)

    return custom_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient machinery


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable, x: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar ``f(x)`` with central differences.

    ``x`` may be one tensor or a sequence of tensors; ``f`` receives it
    unchanged and is re-evaluated with each coordinate perturbed in place.
    Returns ``max |analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        backward(f(x))
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(x).item()
                flat[i] = orig - eps
                lo = f(x).item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * eps)
                worst = max(worst, abs(a_flat[i] - numeric) / max(1.0, abs(numeric)))
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g


# ---------------------------------------------------------------------------
# binary serialization: "PEMT", u32 rank, rank x u32 dims, f64 values (LE)

TENSOR_MAGIC = b"PEMT"


def tensor_nbytes(shape: Sequence[int]) -> int:
    return 4 + 4 + 4 * len(shape) + 8 * int(np.prod(shape, dtype=np.int64))


def write_tensor(fp: BinaryIO, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise CorruptionError(f"unexpected end of data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fp: BinaryIO) -> Tensor:
    magic = fp.read(4)
    if len(magic) < 4:
        raise CorruptionError("unexpected end of data while reading tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fp, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    values = np.frombuffer(_read_exact(fp, 8 * count), dtype="<f8")
    return Tensor(values.reshape(dims))


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> Tensor:
    return read_tensor(io.BytesIO(raw))
