"""NCHW tensors with a small reverse-mode differentiation engine.

Only the operations the deblurring network and its losses need are
provided. Binary ops require exact shape matches; there is no broadcasting.
Graphs are single-use: every forward pass builds a fresh graph and
``backward`` walks it once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense array that can participate in a differentiation graph.

    Parameters
    ----------
    data : array_like
        Values. Copied to a contiguous array of ``dtype``.
    requires_grad : bool
        Whether ``grad`` is populated by :meth:`backward`.
    dtype : numpy dtype, optional
        Element precision; defaults to the dtype of ``data`` when it is a
        floating array, otherwise float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


@dataclass
class ComplexGrid:
    """Real and imaginary planes of a 2D spectrum, each a differentiable Tensor."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real {self.real.shape} and imag {self.imag.shape} differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def to_numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match")


def _check_nchw(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected NCHW input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # release the graph; it is single-use
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch exponentiates a large positive number
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    fi = np.finfo(x.dtype)
    # keep the open-interval guarantee once exp saturates
    y = np.clip(y, fi.tiny, 1 - fi.epsneg)
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,))


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2 * g * d,))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    if not inputs:
        raise ShapeError("concat_channels: no inputs")
    ref = inputs[0].shape
    for t in inputs:
        _check_nchw("concat_channels", t)
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {ref}")
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]
    out = np.concatenate([t.data for t in inputs], axis=1)
    return _make(out, tuple(inputs), lambda g: np.split(g, splits, axis=1))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    _check_nchw("channel_slice", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel_slice: [{start}:{stop}] out of range for {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor) -> Tensor:
    return _make(np.sum(x.data, dtype=x.dtype).reshape(()), (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(
        (np.sum(x.data, dtype=x.dtype) / n).reshape(()).astype(x.dtype),
        (x,),
        lambda g: (np.full_like(x.data, g / n),),
    )


# ---------------------------------------------------------------------------
# convolutions


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Ho, Wo, kh, kw) strided view of a padded input."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(x, kh, kw, stride)
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int):
    """Scatter-add (N*Ho*Wo, C*kh*kw) columns back onto an NCHW array of ``shape``."""
    n, c, h, w = shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += blocks[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (out, in, kh, kw) kernel."""
    _check_nchw("conv2d", x)
    if weight.data.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride={stride} padding={padding}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {weight.shape} with padding {padding}")

    if kh == kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias)

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = _col2im(gm @ wmat, x.shape, kh, kw, stride, padding, ho, wo) if x.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    n, c, h, w = x.shape
    o = weight.shape[0]
    wmat = weight.data.reshape(o, c)
    xm = x.data.reshape(n, c, h * w)
    out = np.matmul(wmat, xm)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, h, w)

    def bw(g):
        gm = g.reshape(n, o, h * w)
        gx = np.matmul(wmat.T, gm).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.zeros((o, c), dtype=g.dtype)
            for b in range(n):
                gw += gm[b] @ xm[b].T
            gw = gw.reshape(weight.shape)
        gb = gm.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is laid out (in, out, kh, kw).

    Output spatial size is ``(H - 1) * stride - 2 * padding + kh``. With zero
    bias this is the adjoint of :func:`conv2d` using the same weight.
    """
    _check_nchw("conv_transpose2d", x)
    if weight.data.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv_transpose2d: bias {bias.shape} does not match weight {weight.shape}")
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}, weight {weight.shape}")

    wmat = weight.data.reshape(c, o * kh * kw)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    cols = xm @ wmat
    out = _col2im(cols, (n, o, ho, wo), kh, kw, stride, padding, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gcols, _, _ = _im2col(g, kh, kw, stride, padding)
        gx = (gcols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (None if gx is None else np.ascontiguousarray(gx)), gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, padding 1."""
    _check_nchw("depthwise_conv2d", x)
    c = x.shape[1]
    if weight.shape != (c, 1, 3, 3):
        raise ShapeError(f"depthwise_conv2d: input {x.shape} needs weight ({c}, 1, 3, 3), got {weight.shape}")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"depthwise_conv2d: bias {bias.shape} does not match {c} channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    k = weight.data[:, 0]
    h, w = x.shape[2:]
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i : i + h, j : j + w] * k[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gp[:, :, i : i + h, j : j + w] += g * k[None, :, i, j, None, None]
            gx = np.ascontiguousarray(gp[:, :, 1:-1, 1:-1])
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(3):
                for j in range(3):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i : i + h, j : j + w])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# spectrum


def fft2(x: Tensor) -> ComplexGrid:
    """Unnormalized 2D DFT of every (n, c) plane.

    The DFT matrix is symmetric, so the adjoint of ``x -> Re F x`` is
    ``g -> Re F g`` and of ``x -> Im F x`` is ``g -> Im F g``.
    """
    _check_nchw("fft2", x)
    spec = np.fft.fft2(x.data.astype(np.float64), axes=(2, 3))
    dt = x.dtype
    re = _make(spec.real.astype(dt), (x,), lambda g: (np.fft.fft2(g, axes=(2, 3)).real.astype(dt),))
    im = _make(spec.imag.astype(dt), (x,), lambda g: (np.fft.fft2(g, axes=(2, 3)).imag.astype(dt),))
    return ComplexGrid(re, im)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of ``x``.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).data.item()
        flat[i] = orig - eps
        fm = f(x).data.item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error, with ``floor`` guarding near-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
