"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (row-major, float64 by default, float32 selectable
for training throughput).  Each differentiable operation records a backward
closure on its output; ``Tensor.backward()`` replays the closures in reverse
topological order and accumulates gradients into ``.grad``.

The graph is implicit: a node keeps references to its parents and to one
closure.  Replaying twice on identical inputs produces bit-identical
gradients because the accumulation order is fixed by construction order.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DataError(ValueError):
    """Input values violate a domain contract (labels, manifests, configs)."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


DEFAULT_DTYPE = np.float64

# Prediction clamp for cross-entropy; keeps log() finite.
BCE_CLAMP = 1e-7

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-dimensional value, optionally tracked for gradients.

    Leaf tensors created with ``requires_grad=True`` (the learned
    parameters) hold a zero gradient buffer from construction, so a
    parameter that is unreachable from a loss reads as all-zero gradient.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every reachable node's ``.grad``.

        Requires a scalar value and a non-empty recorded graph.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward on a tensor with no recorded operations")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        for node in topo:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)

        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.data.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    """Create an op output; records parents only while grad mode is on."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = None
    return out


# -- elementwise arithmetic (with numpy broadcasting) -------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    out = _make(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g, b.shape)
        out._backward = _bw
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    out = _make(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(g, b.shape)
        out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    out = _make(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.grad += _unbroadcast(g * b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g * a.data, b.shape)
        out._backward = _bw
    return out


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    out = _make(a.data / b.data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.grad += _unbroadcast(g / b.data, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(g * a.data / (b.data * b.data), b.shape)
        out._backward = _bw
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    p = float(exponent)
    out = _make(a.data ** p, (a,))
    if out.requires_grad:
        def _bw():
            a.grad += out.grad * p * a.data ** (p - 1.0)
        out._backward = _bw
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,))
    if out.requires_grad:
        def _bw():
            a.grad += out.grad * out.data
        out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,))
    if out.requires_grad:
        def _bw():
            a.grad += out.grad / a.data
        out._backward = _bw
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    out = _make(np.clip(a.data, lo, hi), (a,))
    if out.requires_grad:
        inside = (a.data >= lo) & (a.data <= hi)
        def _bw():
            a.grad += out.grad * inside
        out._backward = _bw
    return out


# -- activations ---------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data), (a,))
    if out.requires_grad:
        def _bw():
            a.grad += out.grad * (1.0 - out.data * out.data)
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    # Two-branch form avoids overflow for large |x|.
    x = a.data
    z = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = _make(s.astype(x.dtype, copy=False), (a,))
    if out.requires_grad:
        def _bw():
            a.grad += out.grad * out.data * (1.0 - out.data)
        out._backward = _bw
    return out


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    out = _make(np.where(pos, a.data, slope * a.data), (a,))
    if out.requires_grad:
        def _bw():
            a.grad += out.grad * np.where(pos, 1.0, slope)
        out._backward = _bw
    return out


# -- reductions and shape ops ---------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.shape)
        out._backward = _bw
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        scale = out.data.size / a.data.size
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.shape) * scale
        out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def _bw():
            a.grad += out.grad.reshape(a.shape)
        out._backward = _bw
    return out


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    """Concatenate same-rank tensors along `axis`; backward splits the gradient."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    ndim = parts[0].ndim
    for p in parts:
        if p.ndim != ndim:
            raise ShapeError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        for d in range(ndim):
            if d != axis and p.shape[d] != parts[0].shape[d]:
                raise ShapeError(
                    f"concat shape mismatch along dim {d}: {parts[0].shape} vs {p.shape}"
                )
    out = _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    if out.requires_grad:
        widths = [p.shape[axis] for p in parts]
        def _bw():
            start = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    sl = [slice(None)] * ndim
                    sl[axis] = slice(start, start + w)
                    p.grad += out.grad[tuple(sl)]
                start += w
        out._backward = _bw
    return out


# -- linear map ------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias for x:(N,Din), weight:(Dout,Din), bias:(Dout,)."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(
            f"linear expects 2d input, 2d weight, 1d bias; got {x.shape}, "
            f"{weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(
            f"linear dimension mismatch: input {x.shape}, weight {weight.shape}, "
            f"bias {bias.shape}"
        )
    out = _make(x.data @ weight.data.T + bias.data, (x, weight, bias))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if x.requires_grad:
                x.grad += g @ weight.data
            if weight.requires_grad:
                weight.grad += g.T @ x.data
            if bias.requires_grad:
                bias.grad += g.sum(axis=0)
        out._backward = _bw
    return out


# -- convolution and pooling ------------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """Cross-correlation with odd square kernels and extent-preserving padding.

    x: (N,C,H,W), kernels: (K,C,kh,kw), bias: (K,).  Output: (N,K,H,W).
    """
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4d input and kernels, got {x.shape} and {kernels.shape}"
        )
    n, c, h, w = x.shape
    k, ck, kh, kw = kernels.shape
    if c != ck:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.shape} has {c} channels, "
            f"kernel shape {kernels.shape} expects {ck}"
        )
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d requires odd square kernels, got {kh}x{kw}")
    if padding != kh // 2:
        raise ShapeError(f"conv2d padding must be {kh // 2} for {kh}x{kw} kernels")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {k} kernels")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N,C,H,W,kh,kw)
    val = np.tensordot(win, kernels.data, axes=((1, 4, 5), (1, 2, 3)))  # (N,H,W,K)
    val = np.ascontiguousarray(np.moveaxis(val, 3, 1))
    val += bias.data[None, :, None, None]
    out = _make(val, (x, kernels, bias))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if bias.requires_grad:
                bias.grad += g.sum(axis=(0, 2, 3))
            if kernels.requires_grad:
                kernels.grad += np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3)))
            if x.requires_grad:
                gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
                gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
                kflip = kernels.data[:, :, ::-1, ::-1]
                gx = np.tensordot(gwin, kflip, axes=((1, 4, 5), (0, 2, 3)))
                x.grad += np.moveaxis(gx, 3, 1)
        out._backward = _bw
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; backward routes to the argmax element only."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects a 4d tensor, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    val = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _make(val, (x,))
    if out.requires_grad:
        def _bw():
            buf = np.zeros((n, c, h2, w2, 4), dtype=out.grad.dtype)
            np.put_along_axis(buf, idx[..., None], out.grad[..., None], axis=-1)
            back = buf.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            x.grad += back.reshape(n, c, h, w)
        out._backward = _bw
    return out


# -- loss -------------------------------------------------------------------------


def bce_loss(prediction: Tensor, label) -> Tensor:
    """Mean binary cross entropy -y*log(p) - (1-y)*log(1-p) over the batch.

    Predictions are clamped to [BCE_CLAMP, 1-BCE_CLAMP] before the log;
    labels must be exactly 0 or 1.
    """
    y = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=prediction.data.dtype)
    if y.shape != prediction.shape:
        raise ShapeError(
            f"bce_loss label shape {y.shape} does not match prediction {prediction.shape}"
        )
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("bce_loss labels must be 0 or 1")
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    p = np.clip(prediction.data, lo, hi)
    val = np.mean(-y * np.log(p) - (1.0 - y) * np.log1p(-p))
    out = _make(np.asarray(val, dtype=prediction.data.dtype), (prediction,))
    if out.requires_grad:
        inside = (prediction.data >= lo) & (prediction.data <= hi)
        def _bw():
            d = (p - y) / (p * (1.0 - p)) / y.size
            prediction.grad += out.grad * d * inside
        out._backward = _bw
    return out


# -- differentiable warping -------------------------------------------------------

_BASE_GRID_CACHE: dict = {}


def _base_grid(height: int, width: int, dtype) -> np.ndarray:
    """Homogeneous normalized output coordinates, shape (H, W, 3).

    Pixel centers sit at -1 + (2k+1)/extent, so the identity map lands
    exactly on source pixel centers.
    """
    key = (height, width, np.dtype(dtype).str)
    cached = _BASE_GRID_CACHE.get(key)
    if cached is None:
        xs = (-1.0 + (2.0 * np.arange(width) + 1.0) / width).astype(dtype)
        ys = (-1.0 + (2.0 * np.arange(height) + 1.0) / height).astype(dtype)
        gx, gy = np.meshgrid(xs, ys)
        cached = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        _BASE_GRID_CACHE[key] = cached
    return cached


def affine_grid(theta: Tensor, height: int, width: int) -> Tensor:
    """Source sampling coordinates for a batch of 2x3 affine maps.

    theta: (N,2,3) acting on normalized [-1,1] coordinates; the result is
    (N,H,W,2) with x (width axis) first in the last dimension.
    """
    if theta.ndim != 3 or theta.shape[1:] != (2, 3):
        raise ShapeError(f"affine_grid expects theta of shape (N,2,3), got {theta.shape}")
    if height < 2 or width < 2:
        raise ShapeError(f"affine_grid needs extents >= 2, got {height}x{width}")
    base = _base_grid(height, width, theta.data.dtype)
    val = np.einsum("nkm,ijm->nijk", theta.data, base)
    out = _make(val, (theta,))
    if out.requires_grad:
        def _bw():
            theta.grad += np.einsum("nijk,ijm->nkm", out.grad, base)
        out._backward = _bw
    return out


def bilinear_sample(image: Tensor, grid: Tensor) -> Tensor:
    """Bilinear interpolation of `image` at normalized `grid` coordinates.

    image: (N,C,H,W); grid: (N,Ho,Wo,2).  Coordinates outside [-1,1] read
    zero (zero-padding border policy).  Differentiable with respect to both
    the image values and the grid coordinates.
    """
    if image.ndim != 4:
        raise ShapeError(f"bilinear_sample expects 4d image, got {image.shape}")
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample expects grid of shape (N,Ho,Wo,2), got {grid.shape}")
    if grid.shape[0] != image.shape[0]:
        raise ShapeError(
            f"bilinear_sample batch mismatch: image {image.shape} vs grid {grid.shape}"
        )
    n, c, h, w = image.shape
    _, ho, wo, _ = grid.shape

    px = (grid.data[..., 0] + 1.0) * (w / 2.0) - 0.5  # (N,Ho,Wo)
    py = (grid.data[..., 1] + 1.0) * (h / 2.0) - 0.5
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx = px - x0
    wy = py - y0

    flat = image.data.reshape(n, c, h * w)
    nidx = np.arange(n)[:, None, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xc = x0 + dx
        yc = y0 + dy
        valid = (xc >= 0) & (xc < w) & (yc >= 0) & (yc < h)
        lin = np.where(valid, yc * w + xc, 0)
        v = flat[nidx, :, lin] * valid[..., None]  # (N,Ho,Wo,C)
        wgt = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
        corners.append((v, wgt, lin, valid))

    acc = np.zeros((n, ho, wo, c), dtype=image.data.dtype)
    for v, wgt, _, _ in corners:
        acc += v * wgt[..., None]
    out = _make(np.ascontiguousarray(np.moveaxis(acc, 3, 1)), (image, grid))

    if out.requires_grad:
        def _bw():
            g = np.moveaxis(out.grad, 1, 3)  # (N,Ho,Wo,C)
            if image.requires_grad:
                gflat = image.grad.reshape(n, c, h * w)
                ii = np.arange(c)[None, :, None]
                for v, wgt, lin, valid in corners:
                    contrib = np.moveaxis(g * (wgt * valid)[..., None], 3, 1)
                    np.add.at(
                        gflat,
                        (nidx, ii, lin.reshape(n, 1, ho * wo)),
                        contrib.reshape(n, c, ho * wo),
                    )
            if grid.requires_grad:
                (v00, _, _, _), (v01, _, _, _), (v10, _, _, _), (v11, _, _, _) = corners
                dwx = (v01 - v00) * (1.0 - wy)[..., None] + (v11 - v10) * wy[..., None]
                dwy = (v10 - v00) * (1.0 - wx)[..., None] + (v11 - v01) * wx[..., None]
                gx = (g * dwx).sum(axis=-1) * (w / 2.0)
                gy = (g * dwy).sum(axis=-1) * (h / 2.0)
                grid.grad += np.stack([gx, gy], axis=-1)
        out._backward = _bw
    return out
