"""Dense tensors with reverse-mode automatic differentiation.

Only the operators the CAS-CNN graph needs are provided: 3x3 convolution,
4x4/2 transposed convolution, 2x2 average pooling, 2x nearest upsampling,
channel concatenation, PReLU, MSE and a few scalar helpers used to combine
losses. Activations use the NCHW layout.

Forward and backward run in whatever float dtype the data carries (float32
by default). :func:`grad_check` re-runs an operator in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class no_grad:
    """Context manager that stops operators from recording the graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    """Raised when operator inputs have incompatible shapes."""

    def __init__(self, op: str, message: str, shapes: Sequence[tuple] = ()):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        detail = f" (shapes: {', '.join(map(str, self.shapes))})" if shapes else ""
        super().__init__(f"{op}: {message}{detail}")


class Tensor:
    """N-D float array that can record the operation that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=False)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError("Tensor", "all dimensions must be >= 1", [arr.shape])
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

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
            raise ShapeError("item", "tensor is not a scalar", [self.shape])
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def _accumulate(self, g: np.ndarray, fresh: bool = False) -> None:
        # fresh: g was allocated by the caller and may be adopted without a copy
        if self.grad is None:
            if fresh and g.dtype == self.data.dtype and g.flags.c_contiguous:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True, order="C")
        else:
            self.grad += g

    def backward(self) -> None:
        """Back-propagate from this scalar through the recorded graph.

        Gradients are added into ``.grad`` of every tensor that requires one,
        so a value consumed by several operators receives the sum of all
        partial gradients.
        """
        if self.data.size != 1:
            raise ShapeError("backward", "loss must be a scalar", [self.shape])
        order = _topological_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rank4(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(op, "expected a 4-D [N,C,H,W] tensor", [x.shape])


# ---------------------------------------------------------------------------
# raw kernels on numpy arrays

_BAND_FLOATS = 1 << 20  # im2col working set per band; keeps the buffer cache-resident


def _padded_nhwc(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    return xp


def _bands(xp: np.ndarray):
    """Yield (image, row0, row1, patch rows [rows*W, 9*C]) over a padded NHWC array.

    The patch buffer is reused between bands; consume it before advancing.
    """
    n, hp, wp, c = xp.shape
    h, w = hp - 2, wp - 2
    rows = max(1, min(h, _BAND_FLOATS // (w * 9 * c)))
    buf = np.empty((rows, w, 9, c), dtype=xp.dtype)
    for i in range(n):
        for r0 in range(0, h, rows):
            r1 = min(h, r0 + rows)
            cb = buf[:r1 - r0]
            for ki in range(3):
                for kj in range(3):
                    cb[:, :, 3 * ki + kj, :] = xp[i, r0 + ki:r1 + ki, kj:kj + w, :]
            yield i, r0, r1, cb.reshape((r1 - r0) * w, 9 * c)


def _conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlation with a 3x3 kernel and zero padding 1 (no bias)."""
    n, c, h, wd = x.shape
    cout = w.shape[0]
    wmat = w.transpose(2, 3, 1, 0).reshape(9 * c, cout)
    out = np.empty((n, h, wd, cout), dtype=x.dtype)
    for i, r0, r1, cols in _bands(_padded_nhwc(x)):
        np.matmul(cols, wmat, out=out[i, r0:r1].reshape(-1, cout))
    return out.transpose(0, 3, 1, 2)


def _conv3x3_weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    c = x.shape[1]
    cout = g.shape[1]
    gl = g.transpose(0, 2, 3, 1)
    gw = np.zeros((cout, 9 * c), dtype=x.dtype)
    for i, r0, r1, cols in _bands(_padded_nhwc(x)):
        gw += gl[i, r0:r1].reshape(-1, cout).T @ cols
    return gw.reshape(cout, 3, 3, c).transpose(0, 3, 1, 2)


def _tconv4x4(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-2, padding-1 transposed convolution with a [Cin,Cout,4,4] kernel."""
    n, cin, h, wd = x.shape
    cout = w.shape[1]
    xf = x.transpose(0, 2, 3, 1).reshape(n * h * wd, cin)
    wmat = w.transpose(0, 2, 3, 1).reshape(cin, 16 * cout)
    stamps = (xf @ wmat).reshape(n, h, wd, 4, 4, cout)
    full = np.zeros((n, 2 * h + 2, 2 * wd + 2, cout), dtype=x.dtype)
    for ki in range(4):
        for kj in range(4):
            full[:, ki:ki + 2 * h:2, kj:kj + 2 * wd:2, :] += stamps[:, :, :, ki, kj, :]
    return full[:, 1:2 * h + 1, 1:2 * wd + 1, :].transpose(0, 3, 1, 2)


def _tconv4x4_gather(g: np.ndarray) -> np.ndarray:
    """Rows of 4x4 stride-2 windows of the padded cotangent: [N*H*W, Cout*16]."""
    n, cout, h2, w2 = g.shape
    gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(gp, (4, 4), axis=(2, 3))[:, :, ::2, ::2]  # N,Cout,H,W,4,4
    h, wd = h2 // 2, w2 // 2
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, cout * 16)


# ---------------------------------------------------------------------------
# differentiable operators

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1; spatial size is preserved."""
    _check_rank4("conv2d", x)
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError("conv2d", "weight must be [Cout,Cin,3,3]", [weight.shape])
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}",
                         [x.shape, weight.shape])
    cout = weight.shape[0]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d", f"bias must have shape ({cout},)", [bias.shape])
    out = _conv3x3(x.data, weight.data)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            flipped = weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
            x._accumulate(_conv3x3(g, flipped))
        if weight.requires_grad:
            weight._accumulate(_conv3x3_weight_grad(x.data, g))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv2d", parents, backward)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """4x4 transposed convolution with stride 2 and padding 1: [N,Cin,H,W] -> [N,Cout,2H,2W].

    Every input pixel scatters a 4x4 stamp, weighted by the kernel, onto the
    output at stride 2; the outermost ring of the scattered image is cropped.
    """
    _check_rank4("transposed_conv2d", x)
    if weight.data.ndim != 4 or weight.shape[2:] != (4, 4):
        raise ShapeError("transposed_conv2d", "weight must be [Cin,Cout,4,4]", [weight.shape])
    if x.shape[1] != weight.shape[0]:
        raise ShapeError("transposed_conv2d",
                         f"input has {x.shape[1]} channels, weight expects {weight.shape[0]}",
                         [x.shape, weight.shape])
    cout = weight.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("transposed_conv2d", f"bias must have shape ({cout},)", [bias.shape])
    out = _tconv4x4(x.data, weight.data)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    n, cin, h, wd = x.shape

    def backward(g: np.ndarray) -> None:
        rows = _tconv4x4_gather(g)
        if x.requires_grad:
            gx = rows @ weight.data.reshape(cin, cout * 16).T
            x._accumulate(gx.reshape(n, h, wd, cin).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            xf = x.data.transpose(1, 0, 2, 3).reshape(cin, n * h * wd)
            weight._accumulate((xf @ rows).reshape(cin, cout, 4, 4))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "transposed_conv2d", parents, backward)


def avg_pool_2x2(x: Tensor) -> Tensor:
    """Mean over disjoint 2x2 blocks."""
    _check_rank4("avg_pool_2x2", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool_2x2", "height and width must be even", [x.shape])
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g: np.ndarray) -> None:
        share = (g * 0.25)[:, :, :, None, :, None]
        x._accumulate(np.broadcast_to(share, (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w))

    return _result(out, "avg_pool_2x2", (x,), backward)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    _check_rank4("upsample_nearest_2x", x)
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)), fresh=True)

    return _result(np.ascontiguousarray(out), "upsample_nearest_2x", (x,), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis in argument order."""
    if not parts:
        raise ShapeError("concat_channels", "need at least one part")
    for p in parts:
        _check_rank4("concat_channels", p)
    ref = parts[0].shape
    if any(p.shape[0] != ref[0] or p.shape[2:] != ref[2:] for p in parts):
        raise ShapeError("concat_channels", "parts disagree in batch or spatial size",
                         [p.shape for p in parts])
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _result(out, "concat_channels", tuple(parts), backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Rectifier with one learnable negative-side slope per channel."""
    _check_rank4("prelu", x)
    if slope.shape != (x.shape[1],):
        raise ShapeError("prelu", f"slope length must equal channel count {x.shape[1]}",
                         [x.shape, slope.shape])
    a = slope.data[None, :, None, None]
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.where(neg, a * g, g), fresh=True)
        if slope.requires_grad:
            slope._accumulate(np.where(neg, g * x.data, 0).sum(axis=(0, 2, 3)))

    return _result(out, "prelu", (x, slope), backward)


def mse(pred: Tensor, ref: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    pred, ref = as_tensor(pred), as_tensor(ref)
    if pred.shape != ref.shape:
        raise ShapeError("mse", "prediction and reference differ in shape", [pred.shape, ref.shape])
    diff = pred.data - ref.data.astype(pred.dtype, copy=False)
    out = np.array([np.mean(diff * diff)], dtype=pred.dtype)

    def backward(g: np.ndarray) -> None:
        scaled = diff * (2.0 * g[0] / diff.size)
        if pred.requires_grad:
            pred._accumulate(scaled, fresh=True)
        if ref.requires_grad:
            ref._accumulate(-scaled)

    return _result(out, "mse", (pred, ref), backward)


def add(*terms: Tensor) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    shape = terms[0].shape
    if any(t.shape != shape for t in terms):
        raise ShapeError("add", "terms differ in shape", [t.shape for t in terms])
    out = terms[0].data.copy()
    for t in terms[1:]:
        out += t.data

    def backward(g: np.ndarray) -> None:
        for t in terms:
            if t.requires_grad:
                t._accumulate(g)

    return _result(out, "add", terms, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.data.dtype.type(factor)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * factor)

    return _result(out, "scale", (x,), backward)


def mean_of(terms: Sequence[Tensor]) -> Tensor:
    """Unweighted arithmetic mean of equally shaped tensors."""
    return scale(add(*terms), 1.0 / len(terms))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 1-element tensor."""
    out = np.array([x.data.sum()], dtype=x.dtype)

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(g[0], x.shape))

    return _result(out, "total", (x,), backward)


def dot(x: Tensor, u: np.ndarray) -> Tensor:
    """Inner product with a constant array of the same shape."""
    if x.shape != u.shape:
        raise ShapeError("dot", "operands differ in shape", [x.shape, u.shape])
    u = u.astype(x.dtype, copy=False)
    out = np.array([np.vdot(x.data, u)], dtype=x.dtype)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g[0] * u)

    return _result(out, "dot", (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
               seed: int = 0, floor: float = 1e-8, wrt: Sequence[int] | None = None) -> float:
    """Largest relative error between backward() and central differences.

    ``op`` maps Tensors to a Tensor. A non-scalar output is reduced with a
    fixed random cotangent so every output element contributes. Both the
    analytic and the numeric gradient are computed in float64.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = op(*[Tensor(a) for a in arrays])
    cot = np.random.default_rng(seed).standard_normal(probe.shape)

    def objective(arrs: Sequence[np.ndarray]) -> float:
        return float(np.vdot(op(*[Tensor(a) for a in arrs]).data, cot))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    dot(op(*leaves), cot).backward()

    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        numeric = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = objective(arrays)
            flat[j] = keep - eps
            down = objective(arrays)
            flat[j] = keep
            nflat[j] = (up - down) / (2 * eps)
        worst = max(worst, float(relative_error(analytic, numeric, floor).max()))
    return worst
