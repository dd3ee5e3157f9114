"""Reverse-mode automatic differentiation over dense numpy tensors.

Tensors are immutable once produced by an op. Every op records its backward
rule on the output tensor; ``backward(loss)`` replays the recorded graph in
reverse creation order, which is a valid topological order because tensors
are created strictly after their inputs.

Image tensors use the (N, C, H, W) layout. f32 is the working dtype for
training; gradient checks run in f64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / constants)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_tid_counter = 0


def _next_tid() -> int:
    global _tid_counter
    _tid_counter += 1
    return _tid_counter


class Tensor:
    """Dense n-d array with an optional gradient buffer.

    ``data`` is owned by the tensor and must not be mutated after creation,
    except for leaf parameters updated between optimizer steps and running
    statistics buffers.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_tid", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._tid = _next_tid()
        self._inputs = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}, op={self.op})"


def _make_result(data, op: str, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out._inputs = tuple(inputs)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g) -> None:
    # Never mutate an incoming gradient array: it may be shared between
    # branches (e.g. both parents of an add receive the same object).
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make_result(a.data + b.data, "add", (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make_result(a.data - b.data, "sub", (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward_fn(g):
        _accumulate(a, g * bd)
        _accumulate(b, g * ad)

    return _make_result(ad * bd, "mul", (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data

    def backward_fn(g):
        _accumulate(a, g / bd)
        _accumulate(b, -g * ad / (bd * bd))

    return _make_result(ad / bd, "div", (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def backward_fn(g):
        _accumulate(a, g * c)

    return _make_result(a.data * c, "scale", (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input (clamp first)")
    ad = a.data

    def backward_fn(g):
        _accumulate(a, g / ad)

    return _make_result(np.log(ad), "log", (a,), backward_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)

    def backward_fn(g):
        _accumulate(a, g * mask)

    return _make_result(np.clip(a.data, lo, hi), "clamp", (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward_fn(g):
        _accumulate(a, g * mask)

    return _make_result(np.where(mask, a.data, 0), "relu", (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic; output clipped strictly inside (0, 1)."""
    x = a.data
    t = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    info = np.finfo(x.dtype)
    one = x.dtype.type(1.0)
    s = np.clip(s, info.tiny, np.nextafter(one, x.dtype.type(0.0)))

    def backward_fn(g):
        _accumulate(a, g * s * (1.0 - s))

    return _make_result(s, "sigmoid", (a,), backward_fn)


# ---------------------------------------------------------------------------
# spatial ops


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp, kh, kw, sy, sx, ho, wo):
    """Gather sliding-window patches into (N, C*kh*kw, ho*wo) columns."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * sy, sw * sx),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols, out_shape, kh, kw, sy, sx, ho, wo):
    """Scatter-add columns back to an image; adjoint of _im2col."""
    n, c, hp, wp = out_shape
    out = np.zeros(out_shape, dtype=cols.dtype)
    cc = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sy * ho : sy, j : j + sx * wo : sx] += cc[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=(1, 1), pad=(0, 0)) -> Tensor:
    """Cross-correlation with zero padding; gradients for x, w and b."""
    sy, sx = _pair(stride)
    py, px = _pair(pad)
    n, cin, h, wdt = x.shape
    cout, cw, kh, kw = w.shape
    if cw != cin:
        raise ValueError(f"conv2d: channel mismatch, input {cin} vs kernel {cw}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape}, expected ({cout},)")
    ho = (h + 2 * py - kh) // sy + 1
    wo = (wdt + 2 * px - kw) // sx + 1
    if ho <= 0 or wo <= 0 or h + 2 * py < kh or wdt + 2 * px < kw:
        raise ValueError(f"conv2d: non-positive output extent for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (py, py), (px, px))) if (py or px) else x.data
    cols = _im2col(xp, kh, kw, sy, sx, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols) + b.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)

    def backward_fn(g):
        g2 = g.reshape(n, cout, ho * wo)
        _accumulate(b, g2.sum(axis=(0, 2)))
        _accumulate(w, np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gxp = _col2im(gcols, xp.shape, kh, kw, sy, sx, ho, wo)
            gx = gxp[:, :, py : py + h, px : px + wdt] if (py or px) else gxp
            _accumulate(x, gx)

    return _make_result(out, "conv2d", (x, w, b), backward_fn)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor, stride=(1, 1), pad=(0, 0)) -> Tensor:
    """Adjoint of conv2d's forward map; weight layout (Cin, Cout, kh, kw)."""
    sy, sx = _pair(stride)
    py, px = _pair(pad)
    n, cin, h, wdt = x.shape
    cw, cout, kh, kw = w.shape
    if cw != cin:
        raise ValueError(f"conv2d_transpose: channel mismatch, input {cin} vs kernel {cw}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d_transpose: bias shape {b.shape}, expected ({cout},)")
    hf = (h - 1) * sy - 2 * py + kh
    wf = (wdt - 1) * sx - 2 * px + kw
    if hf <= 0 or wf <= 0:
        raise ValueError(f"conv2d_transpose: non-positive output extent for input {x.shape}")
    x2 = x.data.reshape(n, cin, h * wdt)
    wmat = w.data.reshape(cin, cout * kh * kw)
    cols = np.matmul(wmat.T, x2)
    outp = _col2im(cols, (n, cout, hf + 2 * py, wf + 2 * px), kh, kw, sy, sx, h, wdt)
    out = outp[:, :, py : py + hf, px : px + wf] if (py or px) else outp
    out = out + b.data.reshape(1, cout, 1, 1)

    def backward_fn(g):
        _accumulate(b, g.sum(axis=(0, 2, 3)))
        gp = np.pad(g, ((0, 0), (0, 0), (py, py), (px, px))) if (py or px) else g
        gcols = _im2col(gp, kh, kw, sy, sx, h, wdt)
        _accumulate(w, np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(w.shape))
        if x.requires_grad:
            _accumulate(x, np.matmul(wmat, gcols).reshape(n, cin, h, wdt))

    return _make_result(out, "conv2d_transpose", (x, w, b), backward_fn)


def maxpool2d(x: Tensor):
    """2x2/stride-2 max pooling.

    Returns (pooled, indices) where indices holds the flat position of each
    window's argmax within its (H, W) plane. Ties resolve to the first
    element in row-major scan order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d: odd spatial extent {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    )
    k = windows.argmax(axis=4)
    out = np.take_along_axis(windows, k[..., None], axis=4)[..., 0]
    rows = 2 * np.arange(ho).reshape(1, 1, ho, 1) + k // 2
    cols = 2 * np.arange(wo).reshape(1, 1, 1, wo) + k % 2
    indices = (rows * w + cols).astype(np.int64)

    def backward_fn(g):
        if not x.requires_grad:
            return
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        # windows are disjoint, so positions are unique per plane
        np.put_along_axis(gx, indices.reshape(n, c, ho * wo), g.reshape(n, c, ho * wo), axis=2)
        _accumulate(x, gx.reshape(n, c, h, w))

    return _make_result(out, "maxpool2d", (x,), backward_fn), indices


def maxunpool2d(x: Tensor, indices: np.ndarray, out_hw) -> Tensor:
    """Place x's values at the recorded positions of a 2x2 pooling; zeros elsewhere."""
    n, c, ho, wo = x.shape
    h, w = int(out_hw[0]), int(out_hw[1])
    if indices.shape != x.shape:
        raise ValueError(f"maxunpool2d: indices shape {indices.shape} != input shape {x.shape}")
    if indices.min() < 0 or indices.max() >= h * w:
        raise ValueError(f"maxunpool2d: index out of bounds for {h}x{w} output")
    flat = indices.reshape(n, c, ho * wo)
    out = np.zeros((n, c, h * w), dtype=x.dtype)
    np.put_along_axis(out, flat, x.data.reshape(n, c, ho * wo), axis=2)

    def backward_fn(g):
        if not x.requires_grad:
            return
        gathered = np.take_along_axis(g.reshape(n, c, h * w), flat, axis=2)
        _accumulate(x, gathered.reshape(x.shape))

    return _make_result(out.reshape(n, c, h, w), "maxunpool2d", (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(f"concat_channels: extent mismatch {a.shape} vs {b.shape}")

    def backward_fn(g):
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return _make_result(np.concatenate([a.data, b.data], axis=1), "concat", (a, b), backward_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(g):
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make_result(out, "upsample2x", (x,), backward_fn)


def expand_channels(x: Tensor, channels: int) -> Tensor:
    """Tile a single-channel map across `channels` channels."""
    n, c, h, w = x.shape
    if c != 1:
        raise ValueError(f"expand_channels: expected 1 channel, got {c}")

    def backward_fn(g):
        _accumulate(x, g.sum(axis=1, keepdims=True))

    return _make_result(np.repeat(x.data, channels, axis=1), "expand", (x,), backward_fn)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode normalizes with the running buffers. The
    backward pass differentiates through the batch mean and variance.
    """
    n, c, h, w = x.shape
    for t, name in ((gamma, "gamma"), (beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")):
        if t.shape != (c,):
            raise ValueError(f"batchnorm2d: {name} shape {t.shape}, expected ({c},)")
    gview = gamma.data.reshape(1, c, 1, 1)
    bview = beta.data.reshape(1, c, 1, 1)
    if train:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gview * xhat + bview

        def backward_fn(g):
            gsum = g.sum(axis=(0, 2, 3))
            gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
            _accumulate(gamma, gxhat_sum)
            _accumulate(beta, gsum)
            if x.requires_grad:
                coeff = (gamma.data * inv_std).reshape(1, c, 1, 1)
                gx = coeff * (
                    g
                    - gsum.reshape(1, c, 1, 1) / m
                    - xhat * gxhat_sum.reshape(1, c, 1, 1) / m
                )
                _accumulate(x, gx)

    else:
        inv_std = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gview * xhat + bview

        def backward_fn(g):
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                _accumulate(x, g * (gamma.data * inv_std).reshape(1, c, 1, 1))

    return _make_result(out, "batchnorm2d", (x, gamma, beta), backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(x, np.full(x.shape, g, dtype=x.dtype))

    return _make_result(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass


def schedule(root: Tensor) -> list:
    """Recorded nodes reachable from root, in creation (execution) order."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._inputs)
    nodes.sort(key=lambda t: t._tid)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    nodes = schedule(loss)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(nodes):
        if t.grad is not None:
            t._backward(t.grad)
