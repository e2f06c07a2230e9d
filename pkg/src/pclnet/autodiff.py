"""Minimal dense-tensor engine with a recording tape and reverse-mode gradients.

Every forward op that touches a tensor with ``requires_grad`` appends a node to
the thread's active :class:`Tape`.  :func:`backward` replays that tape in
reverse and leaves gradients on the leaf tensors.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()

_DEFAULT_DTYPE = np.float64
LEAKY_SLOPE = 0.1


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense real array that can take part in a recorded computation."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Node:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of the operations executed since the last backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


@contextlib.contextmanager
def use_tape(tape: Tape | None = None):
    """Route recording to ``tape`` (a fresh one by default) for the block."""
    tape = tape if tape is not None else Tape()
    prev = getattr(_state, "tape", None)
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        node = Node(tuple(inputs), out, backward_fn, name)
        out._node = node
        current_tape().record(node)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients are overwritten, not accumulated across calls.  The tape is
    consumed.
    """
    if loss.data.size != 1 or loss.data.ndim != 4:
        raise ValueError(f"backward needs a 1x1x1x1 loss, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    if not tape.nodes:
        raise ValueError("backward called on an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.dtype != t.data.dtype:
                gi = gi.astype(t.data.dtype)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t
    for key, g in grads.items():
        t = owners[key]
        if t._node is None:
            t.grad = g
    tape.reset()


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _result(x.data + c, (x,), lambda g: (g,), "add_scalar")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)
    return _result(out, (x,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    out = xd**p
    return _result(out, (x,), lambda g: (g * p * xd ** (p - 1.0),), "power")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# ---------------------------------------------------------------------------
# reductions and per-channel broadcasting


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.sum(x.data).reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    out = (np.sum(x.data) / n).reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.full(shape, g.reshape(()) / n, dtype=x.dtype),), "mean")


def channel_sum(x: Tensor) -> Tensor:
    """Sum over the channel axis, keeping it as a singleton."""
    shape = x.shape
    out = x.data.sum(axis=1, keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "channel_sum")


def channel_mul(x: Tensor, w: Tensor) -> Tensor:
    """Multiply each channel of ``x`` (N,C,H,W) by the matching entry of ``w`` (C,)."""
    if w.data.ndim != 1 or w.shape[0] != x.shape[1]:
        raise ValueError(f"channel_mul: weight shape {w.shape} does not match channels {x.shape[1]}")
    wd = w.data.reshape(1, -1, 1, 1)
    xd = x.data

    def back(g):
        return g * wd, (g * xd).sum(axis=(0, 2, 3))

    return _result(xd * wd, (x, w), back, "channel_mul")


def channel_add(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ValueError(f"channel_add: bias shape {b.shape} does not match channels {x.shape[1]}")
    out = x.data + b.data.reshape(1, -1, 1, 1)
    return _result(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))), "channel_add")


# ---------------------------------------------------------------------------
# structural


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty list")
    if len(xs) == 1:
        x = xs[0]
        return _result(x.data.copy(), (x,), lambda g: (g,), "concat")
    ref = xs[0].shape
    for x in xs[1:]:
        for d in range(4):
            if d != axis and x.shape[d] != ref[d]:
                raise ValueError(f"concat: dimension {d} mismatch {x.shape} vs {ref}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, back, "concat")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis``."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(x.data[index].copy(), (x,), back, "narrow")


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    out, start = [], 0
    for s in sizes:
        out.append(narrow(x, axis, start, start + s))
        start += s
    if start != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# spatial


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding (the usual CNN convolution)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ValueError(f"conv2d: input channels {c} != weight in-channels {cin}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} dilation={dilation} padding={padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != out-channels ({cout},)")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: height/width {h}x{w} too small for kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1

    def im2col():
        # laid out as (C, kh, kw, N, Ho, Wo) so one GEMM covers the batch
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
        xpt = xp.transpose(1, 0, 2, 3)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xpt[:, :, i * dilation : i * dilation + hspan : stride,
                                    j * dilation : j * dilation + wspan : stride]
        return cols.reshape(c * kh * kw, n * ho * wo)

    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ im2col()).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        # columns are rebuilt here so the tape holds the padded input, not k*k copies of it
        gw = (g2 @ im2col().T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * dilation : i * dilation + hspan : stride,
                        j * dilation : j * dilation + wspan : stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, back, "conv2d")


def separable_linear(x: Tensor, rows: np.ndarray, cols: np.ndarray, name: str = "separable") -> Tensor:
    """Apply fixed matrices along height and width: ``rows @ x[n, c] @ cols.T``.

    Pooling, bilinear resizing and nearest tiling are all instances of this.
    """
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    if rows.shape[1] != x.shape[2] or cols.shape[1] != x.shape[3]:
        raise ValueError(f"{name}: operator shapes {rows.shape}/{cols.shape} do not fit input {x.shape}")
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _result(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),), name)


def _pool_matrix(n: int, window: int, stride: int) -> np.ndarray:
    m = (n - window) // stride + 1
    a = np.zeros((m, n))
    for i in range(m):
        a[i, i * stride : i * stride + window] = 1.0 / window
    return a


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Mean over ``window``x``window`` patches; trailing partial windows are dropped."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError(f"avg_pool2d: window ({window}) and stride ({stride}) must be >= 1")
    _, _, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"avg_pool2d: window {window} larger than extent {h}x{w}")
    return separable_linear(x, _pool_matrix(h, window, stride), _pool_matrix(w, window, stride), "avg_pool2d")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred (align-corners-false) linear resampling operator."""
    a = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        a[o, i0] += 1.0 - f
        a[o, i1] += f
    return a


def upsample2x_bilinear(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    return separable_linear(x, bilinear_matrix(h, 2 * h), bilinear_matrix(w, 2 * w), "upsample2x_bilinear")


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _, _, h, w = x.shape
    return separable_linear(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w), "resize_bilinear")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    eps: float = 1e-5,
    tol: float | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``fn(*inputs)`` must return a 1x1x1x1 tensor.  ``tol`` is accepted for
    call-site symmetry; the caller decides what counts as failure.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with use_tape():
        loss = fn(*inputs)
        backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = fn(*inputs).item()
                flat[k] = orig - eps
                fm = fn(*inputs).item()
                flat[k] = orig
                num = (fp - fm) / (2.0 * eps)
                ana = a.reshape(-1)[k]
                denom = max(abs(ana), abs(num), 1e-8)
                worst = max(worst, abs(ana - num) / denom)
    return worst
