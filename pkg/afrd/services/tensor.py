"""Reverse-mode autodiff on numpy arrays.

Only the operations the AFRD network needs are provided. Every op records a
backward closure on its output when gradients are enabled and at least one
input requires them; ``Tensor.backward`` walks the recorded graph in reverse
creation order, which is a valid reverse topological order because a node is
always created after its parents.
"""

import contextlib
import itertools
import logging
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from afrd.errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

_SUPPORTED_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32
_grad_state = threading.local()
_counter = itertools.count()


def set_default_dtype(dtype) -> None:
    global _default_dtype
    resolved = np.dtype(dtype).type
    if resolved not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = resolved


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def float64_mode():
    """64-bit arithmetic for gradient checks; restores the previous mode on exit."""
    previous = _default_dtype
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@contextlib.contextmanager
def _relu_patterns():
    """Collect the on/off mask of every relu evaluated in the block."""
    patterns: list[np.ndarray] = []
    _grad_state.relu_patterns = patterns
    try:
        yield patterns
    finally:
        _grad_state.relu_patterns = None


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False, *, name: str = ""):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple["Tensor", ...] = ()
        self._backward: BackwardFn | None = None
        self._released = False
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached: no recorded op depends on a trainable tensor")
        if self._released:
            raise GraphError("backward already ran through this graph; rebuild it after zero_grad")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        for node in nodes.values():
            if node.is_leaf and node.grad is not None:
                raise GraphError(
                    f"gradient of {node.name or 'leaf'} already populated; call zero_grad first"
                )

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = grad.astype(node.data.dtype, copy=True)
                continue
            parent_grads = node._backward(grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pgrad if key not in grads else grads[key] + pgrad
            node._backward = None
            node._released = True
        self._released = True

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(op, axis, f"axis in [{-ndim}, {ndim})", axis)
    return axis % ndim


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        for axis in range(1, min(a.ndim, b.ndim) + 1):
            x, y = a.shape[-axis], b.shape[-axis]
            if x != y and 1 not in (x, y):
                raise ShapeError(op, a.ndim - axis, x, y) from None
        raise


# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _make(x.data * factor, (x,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    patterns = getattr(_grad_state, "relu_patterns", None)
    if patterns is not None:
        patterns.append(mask)

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), backward, "relu")


# reductions and reshaping


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def take(x: Tensor, axis: int, index: int) -> Tensor:
    axis = _check_axis("take", axis, x.ndim)
    if not 0 <= index < x.shape[axis]:
        raise ShapeError("take", axis, f"index < {x.shape[axis]}", index)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        full[tuple(slicer)] = g
        return (full,)

    return _make(out, (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat", axis, "at least one tensor", 0)
    axis = _check_axis("concat", axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError("concat", "ndim", len(ref), t.ndim)
        for ax, (x, y) in enumerate(zip(ref, t.shape)):
            if ax != axis and x != y:
                raise ShapeError("concat", ax, x, y)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


# pooling and resampling


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C]."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", "ndim", 4, x.ndim)
    _, _, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def avg_pool(x: Tensor, kernel: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("avg_pool", "ndim", 4, x.ndim)
    b, c, h, w = x.shape
    if kernel < 1 or h % kernel:
        raise ShapeError("avg_pool", 2, f"multiple of {kernel}", h)
    if w % kernel:
        raise ShapeError("avg_pool", 3, f"multiple of {kernel}", w)
    out = x.data.reshape(b, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
        return (up / (kernel * kernel),)

    return _make(out, (x,), backward, "avg_pool")


def _interp_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    matrix = np.zeros((out_size, in_size), dtype=dtype)
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix


def bilinear_upsample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("bilinear_upsample", "ndim", 4, x.ndim)
    if target_h < 1:
        raise ShapeError("bilinear_upsample", 2, ">= 1", target_h)
    if target_w < 1:
        raise ShapeError("bilinear_upsample", 3, ">= 1", target_w)
    ry = _interp_matrix(target_h, x.shape[2], x.data.dtype)
    rx = _interp_matrix(target_w, x.shape[3], x.data.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _make(out, (x,), backward, "bilinear_upsample")


# parameterised ops


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("linear", "ndim", 2, x.ndim)
    if weight.shape[1] != x.shape[1]:
        raise ShapeError("linear", 1, weight.shape[1], x.shape[1])
    if bias.shape != (weight.shape[0],):
        raise ShapeError("linear", 0, weight.shape[0], bias.shape)
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), backward, "linear")


def _conv_output_size(op: str, axis: int, size: int, kernel: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise ShapeError(op, "stride", ">= 1", stride)
    if kernel > size + 2 * padding:
        raise ShapeError(op, axis, f">= {kernel - 2 * padding}", size)
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x [B, Cin, H, W] * weight [Cout, Cin, kh, kw] -> [B, Cout, H', W']."""
    if x.ndim != 4:
        raise ShapeError("conv2d", "ndim", 4, x.ndim)
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError("conv2d", 1, cin, x.shape[1])
    if bias.shape != (cout,):
        raise ShapeError("conv2d", "bias", (cout,), bias.shape)
    batch, _, h, w = x.shape
    ho = _conv_output_size("conv2d", 2, h, kh, stride, padding)
    wo = _conv_output_size("conv2d", 3, w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # [B, Cin, Ho, Wo, kh, kw]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        # [B, Ho, Wo, Cin, kh, kw]
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """x [B, Cin, H, W] * weight [Cin, Cout, kh, kw] -> [B, Cout, (H-1)*s - 2p + kh, ...]."""
    if x.ndim != 4:
        raise ShapeError("conv_transpose2d", "ndim", 4, x.ndim)
    cin, cout, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError("conv_transpose2d", 1, cin, x.shape[1])
    if bias.shape != (cout,):
        raise ShapeError("conv_transpose2d", "bias", (cout,), bias.shape)
    if stride < 1:
        raise ShapeError("conv_transpose2d", "stride", ">= 1", stride)
    batch, _, h, w = x.shape
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1:
        raise ShapeError("conv_transpose2d", 2, f"output >= 1 with padding {padding}", h)
    if wo < 1:
        raise ShapeError("conv_transpose2d", 3, f"output >= 1 with padding {padding}", w)

    # [B, H, W, Cout, kh, kw]
    contrib = np.tensordot(x.data, weight.data, axes=([1], [0]))
    full = np.zeros((batch, cout, hf, wf), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += contrib[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    out = full[:, :, padding : padding + ho, padding : padding + wo] + bias.data[None, :, None, None]

    def backward(g):
        gfull = np.zeros_like(full)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        # [B, Cout, H, W, kh, kw]
        gcontrib = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][
            :, :, :h, :w
        ]
        gx = np.tensordot(gcontrib, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, gcontrib, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), backward, "conv_transpose2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation; training mode updates the running buffers in place."""
    if x.ndim != 4:
        raise ShapeError("batchnorm2d", "ndim", 4, x.ndim)
    channels = x.shape[1]
    if gamma.shape != (channels,):
        raise ShapeError("batchnorm2d", 1, channels, gamma.shape)
    shape = (1, channels, 1, 1)

    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if training:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            gx = (
                inv_std.reshape(shape)
                / n
                * (
                    n * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return _make(out.astype(x.data.dtype), (x, gamma, beta), backward, "batchnorm2d")


def cosine_map(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-position cosine similarity over the channel axis: [B, C, H, W] -> [B, H, W]."""
    if a.ndim != 4:
        raise ShapeError("cosine_map", "ndim", 4, a.ndim)
    if a.shape != b.shape:
        for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise ShapeError("cosine_map", axis, x, y)
        raise ShapeError("cosine_map", "ndim", a.ndim, b.ndim)
    if eps <= 0:
        raise ValueError("cosine_map eps must be positive")

    dot = (a.data * b.data).sum(axis=1)
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    den = na * nb + eps
    cos = dot / den

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            a_hat = np.where(na[:, None] > 0, a.data / na[:, None], 0.0)
            b_hat = np.where(nb[:, None] > 0, b.data / nb[:, None], 0.0)
        coef = (g / den)[:, None]
        k = (dot / den)[:, None]
        ga = coef * (b.data - k * nb[:, None] * a_hat)
        gb = coef * (a.data - k * na[:, None] * b_hat)
        return ga.astype(a.data.dtype), gb.astype(b.data.dtype)

    return _make(cos, (a, b), backward, "cosine_map")


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    max_checks: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
    skip_kinks: bool = False,
) -> float:
    """Largest elementwise relative error between analytic and central-difference gradients.

    The relative error of one element is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    With ``max_checks`` only that many randomly chosen elements per input are checked.
    With ``skip_kinks`` an element check is dropped when some relu switches between the two
    evaluation points; the difference quotient then spans a kink and is not a derivative.
    """
    targets = [t for t in inputs if t.requires_grad]
    for t in targets:
        t.data = np.ascontiguousarray(t.data)
    zero_grad(targets)
    loss = fn(*inputs)
    loss.backward()
    analytic = [t.grad.copy() for t in targets]
    zero_grad(targets)

    def evaluate() -> tuple[float, list[np.ndarray]]:
        if not skip_kinks:
            return fn(*inputs).item(), []
        with _relu_patterns() as patterns:
            value = fn(*inputs).item()
        return value, patterns

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for tensor, grad in zip(targets, analytic):
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            indices = rng.choice(flat.size, size=max_checks, replace=False)
        for idx in indices:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + eps
                plus, plus_on = evaluate()
                flat[idx] = original - eps
                minus, minus_on = evaluate()
            flat[idx] = original
            checked += 1
            if skip_kinks and not all(np.array_equal(a, b) for a, b in zip(plus_on, minus_on)):
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * eps)
            exact = float(grad.reshape(-1)[idx])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, err)
    if skipped:
        logger.debug("gradcheck skipped %d of %d checks straddling a relu kink", skipped, checked)
    return worst
