"""
Dense tensors with reverse-mode automatic differentiation.

Each differentiable op computes its forward value with numpy and, when an
input requires a gradient, attaches a TapeNode to its output holding the
parent tensors and a backward closure. ``backward`` walks the recorded graph
in reverse topological order and stores a gradient on every tensor that
requires one, intermediates included.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import DEFAULT_DTYPE, DEFAULT_LEAKY_SLOPE, PROBABILITY_EPSILON
from errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class TapeNode:
    """Graph record of one op application.

    The backward closure holds whatever forward values the rule needs and maps
    the output gradient to one gradient per parent (None for parents that do
    not need one).
    """
    op: str
    parents: Tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    consumed: bool = False


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if array.dtype.type not in _FLOAT_TYPES:
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.name = name

    # Introspection
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name='{self.name}'" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operators
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as non-differentiable tensors, matching ``like``'s dtype."""
    if isinstance(value, Tensor):
        return value
    if like is not None:
        return Tensor(np.asarray(value, dtype=like.dtype))
    return Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out.node = TapeNode(op=op, parents=tuple(parents), backward_fn=backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} cannot be broadcast together") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), "add", backward_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), "sub", backward_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def backward_fn(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), "mul", backward_fn)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise NonFiniteError("op 'div' received a zero divisor")

    def backward_fn(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(a.data / b.data, (a, b), "div", backward_fn)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), "neg", lambda g: (-g,))


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return Tensor(a), Tensor(b)


def broadcast_hadamard(features: Tensor, mask: Tensor) -> Tensor:
    """Multiply ``[..., C, H, W]`` features by a ``[..., 1, H, W]`` mask shared across channels."""
    if mask.ndim < 3 or features.ndim < 3:
        raise ShapeError(f"broadcast_hadamard: expected [..., C, H, W] operands, got {features.shape} and {mask.shape}")
    if mask.shape[-3] != 1:
        raise ShapeError(f"broadcast_hadamard: mask channel dimension must be 1, got {mask.shape[-3]}")
    if mask.shape[-2:] != features.shape[-2:]:
        raise ShapeError(
            f"broadcast_hadamard: spatial extent {mask.shape[-2:]} of mask does not match features {features.shape[-2:]}")
    return mul(features, mask)


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, (a, b), "matmul", backward_fn)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", backward_fn)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), "mean", backward_fn)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _record(data, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),))


def index_select(a: Tensor, index) -> Tensor:
    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), "index", backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors given")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    return _record(data, tuple(tensors), "concat", backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack: no tensors given")

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    return _record(data, tuple(tensors), "stack", backward_fn)


# ---------------------------------------------------------------------------
# Pointwise functions
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("op 'log' received a non-positive input")
    return _record(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    return _record(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function; saturated outputs are held strictly inside (0, 1)."""
    x = a.data
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    out[~positive] = ex / (1.0 + ex)
    one = np.ones((), dtype=out.dtype)
    out = np.clip(out, np.finfo(out.dtype).tiny, np.nextafter(one, np.zeros((), dtype=out.dtype)))
    return _record(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _record(np.where(active, a.data, 0).astype(a.dtype), (a,), "relu", lambda g: (g * active,))


def leaky_relu(a: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _record(a.data * scale, (a,), "leaky_relu", lambda g: (g * scale,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, (a,), "softmax", backward_fn)


def cross_entropy(probs: Tensor, target: ArrayLike) -> Tensor:
    """Cross-entropy of probability rows against one-hot (or soft) targets.

    Probabilities are clamped to ``[PROBABILITY_EPSILON, 1]`` before the log.
    Below the clamp the gradient passes straight through as -t / epsilon, so a
    confidently wrong prediction still gets a push toward its target.
    Batched input returns the mean over rows.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise ShapeError(f"cross_entropy: target shape {t.shape} does not match probabilities {probs.shape}")
    clamped = np.clip(probs.data, PROBABILITY_EPSILON, 1.0)
    rows = 1 if probs.ndim == 1 else int(np.prod(probs.shape[:-1]))
    loss = -np.sum(t * np.log(clamped)) / rows

    def backward_fn(g):
        return (g * (-t / clamped) / rows,)

    return _record(np.asarray(loss, dtype=probs.dtype), (probs,), "cross_entropy", backward_fn)


def l1_distance(a: Tensor, b: ArrayLike) -> Tensor:
    """Sum of absolute differences."""
    return tensor_sum(absolute(sub(a, b)))


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the identity when ``p == 0`` or outside training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _record(a.data * keep, (a,), "dropout", lambda g: (g * keep,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``weight`` of shape [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} do not match weight in-features {weight.shape[1]}")
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------------------
# Spatial ops on [N, C, H, W]
# ---------------------------------------------------------------------------

def _as_batched(x: Tensor, op: str) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected [N, C, H, W] or [C, H, W] input, got {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is [N, C_in, H, W] (or unbatched [C_in, H, W]); ``weight`` is
    [C_out, C_in, kh, kw]; ``bias`` is [C_out].
    """
    x, squeeze = _as_batched(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [C_out, C_in, kh, kw], got {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, w_in, kh, kw = weight.shape
    if c_in != w_in:
        raise ShapeError(f"conv2d: input channels {c_in} do not match weight in-channels {w_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match out-channels {c_out}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input extent {hp}x{wp}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [N, H', W', C_in * kh * kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out, w_out, c_in * kh * kw)
    w_flat = weight.data.reshape(c_out, -1)
    out = cols @ w_flat.T
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 3, 1, 2)

    def backward_fn(g):
        g_nhwc = g.transpose(0, 2, 3, 1)
        g_weight = np.tensordot(g_nhwc, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(weight.shape)
        g_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        g_cols = (g_nhwc @ w_flat).reshape(n, h_out, w_out, c_in, kh, kw)
        g_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                g_padded[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                    g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        g_x = g_padded[:, :, padding:padding + h, padding:padding + w]
        grads = (g_x, g_weight)
        return grads + ((g_bias,) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    result = _record(out, parents, "conv2d", backward_fn)
    return reshape(result, result.shape[1:]) if squeeze else result


def channel_max_pool(x: Tensor) -> Tensor:
    """Max over the channel axis of [..., C, H, W], keeping a singleton channel.

    Gradient goes to the first maximal channel.
    """
    if x.ndim < 3:
        raise ShapeError(f"channel_max_pool: expected [..., C, H, W], got {x.shape}")
    winner = np.argmax(x.data, axis=-3)[..., None, :, :]
    out = np.take_along_axis(x.data, winner, axis=-3)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, winner, g, axis=-3)
        return (full,)

    return _record(out, (x,), "channel_max_pool", backward_fn)


def _pool_windows(x: Tensor, kernel: Tuple[int, int], op: str):
    kh, kw = kernel
    n, c, h, w = x.shape
    if kh < 1 or kw < 1 or kh > h or kw > w:
        raise ShapeError(f"{op}: window {kh}x{kw} does not fit input extent {h}x{w}")
    ho, wo = h // kh, w // kw
    cropped = x.data[:, :, :ho * kh, :wo * kw]
    return cropped.reshape(n, c, ho, kh, wo, kw), (ho, wo)


def avg_pool2d(x: Tensor, kernel: Union[int, Tuple[int, int]]) -> Tensor:
    """Non-overlapping average pooling; trailing rows and columns that do not fill a window are dropped."""
    kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    x, squeeze = _as_batched(x, "avg_pool2d")
    windows, (ho, wo) = _pool_windows(x, kernel, "avg_pool2d")
    kh, kw = kernel

    def backward_fn(g):
        full = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g / (kh * kw), kh, axis=2), kw, axis=3)
        full[:, :, :ho * kh, :wo * kw] = spread
        return (full,)

    result = _record(windows.mean(axis=(3, 5)), (x,), "avg_pool2d", backward_fn)
    return reshape(result, result.shape[1:]) if squeeze else result


def max_pool2d(x: Tensor, kernel: Union[int, Tuple[int, int]]) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    x, squeeze = _as_batched(x, "max_pool2d")
    windows, (ho, wo) = _pool_windows(x, kernel, "max_pool2d")
    kh, kw = kernel
    n, c = x.shape[:2]
    flat = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kh * kw)
    winner = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        scattered = np.zeros_like(flat)
        np.put_along_axis(scattered, winner[..., None], g[..., None], axis=-1)
        block = scattered.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kh, wo * kw)
        full = np.zeros_like(x.data)
        full[:, :, :ho * kh, :wo * kw] = block
        return (full,)

    result = _record(out, (x,), "max_pool2d", backward_fn)
    return reshape(result, result.shape[1:]) if squeeze else result


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be positive, got {factor}")
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2:]

    def backward_fn(g):
        blocks = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (blocks.sum(axis=(-3, -1)),)

    return _record(out, (x,), "upsample_nearest", backward_fn)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor the scalar ``loss`` depends on.

    Leaf gradients accumulate across calls until cleared; a graph can only be
    walked once.
    """
    if loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires a gradient")
    if loss.node is not None and loss.node.consumed:
        raise TapeError("this graph was already differentiated; run a fresh forward pass first")

    order = _topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(order):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            op = tensor.node.op if tensor.node else "leaf"
            raise NonFiniteError(f"non-finite gradient reached the output of '{op}'")
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        node = tensor.node
        if node is None:
            continue
        parent_grads = node.backward_fn(grad)
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=parent.dtype)
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        node.consumed = True


def zero_grad(params: Sequence[Tensor]) -> None:
    for param in params:
        param.grad = None
