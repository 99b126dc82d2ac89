"""Dense float32 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: a ``Tensor`` wraps a row-major float32
numpy array, an active ``Tape`` records every op whose output needs a
gradient, and ``backward`` replays the tape in reverse. Tapes are rebuilt
each training step and are confined to the thread that created them.

A central-difference gradient oracle (``finite_difference_gradient``) is
provided for cross-checking the tape; it never touches the tape machinery.
"""

import threading

import numpy as np
from scipy.special import erf

from .errors import ContractError, HyperparameterError, NumericsError, ShapeError

LOG_CLAMP = 1e-12  # lower clamp for log arguments and probability ratios

_state = threading.local()

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf verification after every forward op (slow)."""
    global _debug_checks
    _debug_checks = enabled


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float32 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Stop-gradient barrier: same values, outside any tape."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; replayed once, in reverse, by backward()."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    Gradients accumulate (+=) so shared subexpressions are handled; leaves
    keep their buffers until explicitly cleared, intermediate buffers die
    with the tape.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward_fn(out_grad)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = grad.astype(np.float32, copy=False)
            else:
                tensor.grad = tensor.grad + grad.astype(np.float32, copy=False)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _emit(inputs, out_data, backward_fn) -> Tensor:
    """Wrap an op result, recording it when a tape is active and needed."""
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise NumericsError("non-finite values produced by a forward op")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# elementwise / broadcast ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit([a, b], out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit([a, b], out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _emit([a, b], out, bwd)


def neg(a: Tensor) -> Tensor:
    return _emit([a], -a.data, lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)
    return _emit([a], a.data * s32, lambda g: (g * s32,))


def log_clamped(a: Tensor) -> Tensor:
    """log(max(x, 1e-12)); gradient is zero where the clamp is active."""
    clamped = np.maximum(a.data, np.float32(LOG_CLAMP))
    out = np.log(clamped)
    live = (a.data >= LOG_CLAMP).astype(np.float32)

    def bwd(g):
        return (g * live / clamped,)

    return _emit([a], out, bwd)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * np.float32(0.7071067811865476)))
    out = (x * cdf).astype(np.float32)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * np.float32(0.3989422804014327)
        return (g * (cdf + x * pdf).astype(np.float32),)

    return _emit([a], out, bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    new_shape = tuple(shape)
    out = np.ascontiguousarray(a.data.reshape(new_shape))

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _emit([a], out, bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _emit([a], out, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) exceeds extent "
            f"{a.data.shape[axis]} on axis {axis}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(a.data[index])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit([a], out, bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=np.float32).reshape(())

    def bwd(g):
        return (np.full_like(a.data, np.float32(g.reshape(()))),)

    return _emit([a], out, bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = (a.data.sum(dtype=np.float32) / np.float32(n)).reshape(())

    def bwd(g):
        return (np.full_like(a.data, np.float32(g.reshape(())) / np.float32(n)),)

    return _emit([a], out, bwd)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]
    out = a.data.mean(axis=axis, dtype=np.float32)

    def bwd(g):
        return (np.repeat(np.expand_dims(g / np.float32(n), axis), n, axis=axis),)

    return _emit([a], out, bwd)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes are treated as stacked matrices."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _emit([a, b], out, bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ W^T + b with W stored (out_features, in_features)."""
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear input width {x.data.shape[-1]} != weight fan-in {weight.data.shape[1]}"
        )
    out = np.matmul(x.data, weight.data.T) + bias.data

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        return (
            np.matmul(g, weight.data).reshape(x.data.shape),
            np.matmul(g2.T, x2),
            g2.sum(axis=0),
        )

    return _emit([x, weight, bias], out, bwd)


# ---------------------------------------------------------------------------
# neural-net specific ops


def softmax_temperature(logits: Tensor, tau: float) -> Tensor:
    """Temperature-scaled softmax along the last axis (max-subtracted)."""
    if tau <= 0:
        raise HyperparameterError(f"temperature must be positive, got {tau}")
    if logits.data.shape[-1] < 2:
        raise ShapeError("softmax needs at least 2 classes on the last axis")
    z = logits.data / np.float32(tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner) / np.float32(tau),)

    return _emit([logits], p, bwd)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float32)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True, dtype=np.float32)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    y = centered * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True, dtype=np.float32)
        gym = (g * y).mean(axis=-1, keepdims=True, dtype=np.float32)
        return ((g - gm - y * gym) * inv,)

    return _emit([x], y.astype(np.float32), bwd)


def depthwise_conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 3x3 convolution with same padding.

    x: (B, C, H, W); weight: (C, 3, 3); bias: (C,).
    Implemented as nine shifted weighted adds, which keeps both directions
    exact and dependency-free.
    """
    b_, c, h, w = x.data.shape
    if weight.data.shape != (c, 3, 3):
        raise ShapeError(
            f"depthwise weight {weight.data.shape} does not match {c} channels"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.broadcast_to(bias.data[None, :, None, None], (b_, c, h, w)).copy()
    for i in range(3):
        for j in range(3):
            out += weight.data[:, i, j][None, :, None, None] * xp[:, :, i : i + h, j : j + w]

    def bwd(g):
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gw[:, i, j] = (g * xp[:, :, i : i + h, j : j + w]).sum(axis=(0, 2, 3))
                gxp[:, :, i : i + h, j : j + w] += (
                    weight.data[:, i, j][None, :, None, None] * g
                )
        return gxp[:, :, 1 : 1 + h, 1 : 1 + w], gw, g.sum(axis=(0, 2, 3))

    return _emit([x, weight, bias], out.astype(np.float32), bwd)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_gradient(f, theta: Tensor, eps: float = 1e-3) -> Tensor:
    """Central differences of a scalar function, coordinate by coordinate.

    ``f`` is called as ``f(theta)`` after each in-place perturbation of
    ``theta.data``; the original values are restored afterwards. The divisor
    is the actually-realized perturbation (after float32 rounding), which
    keeps the estimate exact for quadratics.
    """
    if eps <= 0:
        raise HyperparameterError(f"eps must be positive, got {eps}")
    flat = theta.data.reshape(-1)
    grad = np.empty(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        original = flat[i]
        hi = np.float32(np.float64(original) + eps)
        lo = np.float32(np.float64(original) - eps)
        flat[i] = hi
        f_hi = float(f(theta))
        flat[i] = lo
        f_lo = float(f(theta))
        flat[i] = original
        grad[i] = (f_hi - f_lo) / (np.float64(hi) - np.float64(lo))
    return Tensor(grad.reshape(theta.data.shape))
