"""Dense tensors with a reverse-mode differentiation tape.

Tensors wrap a numpy array. Operations record themselves on the active
:class:`Tape` (if any) whenever one of their inputs requires a gradient.
A tape lives for one forward pass and is consumed by :meth:`Tape.backward`.

Every op accepts arbitrary leading batch axes; "channels" is always the last
axis. Precision is float64 unless a caller explicitly builds float32 tensors,
in which case ops preserve that dtype.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from . import _kernels

DEFAULT_DTYPE = np.float64
LEAKY_SLOPE = 0.2


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested on fewer than two rows."""


class ConfigError(ValueError):
    """Invalid hyperparameter passed to an op."""


class TapeError(RuntimeError):
    pass


_local = threading.local()
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    """Deliberately corrupt the backward rule of op ``name`` (test hook)."""
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order, which is already a topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar ``loss``.

        Returns a map ``id(tensor) -> gradient`` for every tensor that
        requires a gradient and fed some recorded op; those gradients are
        also stored on ``tensor.grad``. The tape is emptied afterwards.
        """
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced and not loss.requires_grad:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise TapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        out = {}
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            out[key] = g
        self.nodes = []
        self.grads = out
        return out


def current_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Temporarily suspend recording (used by finite-difference evaluation)."""
    stack = getattr(_local, "tapes", None)
    saved = list(stack) if stack else []
    _local.tapes = []
    try:
        yield
    finally:
        _local.tapes = saved


def record(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and register ``backward`` on the tape.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape = current_tape()
        if tape is not None:
            tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape("hadamard", a, b)
    return record("hadamard", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


hadamard = mul


def scale(a: Tensor, s: float) -> Tensor:
    return record("scale", (a,), a.data * s, lambda g: (g * s,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 <= slope <= 1.0:
        raise ConfigError(f"leaky_relu slope must lie in [0, 1], got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)

    def backward(g):
        return (np.where(pos, g, g * slope),)

    return record("leaky_relu", (x,), out, backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        if "tanh" in _FAULTS:
            return (g * (1.0 - y),)
        return (g * (1.0 - y * y),)

    return record("tanh", (x,), y, backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def abs_(x: Tensor) -> Tensor:
    """Absolute value; the derivative at exactly 0 is taken as 0."""
    return record("abs", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    y = np.sqrt(x.data)

    def backward(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0),)

    return record("sqrt", (x,), y, backward)


def square(x: Tensor) -> Tensor:
    return record("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# shape and reduction


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return record("transpose", (x,), np.swapaxes(x.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return record("swapaxes", (x,), np.swapaxes(x.data, a1, a2), lambda g: (np.swapaxes(g, a1, a2),))


def sum_all(x: Tensor) -> Tensor:
    return record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record("sum_axis", (x,), x.data.sum(axis=axis), backward)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        raise DimensionError("mean over empty axis")

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)

    return record("mean_axis", (x,), x.data.mean(axis=axis), backward)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` by repetition (broadcast)."""
    out_nd = x.ndim + 1
    axis = axis % out_nd
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return record("expand", (x,), data, lambda g: (g.sum(axis=axis),))


def max_over_axis(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis`` plus winner indices.

    Ties go to the lowest index; the gradient reaches winners only.
    """
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise DimensionError("max over empty axis")
    arg = np.argmax(x.data, axis=axis)
    idx = np.expand_dims(arg, axis)
    vals = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return record("max", (x,), vals, backward), arg


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    if not parts:
        raise DimensionError("concat of zero parts")
    nd = parts[0].ndim
    axis = axis % nd
    lead = [p.shape[:axis] + p.shape[axis + 1 :] for p in parts]
    if any(s != lead[0] for s in lead):
        raise DimensionError(f"concat: non-channel dimensions disagree: {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g):
        sl = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return record("concat", tuple(parts), data, backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=-1)


def scatter_rows(rows: np.ndarray, target: np.ndarray, count: int) -> np.ndarray:
    """Sum ``rows[e]`` into output row ``target[e]``; returns (count, C)."""
    op = sparse.csr_matrix(
        (np.ones(target.size, dtype=rows.dtype), (target, np.arange(target.size))), shape=(count, target.size)
    )
    return np.asarray(op @ rows)


def gather_rows(values: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., i, j, :] = values[..., index[..., i, j], :]``.

    ``values`` is (B, N, C) or (N, C); ``index`` is (B, N, K) or (N, K).
    Backward scatter-adds into the source rows.
    """
    index = np.asarray(index)
    squeeze = values.ndim == 2
    v = values.data[None] if squeeze else values.data
    ix = index[None] if squeeze else index
    if v.ndim != 3 or ix.ndim != 3 or ix.shape[0] != v.shape[0]:
        raise DimensionError(f"gather: values {values.shape} vs index {index.shape}")
    b, n, c = v.shape
    if ix.size and (ix.min() < 0 or ix.max() >= n):
        raise IndexError(f"gather: neighbor index out of range for {n} points")
    flat = (ix + (np.arange(b) * n)[:, None, None]).reshape(-1)
    out = v.reshape(b * n, c)[flat].reshape(ix.shape + (c,))
    if squeeze:
        out = out[0]

    def backward(g):
        return (scatter_rows(g.reshape(-1, c), flat, b * n).reshape(values.shape),)

    return record("gather", (values,), out, backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes must match)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), a.data @ b.data, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Shared affine map ``x @ weight + bias`` applied to every row of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    cin, cout = weight.shape
    x2 = x.data.reshape(-1, cin)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (cout,))

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("linear", inputs, out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-shifted) along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), y, backward)


def softmax_rows(m: Tensor) -> Tensor:
    return softmax(m, axis=-1)


# ---------------------------------------------------------------------------
# normalization, activation stages, dropout


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer.

    Running variance uses the unbiased batch estimate; normalization in
    training mode uses the biased one.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps, self.training)

    def _update(self, mean: np.ndarray, var: np.ndarray, rows: int) -> None:
        m = self.momentum
        unbiased = var * (rows / (rows - 1))
        self.running_mean = (1.0 - m) * self.running_mean + m * mean
        self.running_var = (1.0 - m) * self.running_var + m * unbiased


def _bn_stats(z2: np.ndarray, state: BatchNormState, training: bool):
    """Return (xhat, istd) for a 2-D (rows, C) array; updates running stats."""
    rows = z2.shape[0]
    if training:
        if rows < 2:
            raise DegenerateBatchError(f"batch norm in training mode needs >= 2 rows, got {rows}")
        mean = z2.mean(axis=0)
        xhat = z2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / rows
        istd = 1.0 / np.sqrt(var + state.eps)
        xhat *= istd
        state._update(mean, var, rows)
    else:
        istd = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (z2 - state.running_mean) * istd
    return xhat, istd.astype(z2.dtype, copy=False)


def _bn_backward(gy: np.ndarray, xhat: np.ndarray, istd, gamma: np.ndarray, training: bool):
    """Gradients (dz, dgamma, dbeta) for y = gamma * xhat + beta."""
    rows = gy.shape[0]
    dbeta = gy.sum(axis=0)
    dgamma = np.einsum("ij,ij->j", gy, xhat)
    if training:
        dz = gy - dbeta / rows
        dz -= xhat * (dgamma / rows)
        dz *= gamma * istd
    else:
        dz = gy * (gamma * istd)
    return dz, dgamma, dbeta


def batch_norm(x: Tensor, state: BatchNormState, gamma: Tensor, beta: Tensor, training: bool | None = None) -> Tensor:
    """Per-channel normalization over every axis except the last."""
    if training is None:
        training = state.training
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xhat, istd = _bn_stats(x.data.reshape(-1, c), state, training)
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        dz, dgamma, dbeta = _bn_backward(g.reshape(-1, c), xhat, istd, gamma.data, training)
        return dz.reshape(x.shape), dgamma, dbeta

    return record("batch_norm", (x, gamma, beta), out, backward)


def mlp_stage(
    x: Tensor,
    weight: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    slope: float | None = LEAKY_SLOPE,
    training: bool | None = None,
) -> Tensor:
    """Fused shared-MLP stage: linear (no bias) -> batch norm -> LeakyReLU.

    ``slope=None`` skips the activation. Matches chaining :func:`linear`,
    :func:`batch_norm` and :func:`leaky_relu` up to rounding, but keeps only
    the normalized activations for the backward pass.
    """
    if training is None:
        training = state.training
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"mlp_stage: input {x.shape} vs weight {weight.shape}")
    cin, cout = weight.shape
    x2 = x.data.reshape(-1, cin)
    rows = x2.shape[0]
    if training and rows < 2:
        raise DegenerateBatchError(f"batch norm in training mode needs >= 2 rows, got {rows}")
    use_act = slope is not None
    slope_v = 0.0 if slope is None else float(slope)
    xhat = x2 @ weight.data
    out, mean, var, istd = _kernels.bn_act_forward(
        xhat, gamma.data, beta.data, state.eps, slope_v, use_act, training,
        state.running_mean.astype(np.float64), state.running_var.astype(np.float64),
    )
    if training:
        state._update(mean.astype(state.running_mean.dtype), var.astype(state.running_var.dtype), rows)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, cout))
        dz, dgamma, dbeta = _kernels.bn_act_backward(g2, xhat, out, gamma.data, istd, slope_v, use_act, training)
        gx = (dz @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ dz if weight.requires_grad else None
        return gx, gw, dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)

    return record("mlp_stage", (x, weight, gamma, beta), out.reshape(x.shape[:-1] + (cout,)), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity at inference or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    factor = 1.0 / (1.0 - rate)
    mask = keep.astype(x.dtype) * factor
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))
