"""Reverse-mode differentiable arrays recorded on an explicit tape.

Values are float64 numpy arrays. An operation whose operands are all untracked
returns an untracked result and records nothing, so inference runs without a
tape pay no bookkeeping cost. Every operation also reports its FLOPs to the
active ``count_flops()`` context, which the analyzer uses as an independent
counter.
"""
from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
import logging
import math
from typing import Any

import numpy as np

from .const import (
    FINITE_DIFF_STEP,
    FLOPS_PER_MULTIPLY_ADD,
    GELU_FLOPS_PER_ELEMENT,
    LAYER_NORM_EPS,
    LAYER_NORM_FLOPS_PER_ELEMENT,
    SOFTMAX_FLOPS_PER_ELEMENT,
)
from .exceptions import DimensionError, ParameterError

_LOGGER = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]
ArrayLike = Any

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class FlopCounter:
    """Accumulates FLOPs reported by operations while active."""

    def __init__(self) -> None:
        """Initialize an empty counter."""
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, flops: int) -> None:
        """Record ``flops`` for operation ``op``."""
        self.total += int(flops)
        self.by_op[op] = self.by_op.get(op, 0) + int(flops)


_ACTIVE_COUNTER: ContextVar[FlopCounter | None] = ContextVar("refusion_flop_counter", default=None)


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    """Count FLOPs of every operation executed inside the block."""
    counter = FlopCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def _count(op: str, flops: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(op, flops)


class Parameter:
    """Named float64 buffer owned by a module and updated by optimizers."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: ArrayLike) -> None:
        """Initialize the parameter with a private copy of ``value``."""
        self.name = name
        self.value = np.array(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        """Return the buffer shape."""
        return self.value.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class DiffArray:
    """Dense float64 array that optionally records its history on a tape."""

    __slots__ = ("values", "tape", "node")
    __array_ufunc__ = None

    def __init__(self, values: ArrayLike, tape: Tape | None = None, node: int | None = None) -> None:
        """Wrap ``values`` (converted to float64)."""
        self.values = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def tracked(self) -> bool:
        """Return True when gradients flow through this array."""
        return self.node is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> DiffArray:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.values.copy()

    def item(self) -> float:
        """Return the single value of a size-1 array."""
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def detach(self) -> DiffArray:
        """Return an untracked copy."""
        return DiffArray(self.values.copy())

    def reshape(self, *shape: int) -> DiffArray:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> DiffArray:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> DiffArray:
        return reduce_mean(self, axis, keepdims)

    def __add__(self, other: ArrayLike) -> DiffArray:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> DiffArray:
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> DiffArray:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> DiffArray:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> DiffArray:
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> DiffArray:
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> DiffArray:
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> DiffArray:
        return div(other, self)

    def __neg__(self) -> DiffArray:
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> DiffArray:
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> DiffArray:
        return matmul(other, self)

    def __getitem__(self, index: Any) -> DiffArray:
        return getitem(self, index)

    def __repr__(self) -> str:
        state = f"node={self.node}" if self.tracked else "untracked"
        return f"DiffArray(shape={self.shape}, {state})"


@dataclass(eq=False)
class TapeNode:
    """One recorded operation: its inputs, output values and backward rule."""

    index: int
    inputs: tuple[DiffArray, ...]
    output: np.ndarray
    rule: BackwardRule | None


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended as operations execute, so every node's inputs precede
    it. A tape and its arrays belong to a single thread of execution.
    """

    def __init__(self) -> None:
        """Initialize an empty tape."""
        self.nodes: list[TapeNode] = []
        self._watched: dict[int, DiffArray] = {}
        self._parameters: dict[int, Parameter] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, source: Parameter | ArrayLike) -> DiffArray:
        """Return a tracked leaf for ``source``.

        A Parameter is watched at most once per tape; repeated calls return
        the same leaf so gradients from every use accumulate on it.
        """
        if isinstance(source, Parameter):
            cached = self._watched.get(id(source))
            if cached is not None:
                return cached
            leaf = self.record(source.value, (), None)
            self._watched[id(source)] = leaf
            self._parameters[id(source)] = source
            return leaf
        return self.record(np.array(source, dtype=np.float64), (), None)

    def leaf_for(self, parameter: Parameter) -> DiffArray | None:
        """Return the leaf watched for ``parameter`` on this tape, if any."""
        return self._watched.get(id(parameter))

    def record(self, values: np.ndarray, inputs: tuple[DiffArray, ...], rule: BackwardRule | None) -> DiffArray:
        """Append a node and return its tracked output."""
        index = len(self.nodes)
        self.nodes.append(TapeNode(index, inputs, values, rule))
        return DiffArray(values, self, index)


def read(parameter: Parameter, tape: Tape | None) -> DiffArray:
    """Read a parameter, tracked when a tape is given."""
    if tape is None:
        return DiffArray(parameter.value)
    return tape.watch(parameter)


def as_array(value: ArrayLike) -> DiffArray:
    """Wrap constants as untracked arrays; pass DiffArrays through."""
    if isinstance(value, DiffArray):
        return value
    return DiffArray(value)


def _make(values: np.ndarray, inputs: tuple[DiffArray, ...], rule: BackwardRule) -> DiffArray:
    tape: Tape | None = None
    for item in inputs:
        if item.tape is None:
            continue
        if tape is not None and item.tape is not tape:
            raise ValueError("operands were recorded on different tapes")
        tape = item.tape
    if tape is None:
        return DiffArray(values)
    return tape.record(values, inputs, rule)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: DiffArray, b: DiffArray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise DimensionError("operands cannot be broadcast together", a.shape, b.shape) from err


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a, b)
    out = a.values + b.values
    _count("add", out.size)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a, b)
    out = a.values - b.values
    _count("sub", out.size)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a, b)
    out = a.values * b.values

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    _count("mul", out.size)
    return _make(out, (a, b), rule)


def div(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a, b)
    out = a.values / b.values

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        )

    _count("div", out.size)
    return _make(out, (a, b), rule)


def neg(a: ArrayLike) -> DiffArray:
    a = as_array(a)
    _count("neg", a.size)
    return _make(-a.values, (a,), lambda g: (-g,))


def exp(a: ArrayLike) -> DiffArray:
    a = as_array(a)
    out = np.exp(a.values)
    _count("exp", a.size)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> DiffArray:
    a = as_array(a)
    _count("log", a.size)
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,))


def tanh(a: ArrayLike) -> DiffArray:
    a = as_array(a)
    out = np.tanh(a.values)
    _count("tanh", a.size)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a: ArrayLike, low: float, high: float) -> DiffArray:
    """Clamp into [low, high]; gradient passes only where the value was inside."""
    a = as_array(a)
    inside = (a.values >= low) & (a.values <= high)
    return _make(np.clip(a.values, low, high), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation


def matmul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    """Matrix product over the last two axes, broadcasting leading axes.

    Gradients: dA = G·Bᵀ and dB = Aᵀ·G, summed over broadcast axes.
    """
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)
    try:
        out = np.matmul(a.values, b.values)
    except ValueError as err:
        raise DimensionError("matmul batch dimensions disagree", a.shape, b.shape) from err

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(g, np.swapaxes(b.values, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    _count("matmul", FLOPS_PER_MULTIPLY_ADD * out.size * a.shape[-1])
    return _make(out, (a, b), rule)


def transpose(a: ArrayLike, axes: Sequence[int] | None = None) -> DiffArray:
    a = as_array(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _make(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: ArrayLike, first: int = -1, second: int = -2) -> DiffArray:
    a = as_array(a)
    axes = list(range(a.ndim))
    axes[first], axes[second] = axes[second], axes[first]
    return transpose(a, axes)


def reshape(a: ArrayLike, shape: Sequence[int]) -> DiffArray:
    a = as_array(a)
    try:
        out = a.values.reshape(tuple(shape))
    except ValueError as err:
        raise DimensionError("cannot reshape", a.shape, tuple(shape)) from err
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: ArrayLike, index: Any) -> DiffArray:
    """Basic (slice/integer) indexing."""
    a = as_array(a)
    out = np.array(a.values[index])

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.values)
        full[index] += g
        return (full,)

    return _make(out, (a,), rule)


def take_rows(table: ArrayLike, indices: ArrayLike) -> DiffArray:
    """Gather rows of ``table`` (first axis) at integer ``indices`` of any shape."""
    table = as_array(table)
    indices = np.asarray(indices, dtype=np.int64)
    out = table.values[indices]

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(table.values)
        np.add.at(full, indices, g)
        return (full,)

    return _make(out, (table,), rule)


def gather_positions(a: ArrayLike, positions: ArrayLike) -> DiffArray:
    """Pick row ``positions[b]`` of ``a[b]`` for a (B, L, D) array, giving (B, D)."""
    a = as_array(a)
    positions = np.asarray(positions, dtype=np.int64)
    if a.ndim != 3 or positions.shape != (a.shape[0],):
        raise DimensionError("gather_positions expects (B, L, D) and (B,)", a.shape, positions.shape)
    batch = np.arange(a.shape[0])
    out = a.values[batch, positions]

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.values)
        np.add.at(full, (batch, positions), g)
        return (full,)

    return _make(out, (a,), rule)


def concat(items: Sequence[ArrayLike], axis: int = 0) -> DiffArray:
    arrays = tuple(as_array(item) for item in items)
    try:
        out = np.concatenate([item.values for item in arrays], axis=axis)
    except ValueError as err:
        raise DimensionError("cannot concatenate", *(item.shape for item in arrays)) from err
    splits = np.cumsum([item.shape[axis] for item in arrays])[:-1]
    return _make(out, arrays, lambda g: tuple(np.split(g, splits, axis=axis)))


def reduce_sum(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> DiffArray:
    a = as_array(a)
    out = np.sum(a.values, axis=axis, keepdims=keepdims)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    _count("sum", a.size)
    return _make(np.asarray(out), (a,), rule)


def reduce_mean(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> DiffArray:
    a = as_array(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Fused neural-network primitives


def softmax(x: ArrayLike, axis: int = -1) -> DiffArray:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_array(x)
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    _count("softmax", SOFTMAX_FLOPS_PER_ELEMENT * x.size)
    return _make(out, (x,), rule)


def exclusive_cumsum(c: ArrayLike) -> DiffArray:
    """out[..., i] = sum of c[..., j] for j < i, along the last axis.

    The first entry is exactly zero; the Jacobian is the strictly lower
    triangular ones matrix.
    """
    c = as_array(c)
    if c.ndim == 0 or c.shape[-1] < 1:
        raise DimensionError("exclusive_cumsum needs a non-empty last axis", c.shape)
    out = np.zeros_like(c.values)
    out[..., 1:] = np.cumsum(c.values[..., :-1], axis=-1)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(g)
        grad[..., :-1] = np.flip(np.cumsum(np.flip(g[..., 1:], axis=-1), axis=-1), axis=-1)
        return (grad,)

    _count("cumsum", c.size)
    return _make(out, (c,), rule)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = LAYER_NORM_EPS) -> DiffArray:
    """Normalize the last axis to zero mean and unit variance, then apply gain and bias."""
    x, gain, bias = as_array(x), as_array(gain), as_array(bias)
    mean = np.mean(x.values, axis=-1, keepdims=True)
    centered = x.values - mean
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.values + bias.values

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_hat = g * gain.values
        grad_x = inv_std * (
            d_hat
            - np.mean(d_hat, axis=-1, keepdims=True)
            - x_hat * np.mean(d_hat * x_hat, axis=-1, keepdims=True)
        )
        return grad_x, _unbroadcast(g * x_hat, gain.shape), _unbroadcast(g, bias.shape)

    _count("layer_norm", LAYER_NORM_FLOPS_PER_ELEMENT * x.size)
    return _make(out, (x, gain, bias), rule)


def gelu(x: ArrayLike) -> DiffArray:
    """Tanh-approximated GELU."""
    x = as_array(x)
    v = x.values
    t = np.tanh(_GELU_C * (v + _GELU_A * v**3))
    out = 0.5 * v * (1.0 + t)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    _count("gelu", GELU_FLOPS_PER_ELEMENT * x.size)
    return _make(out, (x,), rule)


def cross_entropy(logits: ArrayLike, labels: int | Sequence[int] | np.ndarray) -> DiffArray:
    """Mean of -log softmax(logits)[label] over the leading axis.

    Accepts (C,) logits with one label, or (B, C) logits with B labels.
    """
    logits = as_array(logits)
    if logits.ndim not in (1, 2):
        raise DimensionError("cross_entropy expects (C,) or (B, C) logits", logits.shape)
    values = logits.values.reshape(-1, logits.shape[-1])
    targets = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if targets.shape != (values.shape[0],):
        raise DimensionError("one label per logit row is required", values.shape, targets.shape)
    num_classes = values.shape[1]
    if np.any(targets < 0) or np.any(targets >= num_classes):
        raise ParameterError(f"label index out of range for {num_classes} classes: {targets.tolist()}")
    rows = np.arange(values.shape[0])
    shifted = values - np.max(values, axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out = np.asarray(-np.mean(log_probs[rows, targets]))

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1.0
        return ((g * probs / values.shape[0]).reshape(logits.shape),)

    return _make(out, (logits,), rule)


# ---------------------------------------------------------------------------
# Randomness


@dataclass
class RngStream:
    """Counter-based random stream (Philox keyed by ``seed``).

    Every draw builds a fresh Philox generator at the current counter and then
    advances the counter past every block it could have consumed, so an
    identical (seed, counter) history replays bit-identical samples on every
    platform.
    """

    seed: int
    counter: int = 0

    def _generator(self, draws: int) -> np.random.Generator:
        generator = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))
        self.counter += max(int(draws), 1) + 16
        return generator

    def split(self, key: int) -> RngStream:
        """Derive an independent stream for ``key``."""
        words = np.random.SeedSequence([self.seed, int(key)]).generate_state(2, np.uint64)
        return RngStream(int(words[0]) | (int(words[1]) << 64))

    def uniform(self, shape: tuple[int, ...] | int) -> np.ndarray:
        """Uniform samples in the open interval (0, 1)."""
        size = int(np.prod(shape))
        samples = self._generator(size).random(shape)
        return np.maximum(samples, np.nextafter(0.0, 1.0))

    def normal(self, shape: tuple[int, ...] | int, std: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape))
        return self._generator(2 * size).standard_normal(shape) * std

    def gumbel(self, shape: tuple[int, ...] | int) -> np.ndarray:
        """Standard Gumbel noise g = -log(-log U)."""
        return -np.log(-np.log(self.uniform(shape)))

    def permutation(self, n: int) -> np.ndarray:
        return self._generator(2 * n).permutation(n)

    def integers(self, low: int, high: int, shape: tuple[int, ...] | int) -> np.ndarray:
        size = int(np.prod(shape))
        return self._generator(2 * size).integers(low, high, size=shape)

    def bernoulli(self, probability: float, shape: tuple[int, ...] | int) -> np.ndarray:
        return self.uniform(shape) < probability


def gumbel_softmax_sample(
    logits: ArrayLike,
    tau: float,
    rng: RngStream | None,
    noise_free: bool = False,
    shape: tuple[int, ...] | None = None,
) -> DiffArray:
    """Relaxed categorical sample softmax((logits + g) / tau).

    With ``noise_free`` the Gumbel noise is omitted. ``shape`` draws noise for
    a batch broadcast against ``logits``. The noise is a constant for the tape,
    so gradients reach ``logits`` through the reparameterization.
    """
    if not tau > 0:
        raise ParameterError(f"Gumbel-Softmax temperature must be positive, got {tau}")
    logits = as_array(logits)
    if noise_free:
        return softmax(div(logits, tau), axis=-1)
    if rng is None:
        raise ParameterError("a random stream is required unless noise_free is set")
    noise = rng.gumbel(shape if shape is not None else logits.shape)
    return softmax(div(add(logits, noise), tau), axis=-1)


# ---------------------------------------------------------------------------
# Backward pass and gradient checks


@dataclass
class Gradients:
    """Gradients of a scalar loss with respect to tracked leaves."""

    tape: Tape
    by_node: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, leaf: DiffArray | Parameter) -> np.ndarray:
        """Return dLoss/dleaf; zeros when the leaf is not on a path to the loss."""
        if isinstance(leaf, Parameter):
            watched = self.tape.leaf_for(leaf)
            if watched is None:
                return np.zeros(leaf.shape)
            leaf = watched
        if leaf.node is None or leaf.node not in self.by_node:
            return np.zeros(leaf.shape)
        return self.by_node[leaf.node]

    def for_parameters(self, parameters: Iterable[Parameter]) -> dict[str, np.ndarray]:
        """Map parameter names to their gradients."""
        return {parameter.name: self[parameter] for parameter in parameters}


def backward(tape: Tape, loss: DiffArray) -> Gradients:
    """Propagate dLoss back through ``tape``, visiting each node once in reverse order."""
    if loss.size != 1:
        raise DimensionError("backward needs a scalar loss", loss.shape)
    gradients = Gradients(tape)
    if loss.node is None:
        return gradients
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    pending: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.values)}
    for node in reversed(tape.nodes[: loss.node + 1]):
        grad = pending.pop(node.index, None)
        if grad is None:
            continue
        if node.rule is None:
            gradients.by_node[node.index] = grad
            continue
        for item, item_grad in zip(node.inputs, node.rule(grad)):
            if item_grad is None or item.node is None:
                continue
            previous = pending.get(item.node)
            pending[item.node] = item_grad if previous is None else previous + item_grad
    return gradients


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-based relative error, falling back to absolute error near zero."""
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    diff = float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)))
    return diff if scale < 1e-12 else diff / scale


def gradient_check(
    fn: Callable[..., DiffArray],
    inputs: Sequence[ArrayLike],
    step: float = FINITE_DIFF_STEP,
) -> float:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    Returns the worst relative error over all inputs.
    """
    points = [np.array(value, dtype=np.float64) for value in inputs]
    tape = Tape()
    leaves = [tape.watch(point) for point in points]
    gradients = backward(tape, fn(*leaves))

    def evaluate() -> float:
        return fn(*(DiffArray(point) for point in points)).item()

    worst = 0.0
    for point, leaf in zip(points, leaves):
        numeric = _central_differences(point, evaluate, step)
        worst = max(worst, relative_error(gradients[leaf], numeric))
    return worst


def gradient_check_parameters(
    loss_fn: Callable[[Tape | None], DiffArray],
    parameters: Sequence[Parameter],
    step: float = FINITE_DIFF_STEP,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` with respect to module parameters.

    ``loss_fn(tape)`` must rebuild the loss from the parameters' current
    values, reading them through ``tape`` when one is given. Returns the
    relative error per parameter name.
    """
    tape = Tape()
    gradients = backward(tape, loss_fn(tape))
    errors: dict[str, float] = {}
    for parameter in parameters:
        numeric = _central_differences(parameter.value, lambda: loss_fn(None).item(), step)
        errors[parameter.name] = relative_error(gradients[parameter], numeric)
    return errors


def _central_differences(point: np.ndarray, evaluate: Callable[[], float], step: float) -> np.ndarray:
    flat = point.reshape(-1)
    numeric = np.zeros(flat.size)
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + step
        plus = evaluate()
        flat[j] = original - step
        minus = evaluate()
        flat[j] = original
        numeric[j] = (plus - minus) / (2.0 * step)
    return numeric.reshape(point.shape)
