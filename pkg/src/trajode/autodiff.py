"""Tape-based reverse-mode differentiation over numpy float64 arrays.

Every operation in this module accepts either plain arrays or :class:`Var`
objects. When at least one input is tracked by a :class:`Tape`, the result is
recorded so that :meth:`Tape.gradient` can replay the operations in reverse.
Untracked computations (inference) pay no bookkeeping cost.

Non-finite results raise :class:`~trajode.errors.NumericError` immediately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, ConsistencyError, DimensionError, NumericError

__all__ = [
    "Var", "Tape", "AdamState", "make_rng", "split_rng",
    "add", "sub", "mul", "neg", "matmul", "affine", "tanh", "relu", "sigmoid",
    "exp", "square", "nonlinearity", "sum", "mean", "reshape", "concat", "take",
    "clip", "mse", "adam_step", "grad_check", "value_of",
]


def make_rng(seed) -> np.random.Generator:
    """The one RNG type used across the package (PCG64, 64-bit seed)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return list(rng.spawn(n))


class Var:
    """A value, optionally tracked by a tape."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, node: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tracked = "tracked" if self.tape is not None else "const"
        return f"Var(shape={self.shape}, {tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)


class Tape:
    """Records operations in execution order for a single backward pass.

    A tape is single-threaded. Use one tape per worker.
    """

    def __init__(self):
        self._ops: list[tuple[int, tuple, Callable]] = []
        self._params: dict[str, Var] = {}
        self._count = 0
        self.grads: dict[str, np.ndarray] = {}

    def _new_node(self) -> int:
        self._count += 1
        return self._count

    def watch(self, name: str, value) -> Var:
        """Register a parameter and return its tracked handle."""
        if name in self._params:
            raise ConsistencyError(f"parameter {name!r} registered twice")
        v = Var(np.array(value, dtype=np.float64), self, self._new_node())
        self._params[name] = v
        self.grads[name] = np.zeros_like(v.value)
        return v

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.watch(k, v) for k, v in params.items()}

    @property
    def params(self) -> dict[str, Var]:
        return dict(self._params)

    def record(self, value, inputs, vjp) -> Var:
        out = Var(value, self, self._new_node())
        self._ops.append((out.node, tuple(inputs), vjp))
        return out

    def clear(self):
        self._ops.clear()
        self.grads = {k: np.zeros_like(v.value) for k, v in self._params.items()}

    def gradient(self, loss: Var) -> dict[str, np.ndarray]:
        """Backpropagate a scalar ``loss``; gradients accumulate into ``self.grads``."""
        if not isinstance(loss, Var) or loss.value.size != 1:
            raise DimensionError("gradient() needs a scalar Var")
        if loss.tape is not self:
            # constant loss: all gradients are zero
            return {k: g.copy() for k, g in self.grads.items()}
        adj = {loss.node: np.ones_like(loss.value)}
        for node, inputs, vjp in reversed(self._ops):
            g = adj.pop(node, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or inp.tape is not self:
                    continue
                prev = adj.get(inp.node)
                adj[inp.node] = gi if prev is None else prev + gi
        for name, p in self._params.items():
            if p.node in adj:
                self.grads[name] = self.grads[name] + adj[p.node]
        return {k: g.copy() for k, g in self.grads.items()}


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _result(value, inputs, vjp, opname: str) -> Var:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {opname}")
    tape = None
    for v in inputs:
        if v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise ConsistencyError("operands belong to different tapes")
            tape = v.tape
    if tape is None:
        return Var(value)
    return tape.record(value, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _result(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                   "mul")


def neg(a) -> Var:
    a = _lift(a)
    return _result(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Var:
    """Matrix product for 1-D/2-D operands."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise DimensionError(f"matmul: shapes {av.shape} and {bv.shape} do not conform")

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), vjp, "matmul")


def affine(x, W, b) -> Var:
    """``W x + b``; ``x`` may be a vector (n,) or a row batch (N, n)."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    xv, Wv, bv = x.value, W.value, b.value
    if Wv.ndim != 2 or bv.shape != (Wv.shape[0],) or xv.ndim not in (1, 2) \
            or xv.shape[-1] != Wv.shape[1]:
        raise DimensionError(
            f"affine: x{xv.shape}, W{Wv.shape}, b{bv.shape} do not conform")
    out = xv @ Wv.T + bv

    def vjp(g):
        if xv.ndim == 1:
            return g @ Wv, np.outer(g, xv), g
        return g @ Wv, g.T @ xv, g.sum(axis=0)

    return _result(out, (x, W, b), vjp, "affine")


def tanh(x) -> Var:
    x = _lift(x)
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x) -> Var:
    x = _lift(x)
    mask = x.value > 0.0
    return _result(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Var:
    x = _lift(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x) -> Var:
    x = _lift(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def square(x) -> Var:
    x = _lift(x)
    xv = x.value
    return _result(xv * xv, (x,), lambda g: (2.0 * g * xv,), "square")


_NONLINEARITIES = {"tanh": tanh, "relu": relu}


def nonlinearity(x, kind: str = "tanh") -> Var:
    try:
        fn = _NONLINEARITIES[kind]
    except KeyError:
        raise ConfigurationError(f"unknown nonlinearity {kind!r}") from None
    return fn(x)


def sum(x) -> Var:  # noqa: A001
    x = _lift(x)
    shape = x.shape
    return _result(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x) -> Var:
    x = _lift(x)
    shape, n = x.shape, x.value.size
    return _result(np.asarray(x.value.mean()), (x,),
                   lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(x, shape) -> Var:
    x = _lift(x)
    old = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(parts, axis: int = -1) -> Var:
    parts = [_lift(p) for p in parts]
    try:
        y = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[p.shape for p in parts]} do not conform") from None
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(y, parts, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def take(x, index) -> Var:
    """Basic (slice/integer) indexing."""
    x = _lift(x)
    shape = x.shape
    y = x.value[index]

    def vjp(g):
        out = np.zeros(shape)
        out[index] += g
        return (out,)

    return _result(np.array(y), (x,), vjp, "take")


def clip(x, lo: float, hi: float) -> Var:
    x = _lift(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return _result(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,), "clip")


def mse(pred, target) -> Var:
    """Mean of squared elementwise differences."""
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.value - target.value
    n = diff.size
    return _result(np.asarray(np.mean(diff * diff)), (pred, target),
                   lambda g: (2.0 * float(g) / n * diff, -2.0 * float(g) / n * diff), "mse")


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. ``state`` is updated in place and returned."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ConsistencyError(f"no gradient for parameters {missing}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ConsistencyError(f"gradient for {k!r} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        new[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state


def grad_check(lossfn: Callable[[dict[str, Var]], Var], params: Mapping[str, np.ndarray],
               epsilon: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    ``lossfn`` maps a dict of parameter handles to a scalar ``Var``. The
    relative error of each coordinate is ``|a - n| / max(|a|, |n|, floor)``,
    so coordinates whose gradient is at round-off level are judged absolutely.
    """
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    loss = lossfn(tape.watch_all(params))
    if not np.isfinite(value_of(loss)).all():
        raise NumericError("loss is not finite")
    analytic = tape.gradient(loss)

    def evaluate(p):
        out = float(value_of(lossfn({k: Var(v) for k, v in p.items()})))
        if not np.isfinite(out):
            raise NumericError("loss is not finite")
        return out

    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = evaluate(params)
            flat[i] = orig - epsilon
            down = evaluate(params)
            flat[i] = orig
            num = (up - down) / (2.0 * epsilon)
            denom = max(abs(ga[i]), abs(num), floor)
            worst = max(worst, abs(ga[i] - num) / denom)
    return worst
