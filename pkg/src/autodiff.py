"""Forward and reverse mode differentiation, nestable to third order.

Values flowing through a user function are *scalar towers*:

- ``Var`` is a slot on a recording ``Tape`` (the reverse part). It only ever
  holds plain float arrays.
- ``Dual`` carries a primal and a tangent (the forward part). Primal and
  tangent are themselves towers one level down, so ``Dual(Dual(Var, v), w)``
  is a reverse-over-forward-over-forward tower.

Reverse mode is always the last sweep applied: the tape sits at the bottom of
the tower and is swept once after all forward levels have been peeled off.
Everything is elementwise over numpy arrays, so one tower holds a whole
vector of scalars.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit as _expit

from .errors import (
    ContractViolationError,
    DifferentiationCapabilityError,
    NumericalDomainError,
    PlanValidationError,
    TapeStateError,
)
from .linalg import BlockDiagonal

logger = logging.getLogger(__name__)

Array = np.ndarray
ScalarTower = Union["Dual", "Var", np.ndarray, float]


# ==================== Helpers ====================

def value_of(x: Any) -> np.ndarray:
    """Innermost float value of a tower."""
    while isinstance(x, Dual):
        x = x.primal
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=float)


def depth_of(x: Any) -> int:
    """Number of forward levels wrapped around ``x``."""
    return x.depth if isinstance(x, Dual) else 0


def tangent_of(x: Any) -> Any:
    """Tangent of the outermost forward level, zeros if ``x`` is constant there."""
    if isinstance(x, Dual):
        return x.tangent
    return np.zeros(np.shape(value_of(x)))


def _checked(op: str, fn: Callable[..., Array], *args: Any) -> Array:
    with np.errstate(all="ignore"):
        out = fn(*args)
    if not np.all(np.isfinite(out)):
        raise NumericalDomainError(op)
    return out


def _unbroadcast(g: Array, shape: Tuple[int, ...]) -> Array:
    g = np.asarray(g, dtype=float)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _expand(t: Any, shape: Tuple[int, ...]) -> Any:
    if np.shape(value_of(t)) == tuple(shape):
        return t
    return t + np.zeros(shape)


def _deepest(*xs: Any) -> Optional[Any]:
    best = None
    for x in xs:
        if isinstance(x, Dual):
            if best is None or not isinstance(best, Dual) or x.depth > best.depth:
                best = x
        elif isinstance(x, Var) and best is None:
            best = x
    return best


# ==================== Tape (reverse part) ====================

@dataclass(frozen=True)
class _Node:
    op: str
    parents: Tuple[int, ...]
    partials: Tuple[Callable[[Array], Array], ...]
    shape: Tuple[int, ...]


class Tape:
    """Append-only recording of elementary operations.

    A tape is created for one differentiation call, swept once and
    discarded. Node parents always precede the node itself.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.inputs: List[int] = []
        self._swept = False

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value: Any) -> "Var":
        """Register an independent input."""
        var = self._push("input", np.array(value, dtype=float), (), ())
        self.inputs.append(var.slot)
        return var

    def record(
        self,
        op: str,
        value: Array,
        parents: Sequence["Var"],
        partials: Sequence[Callable[[Array], Array]],
    ) -> "Var":
        for p in parents:
            if p.tape is not self:
                raise ContractViolationError(f"operation '{op}' mixes values from different tapes")
        if not np.all(np.isfinite(value)):
            raise NumericalDomainError(op)
        return self._push(op, value, tuple(p.slot for p in parents), tuple(partials))

    def _push(self, op, value, parents, partials) -> "Var":
        if self._swept:
            raise TapeStateError("cannot record on a tape that has already been swept")
        value = np.asarray(value, dtype=float)
        self.nodes.append(_Node(op, parents, partials, value.shape))
        return Var(self, len(self.nodes) - 1, value)

    def sweep(self, output: "Var", seed: Any) -> List[Optional[Array]]:
        """Propagate ``seed`` back from ``output``; every node is visited once."""
        if self._swept:
            raise TapeStateError("tape already swept; re-record before sweeping again")
        if output.tape is not self:
            raise ContractViolationError("output does not belong to this tape")
        self._swept = True

        shape = self.nodes[output.slot].shape
        seed = np.asarray(seed, dtype=float)
        if seed.size != int(np.prod(shape, dtype=int)):
            raise ContractViolationError(
                f"cotangent has {seed.size} entries, output has shape {shape}"
            )
        adjoints: List[Optional[Array]] = [None] * len(self.nodes)
        adjoints[output.slot] = seed.reshape(shape)

        for slot in range(output.slot, -1, -1):
            g = adjoints[slot]
            if g is None:
                continue
            node = self.nodes[slot]
            for parent, partial in zip(node.parents, node.partials):
                contribution = partial(g)
                if adjoints[parent] is None:
                    adjoints[parent] = contribution
                else:
                    adjoints[parent] = adjoints[parent] + contribution
        return adjoints

    def gradient(self, output: Any, seed: Any, wrt: "Var") -> Array:
        """Cotangent-weighted gradient of ``output`` with respect to input ``wrt``."""
        if not isinstance(output, Var):
            # output does not depend on anything recorded
            if self._swept:
                raise TapeStateError("tape already swept; re-record before sweeping again")
            self._swept = True
            return np.zeros(wrt.value.shape)
        adjoints = self.sweep(output, seed)
        g = adjoints[wrt.slot]
        return np.zeros(wrt.value.shape) if g is None else np.asarray(g, dtype=float)


class _TowerOps:
    """Operator plumbing shared by ``Var`` and ``Dual``."""

    __array_ufunc__ = None  # replaced below once the dispatch table exists

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __pos__(self):
        return self

    def __pow__(self, exponent):
        return power(self, exponent)

    def __rpow__(self, base):
        raise DifferentiationCapabilityError("power", "only constant exponents are supported")

    def __lt__(self, other):
        return value_of(self) < value_of(other)

    def __le__(self, other):
        return value_of(self) <= value_of(other)

    def __gt__(self, other):
        return value_of(self) > value_of(other)

    def __ge__(self, other):
        return value_of(self) >= value_of(other)

    @property
    def shape(self) -> Tuple[int, ...]:
        return np.shape(value_of(self))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int))

    def __len__(self) -> int:
        return self.shape[0]

    def sum(self, axis=None, dtype=None, out=None, **kwargs):
        if out is not None or kwargs.get("keepdims"):
            raise DifferentiationCapabilityError("sum", "out= and keepdims= are not supported on towers")
        return tsum(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Var(_TowerOps):
    """A value recorded on a tape."""

    __slots__ = ("tape", "slot", "value")

    def __init__(self, tape: Tape, slot: int, value: Array):
        self.tape = tape
        self.slot = slot
        self.value = value

    def __repr__(self) -> str:
        return f"Var(slot={self.slot}, value={self.value!r})"

    def __getitem__(self, idx):
        shape = self.value.shape

        def partial(g, idx=idx, shape=shape):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return self.tape.record("getitem", self.value[idx], [self], [partial])


class Dual(_TowerOps):
    """One forward level: primal plus directional tangent."""

    __slots__ = ("primal", "tangent", "depth")

    def __init__(self, primal: Any, tangent: Any):
        self.primal = primal
        self.tangent = tangent
        self.depth = depth_of(primal) + 1

    def __repr__(self) -> str:
        return f"Dual(depth={self.depth}, primal={self.primal!r}, tangent={self.tangent!r})"

    def __getitem__(self, idx):
        return Dual(self.primal[idx], self.tangent[idx])

    def _lift(self, other: Any) -> "Dual":
        # callers pass towers no deeper than self
        if isinstance(other, Dual) and other.depth == self.depth:
            return other
        return Dual(other, np.zeros(np.shape(value_of(other))))


# ==================== Elementary operations ====================

def _var_binary(op, a, b, value, da, db):
    parents, partials = [], []
    if isinstance(a, Var):
        sa = a.value.shape
        parents.append(a)
        partials.append(lambda g, sa=sa: _unbroadcast(da(g), sa))
    if isinstance(b, Var):
        sb = b.value.shape
        parents.append(b)
        partials.append(lambda g, sb=sb: _unbroadcast(db(g), sb))
    tape = (a if isinstance(a, Var) else b).tape
    return tape.record(op, value, parents, partials)


def add(a: Any, b: Any) -> Any:
    top = _deepest(a, b)
    if top is None:
        return np.add(a, b)
    if isinstance(top, Dual):
        x, y = (top, top._lift(b)) if top is a else (top._lift(a), top)
        p = add(x.primal, y.primal)
        return Dual(p, _expand(add(x.tangent, y.tangent), np.shape(value_of(p))))
    av, bv = value_of(a), value_of(b)
    return _var_binary("add", a, b, av + bv, lambda g: g, lambda g: g)


def subtract(a: Any, b: Any) -> Any:
    return add(a, negative(b))


def negative(a: Any) -> Any:
    if isinstance(a, Dual):
        return Dual(negative(a.primal), negative(a.tangent))
    if isinstance(a, Var):
        return a.tape.record("negative", -a.value, [a], [lambda g: -g])
    return np.negative(a)


def multiply(a: Any, b: Any) -> Any:
    top = _deepest(a, b)
    if top is None:
        return np.multiply(a, b)
    if isinstance(top, Dual):
        x, y = (top, top._lift(b)) if top is a else (top._lift(a), top)
        p = multiply(x.primal, y.primal)
        t = add(multiply(x.primal, y.tangent), multiply(x.tangent, y.primal))
        return Dual(p, _expand(t, np.shape(value_of(p))))
    av, bv = value_of(a), value_of(b)
    return _var_binary("multiply", a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def divide(a: Any, b: Any) -> Any:
    top = _deepest(a, b)
    if top is None:
        return _checked("divide", np.divide, a, b)
    if isinstance(top, Dual):
        x, y = (top, top._lift(b)) if top is a else (top._lift(a), top)
        q = divide(x.primal, y.primal)
        t = divide(subtract(x.tangent, multiply(q, y.tangent)), y.primal)
        return Dual(q, _expand(t, np.shape(value_of(q))))
    av, bv = value_of(a), value_of(b)
    q = _checked("divide", np.divide, av, bv)
    return _var_binary("divide", a, b, q, lambda g: g / bv, lambda g: -g * q / bv)


def power(a: Any, c: Any) -> Any:
    if isinstance(c, (Dual, Var)):
        raise DifferentiationCapabilityError("power", "only constant exponents are supported")
    c = float(c)
    if isinstance(a, Dual):
        return Dual(power(a.primal, c), multiply(c * power(a.primal, c - 1.0), a.tangent))
    if isinstance(a, Var):
        av = a.value
        out = _checked("power", np.power, av, c)
        d = c * _checked("power", np.power, av, c - 1.0) if c != 0.0 else np.zeros_like(av)
        return a.tape.record("power", out, [a], [lambda g, d=d: g * d])
    return _checked("power", np.power, a, c)


def _unary(op: str, np_fn: Callable[[Array], Array], dual_rule, deriv):
    def fn(x: Any) -> Any:
        if isinstance(x, Dual):
            return dual_rule(x)
        if isinstance(x, Var):
            out = _checked(op, np_fn, x.value)
            d = deriv(x.value, out)
            return x.tape.record(op, out, [x], [lambda g, d=d: g * d])
        return _checked(op, np_fn, x)

    fn.__name__ = op
    fn.__doc__ = f"Elementwise {op} over scalar towers."
    return fn


def _softplus(x):
    return np.logaddexp(0.0, x)


exp = _unary("exp", np.exp, lambda x: _exp_dual(x), lambda v, out: out)
log = _unary("log", np.log, lambda x: Dual(log(x.primal), divide(x.tangent, x.primal)), lambda v, out: 1.0 / v)
log1p = _unary(
    "log1p", np.log1p, lambda x: Dual(log1p(x.primal), divide(x.tangent, add(x.primal, 1.0))), lambda v, out: 1.0 / (1.0 + v)
)
sin = _unary("sin", np.sin, lambda x: Dual(sin(x.primal), multiply(cos(x.primal), x.tangent)), lambda v, out: np.cos(v))
cos = _unary("cos", np.cos, lambda x: Dual(cos(x.primal), negative(multiply(sin(x.primal), x.tangent))), lambda v, out: -np.sin(v))
sqrt = _unary("sqrt", np.sqrt, lambda x: _sqrt_dual(x), lambda v, out: 0.5 / out)
expit = _unary("expit", _expit, lambda x: _expit_dual(x), lambda v, out: out * (1.0 - out))
softplus = _unary(
    "softplus", _softplus, lambda x: Dual(softplus(x.primal), multiply(expit(x.primal), x.tangent)), lambda v, out: _expit(v)
)


def _exp_dual(x: Dual) -> Dual:
    e = exp(x.primal)
    return Dual(e, multiply(e, x.tangent))


def _sqrt_dual(x: Dual) -> Dual:
    s = sqrt(x.primal)
    return Dual(s, divide(x.tangent, multiply(2.0, s)))


def _expit_dual(x: Dual) -> Dual:
    s = expit(x.primal)
    return Dual(s, multiply(multiply(s, subtract(1.0, s)), x.tangent))


def square(x: Any) -> Any:
    return multiply(x, x)


def tsum(x: Any, axis: Optional[int] = None) -> Any:
    """Sum reduction over scalar towers."""
    if isinstance(x, Dual):
        return Dual(tsum(x.primal, axis), tsum(x.tangent, axis))
    if isinstance(x, Var):
        shape = x.value.shape

        def partial(g, shape=shape, axis=axis):
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

        return x.tape.record("sum", np.sum(x.value, axis=axis), [x], [partial])
    return np.sum(x, axis=axis)


def stack(items: Sequence[Any]) -> Any:
    """Stack equally shaped towers along a new leading axis."""
    items = list(items)
    top = _deepest(*items)
    if top is None:
        return np.stack([np.asarray(i, dtype=float) for i in items])
    if isinstance(top, Dual):
        lifted = [top._lift(i) for i in items]
        return Dual(stack([i.primal for i in lifted]), stack([i.tangent for i in lifted]))
    parents = [i for i in items if isinstance(i, Var)]
    positions = [k for k, i in enumerate(items) if isinstance(i, Var)]
    partials = [lambda g, k=k: g[k] for k in positions]
    value = np.stack([value_of(i) for i in items])
    return top.tape.record("stack", value, parents, partials)


def reshape(x: Any, shape: Tuple[int, ...]) -> Any:
    if isinstance(x, Dual):
        return Dual(reshape(x.primal, shape), reshape(x.tangent, shape))
    if isinstance(x, Var):
        old = x.value.shape
        return x.tape.record("reshape", x.value.reshape(shape), [x], [lambda g, old=old: np.reshape(g, old)])
    return np.reshape(x, shape)


_UFUNCS = {
    np.add: add,
    np.subtract: subtract,
    np.multiply: multiply,
    np.true_divide: divide,
    np.negative: negative,
    np.power: power,
    np.exp: exp,
    np.log: log,
    np.log1p: log1p,
    np.sin: sin,
    np.cos: cos,
    np.sqrt: sqrt,
    np.square: square,
}


def _array_ufunc(self, ufunc, method, *inputs, **kwargs):
    fn = _UFUNCS.get(ufunc)
    if fn is None or method != "__call__" or kwargs:
        raise DifferentiationCapabilityError(getattr(ufunc, "__name__", str(ufunc)))
    return fn(*inputs)


_TowerOps.__array_ufunc__ = _array_ufunc


# ==================== Sweep plans ====================

class SweepMode(str, Enum):
    """Direction of one sweep."""
    FORWARD = "fwd"
    REVERSE = "rev"


class VariableBlock(str, Enum):
    """Which part of the joint vector (theta, eta) a seed refers to."""
    THETA = "theta"
    ETA = "eta"
    JOINT = "joint"


@dataclass(frozen=True)
class Sweep:
    mode: SweepMode
    seed: Any
    block: VariableBlock = VariableBlock.JOINT


@dataclass(frozen=True)
class SweepPlan:
    """Sweeps executed left to right; reverse only in final position.

    ``split`` is the dimension of the theta block when the input is the
    joint vector (theta, eta); it is ignored for plans over a single block.
    """

    sweeps: Tuple[Sweep, ...]
    split: Optional[int] = None

    @property
    def forward(self) -> Tuple[Sweep, ...]:
        return tuple(s for s in self.sweeps if s.mode == SweepMode.FORWARD)

    @property
    def reverse(self) -> Optional[Sweep]:
        if self.sweeps and self.sweeps[-1].mode == SweepMode.REVERSE:
            return self.sweeps[-1]
        return None

    def block_slice(self, block: VariableBlock, dim: int) -> slice:
        if block == VariableBlock.JOINT:
            return slice(0, dim)
        if self.split is None:
            raise PlanValidationError(f"block '{block.value}' requires a theta/eta split")
        return slice(0, self.split) if block == VariableBlock.THETA else slice(self.split, dim)

    def validate(self, dim: int) -> None:
        if not self.sweeps:
            raise PlanValidationError("empty sweep plan")
        for i, sweep in enumerate(self.sweeps):
            if sweep.mode == SweepMode.REVERSE and i != len(self.sweeps) - 1:
                raise PlanValidationError("reverse sweep must be the final sweep")
        if self.split is not None and not 0 <= self.split <= dim:
            raise PlanValidationError(f"split {self.split} outside joint dimension {dim}")
        for sweep in self.forward:
            sl = self.block_slice(sweep.block, dim)
            width = sl.stop - sl.start
            if np.size(sweep.seed) != width:
                raise PlanValidationError(
                    f"forward seed has {np.size(sweep.seed)} entries, block '{sweep.block.value}' has {width}"
                )

    def expand_seed(self, sweep: Sweep, dim: int) -> Array:
        full = np.zeros(dim)
        full[self.block_slice(sweep.block, dim)] = np.ravel(np.asarray(sweep.seed, dtype=float))
        return full


@dataclass
class SweepCounter:
    """Number of forward and reverse sweeps spent by an operation."""

    forward: int = 0
    reverse: int = 0

    def count(self, mode: SweepMode, k: int = 1) -> None:
        if mode == SweepMode.FORWARD:
            self.forward += k
        else:
            self.reverse += k

    @property
    def total(self) -> int:
        return self.forward + self.reverse

    def reset(self) -> None:
        self.forward = 0
        self.reverse = 0


def _count(counter: Optional[SweepCounter], mode: SweepMode, k: int = 1) -> None:
    if counter is not None:
        counter.count(mode, k)


def _as_vector(x: Any) -> Array:
    x = np.array(x, dtype=float)
    if x.ndim != 1:
        x = x.reshape(-1)
    return x


def _call(f: Callable[[Any], Any], x: Any) -> Any:
    try:
        return f(x)
    except TypeError as exc:
        # e.g. math.exp or float() applied to a tower
        raise DifferentiationCapabilityError("non-tower call", str(exc)) from exc


def run_plan(
    f: Callable[[Any], Any],
    x: Any,
    plan: SweepPlan,
    counter: Optional[SweepCounter] = None,
) -> Array:
    """Execute ``plan`` on ``f`` at ``x`` and return the final sweep's output."""
    x = _as_vector(x)
    dim = x.size
    plan.validate(dim)

    rev = plan.reverse
    tape = Tape() if rev is not None else None
    base = tape.variable(x) if tape is not None else x
    lifted: Any = base
    forward = plan.forward
    for sweep in forward:
        lifted = Dual(lifted, plan.expand_seed(sweep, dim))

    out = _call(f, lifted)
    for _ in forward:
        out = tangent_of(out)
    _count(counter, SweepMode.FORWARD, len(forward))

    if rev is None:
        return np.asarray(value_of(out), dtype=float)

    grad = tape.gradient(out, rev.seed, base)
    _count(counter, SweepMode.REVERSE)
    return grad[plan.block_slice(rev.block, dim)]


# ==================== Sweep compositions ====================

def fwd_sweep(f, x, v, counter: Optional[SweepCounter] = None) -> Array:
    """Directional derivative (df/dx) v without forming the Jacobian."""
    x = _as_vector(x)
    if np.size(v) != x.size:
        raise ContractViolationError(f"tangent has {np.size(v)} entries, input has {x.size}")
    return run_plan(f, x, SweepPlan((Sweep(SweepMode.FORWARD, v),)), counter)


def rev_sweep(f, x, w, counter: Optional[SweepCounter] = None) -> Array:
    """Co-directional derivative w^T (df/dx) from one tape traversal."""
    return run_plan(f, x, SweepPlan((Sweep(SweepMode.REVERSE, w),)), counter)


def gradient(f, x, counter: Optional[SweepCounter] = None) -> Array:
    """Gradient of a scalar field."""
    return rev_sweep(f, x, 1.0, counter)


def hessian_vector(f, x, v, counter: Optional[SweepCounter] = None) -> Array:
    """Hessian-vector product from one forward and one reverse sweep."""
    x = _as_vector(x)
    if np.size(v) != x.size:
        raise ContractViolationError(f"tangent has {np.size(v)} entries, input has {x.size}")
    plan = SweepPlan((Sweep(SweepMode.FORWARD, v), Sweep(SweepMode.REVERSE, 1.0)))
    return run_plan(f, x, plan, counter)


def dense_hessian(f, x, counter: Optional[SweepCounter] = None) -> Array:
    """Full Hessian from n coordinate Hessian-vector products."""
    x = _as_vector(x)
    n = x.size
    eye = np.eye(n)
    columns = [hessian_vector(f, x, eye[:, j], counter) for j in range(n)]
    return np.column_stack(columns) if columns else np.zeros((0, 0))


def strided_tangents(n: int, m: int) -> List[Array]:
    """Unit tangents v_j with ones at every index congruent to j mod m."""
    tangents = []
    for j in range(m):
        v = np.zeros(n)
        v[j::m] = 1.0
        tangents.append(v)
    return tangents


def block_hessian(
    f,
    x,
    m: int,
    counter: Optional[SweepCounter] = None,
    check: bool = False,
) -> BlockDiagonal:
    """m x m block-diagonal Hessian of ``f`` from exactly m Hessian-vector products.

    The block structure is trusted. ``check=True`` additionally builds the
    dense Hessian (n extra products) and rejects off-block entries.
    """
    x = _as_vector(x)
    n = x.size
    if m < 1 or n % m != 0:
        raise ContractViolationError(f"dimension {n} is not divisible by block size {m}")
    nb = n // m
    blocks = np.zeros((nb, m, m))
    for j, v in enumerate(strided_tangents(n, m)):
        column = hessian_vector(f, x, v, counter).reshape(nb, m)
        blocks[:, :, j] = column

    if check:
        dense = dense_hessian(f, x)
        off = dense - BlockDiagonal(blocks).to_dense()
        scale = max(1.0, float(np.max(np.abs(dense))) if dense.size else 1.0)
        if off.size and np.max(np.abs(off)) > 1e-10 * scale:
            raise ContractViolationError(f"Hessian is not {m}x{m} block-diagonal")
    return BlockDiagonal(blocks)


def third_order_diag(f, x, counter: Optional[SweepCounter] = None) -> Array:
    """Diagonal of the third derivative tensor for a diagonal-Hessian field."""
    x = _as_vector(x)
    ones = np.ones(x.size)
    plan = SweepPlan(
        (
            Sweep(SweepMode.FORWARD, ones),
            Sweep(SweepMode.FORWARD, ones),
            Sweep(SweepMode.REVERSE, 1.0),
        )
    )
    return run_plan(f, x, plan, counter)


def second_order_adjoint(
    f,
    x,
    pairs: Sequence[Tuple[Array, Array]],
    counter: Optional[SweepCounter] = None,
) -> Array:
    """Gradient of sum_j v_j^T (d2f/dx2) w_j.

    Every (v_j, w_j) pair is one forward-over-forward evaluation recorded on a
    shared tape; a single reverse sweep then differentiates the sum.
    """
    x = _as_vector(x)
    tape = Tape()
    base = tape.variable(x)
    total: Any = 0.0
    for v, w in pairs:
        if np.size(v) != x.size or np.size(w) != x.size:
            raise ContractViolationError("tangent pair does not match the input dimension")
        out = _call(f, Dual(Dual(base, np.asarray(v, dtype=float)), np.asarray(w, dtype=float)))
        total = add(total, tangent_of(tangent_of(out)))
        _count(counter, SweepMode.FORWARD, 2)
    grad = tape.gradient(total, 1.0, base)
    _count(counter, SweepMode.REVERSE)
    logger.debug("second_order_adjoint: %d pairs, tape of %d nodes", len(pairs), len(tape))
    return grad
