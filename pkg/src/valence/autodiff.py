"""A small taped reverse-mode autodiff engine over float64 numpy arrays.

Every operation appends a node to the :class:`Tape` of its operands; the
tape is therefore topologically ordered by construction and
:meth:`Tape.backward` is a single reverse sweep.  Parameters are named
leaves registered with :meth:`Tape.param`; ``backward`` returns their
gradients keyed by name.

Only what the recurrent models need is provided: dense 2-D/3-D arrays,
broadcasting elementwise arithmetic, batched matmul against a 2-D right
operand, a handful of activations and reductions, and diagonal-Gaussian
helpers parameterised by log-variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition of an engine call was violated."""


class TrainingError(RuntimeError):
    """Non-finite values surfaced during optimisation."""


class _Scatter:
    """Gradient for a sub-block of a parent; accumulated in place."""

    __slots__ = ("index", "grad")

    def __init__(self, index, grad):
        self.index = index
        self.grad = grad


class Tensor:
    __slots__ = ("value", "tape", "id", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, id={self.id})"

    def numpy(self) -> np.ndarray:
        return self.value

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
        return getitem(self, index)


class Tape:
    """Ordered record of operations plus a registry of named parameters."""

    def __init__(self):
        self.values: list[Tensor] = []
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self._backward: list[Callable | None] = []
        self.params: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self.values)

    def _record(self, kind, value, parents: Sequence[Tensor], backward) -> Tensor:
        rg = any(p.requires_grad for p in parents)
        t = Tensor(value, self, len(self.values), rg)
        self.values.append(t)
        self.kinds.append(kind)
        self.parents.append(tuple(p.id for p in parents))
        self._backward.append(backward if rg else None)
        return t

    def const(self, value) -> Tensor:
        v = np.asarray(value, dtype=np.float64)
        return self._record("const", v, (), None)

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        v = np.array(value, dtype=np.float64)
        t = Tensor(v, self, len(self.values), True)
        self.values.append(t)
        self.kinds.append("param")
        self.parents.append(())
        self._backward.append(None)
        self.params[name] = t
        return t

    def params_from(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in arrays.items()}

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.id + 1)
        owned = [False] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        for nid in range(loss.id, -1, -1):
            g = grads[nid]
            fn = self._backward[nid]
            if g is None or fn is None:
                continue
            for pid, pg in zip(self.parents[nid], fn(g)):
                if pg is None or not self.values[pid].requires_grad:
                    continue
                if isinstance(pg, _Scatter):
                    acc = grads[pid]
                    if acc is None:
                        acc = np.zeros_like(self.values[pid].value)
                    elif not owned[pid]:
                        acc = np.array(acc)
                    grads[pid] = acc
                    owned[pid] = True
                    acc[pg.index] += pg.grad
                elif grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
                    owned[pid] = True
        out = {}
        for name, t in self.params.items():
            g = grads[t.id] if t.id < len(grads) else None
            out[name] = np.zeros_like(t.value) if g is None else np.array(g, dtype=np.float64)
        return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ContractError("at least one operand must be a Tensor")


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ContractError("operands recorded on different tapes")
        return x
    return tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(kind, a, b, fwd, bwd) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    try:
        val = fwd(a.value, b.value)
    except ValueError as exc:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        ga, gb = bwd(g, a.value, b.value, val)
        return (
            None if ga is None else _unbroadcast(ga, sa),
            None if gb is None else _unbroadcast(gb, sb),
        )

    return tape._record(kind, val, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y, v: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, v: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y, v: (g * y, g * x))


def div(a, b) -> Tensor:
    return _binary("div", a, b, np.divide, lambda g, x, y, v: (g / y, -g * v / y))


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., K) and ``b`` of shape (K, N)."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return tape._record("matmul", av @ bv, (a, b), backward)


def _unary(kind, x: Tensor, val, dfn) -> Tensor:
    return x.tape._record(kind, val, (x,), lambda g: (dfn(g),))


def neg(x: Tensor) -> Tensor:
    return _unary("neg", x, -x.value, lambda g: -g)


def tanh(x: Tensor) -> Tensor:
    v = np.tanh(x.value)
    return _unary("tanh", x, v, lambda g: g * (1.0 - v * v))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    v = _sigmoid(x.value)
    return _unary("sigmoid", x, v, lambda g: g * v * (1.0 - v))


def relu(x: Tensor) -> Tensor:
    m = x.value > 0
    return _unary("relu", x, np.where(m, x.value, 0.0), lambda g: g * m)


def exp(x: Tensor) -> Tensor:
    v = np.exp(x.value)
    return _unary("exp", x, v, lambda g: g * v)


def log(x: Tensor) -> Tensor:
    xv = x.value
    return _unary("log", x, np.log(xv), lambda g: g / xv)


def softplus(x: Tensor) -> Tensor:
    xv = x.value
    v = np.logaddexp(0.0, xv)
    return _unary("softplus", x, v, lambda g: g * _sigmoid(xv))


def square(x: Tensor) -> Tensor:
    xv = x.value
    return _unary("square", x, xv * xv, lambda g: 2.0 * g * xv)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _unary("softmax", x, s, lambda g: s * (g - (g * s).sum(axis=-1, keepdims=True)))


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(f"concat: leading shapes differ {[x.shape for x in xs]}")
    val = np.concatenate([x.value for x in xs], axis=-1)
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def backward(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return tape._record("concat", val, xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equally shaped tensors along a new ``axis``."""
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise DimensionError(f"stack: shapes differ {[x.shape for x in xs]}")
    val = np.stack([x.value for x in xs], axis=axis)
    ax = axis if axis >= 0 else axis + len(shape) + 1

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return tape._record("stack", val, xs, backward)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; gradients scatter back into the parent."""
    val = x.value[index]
    if isinstance(val, np.ndarray) and val.base is None and not np.isscalar(val):
        # advanced indexing would need np.add.at; the models never use it
        raise ContractError("getitem supports basic indexing only")
    return x.tape._record("slice", np.array(val, copy=True), (x,), lambda g: (_Scatter(index, g),))


def reshape(x: Tensor, shape) -> Tensor:
    s0 = x.shape
    return _unary("reshape", x, x.value.reshape(shape), lambda g: g.reshape(s0))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    s0 = x.shape
    val = np.asarray(x.value.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, s0),)

    return x.tape._record("sum", val, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a fixed (non-differentiable) mask, e.g. a dropout mask."""
    m = np.asarray(mask, dtype=np.float64)
    try:
        val = x.value * m
    except ValueError as exc:
        raise DimensionError(f"apply_mask: shapes {x.shape} and {m.shape}") from exc
    s0 = x.shape
    return _unary("mask", x, val, lambda g: _unbroadcast(g * m, s0))


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(1 - rate) scaled by 1 / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# diagonal Gaussians (log-variance parameterisation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiagGaussian:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise DimensionError(f"DiagGaussian: mean {self.mean.shape} vs logvar {self.logvar.shape}")

    @classmethod
    def from_moments(cls, tape: Tape, mean, variance) -> "DiagGaussian":
        var = np.asarray(variance, dtype=np.float64)
        if np.any(var <= 0):
            raise ContractError("variance must be strictly positive")
        return cls(tape.const(mean), tape.const(np.log(var)))

    @property
    def variance(self) -> Tensor:
        return exp(self.logvar)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def _same_dim(kind, a_shape, b_shape):
    if a_shape != b_shape:
        raise DimensionError(f"{kind}: dimension mismatch {a_shape} vs {b_shape}")


def reparam_sample(q: DiagGaussian, noise) -> Tensor:
    """``mean + sqrt(variance) * noise``, differentiable in mean and log-variance."""
    eps = np.asarray(noise, dtype=np.float64)
    _same_dim("reparam_sample", q.mean.shape, eps.shape)
    std = exp(mul(q.logvar, 0.5))
    return add(q.mean, mul(std, eps))


def gaussian_kl(q: DiagGaussian, p: DiagGaussian, reduce: bool = True) -> Tensor:
    """KL(q || p) summed over the last axis (and over everything if ``reduce``)."""
    _same_dim("gaussian_kl", q.mean.shape, p.mean.shape)
    diff = sub(q.mean, p.mean)
    ratio = exp(sub(q.logvar, p.logvar))
    term = add(ratio, mul(square(diff), exp(neg(p.logvar))))
    term = add(sub(term, 1.0), sub(p.logvar, q.logvar))
    out = tsum(term, axis=-1)
    out = mul(out, 0.5)
    return tsum(out) if reduce else out


def gaussian_nll(x, p: DiagGaussian, reduce: bool = True) -> Tensor:
    """Negative log density of ``x`` under ``p``, summed over the last axis."""
    tape = p.mean.tape
    x = _lift(x, tape)
    _same_dim("gaussian_nll", x.shape, p.mean.shape)
    sq = mul(square(sub(x, p.mean)), exp(neg(p.logvar)))
    term = add(add(sq, p.logvar), LOG_2PI)
    out = mul(tsum(term, axis=-1), 0.5)
    return tsum(out) if reduce else out


def poe(factors: Sequence[DiagGaussian], masks: Sequence[np.ndarray | None] | None = None) -> DiagGaussian:
    """Product of diagonal Gaussians: precisions add, means are precision-weighted.

    ``masks`` optionally gates each factor per row (0 removes the factor for
    that row, as if it were absent).
    """
    if len(factors) == 0:
        raise ContractError("poe needs at least one factor")
    if masks is None:
        masks = [None] * len(factors)
    shape = factors[0].mean.shape
    total = None
    weighted = None
    for f, m in zip(factors, masks):
        _same_dim("poe", f.mean.shape, shape)
        prec = exp(neg(f.logvar))
        if m is not None:
            prec = apply_mask(prec, m)
        wm = mul(prec, f.mean)
        total = prec if total is None else add(total, prec)
        weighted = wm if weighted is None else add(weighted, wm)
    return DiagGaussian(div(weighted, total), neg(log(total)))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    # decoupled (AdamW-style) decay, applied as p -= lr * weight_decay * p
    weight_decay: float = 0.0


class Optimizer:
    """In-place parameter updates; plain SGD or adaptive moments."""

    def __init__(self, config: OptimConfig | None = None):
        self.config = config or OptimConfig()
        if self.config.kind not in {"adam", "sgd"}:
            raise ContractError(f"unknown optimizer {self.config.kind!r}")
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        cfg = self.config
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        scale = 1.0
        if cfg.clip_norm is not None:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
        self.t += 1
        for name in sorted(grads):
            g = grads[name] * scale if scale != 1.0 else grads[name]
            p = params[name]
            if cfg.weight_decay:
                p -= cfg.lr * cfg.weight_decay * p
            if cfg.kind == "sgd":
                p -= cfg.lr * g
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            mhat = m / (1.0 - cfg.beta1**self.t)
            vhat = v / (1.0 - cfg.beta2**self.t)
            p -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


def optimizer_step(params, grads, config: OptimConfig | None = None, state: Optimizer | None = None) -> Optimizer:
    """One update of ``params`` in place; returns the (possibly new) optimizer state."""
    opt = state if state is not None else Optimizer(config)
    opt.step(params, grads)
    return opt


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def numeric_grad(loss_fn: Callable[[dict[str, np.ndarray]], float], params: dict[str, np.ndarray], name: str, step: float = 1e-5) -> np.ndarray:
    p = params[name]
    out = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = loss_fn(params)
        flat[i] = old - step
        fm = loss_fn(params)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


def check_gradients(build_loss: Callable[[Tape, dict[str, Tensor]], Tensor], params: dict[str, np.ndarray], step: float = 1e-5) -> dict[str, float]:
    """Relative error of taped gradients against central differences, per parameter."""
    tape = Tape()
    loss = build_loss(tape, tape.params_from(params))
    analytic = tape.backward(loss)

    def scalar(ps):
        t = Tape()
        return float(build_loss(t, t.params_from(ps)).value)

    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    return {name: relative_error(analytic[name], numeric_grad(scalar, work, name, step)) for name in params}
