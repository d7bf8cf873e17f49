"""Path functionals on discretised segments of C([0, 1]).

A :class:`Segment` holds ``m + 1`` samples at ``s = k/m`` (or a batch of
them, shape ``(..., m + 1)``) and optionally a per-cell envelope giving the
sup/inf of the underlying continuous path inside each of the ``m`` cells.
Only the range functional looks at the envelope.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ArgumentError, UnsupportedDerivativeError


@dataclass(frozen=True, eq=False)
class Segment:
    values: np.ndarray
    upper: np.ndarray | None = None
    lower: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 0 or v.shape[-1] < 2:
            raise ArgumentError("a segment needs at least two samples")
        object.__setattr__(self, "values", v)
        if (self.upper is None) != (self.lower is None):
            raise ArgumentError("upper and lower envelopes must be given together")
        if self.upper is not None:
            up = np.asarray(self.upper, dtype=float)
            lo = np.asarray(self.lower, dtype=float)
            if up.shape != v.shape[:-1] + (v.shape[-1] - 1,) or lo.shape != up.shape:
                raise ArgumentError("envelope must have one entry per cell")
            object.__setattr__(self, "upper", up)
            object.__setattr__(self, "lower", lo)

    @property
    def m(self) -> int:
        return self.values.shape[-1] - 1

    @property
    def batched(self) -> bool:
        return self.values.ndim > 1

    def __len__(self):
        return self.values.shape[0] if self.batched else self.m + 1

    def __getitem__(self, idx) -> Segment:
        if not self.batched:
            raise TypeError("only batched segments can be indexed")
        if self.upper is None:
            return Segment(self.values[idx])
        return Segment(self.values[idx], self.upper[idx], self.lower[idx])

    def __mul__(self, c: float) -> Segment:
        if self.upper is None:
            return Segment(c * self.values)
        if c >= 0:
            return Segment(c * self.values, c * self.upper, c * self.lower)
        return Segment(c * self.values, c * self.lower, c * self.upper)

    __rmul__ = __mul__

    def __neg__(self) -> Segment:
        return self * -1.0

    def plus(self, other: Segment, h: float = 1.0) -> Segment:
        """Sample-wise ``self + h * other``; the envelope is dropped."""
        return Segment(self.values + h * np.asarray(other.values, dtype=float))

    def restrict(self, step: int) -> Segment:
        """Keep every ``step``-th sample; cell envelopes are merged accordingly."""
        if self.m % step:
            raise ArgumentError(f"m={self.m} is not divisible by {step}")
        v = self.values[..., ::step]
        if self.upper is None:
            return Segment(v)
        shape = self.upper.shape[:-1] + (self.m // step, step)
        return Segment(v, self.upper.reshape(shape).max(-1), self.lower.reshape(shape).min(-1))

    def sup_norm(self):
        out = np.abs(self.values).max(-1)
        if self.upper is not None:
            out = np.maximum(out, np.maximum(np.abs(self.upper), np.abs(self.lower)).max(-1))
        return out

    def check_finite(self):
        ok = np.isfinite(self.values).all()
        if self.upper is not None:
            ok = ok and np.isfinite(self.upper).all() and np.isfinite(self.lower).all()
        if not ok:
            raise ArgumentError("segment contains non-finite values")


BUILTIN_KINDS = ("terminal_power", "integral_power", "range_power")


@dataclass(frozen=True)
class FunctionalSpec:
    """A functional ``g`` on segments.

    Use the constructors :func:`terminal_power`, :func:`integral_power`,
    :func:`range_power` and :func:`custom` rather than building it directly.
    ``evaluator(seg) -> float`` and ``derivative(x, y) -> float`` receive
    unbatched segments.
    """

    kind: str
    p: float | None = None
    is_even: bool = False
    evaluator: Callable[[Segment], float] | None = None
    derivative: Callable[[Segment, Segment], float] | None = None

    def __post_init__(self):
        if self.kind in BUILTIN_KINDS:
            if self.p is None or not self.p > 0:
                raise ArgumentError(f"exponent p must be > 0, got {self.p}")
            object.__setattr__(self, "is_even", True)
        elif self.kind == "custom":
            if self.evaluator is None:
                raise ArgumentError("custom functional needs an evaluator")
        else:
            raise ArgumentError(f"unknown functional kind {self.kind!r}")

    @property
    def is_builtin(self) -> bool:
        return self.kind in BUILTIN_KINDS

    @property
    def uses_envelope(self) -> bool:
        return self.kind == "range_power"

    def __str__(self):
        return f"{self.kind}({self.p:g})" if self.is_builtin else "custom"


def terminal_power(p: float) -> FunctionalSpec:
    return FunctionalSpec("terminal_power", float(p))


def integral_power(p: float) -> FunctionalSpec:
    return FunctionalSpec("integral_power", float(p))


def range_power(p: float) -> FunctionalSpec:
    return FunctionalSpec("range_power", float(p))


def custom(evaluator, derivative=None, is_even: bool = False) -> FunctionalSpec:
    return FunctionalSpec("custom", None, is_even, evaluator, derivative)


def trapezoid_mean(values: np.ndarray) -> np.ndarray:
    """Trapezoid rule for ``int_0^1 x(s) ds`` on equispaced samples."""
    m = values.shape[-1] - 1
    return (values[..., 1:-1].sum(-1) + 0.5 * (values[..., 0] + values[..., -1])) / m


def path_range(x: Segment):
    hi = x.values.max(-1)
    lo = x.values.min(-1)
    if x.upper is not None:
        hi = np.maximum(hi, x.upper.max(-1))
        lo = np.minimum(lo, x.lower.min(-1))
    return hi - lo


def evaluate(g: FunctionalSpec, x: Segment):
    """``g(x)``; returns a float for a single segment, an array for a batch."""
    x.check_finite()
    if g.kind == "terminal_power":
        out = np.abs(x.values[..., -1]) ** g.p
    elif g.kind == "integral_power":
        out = np.abs(trapezoid_mean(x.values)) ** g.p
    elif g.kind == "range_power":
        out = path_range(x) ** g.p
    elif x.batched:
        out = np.array([float(g.evaluator(x[i])) for i in range(len(x))])
    else:
        out = float(g.evaluator(x))
    return float(out) if np.ndim(out) == 0 else out


def evaluate_squared(g: FunctionalSpec, x: Segment):
    return evaluate(g, x) ** 2


def _pow_deriv(u, p):
    # d/du |u|^p
    return p * np.abs(u) ** (p - 1) * np.sign(u)


def directional_derivative(g: FunctionalSpec, x: Segment, y: Segment):
    """Gateaux derivative ``g'_y(x)`` computed from the samples of x and y."""
    yv = np.asarray(y.values, dtype=float)
    if g.kind == "custom":
        if g.derivative is None:
            raise UnsupportedDerivativeError("custom functional has no derivative evaluator")
        if x.batched:
            out = np.array([float(g.derivative(x[i], Segment(yv[i]))) for i in range(len(x))])
        else:
            out = float(g.derivative(x, Segment(yv)))
        return out
    if not g.p > 1:
        raise UnsupportedDerivativeError(f"{g.kind} derivative needs p > 1, got p={g.p}")
    xv = x.values
    if g.kind == "terminal_power":
        out = _pow_deriv(xv[..., -1], g.p) * yv[..., -1]
    elif g.kind == "integral_power":
        out = _pow_deriv(trapezoid_mean(xv), g.p) * trapezoid_mean(yv)
    else:
        # the sup moves with y at the (first) argmax, the inf at the (first) argmin
        imax = np.argmax(xv, axis=-1)[..., None]
        imin = np.argmin(xv, axis=-1)[..., None]
        yb = np.broadcast_to(yv, xv.shape)
        dy = np.take_along_axis(yb, imax, -1)[..., 0] - np.take_along_axis(yb, imin, -1)[..., 0]
        rng = xv.max(-1) - xv.min(-1)
        out = g.p * rng ** (g.p - 1) * dy
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class EvenCheck:
    passed: bool
    worst_violation: float
    trials: int


def check_even(g: FunctionalSpec, trials: int = 200, seed=0, m: int = 20,
               tol: float = 1e-9) -> EvenCheck:
    """Test ``g(x) == g(-x)`` on random Brownian-like segments."""
    if trials < 1:
        raise ArgumentError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    passed = True
    for _ in range(trials):
        scale = rng.uniform(0.1, 3.0)
        v = np.concatenate([[0.0], np.cumsum(rng.standard_normal(m))]) * scale / np.sqrt(m)
        x = Segment(v)
        gx, gm = evaluate(g, x), evaluate(g, -x)
        viol = abs(gx - gm)
        worst = max(worst, viol)
        if viol > tol * (1 + abs(gx)):
            passed = False
    return EvenCheck(passed, worst, trials)
