"""High-frequency statistics computed from a simulated path."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .errors import ArgumentError, DegenerateVarianceError, MisuseError
from .functional import FunctionalSpec, evaluate, path_range, trapezoid_mean
from .model import FineGridPath, block_segments


@dataclass(frozen=True)
class EstimateResult:
    value: float
    t: float
    delta_n: float
    n_used: int
    avar: float | None = None
    ci: tuple[float, float, float] | None = None  # (lo, hi, level)
    degenerate: bool = False

    def __post_init__(self):
        if self.ci is not None and (self.avar is None or self.avar < 0):
            raise ArgumentError("a confidence interval requires a non-negative avar")


CSV_COLUMNS = ("estimator", "horizon", "n_coarse", "m_fine", "value", "avar", "ci_lo", "ci_hi", "seed")


def to_csv_row(result: EstimateResult, estimator: str, path: FineGridPath, seed="") -> dict:
    g = path.grid
    lo, hi = (result.ci[0], result.ci[1]) if result.ci else (None, None)
    return {
        "estimator": estimator,
        "horizon": result.t,
        "n_coarse": g.n_coarse,
        "m_fine": g.m_fine,
        "value": result.value,
        "avar": result.avar,
        "ci_lo": lo,
        "ci_hi": hi,
        "seed": seed,
    }


def _horizon(path: FineGridPath, t):
    t = path.grid.horizon if t is None else float(t)
    if t > path.grid.horizon * (1 + 1e-12):
        raise ArgumentError(f"t={t} exceeds the simulated horizon {path.grid.horizon}")
    return t, path.grid.blocks_up_to(t)


def block_values(path: FineGridPath, g: FunctionalSpec, t=None) -> np.ndarray:
    """``g(dn^{-1/2} d_i^n X)`` for ``i = 1 .. floor(t / dn)``."""
    _, n = _horizon(path, t)
    if n == 0:
        return np.empty(0)
    segs = block_segments(path, path.grid.delta_n ** -0.5, n)
    return np.atleast_1d(evaluate(g, segs))


def _check_continuous(path, allow_jumps):
    if path.has_jumps and not allow_jumps:
        raise MisuseError("path has jumps; the continuous-case statistic does not apply "
                          "(pass allow_jumps=True to override)")


def v_statistic(path: FineGridPath, g: FunctionalSpec, t=None, allow_jumps=False) -> EstimateResult:
    """``dn * sum_i g(dn^{-1/2} d_i^n X)``."""
    _check_continuous(path, allow_jumps)
    t, n = _horizon(path, t)
    vals = block_values(path, g, t)
    return EstimateResult(float(path.grid.delta_n * vals.sum()), t, path.grid.delta_n, n)


def bipower_from_values(vals: np.ndarray, delta_n: float) -> float:
    if vals.size < 2:
        raise ArgumentError("need at least two blocks")
    return float(delta_n * (vals[:-1] ** 2 - vals[:-1] * vals[1:]).sum())


def bipower_variance(path: FineGridPath, g: FunctionalSpec, t=None, allow_jumps=False) -> EstimateResult:
    """Adjacent-block estimator of ``int rho_sigma(g^2) - rho_sigma(g)^2 ds``.

    Sums ``g_i^2 - g_i g_{i+1}`` over ``i = 1 .. floor(t/dn) - 1``. The raw value
    may be negative; ``degenerate`` flags that case.
    """
    if not g.is_even:
        raise MisuseError("studentization by the bipower estimator requires an even functional")
    _check_continuous(path, allow_jumps)
    t, n = _horizon(path, t)
    if n < 2:
        raise ArgumentError("need at least two coarse intervals")
    val = bipower_from_values(block_values(path, g, t), path.grid.delta_n)
    return EstimateResult(val, t, path.grid.delta_n, n - 1, degenerate=val <= 0)


def studentize(stat: EstimateResult, target: float, variance_stat: EstimateResult) -> float:
    """``dn^{-1/2} (stat - target) / sqrt(variance)``."""
    if not variance_stat.value > 0:
        raise DegenerateVarianceError(f"variance estimate {variance_stat.value} is not positive")
    return (stat.value - target) / math.sqrt(stat.delta_n * variance_stat.value)


def feasible_ci(path: FineGridPath, g: FunctionalSpec, level: float = 0.95, t=None) -> EstimateResult:
    """``V(X,g)^n`` with the studentized confidence interval for its limit.

    A non-positive bipower estimate is floored at 0 and flagged; no interval
    is attached in that case.
    """
    v = v_statistic(path, g, t)
    var = bipower_variance(path, g, t)
    if var.degenerate:
        return replace(v, avar=0.0, degenerate=True)
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * math.sqrt(v.delta_n * var.value)
    return replace(v, avar=var.value, ci=(v.value - half, v.value + half, level))


def block_ranges(path: FineGridPath, t=None) -> np.ndarray:
    """Block sup minus block inf for ``i = 1 .. floor(t/dn)`` (envelope-aware)."""
    _, n = _horizon(path, t)
    if n == 0:
        return np.empty(0)
    return np.atleast_1d(path_range(block_segments(path, 1.0, n)))


def realized_range(path: FineGridPath, p: float, t=None) -> EstimateResult:
    """``sum_i (sup_block X - inf_block X)^p``, no ``dn`` prefactor."""
    if not p > 0:
        raise ArgumentError(f"p must be > 0, got {p}")
    t, n = _horizon(path, t)
    return EstimateResult(float((block_ranges(path, t) ** p).sum()), t, path.grid.delta_n, n)


def power_variation(path: FineGridPath, p: float, t=None) -> EstimateResult:
    """``sum_i |Delta_i X|^p`` over coarse increments, no normalisation."""
    if not p > 0:
        raise ArgumentError(f"p must be > 0, got {p}")
    t, n = _horizon(path, t)
    inc = np.diff(path.coarse_values[: n + 1])
    return EstimateResult(float((np.abs(inc) ** p).sum()), t, path.grid.delta_n, n)


def local_averages(path: FineGridPath, t=None) -> np.ndarray:
    _, n = _horizon(path, t)
    m = path.grid.m_fine
    win = np.lib.stride_tricks.sliding_window_view(path.x[: n * m + 1], m + 1)[::m]
    return trapezoid_mean(win)


def local_average_qv(path: FineGridPath, t=None) -> EstimateResult:
    """``sum_{i>=2} (Xbar_i - Xbar_{i-1})^2`` with block averages by the trapezoid rule."""
    if path.grid.m_fine < 2:
        raise ArgumentError("local averages need m_fine >= 2")
    _check_continuous(path, False)
    t, n = _horizon(path, t)
    if n < 2:
        return EstimateResult(0.0, t, path.grid.delta_n, 0)
    avg = local_averages(path, t)
    return EstimateResult(float((np.diff(avg) ** 2).sum()), t, path.grid.delta_n, n - 1)
