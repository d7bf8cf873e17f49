"""Limit-theory ingredients: rho-constants, lambda/Lambda, and limit-law samplers."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ArgumentError,
    InternalConstantError,
    UnsupportedDerivativeError,
    UnsupportedError,
)
from .functional import (
    FunctionalSpec,
    Segment,
    directional_derivative,
    evaluate,
    integral_power,
    range_power,
    terminal_power,
)
from .rng import CH_AUX, CH_BRIDGE, CH_LIMIT, CH_W, SeedStream, as_stream

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_CHUNK_CELLS = 2_000_000


@dataclass(frozen=True)
class RhoEstimate:
    value: float
    std_error: float
    reps: int
    m: int
    method: str = "mc"

    def __post_init__(self):
        if self.std_error < 0 or self.reps < 1:
            raise ArgumentError("std_error must be >= 0 and reps >= 1")

    def __float__(self):
        return float(self.value)


# Brownian segments ---------------------------------------------------------------


def brownian_segments(reps: int, m: int, rng: np.random.Generator,
                      bridge_rng: np.random.Generator | None = None) -> Segment:
    """``reps`` standard Brownian paths on ``s = k/m``.

    With ``bridge_rng`` the per-cell Brownian-bridge sup/inf envelope is drawn
    as well, which makes range functionals exact in continuous time.
    """
    dw = rng.standard_normal((reps, m)) * math.sqrt(1.0 / m)
    w = np.zeros((reps, m + 1))
    np.cumsum(dw, axis=1, out=w[:, 1:])
    if bridge_rng is None:
        return Segment(w)
    a, b = w[:, :-1], w[:, 1:]
    d2 = (b - a) ** 2
    e = bridge_rng.standard_exponential((2, reps, m)) * (2.0 / m)
    hi = 0.5 * (a + b + np.sqrt(d2 + e[0]))
    lo = 0.5 * (a + b - np.sqrt(d2 + e[1]))
    return Segment(w, hi, lo)


def _chunks(reps: int, m: int):
    size = max(1, _CHUNK_CELLS // max(m, 1))
    start = 0
    while start < reps:
        yield start, min(reps, start + size)
        start += size


def _segment_chunks(reps, m, stream: SeedStream, envelope: bool):
    for k, (a, b) in enumerate(_chunks(reps, m)):
        s = stream.child(k)
        yield brownian_segments(b - a, m, s.generator(CH_W), s.generator(CH_BRIDGE) if envelope else None)


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    n = samples.size
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n))


def rho_mc(z: float, g: FunctionalSpec, m: int = 200, reps: int = 20_000, seed=0,
           envelope: bool | None = None) -> RhoEstimate:
    """Monte Carlo estimate of ``E[g(z W)]`` over Brownian segments on ``m`` steps."""
    if reps < 2 or m < 1:
        raise ArgumentError("need reps >= 2 and m >= 1")
    stream = as_stream(seed)
    envelope = g.uses_envelope if envelope is None else envelope
    parts = []
    done = 0
    for seg in _segment_chunks(reps, m, stream, envelope):
        try:
            parts.append(np.atleast_1d(evaluate(g, seg * z)))
        except Exception as exc:
            head = exc.args[0] if exc.args else repr(exc)
            exc.args = (f"{head} (replications {done}..{done + len(seg) - 1})",) + exc.args[1:]
            raise
        done += len(seg)
    value, se = _mean_se(np.concatenate(parts))
    return RhoEstimate(value, se, reps, m, "mc")


# lambda / Lambda ---------------------------------------------------------------------

FAMILY_FUNCTIONALS = {1: terminal_power, 2: integral_power, 3: range_power}


def gaussian_abs_moment(p: float) -> float:
    """``E|N(0,1)|^p``; even integer exponents give the exact ``(p-1)!!``."""
    if float(p).is_integer() and int(p) % 2 == 0:
        return float(math.prod(range(int(p) - 1, 0, -2)))
    return 2 ** (p / 2) * math.gamma((p + 1) / 2) / math.sqrt(math.pi)


def _table_path() -> Path:
    return Path(str(resources.files("hfpath") / "data" / "constants.csv"))


def read_constants_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for r in csv.DictReader(lines):
        rows.append({
            "family": int(r["family"]), "p": float(r["p"]), "value": float(r["value"]),
            "std_error": float(r["std_error"]), "method": r["method"], "m": int(r["m"]),
            "reps": int(r["reps"]), "seed": int(r["seed"]),
        })
    return rows


def write_constants_csv(rows: Iterable[dict], path, header: str | None = None) -> None:
    cols = ("family", "p", "value", "std_error", "method", "m", "reps", "seed")
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([
                r["family"], f"{r['p']:.17g}", f"{r['value']:.17g}", f"{r['std_error']:.17g}",
                r["method"], r["m"], r["reps"], r["seed"],
            ])


@lru_cache(maxsize=1)
def constants_table() -> dict[tuple[int, float], RhoEstimate]:
    """Checked-in oracle constants keyed by ``(family, p)``."""
    out = {}
    path = _table_path()
    if not path.exists():
        return out
    for r in read_constants_csv(path):
        out[(r["family"], round(r["p"], 10))] = RhoEstimate(
            r["value"], r["std_error"], r["reps"], r["m"], r["method"])
    return out


def lambda_const(family: int, p: float, method: str | None = None, m: int = 200,
                 reps: int = 100_000, seed=0) -> RhoEstimate:
    """``lambda^{family,p}``: ``E|W_1|^p``, ``E|int_0^1 W|^p`` or ``E[range(W)^p]``.

    ``method`` is ``"closed_form"`` (families 1, 2), ``"table"`` (checked-in
    oracle values) or ``"mc"``. The default is closed form where it exists and
    the table otherwise, falling back to Monte Carlo for exponents the table
    does not list.
    """
    if family not in FAMILY_FUNCTIONALS:
        raise ArgumentError(f"family must be 1, 2 or 3, got {family}")
    if not p > 0:
        raise ArgumentError(f"p must be > 0, got {p}")
    if method is None:
        method = "closed_form" if family in (1, 2) else "table"
    if method == "closed_form":
        if family == 3:
            raise UnsupportedError("no closed form is provided for the range family")
        v = gaussian_abs_moment(p)
        if family == 2:
            v *= 3 ** (-p / 2)  # int_0^1 W ds ~ N(0, 1/3)
        return RhoEstimate(v, 0.0, 1, 0, "closed_form")
    if method == "table":
        hit = constants_table().get((family, round(float(p), 10)))
        if hit is not None:
            return hit
        method = "mc"
    if method == "mc":
        return rho_mc(1.0, FAMILY_FUNCTIONALS[family](p), m=m, reps=reps, seed=seed)
    raise ArgumentError(f"unknown method {method!r}")


def _ratio(l2p: float, lp: float) -> float:
    return (l2p - lp * lp) / (lp * lp)


def Lambda_const(family: int, p: float, method: str | None = None, m: int = 200,
                 reps: int = 100_000, seed=0) -> RhoEstimate:
    """``(lambda^{2p} - (lambda^p)^2) / (lambda^p)^2`` with a delta-method error.

    For ``method="mc"`` both moments come from the same draws and their
    covariance enters the error; for table values the covariance is unknown
    and dropped, which overstates the error since the moments are positively
    correlated.
    """
    if method is None:
        method = "closed_form" if family in (1, 2) else "table"
    if method == "closed_form" and family == 2:
        # int_0^1 W ds is Gaussian, so the scale-free ratio equals family 1's
        family = 1
    if method == "mc":
        stream = as_stream(seed)
        g = FAMILY_FUNCTIONALS[family](1.0)
        base = []
        for seg in _segment_chunks(reps, m, stream, g.uses_envelope):
            base.append(np.atleast_1d(evaluate(g, seg)))
        base = np.concatenate(base)
        a, b = base**p, base ** (2 * p)
        ea, eb = a.mean(), b.mean()
        cov = np.cov(np.vstack([a, b])) / reps
        grad = np.array([-2 * eb / ea**3, 1 / ea**2])
        se = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
        return RhoEstimate(float(_ratio(eb, ea)), se, reps, m, "mc")
    lp = lambda_const(family, p, method, m, reps, seed)
    l2p = lambda_const(family, 2 * p, method, m, reps, seed)
    val = _ratio(l2p.value, lp.value)
    grad_a = -2 * l2p.value / lp.value**3
    grad_b = 1 / lp.value**2
    se = math.hypot(grad_a * lp.std_error, grad_b * l2p.std_error)
    meth = lp.method if lp.method == l2p.method else f"{lp.method}+{l2p.method}"
    return RhoEstimate(val, se, max(lp.reps, l2p.reps), max(lp.m, l2p.m), meth)


def range_moment_oracle(ps: Sequence[float], reps: int = 1_000_000, m: int = 200,
                        seed=0) -> dict[float, RhoEstimate]:
    """High-accuracy ``E[range(W)^p]`` for several p from one set of draws.

    Ranges come from bridge-enveloped Brownian paths. Each moment is
    variance-reduced with control variates whose means follow from the
    reflection principle (``max W ~ |N(0,1)|`` on [0, 1]).
    """
    stream = as_stream(seed)
    ps = [float(p) for p in ps]
    k = 6
    sy = {p: 0.0 for p in ps}
    syy = {p: 0.0 for p in ps}
    scy = {p: np.zeros(k) for p in ps}
    sc = np.zeros(k)
    scc = np.zeros((k, k))
    n = 0
    for seg in _segment_chunks(reps, m, stream, True):
        hi = seg.upper.max(-1)
        lo = seg.lower.min(-1)
        w1 = seg.values[:, -1]
        c = np.column_stack([hi - SQRT_2_OVER_PI, -lo - SQRT_2_OVER_PI, hi**2 - 1, lo**2 - 1,
                             w1**2 - 1, np.abs(w1) - SQRT_2_OVER_PI])
        r = hi - lo
        n += r.size
        sc += c.sum(0)
        scc += c.T @ c
        for p in ps:
            y = r**p
            sy[p] += y.sum()
            syy[p] += y @ y
            scy[p] += c.T @ y
    mc = sc / n
    cov_cc = (scc - n * np.outer(mc, mc)) / (n - 1)
    out = {}
    for p in ps:
        my = sy[p] / n
        var_y = (syy[p] - n * my * my) / (n - 1)
        cov_cy = (scy[p] - n * mc * my) / (n - 1)
        beta = np.linalg.lstsq(cov_cc, cov_cy, rcond=None)[0]
        est = my - beta @ mc
        resid = var_y - 2 * beta @ cov_cy + beta @ cov_cc @ beta
        out[p] = RhoEstimate(float(est), float(math.sqrt(max(resid, 0.0) / n)), n, m, "mc_cv_bridge")
    return out


# rho^(1), rho^(2), rho^(3) -------------------------------------------------------------


@dataclass(frozen=True)
class Rho123:
    rho1: RhoEstimate
    rho2: RhoEstimate | None
    rho3: RhoEstimate | None
    rho3_other: RhoEstimate | None = None  # the other reading of the rho3 direction
    variant: str = "as_stated"


def rho123_mc(z: float, g: FunctionalSpec, reps: int = 20_000, m: int = 200, seed=0,
              variant: str = "as_stated") -> Rho123:
    """Monte Carlo ``E[g(zW) W_1]``, ``E[g'_{s}(zW)]`` and ``E[g'_{W^2}(zW)]``.

    ``variant="as_proof"`` uses the direction ``W_s^2 - s`` instead of
    ``W_s^2``; the other reading is always returned in ``rho3_other``.
    If g has no derivative, :class:`UnsupportedDerivativeError` is raised with
    the partial result (``rho1`` filled in) attached as ``partial``.
    """
    if variant not in ("as_stated", "as_proof"):
        raise ArgumentError(f"unknown variant {variant!r}")
    if reps < 2:
        raise ArgumentError("need reps >= 2")
    stream = as_stream(seed)
    s_dir = np.linspace(0.0, 1.0, m + 1)
    r1, r2, r3s, r3p = [], [], [], []
    deriv_error = None
    for seg in _segment_chunks(reps, m, stream, g.uses_envelope):
        x = seg * z
        w = seg.values
        r1.append(np.atleast_1d(evaluate(g, x)) * w[:, -1])
        if deriv_error is not None:
            continue
        xs = Segment(x.values)
        try:
            d_s = np.atleast_1d(directional_derivative(g, xs, Segment(np.broadcast_to(s_dir, w.shape))))
            d_w2 = np.atleast_1d(directional_derivative(g, xs, Segment(w**2)))
        except UnsupportedDerivativeError as exc:
            deriv_error = exc
            continue
        r2.append(d_s)
        r3s.append(d_w2)
        r3p.append(d_w2 - d_s)  # the derivative is linear in the direction
    est = lambda parts: RhoEstimate(*_mean_se(np.concatenate(parts)), reps, m, "mc")  # noqa: E731
    rho1 = est(r1)
    if deriv_error is not None:
        raise UnsupportedDerivativeError(str(deriv_error), partial=Rho123(rho1, None, None, None, variant))
    stated, proof = est(r3s), est(r3p)
    rho3, other = (stated, proof) if variant == "as_stated" else (proof, stated)
    return Rho123(rho1, est(r2), rho3, other, variant)


# limit laws -----------------------------------------------------------------------------


@dataclass(frozen=True)
class LimitLawSample:
    value: float
    per_jump_terms: tuple[float, ...]
    mixed_gaussian_part: float


@dataclass(frozen=True, eq=False)
class LimitLawSamples:
    """Replications of a limit law; behaves like a sequence of :class:`LimitLawSample`."""

    per_jump: np.ndarray  # (reps, n_jumps)
    mixed: np.ndarray  # (reps,)

    @property
    def values(self) -> np.ndarray:
        return self.per_jump.sum(axis=1) + self.mixed

    def __len__(self):
        return self.mixed.shape[0]

    def __getitem__(self, i) -> LimitLawSample:
        terms = tuple(float(v) for v in self.per_jump[i])
        mixed = float(self.mixed[i])
        return LimitLawSample(float(sum(terms) + mixed), terms, mixed)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _as_jump_array(jumps) -> np.ndarray:
    arr = np.asarray(list(jumps), dtype=float).reshape(-1, 3)
    if not np.isfinite(arr).all():
        raise ArgumentError("jump sizes and sigma values must be finite")
    return arr


def simulate_limit_U_jump(jumps, p: float, reps: int, seed=0, kappa=None) -> LimitLawSamples:
    """Draws of the jump limit ``U(X, p)_t`` given ``(J, sigma_left, sigma_right)`` per jump.

    Each jump contributes ``p |J|^{p-1}`` times the sup over ``s <= kappa <= u``
    of ``(W_kappa - W_s) sigma_left + (W_u - W_kappa) sigma_right`` (sign
    flipped for negative J). The sup splits into two independent Brownian
    maxima over ``[0, kappa]`` and ``[kappa, 1]``, sampled exactly as
    ``sqrt(kappa)|N|`` and ``sqrt(1 - kappa)|N'|``; the sign flip leaves this
    law unchanged. ``kappa`` is drawn U(0, 1) per replication unless given.
    """
    if not p > 0:
        raise ArgumentError(f"p must be > 0, got {p}")
    arr = _as_jump_array(jumps)
    k = arr.shape[0]
    if k == 0:
        return LimitLawSamples(np.zeros((reps, 0)), np.zeros(reps))
    rng = as_stream(seed).generator(CH_LIMIT)
    if kappa is None:
        kap = rng.random((reps, k))
    else:
        kap = np.broadcast_to(np.asarray(kappa, dtype=float), (reps, k))
        if ((kap < 0) | (kap > 1)).any():
            raise ArgumentError("kappa must lie in [0, 1]")
    n1 = np.abs(rng.standard_normal((reps, k)))
    n2 = np.abs(rng.standard_normal((reps, k)))
    size, sl, sr = arr[:, 0], arr[:, 1], arr[:, 2]
    sup = sl * np.sqrt(kap) * n1 + sr * np.sqrt(1.0 - kap) * n2
    terms = p * np.abs(size) ** (p - 1) * sup
    return LimitLawSamples(terms, np.zeros(reps))


def mixed_variance_constant() -> float:
    """``lambda^{3,4} - (lambda^{3,2})^2``."""
    l2, l4 = lambda_const(3, 2.0).value, lambda_const(3, 4.0).value
    v = l4 - l2 * l2
    if not v >= 0:
        raise InternalConstantError(f"negative variance constant {v}; check the range oracle")
    return v


def simulate_limit_mixed(jumps, sigma_path, dt: float, reps: int, seed=0, kappa=None,
                         variance_constant: float | None = None) -> LimitLawSamples:
    """Draws of ``U(X,2)_t + sqrt(lambda^{3,4} - (lambda^{3,2})^2) int sigma^2 dW'``.

    Given the path, the stochastic integral is centred Gaussian with variance
    ``const * sum sigma_k^4 dt`` (left-point Riemann sum over ``sigma_path``).
    """
    c = mixed_variance_constant() if variance_constant is None else float(variance_constant)
    if c < 0:
        raise InternalConstantError(f"negative variance constant {c}")
    sig = np.asarray(sigma_path, dtype=float)
    if not np.isfinite(sig).all():
        raise ArgumentError("sigma path must be finite")
    stream = as_stream(seed)
    u = simulate_limit_U_jump(jumps, 2.0, reps, stream.child(0), kappa)
    var = c * float((sig**4).sum() * dt)
    gauss = math.sqrt(var) * stream.child(1).generator(CH_LIMIT).standard_normal(reps)
    return LimitLawSamples(u.per_jump, gauss)


def _rho_family(g: FunctionalSpec):
    return {"terminal_power": 1, "integral_power": 2, "range_power": 3}.get(g.kind)


def simulate_limit_U_continuous(sigma_path, g: FunctionalSpec, dt: float, reps: int, seed=0,
                                drift_path=None, vol_of_vol_path=None, w_increments=None,
                                rho_reps: int = 20_000, rho_m: int = 100,
                                variant: str = "as_stated") -> LimitLawSamples:
    """Draws of ``U(X,g)_t = int u1 ds + int u2 dW + int u3 dW'`` by left-point sums.

    ``u1 = mu rho2 + (rho3 - rho2) sigma_tilde / 2``, ``u2 = rho1``,
    ``u3 = sqrt(rho(g^2) - rho(g)^2 - rho1^2)``, all evaluated at ``sigma_s``.
    Note that the vol-of-vol coefficient of V does not enter u1.
    ``w_increments`` fixes the W-integral (conditioning on the path); without
    it fresh increments are drawn, which is valid when sigma is independent of W.
    For even g only the W' term survives.
    """
    sig = np.asarray(sigma_path, dtype=float)
    if not np.isfinite(sig).all():
        raise ArgumentError("sigma path must be finite")
    stream = as_stream(seed)
    rng = stream.generator(CH_LIMIT)
    k = sig.size
    fam = _rho_family(g)

    if g.is_even:
        if fam is not None:
            c1 = lambda_const(fam, g.p).value
            c2 = lambda_const(fam, 2 * g.p).value
            var = (c2 - c1 * c1) * float((np.abs(sig) ** (2 * g.p)).sum() * dt)
        else:
            uniq, inv = np.unique(np.abs(sig), return_inverse=True)
            seg_stream = stream.child(1)
            local = np.empty(uniq.size)
            for j, z in enumerate(uniq):
                vals = np.concatenate([np.atleast_1d(evaluate(g, s * z))
                                       for s in _segment_chunks(rho_reps, rho_m, seg_stream, g.uses_envelope)])
                local[j] = vals.var()
            var = float(local[inv].sum() * dt)
        var = max(var, 0.0)
        return LimitLawSamples(np.zeros((reps, 0)), math.sqrt(var) * rng.standard_normal(reps))

    mu = np.zeros(k) if drift_path is None else np.asarray(drift_path, dtype=float)
    vv = np.zeros(k) if vol_of_vol_path is None else np.asarray(vol_of_vol_path, dtype=float)
    if mu.shape != sig.shape or vv.shape != sig.shape:
        raise ArgumentError("drift and vol-of-vol paths must match the sigma path")
    uniq, inv = np.unique(sig, return_inverse=True)
    r = np.empty((uniq.size, 5))
    for j, z in enumerate(uniq):
        # common random numbers across sigma levels
        est = rho123_mc(z, g, reps=rho_reps, m=rho_m, seed=stream.child(2), variant=variant)
        seg_vals = np.concatenate([np.atleast_1d(evaluate(g, s * z))
                                   for s in _segment_chunks(rho_reps, rho_m, stream.child(2), g.uses_envelope)])
        r[j] = (est.rho1.value, est.rho2.value, est.rho3.value, seg_vals.mean(), (seg_vals**2).mean())
    rho1, rho2, rho3, rho_g, rho_g2 = (r[inv, i] for i in range(5))
    u1 = mu * rho2 + 0.5 * vv * rho3 - 0.5 * vv * rho2
    u2 = rho1
    u3sq = np.maximum(rho_g2 - rho_g**2 - rho1**2, 0.0)
    drift_part = float(u1.sum() * dt)
    if w_increments is not None:
        dw = np.broadcast_to(np.asarray(w_increments, dtype=float), (reps, k))
    else:
        dw = rng.standard_normal((reps, k)) * math.sqrt(dt)
    w_part = dw @ u2
    wprime = math.sqrt(float(u3sq.sum() * dt)) * stream.child(3).generator(CH_AUX).standard_normal(reps)
    return LimitLawSamples(np.zeros((reps, 0)), drift_part + w_part + wprime)
