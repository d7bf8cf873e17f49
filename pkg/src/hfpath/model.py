"""Simulation of Ito semimartingale paths on nested coarse/fine grids.

X follows ``dX = mu(t, X) dt + sigma dW + dZ`` with a compound-Poisson (or
fixed) jump part Z, and sigma follows its own Euler scheme driven by W and a
second Brownian motion V. Both are discretised on a fine grid with ``m_fine``
steps per coarse interval.

Besides the fine samples, each path may carry a per-cell envelope: the sup
and inf of the continuous-time Euler interpolation over every fine cell,
drawn from the exact Brownian-bridge extreme law given the cell endpoints.
Range statistics use the envelope so that block suprema are not biased
downwards by the O(sqrt(delta)) deficit of a discrete maximum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ArgumentError, IntegrationDivergedError
from .functional import Segment
from .rng import CH_BRIDGE, CH_JUMPS, CH_V, CH_VOL_JUMPS, CH_W, SeedStream, as_stream

Coefficient = Union[float, Callable[[float, np.ndarray], np.ndarray]]


def _is_zero(c) -> bool:
    return not callable(c) and float(c) == 0.0


def _coef(c, t, state):
    if callable(c):
        return np.broadcast_to(np.asarray(c(t, state), dtype=float), state.shape)
    return float(c)


@dataclass(frozen=True)
class TimeGrid:
    """Coarse grid ``i * delta_n`` with ``m_fine`` fine steps per coarse interval."""

    horizon: float
    n_coarse: int
    m_fine: int = 50

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ArgumentError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_coarse) != self.n_coarse or self.n_coarse < 1:
            raise ArgumentError(f"n_coarse must be an integer >= 1, got {self.n_coarse}")
        if int(self.m_fine) != self.m_fine or self.m_fine < 1:
            raise ArgumentError(f"m_fine must be an integer >= 1, got {self.m_fine}")

    @property
    def delta_n(self) -> float:
        return self.horizon / self.n_coarse

    @property
    def delta(self) -> float:
        return self.delta_n / self.m_fine

    @property
    def n_cells(self) -> int:
        return self.n_coarse * self.m_fine

    @property
    def n_points(self) -> int:
        return self.n_cells + 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.delta

    def blocks_up_to(self, t: float | None = None) -> int:
        """``floor(t / delta_n)``, capped at ``n_coarse``."""
        if t is None:
            return self.n_coarse
        if t < 0:
            raise ArgumentError("t must be non-negative")
        return min(self.n_coarse, int(math.floor(t / self.delta_n * (1 + 1e-12))))


# jump size laws -------------------------------------------------------------


@dataclass(frozen=True)
class TwoPoint:
    a: float
    b: float
    prob_a: float = 0.5

    def __post_init__(self):
        if not 0 <= self.prob_a <= 1:
            raise ArgumentError("prob_a must lie in [0, 1]")

    @property
    def min_abs(self) -> float:
        return min(abs(self.a), abs(self.b))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.where(rng.random(size) < self.prob_a, self.a, self.b).astype(float)


@dataclass(frozen=True)
class TruncatedGaussian:
    """N(mean, sd^2) conditioned on ``|J| >= floor``."""

    mean: float
    sd: float
    floor: float

    def __post_init__(self):
        if self.sd < 0:
            raise ArgumentError("sd must be non-negative")
        if self.sd == 0 and abs(self.mean) < self.floor:
            raise ArgumentError("degenerate law violates the size floor")

    @property
    def min_abs(self) -> float:
        return self.floor

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        out = self.mean + self.sd * rng.standard_normal(size)
        bad = np.abs(out) < self.floor
        for _ in range(10_000):
            if not bad.any():
                break
            out[bad] = self.mean + self.sd * rng.standard_normal(int(bad.sum()))
            bad = np.abs(out) < self.floor
        else:
            raise ArgumentError("rejection sampling for truncated Gaussian jumps failed")
        return out


@dataclass(frozen=True)
class UniformSigned:
    """``|J| ~ U(lo, hi)`` with an independent fair sign."""

    lo: float
    hi: float

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi:
            raise ArgumentError("need 0 <= lo <= hi")

    @property
    def min_abs(self) -> float:
        return self.lo

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        mag = rng.uniform(self.lo, self.hi, size)
        return np.where(rng.random(size) < 0.5, -mag, mag)


SizeLaw = Union[TwoPoint, TruncatedGaussian, UniformSigned]


@dataclass(frozen=True)
class JumpSpec:
    """Compound Poisson jumps with rate ``intensity`` per unit time."""

    intensity: float
    size_law: SizeLaw

    def __post_init__(self):
        if not self.intensity >= 0:
            raise ArgumentError("jump intensity must be >= 0")
        if not self.size_law.min_abs > 0:
            raise ArgumentError("jump sizes must be bounded away from zero")

    @property
    def min_abs_size(self) -> float:
        return self.size_law.min_abs


@dataclass(frozen=True)
class FixedJumps:
    """A fixed jump scenario.

    ``kappa_mode="exact"`` places every jump at its given time.
    ``kappa_mode="uniform"`` keeps each jump in the coarse block containing
    its nominal time but redraws the within-block position uniformly for
    every path, so the position fraction is U(0, 1) as in the jump limit law.
    """

    times: tuple[float, ...]
    sizes: tuple[float, ...]
    kappa_mode: str = "exact"

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "sizes", tuple(float(s) for s in self.sizes))
        if len(self.times) != len(self.sizes):
            raise ArgumentError("times and sizes must have equal length")
        if any(s == 0 for s in self.sizes):
            raise ArgumentError("jump sizes must be non-zero")
        if self.kappa_mode not in ("exact", "uniform"):
            raise ArgumentError(f"unknown kappa_mode {self.kappa_mode!r}")

    @property
    def min_abs_size(self) -> float:
        return min((abs(s) for s in self.sizes), default=math.inf)


@dataclass(frozen=True)
class VolSpec:
    """Euler dynamics of the volatility.

    ``d sigma = mu_tilde dt + sigma_tilde dW + v_tilde dV`` plus independent
    jumps (``vol_jumps``) and co-jumps drawn from ``cojump_law`` at every jump
    of X. Coefficients are constants or callables ``f(t, sigma_array)``.
    """

    sigma0: float = 1.0
    mu_tilde: Coefficient = 0.0
    sigma_tilde: Coefficient = 0.0
    v_tilde: Coefficient = 0.0
    vol_jumps: JumpSpec | None = None
    cojump_law: SizeLaw | None = None
    positivity_floor: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.sigma0) and self.sigma0 >= 0):
            raise ArgumentError("sigma0 must be finite and >= 0")

    @property
    def floor(self) -> float:
        if self.positivity_floor is not None:
            return float(self.positivity_floor)
        return 1e-6 * self.sigma0

    @property
    def is_constant(self) -> bool:
        return (
            _is_zero(self.mu_tilde)
            and _is_zero(self.sigma_tilde)
            and _is_zero(self.v_tilde)
            and self.vol_jumps is None
            and self.cojump_law is None
        )


@dataclass(frozen=True)
class ModelSpec:
    x0: float = 0.0
    drift: Coefficient = 0.0
    vol: VolSpec = field(default_factory=VolSpec)
    jumps: JumpSpec | FixedJumps | None = None
    rho_wv: float = 0.0

    def __post_init__(self):
        if not -1 <= self.rho_wv <= 1:
            raise ArgumentError("rho_wv must lie in [-1, 1]")


@dataclass(frozen=True)
class JumpRecord:
    time: float
    size: float
    coarse_index: int  # 1-based block index
    kappa: float  # exact within-block fraction, before snapping
    sigma_left: float
    sigma_right: float
    fine_index: int  # first fine point that includes the jump


@dataclass(frozen=True, eq=False)
class FineGridPath:
    grid: TimeGrid
    x: np.ndarray
    sigma: np.ndarray
    jumps: tuple[JumpRecord, ...] = ()
    cell_hi: np.ndarray | None = None
    cell_lo: np.ndarray | None = None

    def __post_init__(self):
        n = self.grid.n_points
        x = np.array(self.x, dtype=float)
        s = np.array(self.sigma, dtype=float)
        if x.shape != (n,) or s.shape != (n,):
            raise ArgumentError(f"path arrays must have length {n}")
        if not (np.isfinite(x).all() and np.isfinite(s).all()):
            raise ArgumentError("path values must be finite")
        arrays = {"x": x, "sigma": s}
        if (self.cell_hi is None) != (self.cell_lo is None):
            raise ArgumentError("cell_hi and cell_lo must be given together")
        if self.cell_hi is not None:
            arrays["cell_hi"] = np.array(self.cell_hi, dtype=float)
            arrays["cell_lo"] = np.array(self.cell_lo, dtype=float)
            if arrays["cell_hi"].shape != (n - 1,) or arrays["cell_lo"].shape != (n - 1,):
                raise ArgumentError("envelope arrays must have one entry per fine cell")
        for name, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "jumps", tuple(self.jumps))

    @property
    def has_jumps(self) -> bool:
        return len(self.jumps) > 0

    @property
    def has_envelope(self) -> bool:
        return self.cell_hi is not None

    @property
    def jump_times(self) -> list[tuple[float, float, int, float]]:
        return [(j.time, j.size, j.coarse_index, j.kappa) for j in self.jumps]

    @property
    def sigma_at_jumps(self) -> list[tuple[float, float]]:
        return [(j.sigma_left, j.sigma_right) for j in self.jumps]

    @property
    def coarse_values(self) -> np.ndarray:
        return self.x[:: self.grid.m_fine]

    def scaled(self, c: float) -> FineGridPath:
        """The path of ``c * X`` (sigma and jump sizes scale by ``|c|`` and ``c``)."""
        hi, lo = self.cell_hi, self.cell_lo
        if hi is not None:
            hi, lo = (c * hi, c * lo) if c >= 0 else (c * lo, c * hi)
        jumps = tuple(
            JumpRecord(j.time, c * j.size, j.coarse_index, j.kappa,
                       abs(c) * j.sigma_left, abs(c) * j.sigma_right, j.fine_index)
            for j in self.jumps
        )
        return FineGridPath(self.grid, c * self.x, abs(c) * self.sigma, jumps, hi, lo)


# simulation -------------------------------------------------------------------


def _place(grid: TimeGrid, block0: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    """Fine index of the first point including a jump at fraction kappa of a block.

    The exact time is snapped to the next fine boundary but kept strictly
    inside its block, so the jump never lands on the block's left endpoint.
    """
    m = grid.m_fine
    k = np.maximum(1, np.ceil(kappa * m - 1e-9).astype(np.int64))
    return block0 * m + np.minimum(k, m)


def _draw_jumps(spec, grid: TimeGrid, rng: np.random.Generator):
    """Return (times, sizes, block0, kappa) sorted by time."""
    n = grid.n_coarse
    if spec is None:
        e = np.empty(0)
        return e, e, np.empty(0, dtype=np.int64), e
    if isinstance(spec, JumpSpec):
        counts = rng.poisson(spec.intensity * grid.delta_n, size=n)
        block0 = np.repeat(np.arange(n, dtype=np.int64), counts)
        kappa = rng.random(block0.size)
        sizes = spec.size_law.sample(rng, block0.size)
    else:
        t = np.asarray(spec.times, dtype=float)
        if t.size and (t.min() < 0 or t.max() >= grid.horizon):
            raise ArgumentError("fixed jump times must lie in [0, horizon)")
        block0 = np.minimum(np.floor(t / grid.delta_n).astype(np.int64), n - 1)
        if spec.kappa_mode == "uniform":
            kappa = rng.random(t.size)
        else:
            kappa = np.clip(t / grid.delta_n - block0, 0.0, np.nextafter(1.0, 0.0))
        sizes = np.asarray(spec.sizes, dtype=float)
    times = (block0 + kappa) * grid.delta_n
    if isinstance(spec, FixedJumps) and spec.kappa_mode == "exact":
        times = np.asarray(spec.times, dtype=float)
    order = np.lexsort((kappa, block0))
    return times[order], sizes[order], block0[order], kappa[order]


def _envelope(a, b, var, rng_list):
    """Per-cell sup/inf of Brownian bridges from a to b with variance var."""
    e1 = np.stack([r.standard_exponential(a.shape[-1]) for r in rng_list])
    e2 = np.stack([r.standard_exponential(a.shape[-1]) for r in rng_list])
    d2 = (b - a) ** 2
    mid = a + b
    hi = 0.5 * (mid + np.sqrt(d2 + 2.0 * var * e1))
    lo = 0.5 * (mid - np.sqrt(d2 + 2.0 * var * e2))
    return hi, lo


def _first_bad(arr: np.ndarray) -> int:
    bad = ~np.isfinite(arr)
    return int(np.argmax(bad.any(axis=0)))


def simulate_paths(
    model: ModelSpec,
    grid: TimeGrid,
    seeds: Sequence[SeedStream | int],
    envelope: bool = True,
) -> list[FineGridPath]:
    """Simulate one path per seed; the time loop is vectorised over the batch.

    Each path depends only on its own seed stream, so batching does not change
    the output.
    """
    if not isinstance(grid, TimeGrid):
        raise ArgumentError("grid must be a TimeGrid")
    streams = [as_stream(s) for s in seeds]
    B, N, m = len(streams), grid.n_cells, grid.m_fine
    if B == 0:
        return []
    dt, sq = grid.delta, math.sqrt(grid.delta)
    times = grid.times
    vol = model.vol

    dW = np.stack([s.generator(CH_W).standard_normal(N) for s in streams]) * sq

    # jumps of X (fine-index increments) and of sigma
    jump_draws = []
    x_jumps = np.zeros((B, N + 1))
    s_jumps = np.zeros((B, N + 1))
    for b, s in enumerate(streams):
        rng = s.generator(CH_JUMPS)
        t, size, block0, kappa = _draw_jumps(model.jumps, grid, rng)
        idx = _place(grid, block0, kappa)
        np.add.at(x_jumps[b], idx, size)
        vrng = s.generator(CH_VOL_JUMPS)
        if vol.vol_jumps is not None:
            _, vsize, vblock0, vkappa = _draw_jumps(vol.vol_jumps, grid, vrng)
            np.add.at(s_jumps[b], _place(grid, vblock0, vkappa), vsize)
        if vol.cojump_law is not None and idx.size:
            np.add.at(s_jumps[b], idx, vol.cojump_law.sample(vrng, idx.size))
        jump_draws.append((t, size, block0, kappa, idx))

    # volatility
    floor = vol.floor
    if vol.is_constant:
        sigma = np.full((B, N + 1), max(vol.sigma0, floor))
    else:
        if _is_zero(vol.v_tilde):
            dV = None
        else:
            dZ = np.stack([s.generator(CH_V).standard_normal(N) for s in streams]) * sq
            r = model.rho_wv
            dV = r * dW + math.sqrt(1.0 - r * r) * dZ
        sigma = np.empty((B, N + 1))
        sigma[:, 0] = max(vol.sigma0, floor)
        for k in range(N):
            sk = sigma[:, k]
            tk = times[k]
            nxt = sk + _coef(vol.mu_tilde, tk, sk) * dt + _coef(vol.sigma_tilde, tk, sk) * dW[:, k]
            if dV is not None:
                nxt = nxt + _coef(vol.v_tilde, tk, sk) * dV[:, k]
            nxt = nxt + s_jumps[:, k + 1]
            if not np.isfinite(nxt).all():
                raise IntegrationDivergedError(k + 1, "sigma")
            sigma[:, k + 1] = np.maximum(nxt, floor)

    # X
    if callable(model.drift):
        x = np.empty((B, N + 1))
        x[:, 0] = model.x0
        for k in range(N):
            xk = x[:, k]
            nxt = xk + _coef(model.drift, times[k], xk) * dt + sigma[:, k] * dW[:, k] + x_jumps[:, k + 1]
            if not np.isfinite(nxt).all():
                raise IntegrationDivergedError(k + 1)
            x[:, k + 1] = nxt
    else:
        x = np.empty((B, N + 1))
        x[:, 0] = 0.0
        np.cumsum(sigma[:, :-1] * dW + x_jumps[:, 1:], axis=1, out=x[:, 1:])
        x += model.x0 + float(model.drift) * times
        if not np.isfinite(x).all():
            raise IntegrationDivergedError(_first_bad(x))

    if envelope:
        a = x[:, :-1]
        b_end = x[:, 1:] - x_jumps[:, 1:]
        var = sigma[:, :-1] ** 2 * dt
        hi, lo = _envelope(a, b_end, var, [s.generator(CH_BRIDGE) for s in streams])
    paths = []
    for b in range(B):
        t, size, block0, kappa, idx = jump_draws[b]
        recs = tuple(
            JumpRecord(float(t[j]), float(size[j]), int(block0[j]) + 1, float(kappa[j]),
                       float(sigma[b, idx[j] - 1]), float(sigma[b, idx[j]]), int(idx[j]))
            for j in range(t.size)
        )
        paths.append(
            FineGridPath(grid, x[b], sigma[b], recs,
                         hi[b] if envelope else None, lo[b] if envelope else None)
        )
    return paths


def simulate_path(model: ModelSpec, grid: TimeGrid, seed: SeedStream | int,
                  envelope: bool = True) -> FineGridPath:
    """Simulate a single path. Pure function of ``(model, grid, seed)``."""
    return simulate_paths(model, grid, [seed], envelope=envelope)[0]


# segments -----------------------------------------------------------------------


def segment_extract(path: FineGridPath, i: int, scale: float = 1.0) -> Segment:
    """``scale * (X_{(i-1+s) dn} - X_{(i-1) dn})`` at ``s = k/m``, for block ``i`` (1-based)."""
    g = path.grid
    if int(i) != i or not 1 <= i <= g.n_coarse:
        raise ArgumentError(f"block index {i} outside 1..{g.n_coarse}")
    m = g.m_fine
    lo_i, hi_i = (i - 1) * m, i * m
    base = path.x[lo_i]
    values = scale * (path.x[lo_i: hi_i + 1] - base)
    values[0] = 0.0
    up = low = None
    if path.has_envelope:
        up = scale * (path.cell_hi[lo_i:hi_i] - base)
        low = scale * (path.cell_lo[lo_i:hi_i] - base)
        if scale < 0:
            up, low = low, up
    return Segment(values, up, low)


def block_segments(path: FineGridPath, scale: float = 1.0, n_blocks: int | None = None) -> Segment:
    """All block segments stacked as a batch of shape ``(n_blocks, m + 1)``."""
    g = path.grid
    n = g.n_coarse if n_blocks is None else n_blocks
    m = g.m_fine
    x = path.x[: n * m + 1]
    win = np.lib.stride_tricks.sliding_window_view(x, m + 1)[::m]
    base = win[:, :1]
    values = scale * (win - base)
    values[:, 0] = 0.0
    up = low = None
    if path.has_envelope:
        up = scale * (path.cell_hi[: n * m].reshape(n, m) - base)
        low = scale * (path.cell_lo[: n * m].reshape(n, m) - base)
        if scale < 0:
            up, low = low, up
    return Segment(values, up, low)


# fixture IO -----------------------------------------------------------------------


def write_path_csv(path: FineGridPath, directory: str | Path, header: str | None = None) -> None:
    """Write ``path.csv`` (fine samples) and ``jumps.csv`` (jump records)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = path.grid
    first = f"# grid horizon={g.horizon!r} n_coarse={g.n_coarse} m_fine={g.m_fine}"
    if header:
        first += f" {header}"
    lines = [first, "fine_index,time,x,sigma"]
    for k, (t, xv, sv) in enumerate(zip(g.times, path.x, path.sigma)):
        lines.append(f"{k},{t:.17g},{xv:.17g},{sv:.17g}")
    (d / "path.csv").write_text("\n".join(lines) + "\n")
    jl = [first, "time,size,kappa,sigma_left,sigma_right"]
    for j in path.jumps:
        jl.append(f"{j.time:.17g},{j.size:.17g},{j.kappa:.17g},{j.sigma_left:.17g},{j.sigma_right:.17g}")
    (d / "jumps.csv").write_text("\n".join(jl) + "\n")


def _parse_grid_comment(line: str) -> TimeGrid | None:
    if not line.startswith("# grid"):
        return None
    kv = dict(tok.split("=", 1) for tok in line[6:].split() if "=" in tok)
    return TimeGrid(float(kv["horizon"]), int(kv["n_coarse"]), int(kv["m_fine"]))


def read_path_csv(directory: str | Path, grid: TimeGrid | None = None) -> FineGridPath:
    """Load a path written by :func:`write_path_csv` (no envelope is stored)."""
    d = Path(directory)
    rows = [ln for ln in (d / "path.csv").read_text().splitlines() if ln.strip()]
    if grid is None:
        grid = _parse_grid_comment(rows[0])
        if grid is None:
            raise ArgumentError("path.csv lacks a '# grid ...' line; pass grid explicitly")
    body = [r for r in rows if not r.startswith("#")]
    if body[0].strip() != "fine_index,time,x,sigma":
        raise ArgumentError("unexpected path.csv header")
    data = np.array([[float(v) for v in r.split(",")] for r in body[1:]])
    jumps = []
    jfile = d / "jumps.csv"
    if jfile.exists():
        jrows = [r for r in jfile.read_text().splitlines() if r.strip() and not r.startswith("#")]
        for r in jrows[1:]:
            t, size, kappa, sl, sr = (float(v) for v in r.split(","))
            block0 = min(int(math.floor(t / grid.delta_n)), grid.n_coarse - 1)
            fi = int(_place(grid, np.array([block0]), np.array([kappa]))[0])
            jumps.append(JumpRecord(t, size, block0 + 1, kappa, sl, sr, fi))
    return FineGridPath(grid, data[:, 2], data[:, 3], tuple(jumps))
