import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from hfpath.errors import ArgumentError, IntegrationDivergedError
from hfpath.model import (
    FineGridPath,
    FixedJumps,
    JumpSpec,
    ModelSpec,
    TimeGrid,
    TruncatedGaussian,
    TwoPoint,
    UniformSigned,
    VolSpec,
    block_segments,
    read_path_csv,
    segment_extract,
    simulate_path,
    simulate_paths,
    write_path_csv,
)
from hfpath.rng import SeedStream

BM = ModelSpec()


def test_grid_counts_and_nesting():
    g = TimeGrid(2.0, 8, 5)
    assert g.n_points == 41
    assert g.delta_n == 0.25 and g.delta == 0.05
    assert np.allclose(g.times[:: g.m_fine], np.arange(9) * g.delta_n)
    assert g.blocks_up_to(1.0) == 4
    assert g.blocks_up_to(0.24) == 0
    assert g.blocks_up_to(10.0) == 8


@pytest.mark.parametrize("args", [(0.0, 4, 2), (1.0, 0, 2), (1.0, 4, 0), (1.0, 2.5, 2), (-1, 4, 2)])
def test_grid_rejects_invalid(args):
    with pytest.raises(ArgumentError):
        TimeGrid(*args)


def test_brownian_increment_moments():
    n = 16
    grid = TimeGrid(1.0, n, 1)
    paths = simulate_paths(BM, grid, [SeedStream(11).child(r) for r in range(10_000)], envelope=False)
    z = np.concatenate([np.diff(p.coarse_values) for p in paths]) / math.sqrt(grid.delta_n)
    N = z.size
    assert abs(z.mean()) < 4 / math.sqrt(N)
    assert abs(z.var() - 1) < 4 * math.sqrt(2 / N)


def test_deterministic_drift_path_is_exact():
    model = ModelSpec(x0=0.5, drift=1.0, vol=VolSpec(sigma0=0.0))
    grid = TimeGrid(1.0, 7, 3)
    p = simulate_path(model, grid, 3)
    assert np.array_equal(p.x, 0.5 + grid.times)
    assert np.all(p.sigma == 0)


def test_pure_jump_counts_are_poisson():
    model = ModelSpec(vol=VolSpec(sigma0=0.0), jumps=JumpSpec(2.0, TwoPoint(1.0, -2.0, 0.5)))
    grid = TimeGrid(1.0, 4, 1)
    counts = []
    for start in range(0, 100_000, 20_000):
        paths = simulate_paths(model, grid, [SeedStream(5).child(r) for r in range(start, start + 20_000)],
                               envelope=False)
        for p in paths:
            counts.append(len(p.jumps))
            assert all(j.size in (1.0, -2.0) for j in p.jumps)
            assert p.x[-1] == pytest.approx(sum(j.size for j in p.jumps), abs=1e-12)
    counts = np.array(counts)
    kmax = 8
    observed = np.array([(counts == k).sum() for k in range(kmax)] + [(counts >= kmax).sum()])
    pmf = stats.poisson.pmf(np.arange(kmax), 2.0)
    expected = len(counts) * np.append(pmf, 1 - pmf.sum())
    chi2 = ((observed - expected) ** 2 / expected).sum()
    assert stats.chi2.sf(chi2, kmax) > 1e-3


def test_jump_moves_x_by_recorded_size_in_its_cell():
    model = ModelSpec(vol=VolSpec(sigma0=0.0), jumps=FixedJumps((0.3, 0.71), (1.5, -0.5)))
    grid = TimeGrid(1.0, 10, 4)
    p = simulate_path(model, grid, 1)
    steps = np.diff(p.x)
    for j in p.jumps:
        assert steps[j.fine_index - 1] == j.size
        assert 0 <= j.kappa < 1
        assert (j.coarse_index - 1) * grid.m_fine < j.fine_index <= j.coarse_index * grid.m_fine
    assert np.count_nonzero(steps) == 2


def test_fixed_jumps_exact_times_and_block_snapping():
    grid = TimeGrid(1.0, 4, 10)
    p = simulate_path(ModelSpec(jumps=FixedJumps((0.5, 0.8), (1.0, -2.0))), grid, 9)
    assert [j.time for j in p.jumps] == [0.5, 0.8]
    assert [j.size for j in p.jumps] == [1.0, -2.0]
    # t = 0.5 sits on a coarse point: kappa = 0, jump lands strictly inside block 3
    assert p.jumps[0].coarse_index == 3 and p.jumps[0].kappa == 0.0
    assert p.jumps[0].fine_index == 2 * 10 + 1


def test_fixed_jumps_uniform_mode_keeps_blocks():
    grid = TimeGrid(1.0, 8, 5)
    spec = FixedJumps((0.3, 0.9), (1.0, -2.0), kappa_mode="uniform")
    kappas = []
    for r in range(200):
        p = simulate_path(ModelSpec(jumps=spec), grid, SeedStream(2).child(r))
        assert [j.coarse_index for j in p.jumps] == [3, 8]
        assert [j.size for j in p.jumps] == [1.0, -2.0]
        kappas.append(p.jumps[0].kappa)
    assert stats.kstest(kappas, "uniform").pvalue > 1e-3


@pytest.mark.parametrize("law", [TwoPoint(0.5, -0.7), TruncatedGaussian(0.0, 1.0, 0.3), UniformSigned(0.2, 1.0)])
def test_jump_floor(law):
    model = ModelSpec(jumps=JumpSpec(20.0, law))
    for r in range(20):
        p = simulate_path(model, TimeGrid(1.0, 50, 2), r)
        assert all(abs(j.size) >= law.min_abs for j in p.jumps)


def test_jump_spec_rejects_zero_floor():
    with pytest.raises(ArgumentError):
        JumpSpec(1.0, UniformSigned(0.0, 1.0))


def test_sigma_positivity_floor():
    vol = VolSpec(sigma0=0.2, mu_tilde=-5.0, sigma_tilde=1.0, positivity_floor=0.01)
    p = simulate_path(ModelSpec(vol=vol), TimeGrid(1.0, 50, 10), 4)
    assert p.sigma.min() >= 0.01
    assert (p.sigma == 0.01).any()


def test_constant_vol_when_coefficients_vanish():
    p = simulate_path(ModelSpec(vol=VolSpec(sigma0=0.7)), TimeGrid(1.0, 10, 3), 0)
    assert np.all(p.sigma == 0.7)


def test_cojumps_separate_left_and_right_sigma():
    vol = VolSpec(sigma0=1.0, cojump_law=TwoPoint(0.5, 0.5))
    p = simulate_path(ModelSpec(vol=vol, jumps=FixedJumps((0.37,), (1.0,))), TimeGrid(1.0, 10, 5), 0)
    (j,) = p.jumps
    assert j.sigma_left == 1.0 and j.sigma_right == 1.5


def test_divergence_names_fine_index():
    model = ModelSpec(drift=lambda t, x: np.where(t >= 0.5, np.inf, 0.0))
    grid = TimeGrid(1.0, 4, 5)
    with pytest.raises(IntegrationDivergedError) as info:
        simulate_path(model, grid, 0)
    assert info.value.fine_index == 11
    assert "fine index 11" in str(info.value)


def test_determinism_and_batch_invariance():
    vol = VolSpec(sigma0=1.0, mu_tilde=0.1, sigma_tilde=0.3, v_tilde=0.2)
    model = ModelSpec(drift=0.05, vol=vol, rho_wv=-0.5, jumps=JumpSpec(3.0, TwoPoint(0.4, -0.4)))
    grid = TimeGrid(1.0, 16, 8)
    streams = [SeedStream(77).child(r) for r in range(6)]
    batch = simulate_paths(model, grid, streams)
    for s, b in zip(streams, batch):
        single = simulate_path(model, grid, s)
        assert np.array_equal(single.x, b.x)
        assert np.array_equal(single.sigma, b.sigma)
        assert np.array_equal(single.cell_hi, b.cell_hi)
        assert single.jumps == b.jumps
    again = simulate_path(model, grid, streams[0])
    assert np.array_equal(again.x, batch[0].x)


def test_envelope_brackets_samples():
    p = simulate_path(BM, TimeGrid(1.0, 8, 4), 3)
    assert np.all(p.cell_hi >= np.maximum(p.x[:-1], p.x[1:]))
    assert np.all(p.cell_lo <= np.minimum(p.x[:-1], p.x[1:]))


def test_path_arrays_are_read_only():
    p = simulate_path(BM, TimeGrid(1.0, 4, 2), 0)
    with pytest.raises(ValueError):
        p.x[0] = 1.0


def test_nesting_consistency():
    p = simulate_path(BM, TimeGrid(1.0, 8, 6), 12)
    sub = p.x[::2]
    assert np.array_equal(sub[::3], p.coarse_values)
    assert np.array_equal(np.diff(sub[::3]), np.diff(p.coarse_values))


def test_segment_of_constant_path_is_zero():
    grid = TimeGrid(1.0, 5, 4)
    p = FineGridPath(grid, np.full(grid.n_points, 3.0), np.zeros(grid.n_points))
    for i in range(1, 6):
        assert np.all(segment_extract(p, i, 7.0).values == 0)


def test_segment_of_linear_path():
    grid = TimeGrid(1.0, 100, 5)
    p = FineGridPath(grid, grid.times.copy(), np.zeros(grid.n_points))
    seg = segment_extract(p, 17, grid.delta_n ** -0.5)
    assert np.allclose(seg.values, 0.1 * np.arange(6) / 5, rtol=0, atol=1e-14)
    assert seg.values[0] == 0


def test_segment_index_out_of_range():
    p = simulate_path(BM, TimeGrid(1.0, 5, 2), 0)
    for i in (0, 6):
        with pytest.raises(ArgumentError):
            segment_extract(p, i)


def _fixture_rows(d):
    with open(d / "path.csv") as fh:
        rows = [r for r in csv.reader(ln for ln in fh if not ln.startswith("#"))][1:]
    return [float(r[2]) for r in rows]


def test_segment_matches_fixture_differences(fixture_dir):
    p = read_path_csv(fixture_dir)
    x = _fixture_rows(fixture_dir)
    m = 4
    for i in range(1, 6):
        seg = segment_extract(p, i, 2.0)
        expect = [2.0 * (x[(i - 1) * m + k] - x[(i - 1) * m]) for k in range(m + 1)]
        assert seg.values.tolist() == pytest.approx(expect, rel=1e-12, abs=1e-15)
        assert seg.values[0] == 0.0


def test_block_segments_agree_with_segment_extract():
    p = simulate_path(BM, TimeGrid(1.0, 6, 3), 5)
    batch = block_segments(p, 2.5)
    for i in range(6):
        one = segment_extract(p, i + 1, 2.5)
        assert np.array_equal(batch.values[i], one.values)
        assert np.array_equal(batch.upper[i], one.upper)


def test_negative_scale_swaps_envelope():
    p = simulate_path(BM, TimeGrid(1.0, 3, 4), 1)
    seg = segment_extract(p, 2, -1.0)
    assert np.all(seg.upper >= seg.lower)


def test_csv_round_trip(tmp_path):
    model = ModelSpec(vol=VolSpec(sigma0=0.8, sigma_tilde=0.2), jumps=FixedJumps((0.33,), (-1.25,)))
    grid = TimeGrid(1.0, 6, 3)
    p = simulate_path(model, grid, 21)
    write_path_csv(p, tmp_path)
    q = read_path_csv(tmp_path)
    assert q.grid == grid
    assert np.array_equal(p.x, q.x) and np.array_equal(p.sigma, q.sigma)
    assert [(j.time, j.size, j.kappa, j.coarse_index, j.fine_index) for j in p.jumps] == \
        [(j.time, j.size, j.kappa, j.coarse_index, j.fine_index) for j in q.jumps]
    assert (tmp_path / "path.csv").read_text().splitlines()[1] == "fine_index,time,x,sigma"
    assert (tmp_path / "jumps.csv").read_text().splitlines()[1] == "time,size,kappa,sigma_left,sigma_right"


@given(c=st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3))
def test_scaled_path(c):
    p = simulate_path(ModelSpec(jumps=FixedJumps((0.4,), (1.0,))), TimeGrid(1.0, 4, 3), 8)
    q = p.scaled(c)
    assert np.allclose(q.x, c * p.x)
    assert np.all(q.cell_hi >= q.cell_lo)
    assert q.jumps[0].size == c
