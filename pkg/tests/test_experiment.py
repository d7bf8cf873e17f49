import json
import math

import numpy as np
import pytest

from hfpath.asymptotics import Lambda_const, lambda_const
from hfpath.errors import ConfigurationError, MisuseError, UnsupportedError
from hfpath.experiment import (
    FIGURE1_GRID,
    ExperimentConfig,
    jump_block_excess,
    recompute_replication,
    refinement_study,
    replicate,
    run,
    run_clt_coverage,
    run_figure1,
    run_jump_clt_match,
    run_lln,
    run_rate,
)
from hfpath.functional import custom, integral_power, range_power, terminal_power
from hfpath.model import FixedJumps, JumpSpec, ModelSpec, TimeGrid, TwoPoint, VolSpec, simulate_path
from hfpath.rng import SeedStream


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig("lln", ladder=((64, 4), (64, 8)))
    with pytest.raises(ConfigurationError):
        ExperimentConfig("lln", ladder=((128, 4), (64, 8)))
    with pytest.raises(ConfigurationError) as info:
        ExperimentConfig("lln", replications=99)
    assert info.value.key == "replications"
    with pytest.raises(ConfigurationError):
        ExperimentConfig("nonsense")
    ExperimentConfig("figure1", replications=1)


def test_lln_terminal_power_decays():
    cfg = ExperimentConfig("lln", ladder=((64, 2), (4096, 2)), functional=terminal_power(2),
                           replications=100)
    rep = run_lln(cfg)
    assert rep.rows[1]["rmse"] < rep.rows[0]["rmse"]
    assert rep.rows[0]["mean_target"] == 1.0
    assert rep.checks["rmse_decay"]
    assert all(r["seed_key"].startswith(f"{cfg.seed}/") for r in rep.rows)


def test_lln_range_target():
    cfg = ExperimentConfig("lln", ladder=((64, 4),), functional=range_power(2), replications=100)
    rep = run_lln(cfg)
    assert rep.rows[0]["mean_target"] == pytest.approx(lambda_const(3, 2.0).value, rel=1e-12)


def test_lln_custom_functional_is_configuration_error():
    cfg = ExperimentConfig("lln", functional=custom(lambda s: 0.0), replications=100)
    with pytest.raises(ConfigurationError):
        run_lln(cfg)


def test_lln_rejects_jumps():
    cfg = ExperimentConfig("lln", model=ModelSpec(jumps=FixedJumps((0.5,), (1.0,))),
                           functional=terminal_power(2), replications=100, ladder=((16, 2),))
    with pytest.raises(MisuseError):
        run_lln(cfg)


def test_jump_lln_target_per_path():
    model = ModelSpec(jumps=JumpSpec(2.0, TwoPoint(1.0, -2.0, 0.5)))
    cfg = ExperimentConfig("jump_lln", model=model, p=3.0, ladder=((256, 4),), replications=100)
    rep = run_lln(cfg)
    grid = cfg.grid(0)
    for r in (0, 17, 99):
        path = simulate_path(model, grid, cfg.stream(0, r))
        expect = sum(abs(j.size) ** 3 for j in path.jumps)
        assert rep.replicates[0][r, 1] == expect
    with pytest.raises(ConfigurationError):
        run_lln(ExperimentConfig("jump_lln", model=model, p=1.5, replications=100))


def test_degenerate_coverage():
    cfg = ExperimentConfig("clt_coverage", model=ModelSpec(vol=VolSpec(sigma0=0.0)),
                           ladder=((64, 2),), functional=range_power(2), replications=100)
    rep = run_clt_coverage(cfg)
    assert rep.rows == []
    assert rep.metadata["degenerate"] == {"64": 100}


def test_coverage_needs_even_functional():
    cfg = ExperimentConfig("clt_coverage", functional=custom(lambda s: s.values[-1]), replications=100)
    with pytest.raises(MisuseError):
        run_clt_coverage(cfg)


def test_coverage_row_fields():
    cfg = ExperimentConfig("clt_coverage", ladder=((128, 2),), functional=terminal_power(2),
                           replications=200)
    row = run_clt_coverage(cfg).rows[0]
    assert 0.8 < row["coverage"] <= 1.0
    assert 0 <= row["ks_distance"] <= 1
    assert row["n_degenerate"] == 0


def test_rate_needs_four_points():
    cfg = ExperimentConfig("rate", ladder=((16, 2), (32, 2), (64, 2)), functional=terminal_power(2),
                           replications=100)
    with pytest.raises(ConfigurationError):
        run_rate(cfg)


def test_rate_pure_drift_slope_one():
    cfg = ExperimentConfig("rate", model=ModelSpec(drift=1.0, vol=VolSpec(sigma0=0.0)),
                           ladder=((16, 4), (64, 4), (256, 4), (1024, 4)),
                           functional=integral_power(2), replications=100)
    rep = run_rate(cfg)
    assert rep.metadata["slope"] == pytest.approx(1.0, abs=1e-9)
    assert rep.rows[0]["rmse"] == pytest.approx(cfg.grid(0).delta_n / 4, rel=1e-12)


def test_rate_terminal_power():
    cfg = ExperimentConfig("rate", ladder=((64, 1), (256, 1), (1024, 1), (4096, 1)),
                           functional=terminal_power(2), replications=300)
    rep = run_rate(cfg)
    assert 0.4 <= rep.metadata["slope"] <= 0.6
    assert rep.metadata["slope_se"] > 0


def test_jump_clt_unsupported_exponents():
    for p in (1.5, 2.5, 3.0):
        cfg = ExperimentConfig("jump_clt", p=p, replications=100, ladder=((16, 2),))
        with pytest.raises(UnsupportedError):
            run_jump_clt_match(cfg)


def test_jump_clt_needs_fixed_scenario():
    cfg = ExperimentConfig("jump_clt", p=4.0, replications=100, ladder=((16, 2),),
                           model=ModelSpec(jumps=JumpSpec(1.0, TwoPoint(1.0, -1.0))))
    with pytest.raises(ConfigurationError):
        run_jump_clt_match(cfg)


def test_jump_clt_without_jumps_is_trivial():
    cfg = ExperimentConfig("jump_clt", p=4.0, ladder=((64, 2),), replications=100,
                           model=ModelSpec(vol=VolSpec(sigma0=0.0)), limit_draws=5)
    rep = run_jump_clt_match(cfg)
    assert rep.rows[0]["ks_distance"] == 0.0


@pytest.mark.parametrize("mode", ["exact", "uniform"])
def test_jump_clt_conditioning(mode):
    model = ModelSpec(jumps=FixedJumps((0.3, 0.55), (1.0, -0.5), kappa_mode=mode))
    cfg = ExperimentConfig("jump_clt", model=model, p=4.0, ladder=((64, 4), (256, 4)),
                           replications=100, limit_draws=10)
    rep = run_jump_clt_match(cfg)
    assert rep.checks["conditioning_n64"] and rep.checks["conditioning_n256"]
    assert rep.rows[0]["limit_draws"] == 1000


def test_figure1_report():
    rep = run_figure1(ExperimentConfig("figure1"))
    assert len(rep.rows) == 15 == len(FIGURE1_GRID)
    row = next(r for r in rep.rows if r["p"] == 2.0)
    assert row["Lambda1"] == 2.0 and row["Lambda2"] == 2.0
    assert 0.35 <= row["Lambda3"] <= 0.45
    assert row["ratio"] == pytest.approx(5, rel=0.05)
    assert rep.checks["range_superior"] and rep.checks["ratio_decreasing_in_p"]


def test_constants_report():
    rep = run(ExperimentConfig("constants", p_grid=(1.0, 2.0)))
    assert len(rep.rows) == 6
    assert rep.rows[1]["value"] == 1.0 and rep.rows[1]["method"] == "closed_form"


def test_reproducible_across_threads():
    model = ModelSpec(vol=VolSpec(sigma0=1.0, sigma_tilde=0.2))
    cfg = dict(kind="lln", model=model, ladder=((32, 4), (64, 4)), functional=range_power(2),
               replications=100)
    a = run_lln(ExperimentConfig(**cfg, threads=1))
    b = run_lln(ExperimentConfig(**cfg, threads=4))
    assert a.rows == b.rows
    for i in a.replicates:
        assert np.array_equal(a.replicates[i], b.replicates[i])


def test_report_integrity_spot_check():
    cfg = ExperimentConfig("clt_coverage", ladder=((32, 4), (64, 4)), functional=range_power(2),
                           replications=100)
    rep = run_clt_coverage(cfg)
    rng = np.random.default_rng(0)
    for _ in range(10):
        i = int(rng.integers(0, 2))
        r = int(rng.integers(0, 100))
        assert np.array_equal(recompute_replication(cfg, i, r), rep.replicates[i][r])


def test_replicate_batching_invariance():
    model = ModelSpec(vol=VolSpec(sigma0=1.0, mu_tilde=0.1))
    grid = TimeGrid(1.0, 16, 4)
    streams = [SeedStream(1).child(r) for r in range(7)]
    stat = lambda p, s: (p.x[-1], p.sigma[-1])  # noqa: E731
    a = replicate(model, grid, stat, streams)
    b = np.array([replicate(model, grid, stat, [s])[0] for s in streams])
    assert np.array_equal(a, b)


def test_write_report(tmp_path):
    cfg = ExperimentConfig("lln", ladder=((16, 2),), functional=terminal_power(2), replications=100)
    rep = run_lln(cfg)
    csv_path, meta_path = rep.write(tmp_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("# hfpath ") and f"seed={cfg.seed}" in lines[0]
    assert lines[1].split(",")[0] == "n_coarse"
    meta = json.loads(meta_path.read_text())
    assert meta["kind"] == "lln" and "runtime_s" in meta and "git_describe" in meta
    assert meta["config"]["replications"] == 100
    again, _ = run_lln(cfg).write(tmp_path / "b")
    assert again.read_bytes() == csv_path.read_bytes()


def test_refinement_study_bias():
    rep = refinement_study(ModelSpec(), n_coarse=16, ms=(2, 8, 32), reps=300, seed=3)
    bias = [r["rel_bias_samples"] for r in rep.rows]
    assert bias[0] < bias[1] < bias[2] < 0
    for r in rep.rows:
        assert abs(r["mean_envelope"] - r["target"]) < 4 * r["se_envelope"]


def test_jump_block_excess_leading_order():
    model = ModelSpec(jumps=FixedJumps((0.3, 0.7), (1.0, -2.0)))
    grid = TimeGrid(1.0, 1024, 4)
    path = simulate_path(model, grid, 0)
    excess, se = jump_block_excess(path, 3.0, "exact", draws=100_000, seed=SeedStream(2))
    dn = grid.delta_n
    lead = (1022 * dn**1.5 * lambda_const(3, 3.0).value
            + sum(3 * j.size**2 * math.sqrt(dn) * math.sqrt(2 / math.pi)
                  * (math.sqrt(j.kappa) + math.sqrt(1 - j.kappa)) for j in path.jumps))
    assert 0 < se < 2e-3 * excess
    assert excess == pytest.approx(lead, rel=0.05)
    assert excess > lead


def test_lambda_for_figure_matches_table():
    rep = run_figure1(ExperimentConfig("figure1", p_grid=(2.0,)))
    assert rep.rows[0]["Lambda3"] == Lambda_const(3, 2.0).value
