import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logem import experiments as ex
from logem.experiments import (
    ErrorReport,
    ExperimentConfig,
    Reference,
    default_reference,
    fit_rate,
    jackknife_lp,
    monotone_trend,
    pathwise_error,
    positivity_stats,
    strong_error,
    trajectories,
    write_csv,
)
from logem.models import build_model, gle_exact_terminal
from logem.noise import generate
from logem.schemes import simulate


@pytest.fixture
def gle(params):
    return build_model("GLE", params["GLE"])


def _cfg(model, scheme="log-te", ref=None, steps=(2.0**-4, 2.0**-5, 2.0**-6), M0=8, **kw):
    ref = ref or Reference("self", 2.0**-8)
    return ExperimentConfig(model, scheme, ref, 1.0, steps, M0, **kw)


def test_fit_rate_exact_power_law():
    d = 2.0 ** -np.arange(3, 9)
    slope, icpt = fit_rate(d, 3 * d)
    assert slope == pytest.approx(1.0, abs=1e-12)
    assert icpt == pytest.approx(math.log(3), abs=1e-12)
    with pytest.raises(ValueError):
        fit_rate([0.1], [0.2])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 2.0), st.floats(1e-3, 1e3))
def test_fit_rate_recovers_any_power(rate, scale):
    d = 2.0 ** -np.arange(4, 10)
    slope, icpt = fit_rate(d, scale * d**rate)
    assert slope == pytest.approx(rate, abs=1e-9)
    assert icpt == pytest.approx(math.log(scale), abs=1e-8)


def test_jackknife_matches_standard_error_of_mean():
    rng = np.random.default_rng(3)
    a = rng.exponential(size=40)
    est, se = jackknife_lp(a, 1.0, n_blocks=40)
    assert est == pytest.approx(a.mean())
    assert se == pytest.approx(a.std(ddof=1) / math.sqrt(len(a)), rel=1e-10)
    est, se = jackknife_lp(np.full(100, 4.0), 2.0)
    assert est == pytest.approx(2.0) and se == pytest.approx(0.0, abs=1e-14)


def test_self_comparison_is_zero(gle):
    rep = strong_error(_cfg(gle, steps=(2.0**-8,)))
    assert rep.errors[0] == 0.0
    assert math.isnan(rep.slope)


def test_config_validation(gle, params):
    cir = build_model("CIR", params["CIR"])
    with pytest.raises(ValueError, match="T / 2"):
        _cfg(gle, steps=(0.3,))
    with pytest.raises(ValueError, match="finer"):
        _cfg(gle, steps=(2.0**-10,))
    with pytest.raises(ValueError, match="only for GLE"):
        _cfg(cir, ref=Reference("exact-gle", 2.0**-12))
    with pytest.raises(ValueError, match="2\\^-12"):
        _cfg(gle, ref=Reference("exact-gle", 2.0**-8))
    with pytest.raises(ValueError, match="only for CIR"):
        _cfg(gle, ref=Reference("sre", 2.0**-8))
    with pytest.raises(ValueError):
        _cfg(gle, scheme="milstein")
    with pytest.raises(ValueError):
        Reference("tse", 0.1)
    assert _cfg(gle, steps=(2.0**-6, 2.0**-4)).step_sizes == (2.0**-4, 2.0**-6)
    assert default_reference("GLE").kind == "exact-gle"
    assert default_reference("CIR").kind == "sre"
    assert default_reference("SIS").kind == "self"


def test_coupling_uses_one_brownian_path_per_index(gle, params):
    # recompute the L1 error of two paths by hand from the per-index Brownian grids
    ref = Reference("exact-gle", 2.0**-12)
    steps = (2.0**-5, 2.0**-7)
    rep = strong_error(ExperimentConfig(gle, "log-te", ref, 1.0, steps, 2, p_norm=1.0, master_seed=5))
    tc = gle.default_truncation()
    p = params["GLE"]
    for j, dt in enumerate(steps):
        errs = []
        for i in range(2):
            grid = generate(1.0, 4096, 5, i)
            x = simulate("log-te", gle, grid, int(dt * 4096), tc).values[-1]
            errs.append(abs(x - gle_exact_terminal(grid, p["lambda"], p["sigma"], p["x0"], 1.0)))
        assert rep.errors[j] == pytest.approx(np.mean(errs), rel=1e-12)


def test_worker_count_does_not_change_results(gle):
    a = strong_error(_cfg(gle, M0=600, master_seed=2))
    b = strong_error(_cfg(gle, M0=600, master_seed=2, workers=2))
    assert np.array_equal(a.per_delta, b.per_delta)
    assert a.slope == b.slope


def test_seed_changes_results(gle):
    a = strong_error(_cfg(gle, master_seed=1))
    b = strong_error(_cfg(gle, master_seed=2))
    assert not np.array_equal(a.errors, b.errors)


def test_aborted_paths_excluded(params):
    cir = build_model("CIR", dict(params["CIR"], theta=1.2))
    rep = strong_error(ExperimentConfig(cir, "em", Reference("sre", 2.0**-8), 1.0,
                                        (2.0**-6, 2.0**-7), 400, master_seed=1))
    assert rep.aborted.sum() > 0 and rep.valid
    assert any("aborted and were excluded" in n for n in rep.notes)
    assert rep.positivity_violations["sre"] == 0
    assert rep.positivity_violations["em"] >= rep.aborted.max()


def test_many_aborts_invalidate(params):
    cir = build_model("CIR", params["CIR"])
    rep = strong_error(ExperimentConfig(cir, "em", Reference("sre", 2.0**-8), 1.0,
                                        (2.0**-3, 2.0**-4), 400, master_seed=1))
    assert not rep.valid
    assert any("report invalid" in n for n in rep.notes)


def test_log_te_no_violations_on_cir(params):
    cir = build_model("CIR", params["CIR"])
    rep = strong_error(ExperimentConfig(cir, "log-te", Reference("sre", 2.0**-8), 1.0,
                                        (2.0**-4, 2.0**-5), 300, master_seed=1))
    assert rep.positivity_violations == {"log-te": 0, "sre": 0}
    assert rep.valid and rep.aborted.sum() == 0


def test_pathwise_self_is_zero(gle):
    rep = pathwise_error(_cfg(gle, steps=(2.0**-8,), M0=4))
    assert np.all(rep.sup_errors == 0)
    assert np.all(np.isnan(rep.gamma))


def test_pathwise_prefix_stable_and_rate_positive(gle):
    ref = Reference("exact-gle", 2.0**-12)
    steps = tuple(2.0**-k for k in range(5, 9))
    a = pathwise_error(ExperimentConfig(gle, "log-em", ref, 1.0, steps, 20, master_seed=4))
    b = pathwise_error(ExperimentConfig(gle, "log-em", ref, 1.0, steps, 40, master_seed=4))
    assert np.array_equal(a.sup_errors, b.sup_errors[:20])
    assert a.sup_errors.shape == (20, 4)
    assert 0.3 < b.median_gamma < 1.5


def test_positivity_stats(gle):
    out = positivity_stats(gle, ["em", "log-te", "log-em"], 2.0**-6, 300, 1)
    assert out["log-te"] == (0, 300) and out["log-em"] == (0, 300)
    assert 0 < out["em"][0] <= 300


def test_trajectories_rows(gle):
    rows = trajectories(gle, ["log-te", "em"], 2.0**-4, 1, n_fine=2**6)
    assert len(rows) == 2 * 17
    assert rows[0] == (0.0, 2.0, "log-te")
    assert rows[-1][0] == 1.0 and rows[-1][2] == "em"


def _report(errors, se):
    d = 2.0 ** -np.arange(3, 3 + len(errors))
    per = np.column_stack([d, errors, se])
    return ErrorReport(per, 0.0, 0.0, {}, np.zeros(len(d)), 10, True, "x")


def test_monotone_trend():
    assert monotone_trend(_report([4, 2, 1, 0.5], [0.1] * 4))
    assert monotone_trend(_report([4, 2, 2.1, 0.5], [0.1] * 4))  # one rise within noise
    assert not monotone_trend(_report([4, 2, 3, 0.5], [0.1] * 4))  # rise beyond noise
    assert not monotone_trend(_report([4, 2, 2.1, 1, 1.05], [0.1] * 5))  # two rises


def test_write_csv_round_trip(tmp_path):
    path = tmp_path / "out.csv"
    vals = [0.1, 1 / 3, 2.0**-52, 1e300]
    write_csv(str(path), ["a", "b"], [(v, "x") for v in vals], comment="hdr")
    lines = path.read_text().splitlines()
    assert lines[0] == "# hdr" and lines[1] == "a,b"
    assert [float(l.split(",")[0]) for l in lines[2:]] == vals
    assert os.listdir(tmp_path) == ["out.csv"]


def test_write_csv_atomic_on_failure(tmp_path, monkeypatch):
    path = tmp_path / "out.csv"
    path.write_text("old\n")

    def boom(*a):
        raise OSError("disk full")

    monkeypatch.setattr(ex.os, "replace", boom)
    with pytest.raises(OSError):
        write_csv(str(path), ["a"], [(1.0,)])
    assert path.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["out.csv"]
