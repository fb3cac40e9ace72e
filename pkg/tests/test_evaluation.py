import math

import numpy as np
import pytest

from parampde.evaluation import (
    BsOracle,
    GeometricOracle,
    GhOracle,
    McOracle,
    SensitivityAccuracyWarning,
    binned_max_error,
    convergence_report,
    greeks,
    iv_spot,
    normalised_params,
    oracle_for,
    read_bins_csv,
    read_scatter_csv,
    sample_interest,
    sample_params_at_radius,
    sample_spots_with_mean,
    scatter_csv,
    scatter_eval,
    scatter_header,
    slice_eval,
)
from parampde.impliedvol import Skipped
from parampde.network import Architecture, NetworkParams, init_glorot
from parampde.numerics import Rng
from parampde.problem import Model, ProblemSpec, localisation_z


def test_oracle_selection():
    assert isinstance(oracle_for(ProblemSpec(d=1)), BsOracle)
    assert isinstance(oracle_for(ProblemSpec(d=2)), GhOracle)
    assert isinstance(oracle_for(ProblemSpec(d=4, payoff_kind="geometric_call")), GeometricOracle)
    assert oracle_for(ProblemSpec(d=6)) is None
    assert isinstance(oracle_for(ProblemSpec(d=6), "mc", n_paths=100), McOracle)
    with pytest.raises(ValueError):
        oracle_for(ProblemSpec(d=1), "quantum")


def test_oracles_agree_at_d1():
    spec = ProblemSpec(d=1)
    t, x, mu = sample_interest(spec, 5, Rng(0))
    bs = BsOracle(spec).price(t, x, mu)
    gh = GhOracle(spec).price(t, x, mu)
    np.testing.assert_array_equal(bs, gh)
    mc = McOracle(spec, n_paths=2 * 10**4, seed=1)
    a, b = mc.price(t, x, mu), mc.price(t, x, mu)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a - bs) < 1.0)


def test_sample_interest_box():
    spec = ProblemSpec(d=2)
    t, x, mu = sample_interest(spec, 1000, Rng(1))
    assert np.all((t >= spec.t_interest_min) & (t <= spec.T))
    assert np.all((x >= spec.x_interest[0]) & (x <= spec.x_interest[1]))
    lo, hi = spec.param_bounds()
    assert np.all((mu >= lo) & (mu <= hi))
    _, _, mc = sample_interest(spec, 10, Rng(1), center=True)
    assert np.all(mc == spec.center_params())


def test_scatter_single_row_and_self_test():
    spec = ProblemSpec(d=1)
    oracle = BsOracle(spec)
    (row,) = scatter_eval(oracle, oracle, 1, Rng(3))
    assert row.abs_error == 0.0 and row.flag == ""
    assert row.x.shape == (1,) and row.mu.shape == (2,)
    rows = scatter_eval(oracle, oracle, 200, Rng(4))
    assert all(r.abs_error == 0.0 for r in rows)
    assert all(isinstance(r.iv_rel_error, Skipped) or r.iv_rel_error == 0.0 for r in rows)


def test_scatter_csv_roundtrip():
    spec = ProblemSpec(d=2)
    oracle = GhOracle(spec, nodes_per_dim=8)
    model = Model(spec, NetworkParams.zeros(Architecture(1, 3, spec.n_inputs)))
    rows = scatter_eval(model, oracle, 20, Rng(5))
    text = scatter_csv(spec, rows)
    assert text.splitlines()[0] == ",".join(scatter_header(spec))
    assert scatter_header(spec) == ["t", "x1", "x2", "r", "sigma1", "sigma2", "rhohat1",
                                    "exact", "model", "abs_err", "iv_rel_err"]
    back = read_scatter_csv(text)
    assert len(back) == 20
    for rec, row in zip(back, rows):
        assert rec["exact"] == row.exact and rec["abs_err"] == row.abs_error
        if isinstance(row.iv_rel_error, Skipped):
            assert isinstance(rec["iv_rel_err"], Skipped)
        elif math.isnan(row.iv_rel_error):
            assert math.isnan(rec["iv_rel_err"])
        else:
            assert rec["iv_rel_err"] == row.iv_rel_error


def test_scatter_flags_oracle_failures():
    spec = ProblemSpec(d=1)

    class Flaky(BsOracle):
        def price(self, t, x, mu):
            if len(t) > 1 or x[0, 0] > 4.6:
                raise RuntimeError("boom")
            return super().price(t, x, mu)

    rows = scatter_eval(BsOracle(spec), Flaky(spec), 30, Rng(2))
    flagged = [r for r in rows if r.flag]
    assert flagged and all(math.isnan(r.exact) for r in flagged)
    assert any(not r.flag for r in rows)


def test_spot_sampler_hits_target_mean():
    spec = ProblemSpec(d=3)
    g = np.random.default_rng(0)
    targets = g.uniform(25, 150, 500)
    s = sample_spots_with_mean(spec, targets, g)
    np.testing.assert_allclose(s.mean(axis=1), targets, rtol=1e-12)
    assert np.all((s >= 25 - 1e-9) & (s <= 150 + 1e-9))


def test_param_sampler_radius():
    spec = ProblemSpec(d=2)
    g = np.random.default_rng(1)
    radius = g.uniform(0, 1, 300)
    mu = sample_params_at_radius(spec, radius, g)
    np.testing.assert_allclose(np.max(np.abs(normalised_params(spec, mu)), axis=1), radius, atol=1e-12)
    center = sample_params_at_radius(spec, np.zeros(4), g)
    np.testing.assert_allclose(center, np.tile([0.2, 0.2, 0.2, 0.5], (4, 1)), atol=1e-15)


def test_bins_self_test_and_csv():
    spec = ProblemSpec(d=1)
    oracle = BsOracle(spec)
    grid = binned_max_error(oracle, oracle, 20, Rng(6), sbar_edges=[25, 75, 150], munorm_edges=[0, 0.5, 1])
    assert np.all(grid.max_abs_err == 0) and np.all(grid.count == 20)
    text = grid.to_csv()
    assert text.splitlines()[0] == "sbar_lo,sbar_hi,munorm_lo,munorm_hi,max_abs_err,count"
    recs = read_bins_csv(text)
    assert len(recs) == 4 and sum(r["count"] for r in recs) == 80


def test_bins_zero_model_positive_errors():
    spec = ProblemSpec(d=2)
    model = Model(spec, NetworkParams.zeros(Architecture(1, 3, spec.n_inputs)))
    grid = binned_max_error(model, GhOracle(spec, nodes_per_dim=8), 5, Rng(0),
                            sbar_edges=[80, 120], munorm_edges=[0, 1])
    assert grid.max_abs_err[0, 0] > 0


def test_slice_eval_self_test():
    spec = ProblemSpec(d=1)
    oracle = BsOracle(spec)
    out = slice_eval(oracle, oracle, 1.0, spec.center_params(), np.linspace(30, 140, 12)[:, None])
    assert out.shape == (12, 4) and np.all(out[:, -1] == 0)


def test_zero_network_greeks_are_localisation_derivatives():
    spec = ProblemSpec(d=3)
    model = Model(spec, NetworkParams.zeros(Architecture(1, 3, spec.n_inputs)))
    t, x, mu = sample_interest(spec, 10, Rng(7))
    g = greeks(model, t, x, mu)
    z = localisation_z(spec, t, x, mu)
    want = np.exp(x) / 3 * (1.0 / (1.0 + np.exp(-spec.lam * z)))[:, None]
    np.testing.assert_allclose(g["dx"], want, rtol=1e-12)
    np.testing.assert_allclose(g["delta"], want / np.exp(x), rtol=1e-12)


def test_greeks_match_finite_differences():
    spec = ProblemSpec(d=2)
    arch = Architecture(2, 8, spec.n_inputs)
    model = Model(spec, init_glorot(arch, Rng(2)))
    t, x, mu = sample_interest(spec, 6, Rng(8))
    with pytest.warns(SensitivityAccuracyWarning):
        g = greeks(model, t, x, mu, params=True)
    h = 1e-4
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (model.price(t, x + e, mu, warn=False) - model.price(t, x - e, mu, warn=False)) / (2 * h)
        np.testing.assert_allclose(g["dx"][:, i], fd, rtol=1e-6)
    for k in range(spec.n_mu):
        e = np.zeros(spec.n_mu)
        e[k] = 1e-6
        fd = (model.price(t, x, mu + e, warn=False) - model.price(t, x, mu - e, warn=False)) / 2e-6
        np.testing.assert_allclose(g["dmu"][:, k], fd, rtol=1e-5, atol=1e-7)


def test_iv_spot():
    spec = ProblemSpec(d=2)
    x = np.log([[100.0, 200.0]])
    assert iv_spot(spec, [1.0], x, [[0.2, 0.2, 0.2, 0.5]])[0] == pytest.approx(150.0)
    g = ProblemSpec(d=2, payoff_kind="geometric_call")
    assert iv_spot(g, [1.0], x, [[0.2, 0.2, 0.5]])[0] == pytest.approx(math.sqrt(2e4))
    adj = iv_spot(g, [1.0], x, [[0.2, 0.2, 0.5]], dividend_adjusted=True)[0]
    assert adj == pytest.approx(math.sqrt(2e4) * math.exp(-0.5 * 0.04 * 0.5 * 0.5))


def test_geometric_iv_of_exact_price_is_input_vol():
    # with the dividend-adjusted spot the geometric price is exactly Black-Scholes
    spec = ProblemSpec(d=3, payoff_kind="geometric_call")
    oracle = GeometricOracle(spec)
    rows = scatter_eval(oracle, oracle, 20, Rng(1), dividend_adjusted=True)
    assert all(isinstance(r.iv_rel_error, Skipped) or r.iv_rel_error == 0 for r in rows)


def test_convergence_report():
    empty = convergence_report([])
    assert empty.epochs.size == 0 and math.isnan(empty.spearman)
    hist = [{"epoch": e, "loss_total": 1.0 / e, "val_mae": 0.5 / e} for e in range(1, 11)]
    rep = convergence_report(hist)
    assert rep.best_epoch == 10 and rep.spearman == pytest.approx(1.0)
    assert rep.to_csv().splitlines()[0] == "epoch,loss_total,val_mae"


def test_bins_reject_edges_outside_box():
    spec = ProblemSpec(d=2)
    oracle = GhOracle(spec, nodes_per_dim=4)
    with pytest.raises(ValueError, match="sbar_edges"):
        binned_max_error(oracle, oracle, 2, Rng(0), sbar_edges=[10, 100])
    with pytest.raises(ValueError, match="munorm_edges"):
        binned_max_error(oracle, oracle, 2, Rng(0), munorm_edges=[0, 2])
