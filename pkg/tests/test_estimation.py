import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ikfcg.estimation import (
    FittedModel,
    HyperParams,
    SearchSpace,
    bootstrap_uncertainty,
    cv_search,
    fit,
    forecast,
    metrics,
    one_step_forecast_eval,
    representative_grid,
    schema_builder,
    split_rows,
)
from ikfcg.matern import MaternParams, sample_path
from ikfcg.particles import DesignSchema, ParticleTrajectory, SimConfig, build_design, simulate
from ikfcg.structured import CgConfig, PredictiveResult

HYPER = HyperParams([MaternParams(1.0, 1.0, 2.5)], 0.01, [0.5])


def interval_result(mean, lo, hi):
    # a PredictiveResult whose 95% interval is exactly [lo, hi]
    mean = np.asarray(mean, dtype=float)
    half = (np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)) / 2
    var = (half / 1.959963984540054) ** 2
    return PredictiveResult(np.arange(mean.size, dtype=float), mean, var, np.ones(mean.size, bool))


def test_metrics_hand_examples():
    exact = metrics(interval_result([0.0, 2.0], [-1, 1], [1, 3]), [0.0, 2.0])
    assert exact.nrmse == 0.0
    assert metrics(interval_result([1.0, 1.0], [0, 0], [2, 2]), [0.0, 2.0]).nrmse == pytest.approx(1.0)
    rep = metrics(interval_result([0.0, 0.0], [-1, -1], [1, 1]), [0.0, 5.0])
    assert rep.coverage_95 == 0.5
    assert rep.interval_length_95 == pytest.approx(2.0)


def test_metrics_constant_truth_is_flagged():
    rep = metrics(interval_result([0.0, 1.0], [-1, 0], [1, 2]), [1.0, 1.0])
    assert np.isnan(rep.nrmse) and rep.status == "constant_truth"


def test_metrics_length_mismatch():
    with pytest.raises(ValueError):
        metrics(interval_result([0.0], [-1], [1]), [0.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 50
    mean, truth = rng.standard_normal(n), rng.standard_normal(n)
    var = rng.uniform(0.1, 2, n)
    perm = rng.permutation(n)
    a = metrics(PredictiveResult(np.arange(n), mean, var, np.ones(n, bool)), truth)
    b = metrics(PredictiveResult(np.arange(n), mean[perm], var[perm], np.ones(n, bool)), truth[perm])
    assert a.nrmse == pytest.approx(b.nrmse, rel=1e-12)
    assert a.coverage_95 == b.coverage_95
    assert a.interval_length_95 == pytest.approx(b.interval_length_95, rel=1e-12)
    assert a.nrmse >= 0 and 0 <= a.coverage_95 <= 1 and a.interval_length_95 >= 0


def test_hyperparams_text_round_trip(tmp_path):
    h = HyperParams([MaternParams(0.3, 0.7, 2.5), MaternParams(1.5, 0.2, 0.5)], 0.0123,
                    [0.5, 1.0], "modified_vicsek", cv_loss=0.1)
    path = tmp_path / "p.txt"
    h.save(path)
    assert HyperParams.load(path) == h
    assert all(" = " in line for line in path.read_text().splitlines())
    with pytest.raises(ValueError):
        HyperParams.from_text("nugget 0.1\n")
    with pytest.raises(ValueError):
        HyperParams([MaternParams(1, 1)], 0.0, [0.5])


def test_representative_grid():
    x = np.concatenate([np.linspace(-1, 1, 1001)])
    g = representative_grid(x, 200, 0.98)
    assert g.size == 200
    assert g[0] == pytest.approx(-0.98) and g[-1] == pytest.approx(0.98)
    np.testing.assert_allclose(representative_grid(x, 3, 1.0), [-1, 0, 1])
    with pytest.raises(ValueError):
        representative_grid(x, 10, 0.0)


def test_split_rows_is_seeded():
    a, b = split_rows(100, 0.8, 3), split_rows(100, 0.8, 3)
    assert np.array_equal(a, b) and a.sum() == 80
    assert not np.array_equal(a, split_rows(100, 0.8, 4))


@pytest.fixture(scope="module")
def small_traj():
    return simulate(SimConfig(n_p=40, n_tau=4, sigma0=0.1, radius=0.5, seed=21))


def test_cv_is_deterministic_and_argmin(small_traj):
    search = SearchSpace.default([(0.25,), (0.5,)], gammas=[0.3, 1.0], ratios=[10.0, 1e3], refine=True,
                                 max_refine_evals=10)
    builder = schema_builder("unnormalized_vicsek")
    a = cv_search(builder, small_traj, search, seed=5)
    b = cv_search(builder, small_traj, search, seed=5)
    assert a.params == b.params and a.loss == b.loss
    assert a.loss <= min(g[-1] for g in a.grid)
    assert len(a.grid) == search.n_candidates


def test_cv_selects_true_radius(small_traj):
    search = SearchSpace.default([(0.25,), (0.5,), (1.0,)], refine=False)
    res = cv_search(schema_builder("unnormalized_vicsek"), small_traj, search, seed=0)
    assert res.params.radii == (0.5,)


def test_cv_single_candidate_untouched(small_traj):
    search = SearchSpace([0.4], [100.0], [(0.5,)], relative_ranges=False)
    res = cv_search(schema_builder("unnormalized_vicsek"), small_traj, search)
    k = res.params.kernels[0]
    assert k.range == 0.4
    assert k.variance == pytest.approx(100.0 * res.params.nugget)
    assert res.n_evals == 1


def test_cv_rejects_tiny_validation_set():
    traj = simulate(SimConfig(n_p=3, n_tau=2, seed=1))
    with pytest.raises(ValueError):
        cv_search(schema_builder("unnormalized_vicsek"), traj, SearchSpace([0.5], [10.0], [(0.5,)]))


def test_bootstrap_degenerate_cases(small_traj):
    design = build_design(small_traj, HYPER.schema())
    fitted = fit(design, HYPER)
    grid = np.linspace(-0.5, 0.5, 7)
    zero = bootstrap_uncertainty(fitted, 0, grid, B=20, residuals=np.zeros(design.n_rows))
    np.testing.assert_allclose(zero.width, 0.0, atol=1e-12)
    one = bootstrap_uncertainty(fitted, 0, grid, B=1, seed=2)
    np.testing.assert_array_equal(one.lower, one.samples[0])
    np.testing.assert_array_equal(one.upper, one.samples[0])


def test_bootstrap_width_grows_where_inputs_are_sparse():
    traj = simulate(SimConfig(n_p=100, n_tau=5, sigma0=0.1, seed=3))
    design = build_design(traj, HYPER.schema())
    fitted = fit(design, HyperParams([MaternParams(0.1, 0.5, 2.5)], 0.01, [0.5]))
    x = np.abs(design.factors[0].inputs)
    qs = np.quantile(x, [0.25, 0.9, 0.995])
    boot = bootstrap_uncertainty(fitted, 0, qs, B=200, seed=1)
    w = boot.width
    assert w[0] < w[1] < w[2]


class ExactModel(FittedModel):
    # latent function known exactly: z(d) = d
    def predict(self, j, d_star, variance=True):
        d = np.asarray(d_star, dtype=float)
        return PredictiveResult(d, d.copy(), np.zeros(d.size), np.ones(d.size, bool))


def test_perfect_model_forecasts_exactly():
    traj = simulate(SimConfig(n_p=50, n_tau=3, sigma0=0.0, seed=4))
    rep = one_step_forecast_eval(ExactModel(None, HYPER, None, None), traj)
    assert rep[-1].rmse == pytest.approx(0.0, abs=1e-14)
    assert [r.direction for r in rep] == ["x", "y", "all"]


def prior_draw(rng, hyper, n_p=20):
    # frame 1 velocities drawn from the model given frame 0
    pos0 = rng.uniform(0, 3, (n_p, 2))
    vel0 = rng.uniform(-1, 1, (n_p, 2))
    traj = ParticleTrajectory(np.repeat([0, 1], n_p), np.tile(np.arange(1, n_p + 1), 2),
                              np.vstack([pos0, pos0]), np.vstack([vel0, vel0]))
    design = build_design(traj, hyper.schema())
    fac = design.factors[0]
    z = sample_path(hyper.kernels[0], fac.inputs, rng)
    y = np.zeros(design.n_rows)
    np.add.at(y, fac.rows, fac.values * z[fac.cols])
    y += np.sqrt(hyper.nugget) * rng.standard_normal(design.n_rows)
    vel1 = np.empty((n_p, 2))
    vel1[design.row_particle - 1, design.row_dir] = y
    return ParticleTrajectory(traj.frame, traj.pid, traj.pos, np.vstack([vel0, vel1]))


def test_prior_only_forecast_is_calibrated():
    hyper = HyperParams([MaternParams(0.5, 0.5, 2.5)], 0.05, [0.8])
    model = FittedModel.prior_only(hyper)
    rng = np.random.default_rng(17)
    hits = n = 0
    for _ in range(500):
        rep = one_step_forecast_eval(model, prior_draw(rng, hyper))[-1]
        hits += rep.coverage_95 * rep.n
        n += rep.n
    assert abs(hits / n - 0.95) <= 0.03


def test_forecast_beats_constant_baseline():
    traj = simulate(SimConfig(n_p=100, n_tau=8, sigma0=0.1, seed=6))
    train, test = traj.frames_between(0, 6), traj.frames_between(5, 9)
    fitted = fit(build_design(train, HYPER.schema()), HyperParams([MaternParams(0.5, 1.0, 2.5)], 0.01, [0.5]))
    design, mean, var = forecast(fitted, test)
    rmse = np.sqrt(np.mean((mean - design.y) ** 2))
    train_y = fitted.design.y
    const = np.array([train_y[fitted.design.row_dir == l].mean() for l in (0, 1)])[design.row_dir]
    assert rmse <= np.sqrt(np.mean((const - design.y) ** 2))
    assert np.all(var > fitted.hyper.nugget)


def test_fit_reports_convergence(small_traj):
    design = build_design(small_traj, HYPER.schema())
    assert fit(design, HYPER).converged
    assert not fit(design, HYPER, CgConfig(rel_tol=1e-14, max_iter=2)).converged
