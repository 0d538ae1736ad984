import logging

import numpy as np
import pytest

from funcqr.design import ClusterRecord, LongitudinalDataset, ModelSpec, assemble_design
from funcqr.fdbasis import SplineBasisSpec
from funcqr.fitter import (
    FitError,
    SmoothingParams,
    candidate_grid,
    compare_models,
    fit_dataset,
    fold_assignment,
    objective_gradient,
    penalized_fit,
    penalty_blocks,
    select_smoothing,
)
from funcqr.infer import predict_quantile
from funcqr.simgen import SimScenario, generate, oracle_qreg

SMALL = ModelSpec(0.25, "surface", SplineBasisSpec("cubic_bspline", 6), SplineBasisSpec("cyclic_cubic", 6))
SM = SmoothingParams(1.0, 0.1, 1.0, 10.0)


def scalar_dataset(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, n)
    y = 1 + 2 * x + rng.standard_normal(n)
    grid = np.linspace(0, 1, 5)
    clusters = [ClusterRecord(str(i), [y[i]], [rng.uniform(0, 1)], [i]) for i in range(n)]
    return LongitudinalDataset(clusters, grid, np.outer(x, np.ones(5)), (0, 1)), x, y


@pytest.mark.parametrize("tau", [0.1, 0.5])
def test_matches_exact_oracle(tau):
    ds, x, y = scalar_dataset(150, 3)
    spec = ModelSpec(tau, "constant", SplineBasisSpec("cubic_bspline", 4), penalty_order=1)
    fit, design = fit_dataset(ds, spec, SmoothingParams(1e12, 1, 1, 1e12), h=1e-3)
    b0, b1 = oracle_qreg(y, design.B[:, 0], tau)
    np.testing.assert_allclose(fit.a, b0, atol=1e-2)
    assert fit.delta[0] == pytest.approx(b1, abs=1e-2)


def test_infinite_penalties_hit_null_spaces(small_sim):
    ds, _ = small_sim
    design = assemble_design(ds, SMALL)
    fit = penalized_fit(design, ds.y, SMALL, SmoothingParams(1e12, 1e12, 1e12, 1e12))
    assert fit.converged
    _, ps, pt = penalty_blocks(design, SMALL.penalty_order)
    assert fit.delta @ ps @ fit.delta + fit.delta @ pt @ fit.delta < 1e-6
    assert np.linalg.norm(fit.u) < 1e-4


def test_duplicated_clusters_same_surface(small_sim):
    ds, _ = small_sim
    fit, _ = fit_dataset(ds, SMALL, SM, h=0.05)
    doubled = ds.resample_clusters(list(range(ds.n_clusters)) * 2)
    sm2 = SmoothingParams(2 * SM.lambda_alpha, 2 * SM.lambda_beta_s, 2 * SM.lambda_beta_t, SM.lambda_u)
    fit2, _ = fit_dataset(doubled, SMALL, sm2, h=0.05)
    np.testing.assert_allclose(fit2.a, fit.a, atol=1e-6)
    np.testing.assert_allclose(fit2.delta, fit.delta, atol=1e-6)


def test_fit_invariants(small_sim):
    ds, _ = small_sim
    fit, design = fit_dataset(ds, SMALL, SM)
    assert fit.converged
    assert abs(fit.u.mean()) < 1e-8
    assert 0 <= fit.edf_u <= ds.n_clusters
    assert 0 <= fit.edf_ab <= design.n_alpha + design.n_beta
    np.testing.assert_array_equal(fit.Vp, fit.Vp.T)
    assert np.linalg.eigvalsh(fit.Vp).min() >= -1e-10 * np.abs(fit.Vp).max()
    path = np.asarray(fit.objective_path)
    assert np.all(np.diff(path) <= 1e-12 * np.abs(path[:-1]))
    g = objective_gradient(design, ds.y, SMALL, SM, fit.h, fit.theta)
    assert np.max(np.abs(g)) < 1e-6 * (1 + abs(fit.objective))
    assert fit.aic == pytest.approx(-2 * fit.loglik + 2 * (fit.edf_ab + fit.edf_u))


def test_cold_start_objective_monotone(small_sim):
    ds, _ = small_sim
    design = assemble_design(ds, SMALL)
    for sm in (SmoothingParams(1e-4, 1e-4, 1e-4, 1e-4), SmoothingParams(1e4, 1e4, 1e4, 1e4)):
        fit = penalized_fit(design, ds.y, SMALL, sm)
        path = np.asarray(fit.objective_path)
        assert fit.converged
        assert np.all(np.diff(path) <= 1e-12 * np.abs(path[:-1]))


def test_edf_u_decreases_with_lambda_u(small_sim):
    ds, _ = small_sim
    design = assemble_design(ds, SMALL)
    edf = [
        penalized_fit(design, ds.y, SMALL, SmoothingParams(1, 0.1, 1, lu), h=0.05).edf_u
        for lu in (1e-2, 1e-1, 1, 10, 100)
    ]
    assert np.all(np.diff(edf) < 0)


def test_cluster_permutation_invariance(small_sim):
    ds, _ = small_sim
    perm = np.random.default_rng(0).permutation(ds.n_clusters)
    ds2 = LongitudinalDataset([ds.clusters[i] for i in perm], ds.grid, ds.curves, ds.t_domain)
    f1, d1 = fit_dataset(ds, SMALL, SM, h=0.05)
    f2, d2 = fit_dataset(ds2, SMALL, SM, h=0.05)
    rows = np.concatenate([np.flatnonzero(ds.cluster_index == i) for i in perm])
    np.testing.assert_allclose(f2.linear_predictor(d2), f1.linear_predictor(d1)[rows], rtol=0, atol=1e-9)
    np.testing.assert_allclose(f2.u, f1.u[perm], atol=1e-9)


def test_prediction_ignores_u(small_sim):
    ds, _ = small_sim
    fit, _ = fit_dataset(ds, SMALL, SM)
    x, t = ds.curves[0], np.linspace(1, 21, 5)
    before = predict_quantile(fit, x, t)
    fit.u = fit.u + np.random.default_rng(0).normal(size=fit.u.size)
    np.testing.assert_array_equal(predict_quantile(fit, x, t), before)


def test_non_convergence_is_flagged(small_sim, caplog):
    ds, _ = small_sim
    design = assemble_design(ds, SMALL)
    with caplog.at_level(logging.WARNING):
        fit = penalized_fit(design, ds.y, SMALL, SM, init=np.zeros(design.n_alpha + design.n_beta + ds.n_clusters), max_iter=1)
    assert not fit.converged
    assert "did not converge" in caplog.text


def test_zero_penalties_rank_deficient_raises(small_sim):
    ds, _ = small_sim
    design = assemble_design(ds, SMALL)
    with pytest.raises(FitError, match="penalt"):
        penalized_fit(design, ds.y, SMALL, SmoothingParams(0, 0, 0, 0))


def test_smoothing_params_validation():
    with pytest.raises(ValueError):
        SmoothingParams(-1, 1, 1, 1)
    with pytest.raises(ValueError):
        SmoothingParams(1, np.inf, 1, 1)


def test_candidate_grid_shapes():
    assert len(candidate_grid("surface")) == 343
    assert len(candidate_grid("s_only")) == 343
    assert len(candidate_grid("t_only")) == 49
    # lambda_alpha still varies for the constant variant, in step with lambda_beta_t
    assert len(candidate_grid("constant")) == 49
    for c in candidate_grid("constant"):
        assert c.lambda_beta_s == 1e4 and c.lambda_alpha == c.lambda_beta_t
    sep = candidate_grid("surface", {"lambda_alpha": [1, 2], "lambda_beta_t": [3], "lambda_u": [1], "lambda_beta_s": [1]})
    assert {(c.lambda_alpha, c.lambda_beta_t) for c in sep} == {(1, 3), (2, 3)}


def test_fold_assignment():
    a = fold_assignment(23, 5, seed=4)
    np.testing.assert_array_equal(a, fold_assignment(23, 5, seed=4))
    counts = np.bincount(a)
    assert counts.max() - counts.min() <= 1


def test_select_smoothing_singleton_and_errors(small_sim):
    ds, _ = small_sim
    design = assemble_design(ds, SMALL)
    one = {"lambda_u": [3.0], "lambda_beta_s": [0.5], "lambda_t": [7.0]}
    assert select_smoothing(design, ds.y, SMALL, grid=one) == SmoothingParams(7.0, 0.5, 7.0, 3.0)
    with pytest.raises(ValueError):
        select_smoothing(design, ds.y, SMALL, folds=1)
    with pytest.raises(ValueError):
        select_smoothing(design, ds.y, SMALL, folds=ds.n_clusters + 1)


def test_select_smoothing_ties_prefer_smoother():
    # a flat response: every candidate scores identically
    ds, _ = generate(SimScenario(n_clusters=10, n_per_cluster=3, n_grid=12, alpha="zero", beta="zero", sigma_u=0, error_scale=0.0, seed=1))
    spec = ModelSpec(0.5, "constant", SplineBasisSpec("cubic_bspline", 4))
    design = assemble_design(ds, spec)
    grid = {"lambda_u": [0.1, 10.0], "lambda_t": [0.1, 10.0]}
    sm, scores = select_smoothing(design, ds.y, spec, grid=grid, folds=2, h=0.1, return_scores=True)
    assert np.ptp(scores) < 1e-12
    assert sm == SmoothingParams(10.0, 1e4, 10.0, 10.0)


def test_select_smoothing_deterministic_across_threads(small_sim):
    ds, _ = small_sim
    design = assemble_design(ds, SMALL)
    grid = {"lambda_u": [0.1, 100.0], "lambda_beta_s": [0.01, 10.0], "lambda_t": [0.1, 100.0]}
    a = select_smoothing(design, ds.y, SMALL, grid=grid, folds=3, return_scores=True)
    b = select_smoothing(design, ds.y, SMALL, grid=grid, folds=3, threads=3, return_scores=True)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_compare_models_table(small_sim):
    ds, _ = small_sim
    grid = {"lambda_u": [1.0, 100.0], "lambda_beta_s": [0.1, 10.0], "lambda_t": [0.1, 10.0]}
    specs = [ModelSpec(0.25, v, SMALL.basis_t, SMALL.basis_s) for v in ("surface", "constant")]
    rows = compare_models(ds, specs, grid=grid, folds=3)
    assert [r["variant"] for r in rows] == ["surface", "constant"]
    assert sum(r["min_aic"] for r in rows) == 1
    one = compare_models(ds, specs[:1], grid=grid, folds=3)
    assert len(one) == 1 and one[0]["min_aic"]
    with pytest.raises(ValueError):
        compare_models(ds, [specs[0], ModelSpec(0.5)], grid=grid)


def test_compare_models_shares_lambda_u(small_sim):
    ds, _ = small_sim
    grid = {"lambda_u": [1e-2, 1.0, 100.0], "lambda_beta_s": [0.1, 10.0], "lambda_t": [0.1, 10.0]}
    specs = [ModelSpec(0.25, v, SMALL.basis_t, SMALL.basis_s) for v in ("constant", "surface", "t_only")]
    rows = compare_models(ds, specs, grid=grid, folds=3)
    design = assemble_design(ds, specs[1])
    alone = select_smoothing(design, ds.y, specs[1], grid=grid, folds=3)
    assert {r["lambda_u"] for r in rows} == {alone.lambda_u}
    assert len({r["scale"] for r in rows}) == 1


def test_compare_models_failed_row_continues(small_sim):
    ds, _ = small_sim
    grid = {"lambda_u": [1.0], "lambda_beta_s": [1.0], "lambda_t": [1.0]}
    bad = ModelSpec(0.25, "surface", SplineBasisSpec("cubic_bspline", 6, 100.0, 200.0), SMALL.basis_s)
    rows = compare_models(ds, [bad, ModelSpec(0.25, "constant", SMALL.basis_t)], grid=grid, folds=3)
    assert rows[0]["status"] == "failed" and not rows[0]["min_aic"]
    assert rows[1]["status"] == "ok" and rows[1]["min_aic"]
