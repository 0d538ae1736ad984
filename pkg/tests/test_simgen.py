import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funcqr.qloss import check_loss
from funcqr.simgen import SimScenario, anchored_errors, generate, oracle_qreg


def test_anchoring_fraction_normal():
    sc = SimScenario(n_clusters=1000, n_per_cluster=100, n_grid=10, sigma_u=0, noise_sd=0, error="normal", tau=0.5, seed=2)
    ds, truth = generate(sc)
    assert abs(np.mean(ds.y < truth.quantile) - 0.5) < 0.01


@pytest.mark.parametrize("error", ["normal", "skewed", "heteroskedastic"])
@pytest.mark.parametrize("tau", [0.1, 0.5, 0.8])
def test_anchoring_within_three_se(error, tau):
    sc = SimScenario(tau=tau, error=error)
    e = anchored_errors(np.random.default_rng(1), sc, np.linspace(1, 21, 200_000))
    se = np.sqrt(tau * (1 - tau) / e.size)
    assert abs(np.mean(e < 0) - tau) < 3 * se


def test_zero_beta_zero_difference():
    _, truth = generate(SimScenario(n_clusters=3, beta="zero"))
    np.testing.assert_array_equal(truth.difference(np.linspace(1, 21, 7)), 0.0)


def test_bit_identical():
    sc = SimScenario(n_clusters=7, n_per_cluster=(2, 5), noise_sd=0.2, seed=5)
    (a, ta), (b, tb) = generate(sc), generate(sc)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.t, b.t)
    np.testing.assert_array_equal(a.curves, b.curves)
    np.testing.assert_array_equal(ta.u, tb.u)
    assert a.obs_ids == b.obs_ids


def test_truth_record_and_sizes():
    sc = SimScenario(n_clusters=5, n_per_cluster=(2, 4), seed=1)
    ds, truth = generate(sc)
    assert ds.n_clusters == 5 and all(2 <= n <= 4 for n in ds.sizes)
    assert abs(truth.u.mean()) < 1e-12
    np.testing.assert_allclose(truth.quantile, truth.alpha(ds.t) + np.array(
        [truth.beta_integral([t], c)[0, 0] for t, c in zip(ds.t, truth.coefs)]
    ) + truth.u[ds.cluster_index])
    # D(t) = 2 (0.5 + 1.5 u^2) for the surface scenario
    t = np.array([1.0, 11.0, 21.0])
    np.testing.assert_allclose(truth.difference(t), [1.0, 1.75, 4.0], atol=1e-8)


def test_scenario_validation():
    for bad in (dict(n_clusters=0), dict(sigma_u=-1), dict(error="cauchy"), dict(tau=1.0), dict(beta="wavy")):
        with pytest.raises(ValueError):
            SimScenario(**bad)


def test_oracle_examples():
    x = np.linspace(-1, 1, 25)
    assert oracle_qreg(3 + 2 * x, x, 0.3) == pytest.approx((3.0, 2.0))
    b0, b1 = oracle_qreg(np.array([1.0, 4.0]), np.array([0.0, 1.0]), 0.5)
    assert (b0, b1) == pytest.approx((1.0, 3.0))
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, 2000)
    y = 1 + x + rng.standard_t(3, 2000)
    assert abs(oracle_qreg(y, x, 0.5)[1] - 1) < 0.1
    with pytest.raises(ValueError):
        oracle_qreg(np.ones(5), np.ones(5), 0.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_oracle_not_beaten_by_any_pair_line(seed, tau):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=30)
    y = x + rng.normal(size=30)
    b0, b1 = oracle_qreg(y, x, tau)
    best = check_loss(y - b0 - b1 * x, tau).sum()
    i, j = np.triu_indices(30, 1)
    s = (y[j] - y[i]) / (x[j] - x[i])
    c = y[i] - s * x[i]
    losses = check_loss(y[None, :] - c[:, None] - s[:, None] * x[None, :], tau).sum(axis=1)
    assert best <= losses.min() + 1e-12
