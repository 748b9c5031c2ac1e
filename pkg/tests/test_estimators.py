import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from scoremeans.errors import DivergenceError, ValidationError
from scoremeans.estimators import (
    OptimizerConfig,
    diffusion_mean,
    frechet_mean,
    log_map_point,
    log_map_score,
    varadhan_distance,
)
from scoremeans.manifold import Point, get_manifold
from scoremeans.oracle import ScoreProvider, oracle_provider
from scoremeans.sampler import sample_paths

from conftest import random_sphere_points, sphere_point_at


class Scaled(ScoreProvider):
    """Multiplies another provider's score by a constant."""

    def __init__(self, inner, c):
        super().__init__(inner.manifold)
        self.inner, self.c = inner, c
        self.t_min, self.t_max = inner.t_min, inner.t_max

    def score(self, x, y, t):
        return self.c * self.inner.score(x, y, t)

    def dt_log_p(self, x, y, t):
        return self.inner.dt_log_p(x, y, t)


class Broken(ScoreProvider):
    def score(self, x, y, t):
        return np.full(np.broadcast_shapes(np.shape(x), np.shape(y)), np.nan)

    def dt_log_p(self, x, y, t):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))[:-1])


def loglik_trace(pr, X, est):
    return np.array([np.mean(pr.log_p(X, np.array(e["mu"]), e["t"])) for e in est.trace])


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"alpha": 0.0}, {"t0": -1.0}, {"iters": 0}, {"method": "sgd"}, {"alpha_t": 0.0}, {"t_min": 2.0}],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValidationError):
            OptimizerConfig(**kwargs)

    def test_defaults(self):
        cfg = OptimizerConfig()
        assert (cfg.alpha, cfg.t0, cfg.iters, cfg.grad_tol) == (0.1, 0.2, 1000, 1e-6)


class TestDiffusionMean:
    def test_two_point_closed_form(self, r2):
        X = np.array([[1.0, 0.0], [-1.0, 0.0]])
        est = diffusion_mean(oracle_provider(r2), r2, X, mu0=[0.3, -0.2])
        np.testing.assert_allclose(est.mu_rep, 0.0, atol=1e-6)
        assert est.t == pytest.approx(0.5, abs=1e-6)
        assert est.converged

    @pytest.mark.parametrize("mid", ["r2", "r3", "sym2"])
    def test_flat_closed_forms(self, mid, rng):
        m = get_manifold(mid)
        pr = oracle_provider(m)
        X = rng.normal(size=(30, m.dim)) * 0.6 + 1.0
        est = diffusion_mean(pr, m, X)
        np.testing.assert_allclose(est.mu_rep, X.mean(0), atol=1e-6)
        g = m.chart_metric(np.zeros(m.dim))
        r = X - X.mean(0)
        t_star = np.mean(np.einsum("ni,ij,nj->n", r, g, r)) / m.dim
        assert est.t == pytest.approx(t_star, abs=1e-6)

    def test_fixed_time(self, r2, rng):
        X = rng.normal(size=(10, 2))
        est = diffusion_mean(oracle_provider(r2), r2, X, estimate_t=False)
        assert est.t == 0.2
        np.testing.assert_allclose(est.mu_rep, X.mean(0), atol=1e-6)

    def test_sphere_symmetric_pair(self, s2):
        # spread wide enough that the fixed time step is stable near the optimum
        X = np.stack([sphere_point_at(1.0, 0.0), sphere_point_at(1.0, np.pi)])
        est = diffusion_mean(oracle_provider(s2), s2, X, mu0=s2.north)
        assert est.converged
        np.testing.assert_allclose(est.mu_rep, s2.north, atol=1e-12)

    def test_small_optimal_time_oscillates(self, s2):
        # optimum t near 0.08: curvature in t exceeds 2 / alpha and plain steps bounce
        X = np.stack([sphere_point_at(0.4, 0.0), sphere_point_at(0.4, np.pi)])
        with pytest.warns(RuntimeWarning, match="clamp"):
            est = diffusion_mean(oracle_provider(s2), s2, X, OptimizerConfig(iters=50), mu0=s2.north)
        assert not est.converged
        stable = diffusion_mean(oracle_provider(s2), s2, X, OptimizerConfig(alpha_t=0.005), mu0=s2.north)
        assert stable.converged
        np.testing.assert_allclose(stable.mu_rep, s2.north, atol=1e-10)

    def test_sphere_default_is_plain(self, s2):
        X = sample_paths(s2, s2.north, 0.3, 20, 40, seed=3).endpoints
        pr = oracle_provider(s2)
        a = diffusion_mean(pr, s2, X, OptimizerConfig(iters=30))
        b = diffusion_mean(pr, s2, X, OptimizerConfig(iters=30, method="plain"))
        np.testing.assert_array_equal(a.mu_rep, b.mu_rep)

    def test_sphere_adam_recenters(self, s2):
        # start far from the data so the chart is recentred several times
        X = sample_paths(s2, sphere_point_at(1.2, 0.5), 0.2, 20, 40, seed=4).endpoints
        pr = oracle_provider(s2)
        a = diffusion_mean(pr, s2, X, OptimizerConfig(method="adam", iters=2000), mu0=s2.north)
        b = diffusion_mean(pr, s2, X, OptimizerConfig(method="plain"), mu0=s2.north)
        assert np.linalg.norm(a.mu_rep - b.mu_rep) < 1e-4
        assert abs(np.linalg.norm(a.mu_rep) - 1) < 1e-12

    @pytest.mark.parametrize("mid", ["r2", "r3", "s2"])
    def test_ascent_with_gradient_steps(self, mid):
        m = get_manifold(mid)
        pr = oracle_provider(m)
        for seed in range(20):
            X = sample_paths(m, m.default_origin(), 0.5, 20, 50, seed=seed).endpoints
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                est = diffusion_mean(pr, m, X, OptimizerConfig(iters=200, method="plain"))
            ll = loglik_trace(pr, X, est)
            assert np.all(np.diff(ll[10:]) >= -1e-12)

    @pytest.mark.parametrize("mid", ["r2", "r3"])
    def test_adam_reaches_the_same_optimum(self, mid):
        m = get_manifold(mid)
        pr = oracle_provider(m)
        for seed in range(5):
            X = sample_paths(m, m.default_origin(), 0.5, 20, 50, seed=seed).endpoints
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                a = diffusion_mean(pr, m, X, OptimizerConfig(method="adam"))
                b = diffusion_mean(pr, m, X, OptimizerConfig(method="plain"))
            assert a.converged and b.converged
            np.testing.assert_allclose(a.mu_rep, b.mu_rep, atol=1e-5)
            assert a.t == pytest.approx(b.t, abs=1e-5)

    def test_score_scaling_keeps_fixed_point(self, r2, rng):
        X = rng.normal(size=(20, 2))
        pr = oracle_provider(r2)
        a = diffusion_mean(pr, r2, X, OptimizerConfig(method="plain"))
        b = diffusion_mean(Scaled(pr, 3.0), r2, X, OptimizerConfig(method="plain", alpha=0.03))
        np.testing.assert_allclose(a.mu_rep, b.mu_rep, atol=1e-6)

    def test_t0_clamp_warns(self, s2):
        X = random_sphere_points(5, seed=1)
        with pytest.warns(RuntimeWarning, match="clamped"):
            diffusion_mean(oracle_provider(s2), s2, X, OptimizerConfig(t0=0.001, iters=2))

    def test_time_stays_in_interval(self, r2):
        X = np.array([[10.0, 0.0], [-10.0, 0.0]])  # optimum t = 100 lies above the cap
        with pytest.warns(RuntimeWarning):
            est = diffusion_mean(oracle_provider(r2), r2, X, OptimizerConfig(iters=50))
        assert all(0.01 <= e["t"] <= 1.0 for e in est.trace)
        assert est.t == 1.0

    def test_divergence_raises_with_trace(self, r2):
        with pytest.raises(DivergenceError) as info:
            diffusion_mean(Broken(r2), r2, np.zeros((3, 2)))
        assert info.value.trace == []

    def test_empty_data(self, r2):
        with pytest.raises(ValidationError):
            diffusion_mean(oracle_provider(r2), r2, np.zeros((0, 2)))

    def test_accepts_points(self, s2):
        pts = [Point([0.1, 0.0], s2.north), Point([-0.1, 0.0], s2.north)]
        est = diffusion_mean(oracle_provider(s2), s2, pts, mu0=s2.north)
        np.testing.assert_allclose(est.mu_rep, s2.north, atol=1e-10)
        assert est.to_json()["mu"]["coords"] == pytest.approx([0.0, 0.0], abs=1e-10)


class TestLogMap:
    def test_euclidean_exact(self, r2):
        v = log_map_score(oracle_provider(r2), r2, np.array([2.0, 1.0]), np.zeros(2), 0.37)
        np.testing.assert_allclose(v, [2.0, 1.0], rtol=1e-15)

    def test_same_point(self, s2):
        np.testing.assert_array_equal(log_map_score(oracle_provider(s2), s2, s2.north, s2.north, 0.05), 0.0)

    def test_sphere_relative_error(self, s2, rng):
        pr = oracle_provider(s2)
        y = random_sphere_points(100, seed=11)
        d = rng.uniform(0.1, np.pi / 2, 100)
        w = s2.proj(y, rng.normal(size=(100, 3)))
        w *= (d / np.linalg.norm(w, axis=1))[:, None]
        x = s2.exp(y, w)
        est = log_map_score(pr, s2, x, y, 0.05)
        exact = s2.log(y, x)
        rel = np.linalg.norm(est - exact, axis=1) / np.linalg.norm(exact, axis=1)
        assert rel.max() < 0.05
        assert np.linalg.norm(est - exact, axis=1).max() < 0.02 * np.pi / 2 * 1.5

    def test_point_variant(self, s2):
        x = Point(s2.rep_to_chart(sphere_point_at(0.5), s2.north), s2.north)
        y = Point([0.0, 0.0], s2.north)
        v = log_map_point(oracle_provider(s2), s2, x, y, 0.05)
        assert np.sqrt(v.components @ s2.chart_metric(v.base.coords, v.base.anchor) @ v.components) == pytest.approx(0.5, rel=0.02)

    def test_spd_has_no_closed_form_but_score_route_works(self):
        # a flat Sym provider stands in for a trained network on a chart manifold
        m = get_manifold("sym2")
        x, y = np.array([1.0, 0.5, 2.0]), np.array([0.0, 0.2, 1.0])
        np.testing.assert_allclose(log_map_score(oracle_provider(m), m, x, y, 0.1), x - y)


class TestFrechet:
    def test_euclidean_mean(self, r2, rng):
        X = rng.normal(size=(25, 2)) + 3.0
        est = frechet_mean(oracle_provider(r2), r2, X)
        np.testing.assert_allclose(est.mu_rep, X.mean(0), atol=1e-6)
        assert est.t is None

    def test_symmetric_fixed_point(self, s2):
        X = np.stack([sphere_point_at(0.7, 1.0), sphere_point_at(0.7, 1.0 + np.pi)])
        est = frechet_mean(oracle_provider(s2), s2, X, mu0=s2.north)
        assert est.converged
        np.testing.assert_allclose(est.mu_rep, s2.north, atol=1e-12)

    def test_matches_closed_form_log_mean(self, s2):
        X = sample_paths(s2, s2.north, 0.5, 50, 60, seed=9).endpoints
        score_est = frechet_mean(oracle_provider(s2), s2, X, t_small=0.05)
        mu = s2.north.copy()
        for _ in range(200):
            mu = s2.exp(mu, np.mean(s2.log(np.broadcast_to(mu, X.shape), X), axis=0))
        assert s2.dist(score_est.mu_rep, mu) < 0.1

    def test_steps_are_capped(self, s2):
        X = np.stack([sphere_point_at(1.0, 0.0)] * 3)
        est = frechet_mean(oracle_provider(s2), s2, X, OptimizerConfig(alpha=0.01, iters=5), mu0=s2.north)
        steps = [s2.dist(np.array(a["mu"]), np.array(b["mu"])) for a, b in zip(est.trace, est.trace[1:])]
        np.testing.assert_allclose(steps, 0.01, rtol=1e-9)


class TestVaradhan:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 3.0), st.integers(0, 1000))
    def test_euclidean_identity(self, t, seed):
        m = get_manifold("r3")
        x, y = np.random.default_rng(seed).normal(size=(2, 3))
        d = varadhan_distance(oracle_provider(m), m, x, y, t)
        assert d == pytest.approx(np.linalg.norm(x - y), rel=1e-9)

    def test_same_point(self, s2):
        d, flag = varadhan_distance(oracle_provider(s2), s2, s2.north, s2.north, 0.05, return_flag=True)
        assert d == 0.0 and not flag

    def test_curvature_term_near_diagonal(self, s2):
        # on S^2 the radicand tends to t^2 / 3 as y -> x rather than to 0
        y = sphere_point_at(1e-6)
        d = varadhan_distance(oracle_provider(s2), s2, s2.north, y, 0.05)
        assert d == pytest.approx(0.05 / np.sqrt(3), rel=0.01)

    def test_negative_radicand_clamps(self, r2):
        pr = Scaled(oracle_provider(r2), 1.0)
        pr.dt_log_p = lambda x, y, t: np.full(np.shape(x)[:-1], -100.0)
        d, flag = varadhan_distance(pr, r2, np.zeros(2), np.ones(2), 0.1, return_flag=True)
        assert d == 0.0 and flag

    def test_quarter_circle(self, s2):
        d = varadhan_distance(oracle_provider(s2), s2, s2.north, np.array([1.0, 0.0, 0.0]), 0.05)
        assert d == pytest.approx(np.pi / 2, rel=0.1)

    def test_sphere_accuracy_band(self, s2):
        dist = np.linspace(0.2, np.pi / 2, 15)
        Y = np.stack([sphere_point_at(a, 0.3 * i) for i, a in enumerate(dist)])
        d = varadhan_distance(oracle_provider(s2), s2, s2.north, Y, 0.05)
        assert np.all(np.abs(d / dist - 1) < 0.1)

    def test_ranking(self, s2):
        X = random_sphere_points(50, seed=21)
        q = random_sphere_points(1, seed=22)[0]
        d = varadhan_distance(oracle_provider(s2), s2, q, X, 0.1)
        assert stats.kendalltau(d, s2.dist(np.broadcast_to(q, X.shape), X)).statistic >= 0.95
