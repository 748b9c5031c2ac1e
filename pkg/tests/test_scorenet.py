import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoremeans.errors import TrainingError, ValidationError
from scoremeans.manifold import get_manifold
from scoremeans.oracle import euclid_score, oracle_provider
from scoremeans.sampler import PathDataset, SamplingConfig, build_dataset
from scoremeans.scorenet import (
    Checkpoint,
    MlpParams,
    NetProvider,
    TrainConfig,
    dsm_loss,
    dsm_targets,
    dt_log_p_from_score,
    evaluate_dsm,
    forward,
    forward_potential,
    layer_dims_for,
    mlp_forward,
    potential_score,
    provider_dsm_loss,
    train,
)

from conftest import random_sphere_points


def fd_param_grads(params, loss_fn, h=1e-6):
    """Central differences of ``loss_fn(params)`` for every parameter."""
    out = []
    for a in params.arrays():
        g = np.empty_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            lp = loss_fn(params)
            a[idx] = old - h
            lm = loss_fn(params)
            a[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def small_batch(m, rng, B=6):
    """Records whose previous point sits one step (dt = 0.01) from ``y``."""
    if m.embedded:
        x0, y = (random_sphere_points(B, m.rep_dim, seed=int(rng.integers(1 << 30))) for _ in range(2))
        prev = m.exp(y, m.proj(y, 0.1 * rng.normal(size=y.shape)))
    elif m.id.family == "SPD":
        # O(1) coordinates (non-zero diagonal) keep the tanh layers out of saturation
        x0, y = (rng.uniform(0.5, 1.5, (B, m.dim)) for _ in range(2))
        prev = y + 0.1 * rng.normal(size=y.shape)
    else:
        x0, y = (rng.normal(size=(B, m.dim)) for _ in range(2))
        prev = y + 0.1 * rng.normal(size=y.shape)
    t = rng.uniform(0.1, 1.0, B)
    return x0, y, prev, t, np.full(B, 0.01)


class TestMlp:
    def test_zero_network(self):
        p = MlpParams.zeros([5, 4, 2])
        np.testing.assert_array_equal(forward(p, np.ones(2), np.ones(2), 0.5), 0.0)

    def test_single_linear_layer(self, rng):
        W = rng.normal(size=(2, 5))
        p = MlpParams([W], [np.zeros(2)])
        x, y, t = np.array([1.0, 2.0]), np.array([-1.0, 0.5]), 0.3
        np.testing.assert_allclose(forward(p, x, y, t), W @ np.r_[x, y, t])

    def test_flat_round_trip(self, rng):
        p = MlpParams.init([5, 7, 3, 2], rng)
        q = MlpParams.from_flat(p.layer_dims, p.flat())
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_shape_validation(self):
        with pytest.raises(ValidationError):
            MlpParams([np.zeros((3, 4)), np.zeros((2, 5))], [np.zeros(3), np.zeros(2)])
        with pytest.raises(ValidationError):
            MlpParams.from_flat([2, 3], np.zeros(5))

    def test_default_architectures(self):
        assert layer_dims_for("r2") == [5, 128, 128, 128, 2]
        assert layer_dims_for("s2") == [7, 512, 512, 512, 512, 512, 3]
        assert layer_dims_for("s2", kind="potential")[-1] == 1

    def test_embedded_output_is_tangent(self, rng):
        m = get_manifold("s2")
        p = MlpParams.init(layer_dims_for(m, (8, 8)), rng)
        Y = random_sphere_points(10, seed=5)
        s = forward(p, random_sphere_points(10, seed=6), Y, 0.4, m)
        np.testing.assert_allclose(np.sum(s * Y, axis=1), 0.0, atol=1e-14)
        np.testing.assert_allclose(m.proj(Y, s), s, atol=1e-10)

    def test_potential_gradient_matches_fd(self, rng):
        p = MlpParams.init([5, 8, 8, 1], rng)
        x, y, t = rng.normal(size=2), rng.normal(size=2), 0.4
        s = potential_score(p, x, y, t)
        h = 1e-6
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (forward_potential(p, x, y + e, t) - forward_potential(p, x, y - e, t)) / (2 * h)
            assert s[k] == pytest.approx(fd, rel=1e-6)


class TestTargets:
    def test_scalar_example(self):
        m = get_manifold("r1")
        tau = dsm_targets(m, np.array([[0.1]]), np.array([[0.0]]), np.array([0.01]))
        np.testing.assert_allclose(tau, [[-10.0]])
        loss, _ = dsm_loss(MlpParams.zeros([3, 4, 1]), m, np.zeros((1, 1)), np.array([[0.1]]), np.array([0.01]), tau)
        assert loss == pytest.approx(50.0)

    def test_loss_zero_at_target(self, rng):
        m = get_manifold("r1")
        p = MlpParams.init([3, 4, 1], rng)
        x0, y, t = rng.normal(size=(5, 1)), rng.normal(size=(5, 1)), rng.uniform(0.1, 1, 5)
        out, _ = mlp_forward(p, np.c_[x0, y, t])
        loss, _ = dsm_loss(p, m, x0, y, t, out)
        assert loss == 0.0

    def test_sphere_targets_tangent(self):
        m = get_manifold("s2")
        y, prev = random_sphere_points(10, seed=1), random_sphere_points(10, seed=2)
        tau = dsm_targets(m, y, prev, np.full(10, 0.01))
        np.testing.assert_allclose(np.sum(tau * y, axis=1), 0.0, atol=1e-12)

    def test_modes_coincide_in_ambient_coordinates(self):
        m = get_manifold("s2")
        y, prev = random_sphere_points(4, seed=1), random_sphere_points(4, seed=2)
        dt = np.full(4, 0.02)
        np.testing.assert_array_equal(dsm_targets(m, y, prev, dt), dsm_targets(m, y, prev, dt, "metric_weighted"))

    def test_metric_weighted_chart(self, rng):
        m = get_manifold("spd2")
        _, y, prev, _, dt = small_batch(m, rng, 3)
        iso = dsm_targets(m, y, prev, dt)
        mw = dsm_targets(m, y, prev, dt, "metric_weighted")
        np.testing.assert_allclose(mw, np.einsum("bij,bj->bi", m.chart_metric(prev), iso))

    def test_euclidean_targets_unbiased(self):
        # E[prev | y, x0] is the Brownian-bridge mean, so the target averages to (x0 - y)/t
        m = get_manifold("r1")
        ds = build_dataset(m, SamplingConfig(n_starts=20000, T=0.5, n_steps=5))
        sel = ds.t == 0.5
        tau = dsm_targets(m, ds.y[sel], ds.prev[sel], ds.dt[sel])[:, 0]
        coef = np.polyfit(ds.y[sel, 0], tau, 1)
        assert coef[0] == pytest.approx(-1 / 0.5, rel=0.05)

    @pytest.mark.parametrize("bad", [0.0, -0.1])
    def test_nonpositive_step(self, bad):
        with pytest.raises(ValidationError):
            dsm_targets("r1", np.zeros((1, 1)), np.zeros((1, 1)), np.array([bad]))


@pytest.mark.parametrize("mid", ["r2", "s2", "spd2"])
@pytest.mark.parametrize("kind", ["score", "potential"])
class TestBackprop:
    def test_matches_finite_differences(self, mid, kind, rng):
        m = get_manifold(mid)
        for trial in range(4):
            hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 3))))
            p = MlpParams.init(layer_dims_for(m, hidden, kind), rng)
            for b in p.biases:
                b += rng.normal(size=b.shape) * 0.1
            x0, y, prev, t, dt = small_batch(m, rng)
            tau = dsm_targets(m, y, prev, dt, "metric_weighted" if mid == "spd2" else "isotropic")
            _, grads = dsm_loss(p, m, x0, y, t, tau, kind)
            fd = fd_param_grads(p, lambda q: dsm_loss(q, m, x0, y, t, tau, kind)[0], h=1e-4)
            g, f = np.concatenate([a.ravel() for a in grads]), np.concatenate([a.ravel() for a in fd])
            assert np.abs(g - f).max() / np.abs(f).max() < 1e-5


class TestSchedule:
    def test_warmup_and_decay(self):
        cfg = TrainConfig()
        assert cfg.lr_at(0) == 0.0
        assert cfg.lr_at(1000) == pytest.approx(1e-3)
        assert cfg.lr_at(cfg.epochs) == pytest.approx(0.0, abs=1e-12)
        assert cfg.lr_at(500) == pytest.approx(5e-4)

    def test_short_runs_clamp_warmup(self):
        cfg = TrainConfig(epochs=100)
        assert cfg.lr_at(50) == pytest.approx(1e-3)

    @pytest.mark.parametrize(
        "kwargs", [{"epochs": 0}, {"lr": 0.0}, {"dsm_mode": "other"}, {"kind": "energy"}, {"batch_size": 0}]
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def r1_data():
    return build_dataset("r1", SamplingConfig(n_starts=512, T=1.0, n_steps=100))


class TestTraining:
    def test_r1_reaches_floor(self, r1_data):
        cfg = TrainConfig(epochs=2000, hidden=(32, 32))
        ck = train(r1_data, cfg)
        floor = provider_dsm_loss(oracle_provider("r1"), r1_data)
        net = evaluate_dsm(ck.params, r1_data)
        assert floor <= net * 1.001  # the analytic score lower-bounds within Monte Carlo error
        assert net <= 1.10 * floor

    def test_deterministic(self, r1_data):
        cfg = TrainConfig(epochs=30, hidden=(8,), log_every=10)
        a, b = train(r1_data, cfg), train(r1_data, cfg)
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())
        assert a.loss_curve == b.loss_curve
        assert len(a.loss_curve) == 3

    def test_divergence_reports_checkpoint(self, r1_data):
        dims = layer_dims_for("r1", (4,))
        bad = MlpParams.zeros(dims)
        bad.weights[-1][:] = 1e308
        bad.biases[0][:] = 1.0
        with pytest.raises(TrainingError) as info:
            train(r1_data, TrainConfig(epochs=5, hidden=(4,)), init=bad)
        assert info.value.checkpoint is not None

    def test_checkpoint_round_trip(self, r1_data, tmp_path):
        ck = train(r1_data, TrainConfig(epochs=5, hidden=(4, 3)))
        path = tmp_path / "ck.json"
        ck.save(path)
        back = Checkpoint.load(path)
        np.testing.assert_array_equal(back.params.flat(), ck.params.flat())
        assert back.layer_dims == [3, 4, 3, 1]
        assert back.representation == "chart"

    def test_checkpoint_rejects_mismatch(self, rng):
        p = MlpParams.init([3, 4, 1], rng)
        with pytest.raises(ValidationError):
            Checkpoint("r1", [3, 5, 1], p)


class TestNetProvider:
    def test_isotropic_chart_output_is_lowered(self, rng):
        m = get_manifold("sym2")
        p = MlpParams.init(layer_dims_for(m, (6,)), rng)
        pr = NetProvider(Checkpoint("sym2", p.layer_dims, p))
        x, y = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(pr.score(x, y, 0.5), m.chart_metric(y) @ forward(p, x, y, 0.5))

    def test_first_order_net_has_no_density(self, rng):
        p = MlpParams.init([5, 4, 2], rng)
        with pytest.raises(NotImplementedError):
            NetProvider(Checkpoint("r2", p.layer_dims, p)).log_p(np.zeros(2), np.ones(2), 0.5)


class TestTimeDerivative:
    @pytest.mark.parametrize("mid", ["r2", "r3", "sym2"])
    def test_flat_exact(self, mid, rng):
        pr = oracle_provider(mid)
        x, y = rng.normal(size=(20, pr.manifold.dim)), rng.normal(size=(20, pr.manifold.dim))
        t = rng.uniform(0.1, 1, 20)
        got = dt_log_p_from_score(pr, pr.manifold, x, y, t, exact=True)
        np.testing.assert_allclose(got, pr.dt_log_p(x, y, t), rtol=1e-13, atol=1e-13)

    def test_flat_finite_difference(self, rng):
        pr = oracle_provider("r3")
        x, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        got = dt_log_p_from_score(pr, pr.manifold, x, y, 0.4, exact=False)
        np.testing.assert_allclose(got, pr.dt_log_p(x, y, 0.4), rtol=1e-7, atol=1e-7)

    @pytest.mark.parametrize("mid", ["s1", "s2", "s3"])
    def test_sphere_matches_series(self, mid, rng):
        pr = oracle_provider(mid)
        m = pr.manifold
        X = random_sphere_points(50, m.rep_dim, seed=10)
        Y = np.stack([m.exp(x, m.proj(x, rng.normal(size=m.rep_dim))) for x in X])
        t = rng.uniform(0.2, 1.0, 50)
        got = dt_log_p_from_score(pr, m, X, Y, t)
        np.testing.assert_allclose(got, pr.dt_log_p(X, Y, t), atol=1e-3, rtol=1e-3)

    def test_peak_is_negative(self, s2):
        pr = oracle_provider(s2)
        val = dt_log_p_from_score(pr, s2, s2.north, s2.north, 0.3)
        assert val < 0
        assert val == pytest.approx(float(pr.dt_log_p(s2.north, s2.north, 0.3)), rel=1e-4)

    def test_spd_chart_formula_on_net(self, rng):
        # the chart Laplacian must agree with an independent coordinate-free check:
        # for a pure gradient field grad f with f = -|u - c|^2 / 2, Delta f = -tr(g^-1 g ...)
        m = get_manifold("spd2")
        c = m.default_origin()

        class Quadratic:
            manifold = m

            def score(self, x, y, t):
                return -(np.asarray(y) - c) * np.ones_like(np.asarray(x))

        y = c + rng.uniform(-0.3, 0.3, (4, 3))
        got = dt_log_p_from_score(Quadratic(), m, np.zeros_like(y), y, 0.5)
        for i, yi in enumerate(y):
            g_inv = np.linalg.inv(m.chart_metric(yi))
            gam = m.chart_christoffel(yi)
            s = -(yi - c)
            lap = -np.trace(g_inv) - np.einsum("jk,ljk,l->", g_inv, gam, s)
            assert got[i] == pytest.approx(0.5 * (lap + s @ g_inv @ s), rel=1e-6)


@pytest.fixture(scope="module")
def r2_nets():
    ds = build_dataset("r2", SamplingConfig(n_starts=1024, n_batches=4))
    out = {}
    for kind in ("score", "potential"):
        out[kind] = NetProvider(train(ds, TrainConfig(epochs=5000, kind=kind)))
    return out


def r2_queries(n=200, seed=5):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.1, 1, n)
    d = rng.uniform(0, 1, n) * 2 * np.sqrt(t)
    phi = rng.uniform(0, 2 * np.pi, n)
    x0 = np.zeros((n, 2))
    return x0, np.stack([d * np.cos(phi), d * np.sin(phi)], 1), t


class TestTrainedR2:
    def test_score_mse(self, r2_nets):
        x0, y, t = r2_queries()
        err = np.sum((r2_nets["score"].score(x0, y, t) - euclid_score(x0, y, t)) ** 2, axis=1)
        # squared error measured against the 1/t scale of the score
        assert np.mean(err * t) < 0.05

    def test_potential_parity(self, r2_nets):
        x0, y, t = r2_queries()
        truth = euclid_score(x0, y, t)
        mse = {k: np.mean(np.sum((p.score(x0, y, t) - truth) ** 2, axis=1)) for k, p in r2_nets.items()}
        assert mse["potential"] < 2 * mse["score"]

    def test_potential_density_is_callable(self, r2_nets):
        x0, y, t = r2_queries(5)
        assert np.all(np.isfinite(r2_nets["potential"].log_p(x0, y, t)))


class TestHypothesis:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
    def test_flat_round_trip_any_shape(self, width, depth, seed):
        rng = np.random.default_rng(seed)
        dims = [3] + [width] * depth + [2]
        p = MlpParams.init(dims, rng)
        q = MlpParams.from_flat(dims, p.flat())
        assert np.array_equal(p.flat(), q.flat())

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.05, 1.0), st.floats(-2, 2), st.floats(-2, 2))
    def test_loss_nonnegative(self, t, x, y):
        m = get_manifold("r1")
        p = MlpParams.init([3, 4, 1], np.random.default_rng(0))
        tau = dsm_targets(m, np.array([[y]]), np.array([[x]]), np.array([0.01]))
        loss, _ = dsm_loss(p, m, np.array([[0.0]]), np.array([[y]]), np.array([t]), tau)
        assert loss >= 0
