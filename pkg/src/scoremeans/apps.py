"""Riemannian k-means and maximum-likelihood geodesic regression."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._optim import Adam, warmup_cosine
from .errors import DivergenceError, ValidationError
from .estimators import OptimizerConfig, as_rep, frechet_mean, varadhan_distance
from .manifold import FD_STEP, RECENTER_RADIUS, Point, get_manifold
from .scorenet import MlpParams, mlp_backward, mlp_forward

# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class KMeansResult:
    centroids: np.ndarray  # (K, rep_dim)
    labels: np.ndarray
    inertia: list = field(default_factory=list)
    distances: np.ndarray | None = None

    @property
    def assignments(self):
        """One-hot ``(N, K)`` membership matrix."""
        K = len(self.centroids)
        return np.eye(K, dtype=int)[self.labels]

    def centroid_points(self, m):
        m = get_manifold(m)
        return [m.rep_to_point(c) for c in self.centroids]

    def to_json(self) -> dict:
        return {
            "centroids": self.centroids.tolist(),
            "labels": self.labels.tolist(),
            "inertia": [float(v) for v in self.inertia],
        }


def _rank_distances(provider, m, X, C, t_rank):
    D = varadhan_distance(provider, m, X[:, None, :], C[None, :, :], t_rank)
    return np.asarray(D, float).reshape(len(X), len(C))


def farthest_point_init(provider, m, X, K, t_rank=0.1, seed=2712):
    """First centre uniformly at random, then repeatedly the point farthest from all chosen."""
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(len(X)))]
    dmin = _rank_distances(provider, m, X, X[idx], t_rank)[:, 0]
    for _ in range(1, K):
        dmin[idx] = -np.inf
        j = int(np.argmax(dmin))
        idx.append(j)
        dmin = np.minimum(dmin, _rank_distances(provider, m, X, X[[j]], t_rank)[:, 0])
    return X[idx].copy()


def riemannian_kmeans(
    provider,
    m,
    data,
    K: int,
    init_centroids=None,
    iters: int = 10,
    t_rank: float = 0.1,
    t_small: float = 0.1,
    frechet_cfg: OptimizerConfig | None = None,
    seed: int = 2712,
):
    """Lloyd iterations with Varadhan ranking and score-based Fréchet centroids.

    Each outer iteration assigns every point to the centroid of smallest
    :func:`varadhan_distance` at ``t_rank`` and moves each centroid to the
    Fréchet mean of its cluster (warm-started at the old centroid). An
    empty cluster is re-seeded at the point farthest from its centroid.
    ``inertia`` records the summed squared ranking distance after every
    assignment, including the final one.
    """
    m = get_manifold(m)
    X = as_rep(m, data)
    if not 1 <= K <= len(X):
        raise ValidationError("need 1 <= K <= number of points")
    if frechet_cfg is None:
        frechet_cfg = OptimizerConfig(alpha=0.1, iters=100)
    if init_centroids is None:
        C = farthest_point_init(provider, m, X, K, t_rank, seed)
    else:
        C = as_rep(m, init_centroids).reshape(K, -1).copy()
    inertia = []
    for _ in range(iters):
        D = _rank_distances(provider, m, X, C, t_rank)
        labels = np.argmin(D, axis=1)
        dmin = D[np.arange(len(X)), labels]
        inertia.append(float(np.sum(dmin**2)))
        for k in range(K):
            members = labels == k
            if not np.any(members):
                j = int(np.argmax(dmin))
                C[k] = X[j]
                dmin[j] = 0.0
                continue
            est = frechet_mean(provider, m, X[members], frechet_cfg, t_small, mu0=C[k])
            C[k] = est.mu_rep
    D = _rank_distances(provider, m, X, C, t_rank)
    labels = np.argmin(D, axis=1)
    inertia.append(float(np.sum(D[np.arange(len(X)), labels] ** 2)))
    return KMeansResult(C, labels, inertia, D)


# ---------------------------------------------------------------------------
# maximum-likelihood regression
# ---------------------------------------------------------------------------


def softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def _inv_softplus(s):
    return float(np.log(np.expm1(s)))


@dataclass(frozen=True)
class RegressionConfig:
    """MLRR optimiser settings; ``lr`` follows a cosine decay to 0 over ``iters``.

    ``(mu, V)`` is left unchanged while its gradient norm is at most
    ``grad_tol``: ADAM rescales by the gradient magnitude, so round-off at an
    exact stationary point would otherwise become a full-size step.
    """

    iters: int = 2000
    lr: float = 0.01
    sigma0: float = 0.5
    sigma_hidden: tuple = (32, 32)
    grad_h: float = FD_STEP
    grad_tol: float = 1e-10
    seed: int = 2712

    def __post_init__(self):
        if self.iters < 1 or not self.lr > 0 or not self.sigma0 > 0:
            raise ValidationError("iters, lr and sigma0 must be positive")
        if self.grad_tol < 0:
            raise ValidationError("grad_tol must be non-negative")


@dataclass(eq=False)
class RegressionModel:
    """Geodesic model ``f(x) = Exp_mu(V x)`` with noise scale ``sigma(x)``.

    ``V`` holds one tangent column per covariate in the chart at ``mu``
    (for spheres, the stereographic chart with anchor ``anchor``).
    """

    manifold: str
    u: np.ndarray
    anchor: np.ndarray | None
    V: np.ndarray
    mode: str
    rho: float | None = None
    sigma_net: MlpParams | None = None
    trace: list = field(default_factory=list)

    @property
    def mu(self) -> Point:
        return Point(self.u, self.anchor)

    @property
    def mu_rep(self):
        return get_manifold(self.manifold).chart_to_rep(self.u, self.anchor)

    def tangent_columns(self):
        """Representation-level tangent vectors ``(rep_dim, n_cov)`` at ``mu``."""
        m = get_manifold(self.manifold)
        return m.chart_jacobian(self.u, self.anchor) @ self.V

    def sigma(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        if self.mode == "constant_sigma":
            return np.full(len(x), softplus(self.rho))
        out, _ = mlp_forward(self.sigma_net, x)
        return softplus(out[:, 0])

    def to_json(self) -> dict:
        out = {
            "manifold": self.manifold,
            "mode": self.mode,
            "mu": self.mu.to_json(),
            "mu_rep": self.mu_rep.tolist(),
            "V": self.V.tolist(),
            "trace": self.trace,
        }
        if self.mode == "constant_sigma":
            out["sigma"] = float(softplus(self.rho))
        else:
            out["sigma_weights"] = [W.tolist() for W in self.sigma_net.weights]
            out["sigma_biases"] = [b.tolist() for b in self.sigma_net.biases]
        return out


def _predict(m, u, anchor, V, X):
    mu = m.chart_to_rep(u, anchor)
    W = m.chart_jacobian(u, anchor) @ V  # (rep, c)
    v = X @ W.T
    return m.exp(np.broadcast_to(mu, v.shape), v)


def mlrr_predict(model: RegressionModel, x):
    """Point ``f(x) = Exp_mu(V x)`` (representation) and ``sigma(x)``."""
    m = get_manifold(model.manifold)
    X = np.atleast_2d(np.asarray(x, float))
    if X.shape[1] != model.V.shape[1]:
        X = X.reshape(-1, model.V.shape[1])
    F = _predict(m, model.u, model.anchor, model.V, X)
    return F, model.sigma(X)


def _mean_loglik(provider, Y, F, t):
    try:
        return float(np.mean(provider.log_p(Y, F, t)))
    except NotImplementedError:
        return None


def mlrr_fit(
    provider,
    m,
    covariates,
    responses,
    cfg: RegressionConfig = RegressionConfig(),
    mode: str = "constant_sigma",
    f_mode: str = "geodesic",
    mu0=None,
    V0=None,
):
    """Maximum-likelihood geodesic regression by ADAM ascent.

    The ``(mu, V)`` gradient pulls ``score(y_i, f(x_i), sigma^2)`` back
    through the finite-difference Jacobian of ``f``; the ``sigma`` gradient
    is ``2 sigma d_t log p`` chained through the soft-plus and, in
    ``learned_sigma`` mode, through a small tanh network.
    """
    if f_mode != "geodesic":
        raise ValidationError(f"unsupported f_mode {f_mode!r}")
    if mode not in ("constant_sigma", "learned_sigma"):
        raise ValidationError(f"unknown mode {mode!r}")
    m = get_manifold(m)
    X = np.asarray(covariates, float)
    if X.ndim == 1:
        X = X[:, None]
    Y = as_rep(m, responses)
    if len(X) != len(Y):
        raise ValidationError("covariates and responses differ in length")
    N, c = X.shape
    d = m.dim
    rng = np.random.default_rng(cfg.seed)

    if mu0 is None:
        mu0 = Y[int(np.argmin(np.linalg.norm(X - X.mean(0), axis=1)))]
    mu0 = as_rep(m, mu0)
    anchor = mu0.copy() if m.embedded else None
    u = np.zeros(d) if m.embedded else mu0.copy()
    V = np.zeros((d, c)) if V0 is None else np.asarray(V0, float).reshape(d, c).copy()

    rho = _inv_softplus(cfg.sigma0)
    net = None
    if mode == "learned_sigma":
        net = MlpParams.init([c, *cfg.sigma_hidden, 1], rng)
        net.weights[-1] *= 0.0
        net.biases[-1][:] = rho
    t_lo = max(1e-8, float(getattr(provider, "t_min", 0.0)))
    t_hi = float(getattr(provider, "t_max", np.inf))
    rho_lo = _inv_softplus(np.sqrt(t_lo))
    rho_hi = _inv_softplus(np.sqrt(t_hi)) if np.isfinite(t_hi) else np.inf

    geo_opt = Adam([(d,), (d, c)])
    sig_opt = Adam([()] if mode == "constant_sigma" else [a.shape for a in net.arrays()])
    trace = []
    h = cfg.grad_h
    warned = False

    for it in range(cfg.iters + 1):
        F = _predict(m, u, anchor, V, X)
        if mode == "constant_sigma":
            z = np.full(N, rho)
        else:
            zout, acts = mlp_forward(net, X)
            z = zout[:, 0]
        sig = softplus(z)
        if np.any(sig < 1e-4) and not warned:
            warnings.warn("sigma collapsed below 1e-4; clamping", RuntimeWarning, stacklevel=2)
            warned = True
        t = np.clip(sig**2, t_lo, t_hi)
        S = provider.score(Y, F, t)  # gradient of log p in its f argument
        dlt = provider.dt_log_p(Y, F, t)
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(dlt))):
            raise DivergenceError(f"non-finite gradient at iteration {it}", trace=trace)
        ll = _mean_loglik(provider, Y, F, t)
        entry = {"iter": it, "mu": m.chart_to_rep(u, anchor).tolist(), "sigma": float(np.mean(sig))}
        if ll is not None:
            entry["loglik"] = ll
        trace.append(entry)
        if it == cfg.iters:
            break

        # finite-difference pullback through f for (u, V)
        gu = np.empty(d)
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            dF = (_predict(m, u + e, anchor, V, X) - _predict(m, u - e, anchor, V, X)) / (2 * h)
            gu[k] = np.sum(S * dF) / N
        gV = np.empty((d, c))
        for k in range(d):
            for j in range(c):
                E = np.zeros((d, c))
                E[k, j] = h
                dF = (_predict(m, u, anchor, V + E, X) - _predict(m, u, anchor, V - E, X)) / (2 * h)
                gV[k, j] = np.sum(S * dF) / N
        lr = warmup_cosine(it, cfg.lr, 0, cfg.iters)
        if np.sqrt(np.sum(gu**2) + np.sum(gV**2)) > cfg.grad_tol:
            du, dV = geo_opt.step([gu, gV], lr)
            u_new, V_new = u + du, V + dV
        else:
            u_new, V_new = u, V

        dz = dlt * 2 * sig * _sigmoid(z) / N
        if mode == "constant_sigma":
            (drho,) = sig_opt.step([np.asarray(dz.sum())], lr)
            # keep sigma^2 inside the provider's time interval
            rho = float(np.clip(rho + float(drho), rho_lo, rho_hi))
        else:
            dW, db, _ = mlp_backward(net, acts, dz[:, None])
            for a, up in zip(net.arrays(), sig_opt.step(dW + db, lr)):
                a += up

        if m.embedded and np.linalg.norm(u_new) > RECENTER_RADIUS:
            # re-express mu and the tangent columns in a chart centred at mu
            W = m.chart_jacobian(u_new, anchor) @ V_new
            anchor = m.chart_to_rep(u_new, anchor)
            u_new = np.zeros(d)
            J0 = m.chart_jacobian(u_new, anchor)
            V_new = np.linalg.lstsq(J0, W, rcond=None)[0]
            geo_opt.reset()
        u, V = u_new, V_new
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(V))):
            raise DivergenceError(f"non-finite parameters at iteration {it}", trace=trace)

    return RegressionModel(str(m.id), u, anchor, V, mode, rho if mode == "constant_sigma" else None, net, trace)
