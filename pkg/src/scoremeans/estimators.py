"""Mean, log-map and distance estimators driven by a score provider.

Every estimator only needs ``provider.score`` (and ``provider.dt_log_p``
for the diffusion time and distances), so analytic kernels and trained
networks are interchangeable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._optim import Adam
from .errors import DivergenceError, ValidationError
from .manifold import RECENTER_RADIUS, Point, TangentVector, get_manifold


@dataclass(frozen=True)
class OptimizerConfig:
    """Step sizes and stopping rule.

    ``method=None`` picks the manifold's default: plain gradient steps on
    spheres, ADAM elsewhere. ``alpha_t`` defaults to ``alpha``.
    """

    alpha: float = 0.1
    alpha_t: float | None = None
    t0: float = 0.2
    iters: int = 1000
    method: str | None = None
    grad_tol: float = 1e-6
    t_min: float = 0.01
    t_max: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.t0 > 0 and self.grad_tol > 0):
            raise ValidationError("alpha, t0 and grad_tol must be positive")
        if self.alpha_t is not None and not self.alpha_t > 0:
            raise ValidationError("alpha_t must be positive")
        if self.iters < 1:
            raise ValidationError("iters must be at least 1")
        if self.method not in (None, "plain", "adam"):
            raise ValidationError(f"unknown method {self.method!r}")
        if not 0 < self.t_min < self.t_max:
            raise ValidationError("need 0 < t_min < t_max")


@dataclass(eq=False)
class MeanEstimate:
    mu: Point
    mu_rep: np.ndarray
    t: float | None
    trace: list = field(default_factory=list)
    converged: bool = False
    iters_used: int = 0

    def to_json(self) -> dict:
        return {
            "mu": self.mu.to_json(),
            "mu_rep": [float(v) for v in self.mu_rep],
            "t": None if self.t is None else float(self.t),
            "converged": bool(self.converged),
            "iters_used": int(self.iters_used),
            "trace": self.trace,
        }


def as_rep(m, data):
    """Stack points (``Point`` objects or arrays) into a representation array."""
    m = get_manifold(m)
    if isinstance(data, Point):
        return m.validate(m.point_to_rep(data))
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], Point):
        return m.validate(np.stack([m.point_to_rep(p) for p in data]))
    arr = np.asarray(data, dtype=float)
    if arr.size == 0:
        raise ValidationError("data must be non-empty")
    return m.validate(arr)


def _t_bounds(provider, cfg):
    lo = max(cfg.t_min, float(getattr(provider, "t_min", 0.0)))
    hi = min(cfg.t_max, float(getattr(provider, "t_max", np.inf)))
    return lo, hi


class _ChartStepper:
    """ADAM ascent on chart coordinates of ``mu``.

    Spheres use a stereographic chart that is recentred (and the ADAM
    moments reset) once the coordinates leave the unit disk.
    """

    def __init__(self, m, mu):
        self.m = m
        self.adam = Adam([(m.dim,)])
        if m.embedded:
            self.anchor = mu.copy()
            self.u = np.zeros(m.dim)
        else:
            self.u = mu.copy()

    def rep(self):
        if self.m.embedded:
            return self.m.chart_to_rep(self.u, self.anchor)
        return self.u.copy()

    def chart_grad(self, covector):
        if self.m.embedded:
            J = self.m.chart_jacobian(self.u, self.anchor)
            return J.T @ covector
        return covector

    def step(self, covector, lr):
        (du,) = self.adam.step([self.chart_grad(covector)], lr)
        self.u = self.u + du
        if self.m.embedded and np.linalg.norm(self.u) > RECENTER_RADIUS:
            self.anchor = self.rep()
            self.u = np.zeros(self.m.dim)
            self.adam.reset()


def diffusion_mean(provider, m, data, cfg: OptimizerConfig = OptimizerConfig(), mu0=None, estimate_t=True):
    """Diffusion t-mean (and diffusion variance) by gradient ascent on the log-likelihood.

    Each iteration moves ``mu`` along the mean score and ``t`` along the
    mean time derivative of ``log p``; ``t`` is clamped to the provider's
    interval intersected with ``[cfg.t_min, cfg.t_max]``. With
    ``estimate_t=False`` the time stays at ``cfg.t0``.

    Parameters
    ----------
    provider : ScoreProvider
    m : manifold or identifier
    data : array (N, rep_dim) or list of Point
    cfg : OptimizerConfig
    mu0 : optional starting point (defaults to the first observation)
    """
    m = get_manifold(m)
    X = as_rep(m, data)
    method = cfg.method or m.default_method
    alpha_t = cfg.alpha_t if cfg.alpha_t is not None else cfg.alpha
    lo, hi = _t_bounds(provider, cfg)
    mu = as_rep(m, mu0) if mu0 is not None else X[0].copy()
    t = float(np.clip(cfg.t0, lo, hi))
    if t != cfg.t0:
        warnings.warn(f"t0={cfg.t0} clamped to {t}", RuntimeWarning, stacklevel=2)
    stepper = _ChartStepper(m, mu) if method == "adam" else None
    adam_t = Adam([()]) if method == "adam" else None
    trace = []
    converged = False
    clamped = False
    it = 0
    for it in range(1, cfg.iters + 1):
        s = provider.score(X, mu, t)
        g_mu = np.mean(s, axis=0)
        v = m.sharp(mu, g_mu)
        gnorm = float(m.norm(mu, v))
        g_t = float(np.mean(provider.dt_log_p(X, mu, t))) if estimate_t else 0.0
        if not (np.isfinite(gnorm) and np.isfinite(g_t)):
            raise DivergenceError(f"non-finite gradient at iteration {it}", trace=trace)
        trace.append({"iter": it, "mu": [float(c) for c in mu], "t": t, "grad_mu": gnorm, "grad_t": g_t})
        if gnorm < cfg.grad_tol and abs(g_t) < cfg.grad_tol:
            converged = True
            it -= 1
            break
        if method == "plain":
            mu = m.exp(mu, cfg.alpha * v)
            t_new = t + alpha_t * g_t
        else:
            stepper.step(g_mu, cfg.alpha)
            mu = stepper.rep()
            (dt,) = adam_t.step([np.asarray(g_t)], alpha_t)
            t_new = t + float(dt)
        if not np.all(np.isfinite(mu)):
            raise DivergenceError(f"non-finite mean at iteration {it}", trace=trace)
        if estimate_t:
            if not lo <= t_new <= hi:
                clamped = True
            t = float(np.clip(t_new, lo, hi))
    if clamped:
        warnings.warn("diffusion time hit its clamp interval", RuntimeWarning, stacklevel=2)
    return MeanEstimate(m.rep_to_point(mu), mu, t, trace, converged, it)


def log_map_score(provider, m, x, y, t_small=0.01):
    """Estimate ``Log_y(x)`` as ``t_small * score(x, y, t_small)`` raised to a vector at ``y``.

    Accepts batched representation arrays; returns representation-level
    tangent components at ``y``.
    """
    m = get_manifold(m)
    x = np.asarray(m.point_to_rep(x) if isinstance(x, Point) else x, float)
    y = np.asarray(m.point_to_rep(y) if isinstance(y, Point) else y, float)
    s = provider.score(x, y, t_small)
    y_b = np.broadcast_to(y, s.shape)
    return t_small * m.sharp(y_b, s)


def log_map_point(provider, m, x: Point, y: Point, t_small=0.01) -> TangentVector:
    """Chart-level variant of :func:`log_map_score` returning a ``TangentVector`` at ``y``."""
    from .manifold import pull_back

    m = get_manifold(m)
    w = log_map_score(provider, m, m.point_to_rep(x), m.point_to_rep(y), t_small)
    if m.embedded:
        return pull_back(m, y, w)
    return TangentVector(y, w)


def frechet_mean(provider, m, data, cfg: OptimizerConfig | None = None, t_small=0.01, mu0=None):
    """Fréchet mean with score-based log maps and normalised geodesic steps.

    Each iteration steps ``Exp_mu(min(alpha, |v|) v / |v|)`` where ``v`` is
    the mean estimated log map at ``mu``; once ``|v| < alpha`` this is the
    full Karcher step, which removes the ``O(alpha)`` residual of purely
    normalised steps. Stops when ``|v| < grad_tol``.
    """
    m = get_manifold(m)
    if cfg is None:
        cfg = OptimizerConfig(alpha=0.01 if m.embedded else 0.1)
    X = as_rep(m, data)
    mu = as_rep(m, mu0) if mu0 is not None else X[0].copy()
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.iters + 1):
        v = np.mean(log_map_score(provider, m, X, mu, t_small), axis=0)
        vn = float(m.norm(mu, v))
        if not np.isfinite(vn):
            raise DivergenceError(f"non-finite log map at iteration {it}", trace=trace)
        trace.append({"iter": it, "mu": [float(c) for c in mu], "grad_mu": vn})
        if vn < cfg.grad_tol:
            converged = True
            it -= 1
            break
        mu = m.exp(mu, v * (min(cfg.alpha, vn) / vn))
    return MeanEstimate(m.rep_to_point(mu), mu, None, trace, converged, it)


def varadhan_distance(provider, m, x, y, t_small=0.1, return_flag=False):
    """Distance from the small-time heat-kernel asymptotics.

    ``sqrt(2 t^2 d_t log p + d t)``; the ``d t`` term cancels the
    normalisation part of ``d_t log p``. Negative radicands clamp to 0 (the
    flag reports them); non-finite values map to ``inf``. Coincident points
    return exactly 0, since on curved spaces the radicand keeps an O(t^2)
    curvature term there.
    """
    m = get_manifold(m)
    x = np.asarray(m.point_to_rep(x) if isinstance(x, Point) else x, float)
    y = np.asarray(m.point_to_rep(y) if isinstance(y, Point) else y, float)
    dt = np.asarray(provider.dt_log_p(x, y, t_small), float)
    rad = 2 * t_small**2 * dt + m.dim * t_small
    flag = rad < 0
    dist = np.where(np.isfinite(rad), np.sqrt(np.maximum(rad, 0.0)), np.inf)
    dist = np.where(np.all(x == y, axis=-1), 0.0, dist)
    if dist.ndim == 0:
        dist, flag = float(dist), bool(flag)
    return (dist, flag) if return_flag else dist
