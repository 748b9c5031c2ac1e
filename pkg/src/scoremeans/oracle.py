"""Closed-form heat kernels and the score-provider interface.

Heat kernels are those of Brownian motion with generator ``Delta / 2``.
Scores are differentials ``d_y log p_t(x, y)`` in the manifold's working
representation (ambient and projected to ``T_y`` for spheres).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DomainError, NoOracleError, SeriesConvergenceError
from .manifold import get_manifold


@dataclass(frozen=True)
class SeriesTruncation:
    """Truncation of the circle and sphere series.

    ``sphere_L`` is a cap; the sphere sum stops as soon as the bound on the
    next term drops below ``tail_tol`` times the partial sum. Entries whose
    double-precision sum loses more than ``-log10(cancel_tol)`` digits to
    cancellation are re-evaluated in multiprecision.
    """

    circle_K: int = 10
    sphere_L: int = 256
    tail_tol: float = 1e-12
    cancel_tol: float = 1e-4
    sphere_t_min: float = 0.01

    def __post_init__(self):
        if self.circle_K < 1 or self.sphere_L < 2 or self.tail_tol <= 0:
            raise DomainError("truncation parameters must be positive")


DEFAULT_TRUNCATION = SeriesTruncation()


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("diffusion time must be positive")
    return t


# ---------------------------------------------------------------------------
# Euclidean
# ---------------------------------------------------------------------------


def euclid_log_p(x, y, t):
    t = _check_t(t)
    x, y = np.asarray(x, float), np.asarray(y, float)
    m = x.shape[-1]
    return -np.sum((x - y) ** 2, axis=-1) / (2 * t) - 0.5 * m * np.log(2 * np.pi * t)


def euclid_score(x, y, t):
    t = _check_t(t)
    return (np.asarray(x, float) - np.asarray(y, float)) / np.asarray(t)[..., None]


def euclid_dt_log_p(x, y, t):
    t = _check_t(t)
    x, y = np.asarray(x, float), np.asarray(y, float)
    m = x.shape[-1]
    return np.sum((x - y) ** 2, axis=-1) / (2 * t**2) - m / (2 * t)


# ---------------------------------------------------------------------------
# circle, angles in R / 2 pi Z
# ---------------------------------------------------------------------------


def _circle_terms(x, y, t, trunc):
    k = np.arange(-trunc.circle_K, trunc.circle_K + 1)
    x, y, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), t)
    dx = np.mod(x - y + np.pi, 2 * np.pi) - np.pi  # wrap; the sum is periodic
    delta = dx[..., None] + 2 * np.pi * k
    expo = -(delta**2) / (2 * t[..., None])
    return delta, expo, t


def circle_log_p(x, y, t, trunc=DEFAULT_TRUNCATION):
    t = _check_t(t)
    _, expo, t = _circle_terms(x, y, t, trunc)
    return -0.5 * np.log(2 * np.pi * t) + logsumexp(expo, axis=-1)


def circle_score(x, y, t, trunc=DEFAULT_TRUNCATION):
    """d/dy log p for angles ``x``, ``y``."""
    t = _check_t(t)
    delta, expo, t = _circle_terms(x, y, t, trunc)
    w = np.exp(expo - logsumexp(expo, axis=-1, keepdims=True))
    return np.sum(w * delta, axis=-1) / t


def circle_dt_log_p(x, y, t, trunc=DEFAULT_TRUNCATION):
    t = _check_t(t)
    delta, expo, t = _circle_terms(x, y, t, trunc)
    w = np.exp(expo - logsumexp(expo, axis=-1, keepdims=True))
    return np.sum(w * delta**2, axis=-1) / (2 * t**2) - 1 / (2 * t)


# ---------------------------------------------------------------------------
# m-sphere
# ---------------------------------------------------------------------------


def gegenbauer(L, alpha, z):
    """``C_l^alpha(z)`` for l = 0..L by the three-term recursion.

    Returns an array of shape ``(L + 1,) + z.shape``.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty((L + 1,) + z.shape)
    out[0] = 1.0
    if L >= 1:
        out[1] = 2 * alpha * z
    for l in range(2, L + 1):
        out[l] = (2 * (l - 1 + alpha) * z * out[l - 1] - (l + 2 * alpha - 2) * out[l - 2]) / l
    return out


def sphere_area(m):
    """Surface area of the unit m-sphere."""
    return 2 * np.pi ** ((m + 1) / 2) / math.gamma((m + 1) / 2)


def _log_gegenbauer_at_one(l, alpha):
    # C_l^alpha(1) = Gamma(l + 2 alpha) / (Gamma(2 alpha) l!)
    return gammaln(l + 2 * alpha) - gammaln(2 * alpha) - gammaln(l + 1)


def _sphere_sums_float(z, t, m, L):
    """Kernel, z-derivative and t-derivative partial sums, plus abs sums."""
    alpha = (m - 1) / 2
    ls = np.arange(L + 1)
    lam = ls * (ls + m - 1) / 2
    A = sphere_area(m)
    C = gegenbauer(L, alpha, z)  # (L+1, ...)
    Cp = np.zeros_like(C)
    Cp[1:] = gegenbauer(L - 1, alpha + 1, z)
    decay = np.exp(-lam.reshape((-1,) + (1,) * z.ndim) * t)
    coef = ((2 * ls + m - 1) / (m - 1) / A).reshape(decay.shape[:1] + (1,) * z.ndim)
    lamb = lam.reshape(coef.shape)
    terms = decay * coef * C
    dterms = decay * coef * (m - 1) * Cp  # d/dz C_l^a = 2 a C_{l-1}^{a+1}
    tterms = -lamb * terms
    return (
        terms.sum(0),
        dterms.sum(0),
        tterms.sum(0),
        np.abs(terms).sum(0),
        np.abs(dterms).sum(0),
        np.abs(tterms).sum(0),
    )


def _sphere_L_needed(z, t, m, trunc, log_scale):
    """Smallest L whose tail bound drops below tail_tol * exp(log_scale)."""
    alpha = (m - 1) / 2
    A = sphere_area(m)
    for L in range(2, trunc.sphere_L + 1):
        l = L + 1
        lam = l * (l + m - 1) / 2
        logb = (
            -lam * t
            + np.log((2 * l + m - 1) / (m - 1) / A)
            + _log_gegenbauer_at_one(l, alpha)
            + np.log(max(lam, 1.0) * (m - 1) * (l + 1))
        )
        if np.all(logb < np.log(trunc.tail_tol) + log_scale):
            return L
    raise SeriesConvergenceError(
        f"sphere heat-kernel series does not converge within L={trunc.sphere_L} "
        f"at t={np.min(t):.3g}; use a larger diffusion time (t >= 0.05 is safe)"
    )


def _sphere_sums_mp(z, t, m, trunc):
    lost = (math.acos(max(-1.0, min(1.0, z))) ** 2) / (2 * t) / math.log(10)
    with mpmath.workdps(int(30 + lost)):
        z_ = mpmath.mpf(z)
        t_ = mpmath.mpf(t)
        alpha = mpmath.mpf(m - 1) / 2
        A = 2 * mpmath.pi ** (mpmath.mpf(m + 1) / 2) / mpmath.gamma(mpmath.mpf(m + 1) / 2)
        c0, c1 = mpmath.mpf(1), 2 * alpha * z_
        d0, d1 = mpmath.mpf(1), 2 * (alpha + 1) * z_  # C^{alpha+1}_{l-1}
        s = ds = ts = mpmath.mpf(0)
        # exponentially small kernels need more terms than the float cap
        for l in range(4 * trunc.sphere_L + 1):
            if l == 0:
                c = c0
            elif l == 1:
                c = c1
            else:
                c = (2 * (l - 1 + alpha) * z_ * c1 - (l + 2 * alpha - 2) * c0) / l
                c0, c1 = c1, c
            if l == 0:
                cp = mpmath.mpf(0)
            elif l == 1:
                cp = d0
            elif l == 2:
                cp = d1
            else:
                k = l - 1
                cp = (2 * (k - 1 + alpha + 1) * z_ * d1 - (k + 2 * (alpha + 1) - 2) * d0) / k
                d0, d1 = d1, cp
            lam = mpmath.mpf(l * (l + m - 1)) / 2
            w = mpmath.exp(-lam * t_) * (2 * l + m - 1) / (m - 1) / A
            term = w * c
            s += term
            ds += w * (m - 1) * cp
            ts += -lam * term
            bound = mpmath.exp(-lam * t_) * (2 * l + m - 1) * (l + 1) ** (m + 1) * (lam + 1)
            if l > 2 and bound < trunc.tail_tol * abs(s) and s > 0:
                break
        else:
            raise SeriesConvergenceError(
                f"sphere heat-kernel series does not converge within "
                f"L={4 * trunc.sphere_L} at t={t:.3g}; use a larger diffusion time"
            )
        return float(mpmath.log(s)), float(ds / s), float(ts / s)


def _sphere_eval(x, y, t, m, trunc):
    """log p, (d p / d z) / p and d log p / d t on S^m; z = <x, y>."""
    if m < 2:
        raise DomainError("sphere series needs m >= 2; use the circle kernel for S^1")
    t = _check_t(t)
    if np.any(t < trunc.sphere_t_min):
        raise SeriesConvergenceError(
            f"t={np.min(t):.3g} is below the sphere kernel floor {trunc.sphere_t_min}; "
            "use a larger diffusion time"
        )
    x, y = np.asarray(x, float), np.asarray(y, float)
    z = np.clip(np.sum(x * y, axis=-1), -1.0, 1.0)
    z, t = np.broadcast_arrays(z, t)
    shape = z.shape
    z, t = z.reshape(-1), t.reshape(-1)
    log_p = np.empty_like(z)
    dz = np.empty_like(z)
    dt = np.empty_like(z)
    # group by t so each group gets its own truncation
    for tv in np.unique(t):
        idx = np.nonzero(t == tv)[0]
        L = _sphere_L_needed(z[idx], tv, m, trunc, log_scale=np.log(1e-4))
        s, d, ts, sa, da, ta = _sphere_sums_float(z[idx], tv, m, L)
        bad = (
            (s <= trunc.cancel_tol * sa)
            | (np.abs(d) <= trunc.cancel_tol * da)
            | (np.abs(ts) <= trunc.cancel_tol * ta)
        )
        good = ~bad
        log_p[idx[good]] = np.log(s[good])
        dz[idx[good]] = d[good] / s[good]
        dt[idx[good]] = ts[good] / s[good]
        for j in idx[bad]:
            log_p[j], dz[j], dt[j] = _sphere_sums_mp(float(z[j]), float(tv), m, trunc)
    return log_p.reshape(shape), dz.reshape(shape), dt.reshape(shape)


def sphere_log_p(x, y, t, m=None, trunc=DEFAULT_TRUNCATION):
    """log heat kernel on S^m for embedded unit vectors ``x``, ``y``."""
    m = np.shape(x)[-1] - 1 if m is None else m
    return _sphere_eval(x, y, t, m, trunc)[0]


def sphere_score(x, y, t, m=None, trunc=DEFAULT_TRUNCATION):
    """Gradient of log p in ``y``, ambient and tangent to the sphere at ``y``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    m = x.shape[-1] - 1 if m is None else m
    _, dz, _ = _sphere_eval(x, y, t, m, trunc)
    z = np.sum(x * y, axis=-1, keepdims=True)
    return dz[..., None] * (x - z * y)


def sphere_dt_log_p(x, y, t, m=None, trunc=DEFAULT_TRUNCATION):
    m = np.shape(x)[-1] - 1 if m is None else m
    return _sphere_eval(x, y, t, m, trunc)[2]


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------


class ScoreProvider:
    """Uniform access to ``d_y log p_t(x, y)`` and ``d_t log p_t(x, y)``.

    ``x`` and ``y`` are working-representation arrays that broadcast
    against each other; ``t`` is a scalar or broadcastable array.
    """

    t_min = 0.0
    t_max = math.inf
    exact_jacobian = False

    def __init__(self, manifold):
        self.manifold = get_manifold(manifold)

    def check_t(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t <= self.t_min if self.t_min == 0 else t < self.t_min) or np.any(
            t > self.t_max
        ):
            raise DomainError(
                f"t outside provider interval ({self.t_min}, {self.t_max}]"
            )
        return t

    def score(self, x, y, t):
        raise NotImplementedError

    def dt_log_p(self, x, y, t):
        from .scorenet import dt_log_p_from_score

        return dt_log_p_from_score(self, self.manifold, x, y, t)

    def log_p(self, x, y, t):
        raise NotImplementedError(f"{type(self).__name__} has no log density")


class EuclideanOracle(ScoreProvider):
    exact_jacobian = True

    def log_p(self, x, y, t):
        return euclid_log_p(x, y, self.check_t(t))

    def score(self, x, y, t):
        return euclid_score(x, y, self.check_t(t))

    def dt_log_p(self, x, y, t):
        return euclid_dt_log_p(x, y, self.check_t(t))

    def score_jacobian(self, x, y, t):
        """d score / d y in chart coordinates."""
        t = self.check_t(t)
        shape = np.broadcast_shapes(np.shape(x), np.shape(y))
        d = shape[-1]
        return np.broadcast_to(-np.eye(d) / t[..., None, None], shape + (d,)).copy()


class FlatOracle(ScoreProvider):
    """Constant-metric chart (Sym(n)): Gaussian with covariance ``t g^{-1}``."""

    exact_jacobian = True

    def __init__(self, manifold):
        super().__init__(manifold)
        self.g = self.manifold.chart_metric(np.zeros(self.manifold.dim))
        self._logdet = np.linalg.slogdet(self.g)[1]

    def log_p(self, x, y, t):
        t = self.check_t(t)
        r = np.asarray(x, float) - np.asarray(y, float)
        d = r.shape[-1]
        q = np.einsum("...i,ij,...j->...", r, self.g, r)
        return -q / (2 * t) - 0.5 * d * np.log(2 * np.pi * t)

    def score(self, x, y, t):
        t = self.check_t(t)
        r = np.asarray(x, float) - np.asarray(y, float)
        return r @ self.g / np.asarray(t)[..., None]

    def dt_log_p(self, x, y, t):
        t = self.check_t(t)
        r = np.asarray(x, float) - np.asarray(y, float)
        d = r.shape[-1]
        q = np.einsum("...i,ij,...j->...", r, self.g, r)
        return q / (2 * t**2) - d / (2 * t)

    def score_jacobian(self, x, y, t):
        t = self.check_t(t)
        shape = np.broadcast_shapes(np.shape(x), np.shape(y))
        return np.broadcast_to(-self.g / t[..., None, None], shape + self.g.shape[-1:]).copy()


class CircleOracle(ScoreProvider):
    """S^1 embedded in R^2; angles are recovered with ``atan2``."""

    def __init__(self, manifold, trunc=DEFAULT_TRUNCATION):
        super().__init__(manifold)
        self.trunc = trunc

    @staticmethod
    def _angle(p):
        p = np.asarray(p, float)
        return np.arctan2(p[..., 1], p[..., 0])

    def log_p(self, x, y, t):
        return circle_log_p(self._angle(x), self._angle(y), self.check_t(t), self.trunc)

    def score(self, x, y, t):
        s = circle_score(self._angle(x), self._angle(y), self.check_t(t), self.trunc)
        y = np.asarray(y, float)
        tangent = np.stack([-y[..., 1], y[..., 0]], axis=-1)
        return s[..., None] * tangent

    def dt_log_p(self, x, y, t):
        return circle_dt_log_p(self._angle(x), self._angle(y), self.check_t(t), self.trunc)


class SphereOracle(ScoreProvider):
    def __init__(self, manifold, trunc=DEFAULT_TRUNCATION):
        super().__init__(manifold)
        self.trunc = trunc
        self.m = self.manifold.n
        self.t_min = trunc.sphere_t_min

    def log_p(self, x, y, t):
        return sphere_log_p(x, y, self.check_t(t), self.m, self.trunc)

    def score(self, x, y, t):
        return sphere_score(x, y, self.check_t(t), self.m, self.trunc)

    def dt_log_p(self, x, y, t):
        return sphere_dt_log_p(x, y, self.check_t(t), self.m, self.trunc)


def oracle_provider(manifold, trunc=DEFAULT_TRUNCATION) -> ScoreProvider:
    """Closed-form provider for R^n, Sym(n), S^1 and S^m."""
    m = get_manifold(manifold)
    fam = m.id.family
    if fam == "Euclidean":
        return EuclideanOracle(m)
    if fam == "Sym":
        return FlatOracle(m)
    if fam == "Sphere":
        return CircleOracle(m, trunc) if m.n == 1 else SphereOracle(m, trunc)
    raise NoOracleError(f"no closed-form heat kernel for {m.id}")
