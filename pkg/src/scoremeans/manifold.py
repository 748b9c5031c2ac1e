"""Riemannian geometry for the five manifold families.

Two levels of API live here.

*Chart level* works with :class:`Point` (chart coordinates plus an optional
chart anchor) and :class:`TangentVector` (components in the base chart).
This is where metric tensors, Christoffel symbols and divergences are
evaluated.

*Representation level* works with plain arrays, batched over leading axes.
Every manifold has a working representation: the unit vector in
``R^{n+1}`` for spheres, the chart coordinates for everything else.
Samplers, score providers and estimators all speak this representation.
Covectors (differentials such as ``d log p``) and vectors share the
representation's component layout; :meth:`Manifold.sharp` converts the
former into the latter.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CutLocusError,
    DegenerateMetricError,
    IntegrationError,
    NumericalError,
    UnsupportedOperationError,
    ValidationError,
)

FAMILIES = ("Euclidean", "Sphere", "Sym", "SPD", "Landmarks")

GEODESIC_STEPS = 100
FD_STEP = 1e-5
RECENTER_RADIUS = 1.0


# ---------------------------------------------------------------------------
# identifiers and value types
# ---------------------------------------------------------------------------

_ID_PATTERNS = [
    (re.compile(r"^r(\d+)$"), "Euclidean"),
    (re.compile(r"^s(\d+)$"), "Sphere"),
    (re.compile(r"^sym(\d+)$"), "Sym"),
    (re.compile(r"^spd(\d+)$"), "SPD"),
    (re.compile(r"^lm(\d+)x(\d+)$"), "Landmarks"),
]
_PREFIX = {"Euclidean": "r", "Sphere": "s", "Sym": "sym", "SPD": "spd"}


@dataclass(frozen=True)
class ManifoldId:
    family: str
    dim_params: tuple

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown manifold family {self.family!r}")
        want = 2 if self.family == "Landmarks" else 1
        if len(self.dim_params) != want or any(int(p) < 1 for p in self.dim_params):
            raise ValidationError(
                f"{self.family} needs {want} positive dimension parameter(s), "
                f"got {self.dim_params}"
            )

    @property
    def dim(self) -> int:
        """Intrinsic dimension."""
        if self.family == "Landmarks":
            k, a = self.dim_params
            return k * a
        (n,) = self.dim_params
        if self.family in ("Sym", "SPD"):
            return n * (n + 1) // 2
        return n

    @classmethod
    def parse(cls, text: str) -> "ManifoldId":
        text = text.strip().lower()
        for pat, fam in _ID_PATTERNS:
            m = pat.match(text)
            if m:
                return cls(fam, tuple(int(g) for g in m.groups()))
        raise ValidationError(f"unrecognised manifold identifier {text!r}")

    def __str__(self):
        if self.family == "Landmarks":
            return "lm{}x{}".format(*self.dim_params)
        return f"{_PREFIX[self.family]}{self.dim_params[0]}"


@dataclass(frozen=True, eq=False)
class Point:
    """Chart coordinates of a manifold point.

    ``anchor`` is only used by spheres: it is the embedded chart centre,
    and the chart is the stereographic projection from its antipode.
    """

    coords: np.ndarray
    anchor: np.ndarray | None = None

    def __post_init__(self):
        c = np.array(self.coords, dtype=float).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise ValidationError("point coordinates must be finite")
        object.__setattr__(self, "coords", c)
        if self.anchor is not None:
            a = np.array(self.anchor, dtype=float).reshape(-1)
            object.__setattr__(self, "anchor", a)

    def to_json(self) -> dict:
        out = {"coords": [float(c) for c in self.coords]}
        if self.anchor is not None:
            out["anchor"] = [float(a) for a in self.anchor]
        return out

    @classmethod
    def from_json(cls, obj) -> "Point":
        if isinstance(obj, dict):
            return cls(obj["coords"], obj.get("anchor"))
        return cls(obj)


@dataclass(frozen=True, eq=False)
class TangentVector:
    base: Point
    components: np.ndarray

    def __post_init__(self):
        c = np.array(self.components, dtype=float).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise ValidationError("tangent components must be finite")
        object.__setattr__(self, "components", c)


@dataclass(frozen=True, eq=False)
class MetricData:
    g: np.ndarray
    g_inv: np.ndarray
    sqrt_g_inv: np.ndarray
    christoffel: np.ndarray  # christoffel[k, i, j] = Gamma^k_ij
    log_det_g: float

    def __post_init__(self):
        for name in ("g", "g_inv", "sqrt_g_inv", "christoffel"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _christoffel_from(g_inv, dg):
    """Gamma^k_ij from the inverse metric and dg[..., m, i, j] = d_m g_ij."""
    # d_i g_jl + d_j g_il - d_l g_ij, indexed [..., i, j, l]
    t = dg + np.swapaxes(dg, -3, -2) - np.moveaxis(dg, -3, -1)
    gam = 0.5 * np.einsum("...kl,...ijl->...kij", g_inv, t)
    return 0.5 * (gam + np.swapaxes(gam, -1, -2))


def _fd_metric_grad(metric, u, anchor, h=FD_STEP):
    u = np.asarray(u, dtype=float)
    d = u.shape[-1]
    out = []
    for k in range(d):
        step = h * max(1.0, abs(float(u[k])))
        e = np.zeros(d)
        e[k] = step
        out.append((metric(u + e, anchor) - metric(u - e, anchor)) / (2 * step))
    dg = np.stack(out, axis=0)
    if not np.all(np.isfinite(dg)):
        raise NumericalError("non-finite finite-difference metric derivative")
    return dg


# ---------------------------------------------------------------------------
# manifold classes
# ---------------------------------------------------------------------------


class Manifold:
    """Base class; subclasses fill in the chart metric and closed forms."""

    embedded = False
    has_closed_log = False
    default_method = "adam"

    def __init__(self, mid: ManifoldId):
        self.id = mid
        self.dim = mid.dim
        self.rep_dim = mid.dim

    def __repr__(self):
        return f"{type(self).__name__}({self.id})"

    # ---- chart level ------------------------------------------------------

    def chart_metric(self, u, anchor=None):
        raise NotImplementedError

    def chart_metric_grad(self, u, anchor=None):
        """``dg[..., m, i, j] = d g_ij / d u^m``."""
        return _fd_metric_grad(self.chart_metric, u, anchor)

    def chart_christoffel(self, u, anchor=None):
        g = self.chart_metric(u, anchor)
        return _christoffel_from(np.linalg.inv(g), self.chart_metric_grad(u, anchor))

    def chart_drift(self, u, anchor=None):
        """Ito drift ``-1/2 g^{jk} Gamma^i_jk`` of Brownian motion in the chart."""
        g_inv = np.linalg.inv(self.chart_metric(u, anchor))
        gam = self.chart_christoffel(u, anchor)
        return -0.5 * np.einsum("...jk,...ijk->...i", g_inv, gam)

    def chart_to_rep(self, u, anchor=None):
        return np.asarray(u, dtype=float)

    def rep_to_chart(self, p, anchor=None):
        return np.asarray(p, dtype=float)

    def chart_jacobian(self, u, anchor=None):
        """Jacobian of the representation with respect to chart coordinates."""
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(np.eye(self.dim), u.shape + (self.dim,)).copy()

    def local_anchor(self, p):
        """Anchor of a chart centred at representation point ``p``."""
        return None

    def embedding_jacobian(self, u, anchor=None):
        """Jacobian of the ambient embedding (identity where there is none)."""
        return self.chart_jacobian(u, anchor)

    # ---- representation level --------------------------------------------

    def metric(self, p):
        return self.chart_metric(p)

    def inner(self, p, u, v):
        return np.einsum("...i,...ij,...j->...", u, self.metric(p), v)

    def norm(self, p, v):
        return np.sqrt(np.maximum(self.inner(p, v, v), 0.0))

    def sharp(self, p, w):
        """Raise a covector to a tangent vector."""
        w = np.asarray(w, dtype=float)
        g = np.broadcast_to(self.metric(p), w.shape + (w.shape[-1],))
        return np.linalg.solve(g, w[..., None])[..., 0]

    def covector_norm(self, p, w):
        return self.norm(p, self.sharp(p, w))

    def proj(self, p, w):
        return np.asarray(w, dtype=float)

    def normalize(self, p):
        return np.asarray(p, dtype=float)

    def sqrt_inv_metric(self, p):
        """Factor ``S`` with ``S S^T = g^{-1}`` in the representation."""
        return np.linalg.cholesky(np.linalg.inv(self.metric(p)))

    def exp(self, p, v):
        return geodesic_rk4(self, p, v)[0]

    def log(self, p, q):
        raise UnsupportedOperationError(
            f"{self.id} has no closed-form logarithmic map; use "
            "scoremeans.estimators.log_map_score"
        )

    def dist(self, p, q):
        return self.norm(p, self.log(p, q))

    def validate(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.rep_dim:
            raise ValidationError(
                f"{self.id}: expected points with {self.rep_dim} components, "
                f"got shape {p.shape}"
            )
        if not np.all(np.isfinite(p)):
            raise ValidationError(f"{self.id}: non-finite coordinates")
        return p

    # ---- Point conversions ------------------------------------------------

    def point_to_rep(self, x: Point):
        return self.chart_to_rep(x.coords, x.anchor)

    def rep_to_point(self, p, anchor=None) -> Point:
        return Point(np.asarray(p, dtype=float))

    def default_origin(self):
        """Canonical starting point used by the benchmark protocol."""
        return np.zeros(self.rep_dim)


class Euclidean(Manifold):
    has_closed_log = True

    def chart_metric(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(np.eye(self.dim), u.shape + (self.dim,)).copy()

    def chart_metric_grad(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        return np.zeros(u.shape[:-1] + (self.dim,) * 3)

    def chart_christoffel(self, u, anchor=None):
        return self.chart_metric_grad(u, anchor)

    def inner(self, p, u, v):
        return np.sum(np.asarray(u) * np.asarray(v), axis=-1)

    def sharp(self, p, w):
        return np.asarray(w, dtype=float)

    def sqrt_inv_metric(self, p):
        return self.chart_metric(p)

    def exp(self, p, v):
        return np.asarray(p, dtype=float) + v

    def log(self, p, q):
        return np.asarray(q, dtype=float) - p

    def dist(self, p, q):
        return np.linalg.norm(np.asarray(q) - np.asarray(p), axis=-1)


class Sym(Manifold):
    """Symmetric n x n matrices, coordinates on the lower triangle.

    The Frobenius metric pulled back through the symmetric embedding is
    constant: weight 1 on diagonal coordinates, 2 on off-diagonal ones.
    """

    has_closed_log = True

    def __init__(self, mid):
        super().__init__(mid)
        n = mid.dim_params[0]
        self.n = n
        self.rows, self.cols = np.tril_indices(n)
        self._weights = np.where(self.rows == self.cols, 1.0, 2.0)
        # embedding Jacobian: vec(matrix) w.r.t. coordinates
        J = np.zeros((n * n, self.dim))
        for k, (i, j) in enumerate(zip(self.rows, self.cols)):
            J[i * n + j, k] = 1.0
            J[j * n + i, k] = 1.0
        self._J = J

    def chart_metric(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(np.diag(self._weights), u.shape + (self.dim,)).copy()

    def chart_metric_grad(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        return np.zeros(u.shape[:-1] + (self.dim,) * 3)

    def chart_christoffel(self, u, anchor=None):
        return self.chart_metric_grad(u, anchor)

    def inner(self, p, u, v):
        return np.sum(self._weights * np.asarray(u) * np.asarray(v), axis=-1)

    def sharp(self, p, w):
        return np.asarray(w, dtype=float) / self._weights

    def sqrt_inv_metric(self, p):
        p = np.asarray(p, dtype=float)
        S = np.diag(1.0 / np.sqrt(self._weights))
        return np.broadcast_to(S, p.shape + (self.dim,)).copy()

    def exp(self, p, v):
        return np.asarray(p, dtype=float) + v

    def log(self, p, q):
        return np.asarray(q, dtype=float) - p

    def to_matrix(self, u):
        u = np.asarray(u, dtype=float)
        M = np.zeros(u.shape[:-1] + (self.n, self.n))
        M[..., self.rows, self.cols] = u
        M[..., self.cols, self.rows] = u
        return M

    def embedding_jacobian(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(self._J, u.shape[:-1] + self._J.shape).copy()

    def default_origin(self):
        return np.where(self.rows == self.cols, 1.0, 0.0)


class SPD(Manifold):
    """Positive definite matrices via ``f(x) = l(x) l(x)^T``.

    ``l`` places the coordinates on the lower triangle. The metric is the
    pullback of the Frobenius inner product through ``f``; since ``f`` is
    quadratic its second derivatives are constant and the metric
    derivative is exact.
    """

    def __init__(self, mid):
        super().__init__(mid)
        n = mid.dim_params[0]
        self.n = n
        self.rows, self.cols = np.tril_indices(n)
        E = np.zeros((self.dim, n, n))
        E[np.arange(self.dim), self.rows, self.cols] = 1.0
        self._E = E
        # d^2 f / dx_m dx_k = E_k E_m^T + E_m E_k^T
        EE = np.einsum("kab,mcb->kmac", E, E)
        self._ddf = EE + np.swapaxes(EE, 0, 1)  # [k, m, a, c]

    def lower(self, u):
        u = np.asarray(u, dtype=float)
        L = np.zeros(u.shape[:-1] + (self.n, self.n))
        L[..., self.rows, self.cols] = u
        return L

    def to_matrix(self, u):
        L = self.lower(u)
        return L @ np.swapaxes(L, -1, -2)

    def _df(self, u):
        L = self.lower(u)
        EL = np.einsum("kab,...cb->...kac", self._E, L)  # E_k L^T
        return EL + np.swapaxes(EL, -1, -2)  # [..., k, a, c]

    def embedding_jacobian(self, u, anchor=None):
        df = self._df(u)
        n2 = self.n * self.n
        return np.swapaxes(df.reshape(df.shape[:-2] + (n2,)), -1, -2)

    def chart_metric(self, u, anchor=None):
        df = self._df(u)
        g = np.einsum("...kab,...lab->...kl", df, df)
        diag = np.asarray(u, dtype=float)[..., self.rows == self.cols]
        if np.any(np.abs(diag) < 1e-12):
            raise DegenerateMetricError("l(x) is singular: zero diagonal coordinate")
        return g

    def chart_metric_grad(self, u, anchor=None):
        df = self._df(u)
        # d_m g_kl = <ddf[k,m], df_l> + <df_k, ddf[l,m]>
        a = np.einsum("kmab,...lab->...mkl", self._ddf, df)
        return a + np.swapaxes(a, -1, -2)

    def default_origin(self):
        return np.where(self.rows == self.cols, 10.0, 0.0)


class Landmarks(Manifold):
    """k landmarks in R^a with the Gaussian-kernel cometric.

    Coordinates are landmark-major: component ``i * a + c`` is coordinate
    ``c`` of landmark ``i``. The cometric is ``K kron I_a`` with
    ``K_ij = exp(-|q_i - q_j|^2 / (2 alpha^2))``.
    """

    def __init__(self, mid, alpha=1.0):
        super().__init__(mid)
        self.k, self.a = mid.dim_params
        self.alpha = alpha

    def _kernel(self, u):
        Q = np.asarray(u, dtype=float).reshape(np.shape(u)[:-1] + (self.k, self.a))
        diff = Q[..., :, None, :] - Q[..., None, :, :]
        K = np.exp(-np.sum(diff**2, axis=-1) / (2 * self.alpha**2))
        if self.k > 1:
            d2 = np.sum(diff**2, axis=-1) + np.eye(self.k) * 1e300
            if np.min(d2) < 1e-16:
                raise DegenerateMetricError("coincident landmarks")
        if np.any(np.linalg.cond(K) > 1e13):
            raise DegenerateMetricError("landmark kernel matrix is numerically singular")
        return K, diff

    def cometric(self, u):
        K, _ = self._kernel(u)
        return np.kron(K, np.eye(self.a)) if K.ndim == 2 else _batch_kron(K, self.a)

    def chart_metric(self, u, anchor=None):
        K, _ = self._kernel(u)
        Kinv = np.linalg.inv(K)
        return np.kron(Kinv, np.eye(self.a)) if K.ndim == 2 else _batch_kron(Kinv, self.a)

    def chart_metric_grad(self, u, anchor=None):
        K, diff = self._kernel(u)
        Kinv = np.linalg.inv(K)
        k, a = self.k, self.a
        eye_k = np.eye(k)
        # dK_ij / dq_{m,c} = -K_ij diff_ijc / alpha^2 (delta_im - delta_jm)
        sel = eye_k[:, None, :] - eye_k[None, :, :]  # [i, j, m]
        dK = -np.einsum("...ij,...ijc,ijm->...mcij", K, diff, sel) / self.alpha**2
        dKinv = -np.einsum("...ip,...mcpq,...qj->...mcij", Kinv, dK, Kinv)
        lead = dKinv.shape[:-4]
        out = np.zeros(lead + (k * a,) * 3)
        for m in range(k):
            for c in range(a):
                blk = dKinv[..., m, c, :, :]
                out[..., m * a + c, :, :] = (
                    np.kron(blk, np.eye(a)) if blk.ndim == 2 else _batch_kron(blk, a)
                )
        return out

    def default_origin(self):
        Q = np.zeros((self.k, self.a))
        Q[:, 0] = np.linspace(-5, 5, self.k) if self.k > 1 else 0.0
        return Q.reshape(-1)


def _batch_kron(A, a):
    out = A[..., :, None, :, None] * np.eye(a)[None, :, None, :]
    s = A.shape
    return out.reshape(s[:-2] + (s[-2] * a, s[-1] * a))


class Sphere(Manifold):
    """Unit sphere S^n in R^{n+1}.

    Working representation: the embedded unit vector. Charts: stereographic
    projection from the antipode of an anchor ``a``, using the orthonormal
    tangent basis ``E(a)`` from the Householder reflection that takes the
    last standard basis vector to ``a``.
    """

    embedded = True
    has_closed_log = True
    default_method = "plain"

    def __init__(self, mid):
        super().__init__(mid)
        self.n = mid.dim_params[0]
        self.rep_dim = self.n + 1

    @property
    def north(self):
        e = np.zeros(self.rep_dim)
        e[-1] = 1.0
        return e

    def default_origin(self):
        return self.north

    def _anchor(self, anchor, shape):
        if anchor is None:
            return np.broadcast_to(self.north, shape[:-1] + (self.rep_dim,))
        return np.asarray(anchor, dtype=float)

    def tangent_basis(self, a):
        """Orthonormal basis of the tangent space at ``a``, shape (..., n+1, n)."""
        a = np.asarray(a, dtype=float)
        w = -a.copy()
        w[..., -1] += 1.0
        ww = np.sum(w * w, axis=-1)[..., None, None]
        H = np.eye(self.rep_dim) - 2 * w[..., :, None] * w[..., None, :] / np.where(
            ww < 1e-30, 1.0, ww
        )
        H = np.where(ww < 1e-30, np.eye(self.rep_dim), H)
        return H[..., :, : self.n]

    # ---- chart level ------------------------------------------------------

    def chart_to_rep(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        a = self._anchor(anchor, u.shape[:-1] + (self.rep_dim,))
        E = self.tangent_basis(a)
        r2 = np.sum(u * u, axis=-1)[..., None]
        p = (2 * np.einsum("...ij,...j->...i", E, u) + (1 - r2) * a) / (1 + r2)
        return p / np.linalg.norm(p, axis=-1, keepdims=True)

    def rep_to_chart(self, p, anchor=None):
        p = np.asarray(p, dtype=float)
        a = self._anchor(anchor, p.shape)
        E = self.tangent_basis(a)
        denom = 1 + np.sum(a * p, axis=-1)[..., None]
        if np.any(denom < 1e-300):
            raise CutLocusError("point is the chart pole (antipode of the anchor)")
        return np.einsum("...ji,...j->...i", E, p) / denom

    def chart_jacobian(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        a = self._anchor(anchor, u.shape[:-1] + (self.rep_dim,))
        E = self.tangent_basis(a)
        r2 = np.sum(u * u, axis=-1)[..., None, None]
        num = 2 * np.einsum("...ij,...j->...i", E, u) + (1 - r2[..., 0]) * a
        # d num / du_j = 2 E_j - 2 u_j a
        dnum = 2 * E - 2 * a[..., :, None] * u[..., None, :]
        return dnum / (1 + r2) - num[..., :, None] * 2 * u[..., None, :] / (1 + r2) ** 2

    def chart_metric(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        lam2 = 4.0 / (1 + np.sum(u * u, axis=-1)) ** 2
        return lam2[..., None, None] * np.eye(self.n)

    def chart_metric_grad(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        r2 = np.sum(u * u, axis=-1)
        lam2 = 4.0 / (1 + r2) ** 2
        dphi = -2 * u / (1 + r2)[..., None]  # d log(lambda)
        return 2 * (lam2[..., None] * dphi)[..., :, None, None] * np.eye(self.n)

    def chart_christoffel(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        dphi = -2 * u / (1 + np.sum(u * u, axis=-1))[..., None]
        I = np.eye(self.n)
        # Gamma^k_ij = delta_ik dphi_j + delta_jk dphi_i - delta_ij dphi_k
        return (
            np.einsum("ik,...j->...kij", I, dphi)
            + np.einsum("jk,...i->...kij", I, dphi)
            - np.einsum("ij,...k->...kij", I, dphi)
        )

    def chart_drift(self, u, anchor=None):
        u = np.asarray(u, dtype=float)
        r2 = np.sum(u * u, axis=-1)[..., None]
        dphi = -2 * u / (1 + r2)
        # g^{jk} Gamma^i_jk = lambda^{-2} (2 - n) dphi_i
        return -0.5 * (1 + r2) ** 2 / 4 * (2 - self.n) * dphi

    def local_anchor(self, p):
        return np.asarray(p, dtype=float)

    # ---- representation level --------------------------------------------

    def metric(self, p):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(np.eye(self.rep_dim), p.shape + (self.rep_dim,)).copy()

    def inner(self, p, u, v):
        return np.sum(np.asarray(u) * np.asarray(v), axis=-1)

    def proj(self, p, w):
        p = np.asarray(p, dtype=float)
        w = np.asarray(w, dtype=float)
        return w - np.sum(w * p, axis=-1, keepdims=True) * p

    def sharp(self, p, w):
        return self.proj(p, w)

    def normalize(self, p):
        p = np.asarray(p, dtype=float)
        return p / np.linalg.norm(p, axis=-1, keepdims=True)

    def sqrt_inv_metric(self, p):
        return self.tangent_basis(p)

    def exp(self, p, v):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        th = np.linalg.norm(v, axis=-1, keepdims=True)
        safe = np.where(th < 1e-300, 1.0, th)
        sinc = np.where(th < 1e-8, 1 - th**2 / 6, np.sin(th) / safe)
        return self.normalize(np.cos(th) * p + sinc * v)

    def log(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        z = np.sum(p * q, axis=-1, keepdims=True)
        w = q - z * p
        wn = np.linalg.norm(w, axis=-1, keepdims=True)
        if np.any((wn < 1e-10) & (z < 0)):
            raise CutLocusError("logarithmic map undefined at the antipode")
        th = np.arctan2(wn, z)
        return np.where(wn < 1e-300, 0.0, th / np.where(wn < 1e-300, 1.0, wn)) * w

    def dist(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        z = np.sum(p * q, axis=-1)
        wn = np.linalg.norm(q - z[..., None] * p, axis=-1)
        return np.arctan2(wn, z)

    def validate(self, p):
        p = super().validate(p)
        if np.any(np.abs(np.linalg.norm(p, axis=-1) - 1) > 1e-8):
            raise ValidationError(f"{self.id}: points must have unit norm")
        return p

    def rep_to_point(self, p, anchor=None) -> Point:
        p = np.asarray(p, dtype=float)
        if anchor is None:
            return Point(np.zeros(self.n), p.copy())
        u = self.rep_to_chart(p, anchor)
        return Point(u, np.asarray(anchor, dtype=float))

    def named_point(self, name: str):
        name = name.lower()
        e = np.zeros(self.rep_dim)
        if name == "north":
            e[-1] = 1.0
        elif name == "south":
            e[-1] = -1.0
        elif name == "equator":
            e[0] = 1.0
        else:
            raise ValidationError(f"unknown named point {name!r}")
        return e


_CLASSES = {
    "Euclidean": Euclidean,
    "Sphere": Sphere,
    "Sym": Sym,
    "SPD": SPD,
    "Landmarks": Landmarks,
}


def get_manifold(mid) -> Manifold:
    """Build a manifold from a :class:`ManifoldId` or identifier string."""
    if isinstance(mid, Manifold):
        return mid
    if isinstance(mid, str):
        mid = ManifoldId.parse(mid)
    return _CLASSES[mid.family](mid)


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------


def geodesic_rk4(m: Manifold, x, v, n_steps: int = GEODESIC_STEPS):
    """Integrate the geodesic equation over unit time with fixed-step RK4.

    Returns the end point and end velocity. Works in chart coordinates, so
    only meaningful for chart-represented manifolds.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    h = 1.0 / n_steps

    def acc(x, v):
        gam = m.chart_christoffel(x)
        return -np.einsum("...kij,...i,...j->...k", gam, v, v)

    for _ in range(n_steps):
        k1x, k1v = v, acc(x, v)
        k2x, k2v = v + 0.5 * h * k1v, acc(x + 0.5 * h * k1x, v + 0.5 * h * k1v)
        k3x, k3v = v + 0.5 * h * k2v, acc(x + 0.5 * h * k2x, v + 0.5 * h * k2v)
        k4x, k4v = v + h * k3v, acc(x + h * k3x, v + h * k3v)
        x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise IntegrationError("geodesic integration produced non-finite values")
    return x, v


# ---------------------------------------------------------------------------
# chart-level operations on Point / TangentVector
# ---------------------------------------------------------------------------


def metric_at(m, x: Point) -> MetricData:
    m = get_manifold(m)
    g = m.chart_metric(x.coords, x.anchor)
    if not np.allclose(g, g.T, atol=1e-12 * max(1.0, np.abs(g).max())):
        raise DegenerateMetricError("metric is not symmetric")
    try:
        L = np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise DegenerateMetricError("metric is not positive definite") from exc
    g_inv = np.linalg.inv(g)
    return MetricData(
        g=g,
        g_inv=g_inv,
        sqrt_g_inv=np.linalg.inv(L).T,
        christoffel=christoffel_at(m, x),
        log_det_g=2.0 * float(np.sum(np.log(np.diag(L)))),
    )


def christoffel_at(m, x: Point, method: str = "exact"):
    """Christoffel symbols ``Gamma[k, i, j]`` at ``x``.

    ``method="fd"`` uses central differences of the metric (relative step
    1e-5) instead of the closed-form metric derivative.
    """
    m = get_manifold(m)
    if method == "exact":
        gam = m.chart_christoffel(x.coords, x.anchor)
    elif method == "fd":
        g = m.chart_metric(x.coords, x.anchor)
        dg = _fd_metric_grad(m.chart_metric, x.coords, x.anchor)
        gam = _christoffel_from(np.linalg.inv(g), dg)
    else:
        raise ValidationError(f"unknown method {method!r}")
    if not np.all(np.isfinite(gam)):
        raise NumericalError("non-finite Christoffel symbols")
    return gam


def push_forward(m, v: TangentVector):
    """Representation-level components of a chart tangent vector."""
    m = get_manifold(m)
    J = m.chart_jacobian(v.base.coords, v.base.anchor)
    return J @ v.components


def pull_back(m, x: Point, w) -> TangentVector:
    """Chart components of a representation-level tangent vector at ``x``."""
    m = get_manifold(m)
    J = m.chart_jacobian(x.coords, x.anchor)
    comps = np.linalg.lstsq(J, np.asarray(w, dtype=float), rcond=None)[0]
    return TangentVector(x, comps)


def recenter_chart(m, x: Point) -> Point:
    """Express ``x`` in the chart centred on itself (spheres only)."""
    m = get_manifold(m)
    if not m.embedded:
        return x
    return Point(np.zeros(m.dim), m.chart_to_rep(x.coords, x.anchor))


def maybe_recenter(m, x: Point, radius: float = RECENTER_RADIUS) -> Point:
    m = get_manifold(m)
    if m.embedded and np.linalg.norm(x.coords) > radius:
        return recenter_chart(m, x)
    return x


def exp_map(m, v: TangentVector) -> Point:
    m = get_manifold(m)
    base = v.base
    if m.embedded:
        p = m.point_to_rep(base)
        q = m.exp(p, push_forward(m, v))
        a = base.anchor if base.anchor is not None else m.north
        if np.dot(a, q) < 0:  # would leave the unit chart disk
            return Point(np.zeros(m.dim), q)
        return Point(m.rep_to_chart(q, a), a)
    q = m.exp(base.coords, v.components)
    if not np.all(np.isfinite(q)):
        raise IntegrationError("exponential map produced non-finite coordinates")
    return Point(q)


def log_map(m, x: Point, y: Point) -> TangentVector:
    m = get_manifold(m)
    if not m.has_closed_log:
        raise UnsupportedOperationError(
            f"{m.id} has no closed-form logarithmic map; use "
            "scoremeans.estimators.log_map_score"
        )
    p, q = m.point_to_rep(x), m.point_to_rep(y)
    w = m.log(p, q)
    if m.embedded:
        return pull_back(m, x, w)
    return TangentVector(x, w)


def geodesic_distance(m, x: Point, y: Point) -> float:
    m = get_manifold(m)
    v = log_map(m, x, y)
    g = m.chart_metric(x.coords, x.anchor)
    return float(np.sqrt(max(v.components @ g @ v.components, 0.0)))


def project_to_tangent(m, x: Point, w) -> TangentVector:
    """Orthogonal projection of an ambient vector onto ``T_x``.

    For manifolds without an embedding the ambient space is the chart
    itself and the projection is the identity.
    """
    m = get_manifold(m)
    J = m.embedding_jacobian(x.coords, x.anchor)
    g = J.T @ J
    comps = np.linalg.solve(g, J.T @ np.asarray(w, dtype=float))
    return TangentVector(x, comps)


def ambient_components(m, v: TangentVector):
    m = get_manifold(m)
    return m.embedding_jacobian(v.base.coords, v.base.anchor) @ v.components


def riemannian_divergence(m, V, x: Point, h: float = FD_STEP) -> float:
    """Divergence of the chart vector field ``V(coords) -> components``.

    ``d_i V^i + V^k d_k log sqrt|g|``; the first term by central
    differences, the second from the closed-form metric derivative.
    """
    m = get_manifold(m)
    u = x.coords
    d = m.dim
    div = 0.0
    for i in range(d):
        step = h * max(1.0, abs(u[i]))
        e = np.zeros(d)
        e[i] = step
        div += (np.asarray(V(u + e))[i] - np.asarray(V(u - e))[i]) / (2 * step)
    g_inv = np.linalg.inv(m.chart_metric(u, x.anchor))
    dg = m.chart_metric_grad(u, x.anchor)
    dlogsqrt = 0.5 * np.einsum("ij,kji->k", g_inv, dg)
    div += float(np.asarray(V(u)) @ dlogsqrt)
    if not np.isfinite(div):
        raise NumericalError("non-finite divergence")
    return float(div)
