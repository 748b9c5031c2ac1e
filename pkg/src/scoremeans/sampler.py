"""Brownian motion samplers and training-corpus construction.

Two schemes are provided. The tangent-space scheme takes geodesic steps
``Exp_x(sqrt(dt) S v)`` with ``S S^T = g^{-1}``; the coordinate scheme is
Euler-Maruyama on the chart SDE ``dx = -1/2 g^{jk} Gamma^i_jk dt + S dW``.
Sphere paths run in per-path stereographic charts that are recentred
whenever a point leaves the unit coordinate disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationError, ValidationError
from .manifold import RECENTER_RADIUS, Point, get_manifold

DEFAULT_SEED = 2712


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for path ``index``; same (seed, index) gives same noise."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """A sampled path in the working representation.

    ``points`` has shape ``(N_steps + 1, rep_dim)``; ``noises`` has shape
    ``(N_steps, d)``.
    """

    times: np.ndarray
    points: np.ndarray
    noises: np.ndarray

    @property
    def start(self):
        return self.points[0]

    @property
    def end(self):
        return self.points[-1]


@dataclass(frozen=True, eq=False)
class BrownianPaths:
    """A batch of paths; ``points`` has shape ``(N_steps + 1, n_paths, rep_dim)``."""

    times: np.ndarray
    points: np.ndarray
    noises: np.ndarray

    def __len__(self):
        return self.points.shape[1]

    def __getitem__(self, i) -> BrownianPath:
        return BrownianPath(self.times, self.points[:, i], self.noises[:, i])

    @property
    def endpoints(self):
        return self.points[-1]


def _check(T, n_steps):
    if not T > 0:
        raise ValidationError("path horizon T must be positive")
    if int(n_steps) < 1:
        raise ValidationError("N_steps must be at least 1")


def _noises(m, n_paths, n_steps, seed, first_index):
    out = np.empty((n_steps, n_paths, m.dim))
    for i in range(n_paths):
        out[:, i] = path_rng(seed, first_index + i).standard_normal((n_steps, m.dim))
    return out


def _tangent_step(m, x, dW):
    """Geodesic step ``Exp_x(S dW)`` for a batch of representation points."""
    S = m.sqrt_inv_metric(x)
    v = np.einsum("...ij,...j->...i", S, dW)
    y = m.exp(x, v)
    if not np.all(np.isfinite(y)):
        raise IntegrationError("exponential map produced non-finite values")
    return y


def _coords_step(m, u, dW, delta, anchor=None):
    """One Euler-Maruyama step in the chart."""
    g = m.chart_metric(u, anchor)
    S = np.linalg.cholesky(np.linalg.inv(g))
    drift = m.chart_drift(u, anchor)
    return u + drift * delta + np.einsum("...ij,...j->...i", S, dW)


def _run(m, x0, T, n_steps, noises, algorithm):
    delta = T / n_steps
    sq = np.sqrt(delta)
    n_paths = noises.shape[1]
    pts = np.empty((n_steps + 1, n_paths, m.rep_dim))
    pts[0] = x0
    if algorithm == "tangent":
        x = pts[0].copy()
        for k in range(n_steps):
            x = _tangent_step(m, x, sq * noises[k])
            pts[k + 1] = x
        return pts
    if m.embedded:
        anchor = pts[0].copy()
        u = np.zeros((n_paths, m.dim))
        for k in range(n_steps):
            u = _coords_step(m, u, sq * noises[k], delta, anchor)
            pts[k + 1] = m.chart_to_rep(u, anchor)
            far = np.linalg.norm(u, axis=-1) > RECENTER_RADIUS
            if np.any(far):
                anchor[far] = pts[k + 1][far]
                u[far] = 0.0
        return pts
    u = pts[0].copy()
    for k in range(n_steps):
        u = _coords_step(m, u, sq * noises[k], delta)
        if not np.all(np.isfinite(u)):
            raise IntegrationError("Euler-Maruyama step produced non-finite coordinates")
        pts[k + 1] = u
    return pts


def sample_paths(
    m,
    x0,
    T: float,
    n_steps: int,
    n_paths: int = 1,
    seed: int = DEFAULT_SEED,
    algorithm: str = "coords",
    first_index: int = 0,
) -> BrownianPaths:
    """Sample ``n_paths`` Brownian paths from ``x0`` (one point or one per path).

    ``algorithm`` is ``"tangent"`` for geodesic steps or ``"coords"`` for
    Euler-Maruyama in the chart. Path ``i`` uses the noise stream
    ``(seed, first_index + i)``, so batches can be split freely.
    """
    m = get_manifold(m)
    _check(T, n_steps)
    if algorithm not in ("tangent", "coords"):
        raise ValidationError(f"unknown sampling algorithm {algorithm!r}")
    x0 = m.validate(np.broadcast_to(np.asarray(x0, float), (n_paths, m.rep_dim)))
    noises = _noises(m, n_paths, n_steps, seed, first_index)
    pts = _run(m, x0, T, n_steps, noises, algorithm)
    return BrownianPaths(np.linspace(0.0, T, n_steps + 1), pts, noises)


def _single(m, x0, T, n_steps, rng, algorithm):
    m = get_manifold(m)
    _check(T, n_steps)
    if isinstance(x0, Point):
        x0 = m.point_to_rep(x0)
    x0 = m.validate(np.asarray(x0, float)[None])
    noises = rng.standard_normal((n_steps, 1, m.dim))
    pts = _run(m, x0, T, n_steps, noises, algorithm)
    return BrownianPath(np.linspace(0.0, T, n_steps + 1), pts[:, 0], noises[:, 0])


def sample_path_tangent(m, x0, T: float, n_steps: int, rng) -> BrownianPath:
    """One path by geodesic steps ``Exp(sqrt(dt) S v)``, ``v ~ N(0, I)``."""
    return _single(m, x0, T, n_steps, rng, "tangent")


def sample_path_coords(m, x0, T: float, n_steps: int, rng) -> BrownianPath:
    """One path by Euler-Maruyama in local coordinates."""
    return _single(m, x0, T, n_steps, rng, "coords")


# ---------------------------------------------------------------------------
# training corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingConfig:
    """Corpus layout.

    Each batch launches ``paths_per_start`` paths from every one of
    ``n_starts`` starting points; the batch's endpoints seed the next batch.
    """

    n_starts: int = 1024
    paths_per_start: int = 1
    T: float = 1.0
    n_steps: int = 100
    n_batches: int = 1
    algorithm: str = "coords"
    x0: tuple | None = None

    def __post_init__(self):
        if min(self.n_starts, self.paths_per_start, self.n_steps, self.n_batches) < 1:
            raise ValidationError("sampling counts must be positive")
        if not self.T > 0:
            raise ValidationError("T must be positive")


@dataclass(eq=False)
class PathDataset:
    """Flat arrays of denoising records.

    Row ``r`` says: a path started at ``x0[r]`` was at ``prev[r]`` at time
    ``t[r] - dt[r]`` and at ``y[r]`` at time ``t[r]``. Arrays use the
    working representation.
    """

    manifold: object
    x0: np.ndarray
    y: np.ndarray
    prev: np.ndarray
    t: np.ndarray
    dt: np.ndarray
    seed: int = DEFAULT_SEED
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def subset(self, idx) -> "PathDataset":
        return PathDataset(
            self.manifold,
            self.x0[idx],
            self.y[idx],
            self.prev[idx],
            self.t[idx],
            self.dt[idx],
            self.seed,
            dict(self.meta),
        )


def dataset_from_paths(m, paths: BrownianPaths) -> PathDataset:
    """Records for every step of every path in time-major order."""
    m = get_manifold(m)
    P = paths.points
    n_steps, n_paths = P.shape[0] - 1, P.shape[1]
    dt = np.diff(paths.times)
    x0 = np.broadcast_to(P[0], (n_steps, n_paths, m.rep_dim)).reshape(-1, m.rep_dim)
    return PathDataset(
        m,
        x0.copy(),
        P[1:].reshape(-1, m.rep_dim).copy(),
        P[:-1].reshape(-1, m.rep_dim).copy(),
        np.repeat(paths.times[1:], n_paths),
        np.repeat(dt, n_paths),
    )


def build_dataset(m, cfg: SamplingConfig = SamplingConfig(), seed: int = DEFAULT_SEED):
    """Generate ``cfg.n_batches`` batches of paths and flatten them to records."""
    m = get_manifold(m)
    x0 = np.asarray(cfg.x0 if cfg.x0 is not None else m.default_origin(), float)
    starts = np.broadcast_to(x0, (cfg.n_starts, m.rep_dim))
    parts = []
    index = 0
    for _ in range(cfg.n_batches):
        launch = np.repeat(starts, cfg.paths_per_start, axis=0)
        paths = sample_paths(
            m, launch, cfg.T, cfg.n_steps, len(launch), seed, cfg.algorithm, index
        )
        index += len(launch)
        parts.append(dataset_from_paths(m, paths))
        # one endpoint per start seeds the next batch
        starts = paths.endpoints[:: cfg.paths_per_start]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return PathDataset(
        m,
        cat("x0"),
        cat("y"),
        cat("prev"),
        cat("t"),
        cat("dt"),
        seed,
        {"config": cfg.__dict__.copy()},
    )
