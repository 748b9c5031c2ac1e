"""Multilayer-perceptron score models trained by denoising score matching.

Two model kinds share the same tanh MLP machinery:

``"score"``
    input ``[x, y, t]``, output the score in the working representation.
``"potential"``
    scalar output ``h(x, y, t)`` whose ``y``-gradient is the score. Its
    DSM gradient needs a second reverse pass through the input-gradient
    computation; both passes are written out by hand below.

For embedded manifolds (spheres) the network sees ambient coordinates and
its score output is projected onto ``T_y``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._optim import Adam, warmup_cosine
from .errors import NumericalError, TrainingError, ValidationError
from .manifold import get_manifold
from .oracle import ScoreProvider

FD_JACOBIAN_STEP = 1e-4

DEFAULT_HIDDEN = {
    "Euclidean": (128, 128, 128),
    "Sphere": (512, 512, 512, 512, 512),
    "Sym": (512, 512, 512),
    "SPD": (512, 512, 512),
    "Landmarks": (512, 512, 512),
}


# ---------------------------------------------------------------------------
# MLP parameters and passes
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MlpParams:
    """tanh MLP; ``weights[l]`` has shape ``(out, in)``. Output layer is linear."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("weights and biases must be non-empty and paired")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValidationError(f"layer {l}: bias does not match weight rows")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValidationError(f"layer {l}: input width does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {l}: non-finite parameters")

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @classmethod
    def init(cls, layer_dims, rng) -> "MlpParams":
        """Glorot-normal weights, zero biases."""
        Ws, bs = [], []
        for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]):
            Ws.append(rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / (n_in + n_out)))
            bs.append(np.zeros(n_out))
        return cls(Ws, bs)

    @classmethod
    def zeros(cls, layer_dims) -> "MlpParams":
        return cls(
            [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])],
            [np.zeros(o) for o in layer_dims[1:]],
        )

    def arrays(self):
        return self.weights + self.biases

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, layer_dims, vec) -> "MlpParams":
        vec = np.asarray(vec, float)
        shapes = [(o, i) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
        shapes += [(o,) for o in layer_dims[1:]]
        n = sum(int(np.prod(s)) for s in shapes)
        if vec.size != n:
            raise ValidationError(f"expected {n} parameters, got {vec.size}")
        out, k = [], 0
        for s in shapes:
            size = int(np.prod(s))
            out.append(vec[k : k + size].reshape(s).copy())
            k += size
        L = len(layer_dims) - 1
        return cls(out[:L], out[L:])

    def copy(self):
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])


def mlp_forward(params: MlpParams, X):
    """Returns the output and the list of activations ``[X, a_1, ..., a_{L-1}]``."""
    acts = [X]
    a = X
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        a = np.tanh(a @ W.T + b)
        acts.append(a)
    out = a @ params.weights[-1].T + params.biases[-1]
    return out, acts


def mlp_backward(params: MlpParams, acts, dout, extra=None):
    """Reverse pass of :func:`mlp_forward`.

    ``extra`` optionally maps hidden layer index ``l`` (1-based) to an
    additional adjoint injected directly into activation ``a_l``.
    Returns ``(dW, db, dX)``.
    """
    L = len(params.weights)
    dW = [None] * L
    db = [None] * L
    dW[-1] = dout.T @ acts[-1]
    db[-1] = dout.sum(0)
    da = dout @ params.weights[-1]
    for l in range(L - 1, 0, -1):
        if extra is not None and l in extra:
            da = da + extra[l]
        a = acts[l]
        dpre = da * (1 - a * a)
        dW[l - 1] = dpre.T @ acts[l - 1]
        db[l - 1] = dpre.sum(0)
        da = dpre @ params.weights[l - 1]
    return dW, db, da


def net_input(x, y, t):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    shape = np.broadcast_shapes(x.shape, y.shape)
    t = np.broadcast_to(np.asarray(t, float), shape[:-1])
    x = np.broadcast_to(x, shape)
    y = np.broadcast_to(y, shape)
    Z = np.concatenate([x, y, t[..., None]], axis=-1)
    return Z.reshape(-1, Z.shape[-1]), shape


# ---------------------------------------------------------------------------
# score and potential evaluation
# ---------------------------------------------------------------------------


def forward(params: MlpParams, x, y, t, m=None):
    """First-order score network output, projected to ``T_y`` when embedded."""
    Z, shape = net_input(x, y, t)
    out, _ = mlp_forward(params, Z)
    out = out.reshape(shape[:-1] + (out.shape[-1],))
    if m is not None and get_manifold(m).embedded:
        out = get_manifold(m).proj(np.broadcast_to(y, shape), out)
    return out


def _potential_input_grad(params, acts):
    """Gradient of the scalar output w.r.t. the input, with the chain kept.

    Returns ``(gs, es)`` where ``gs[l]`` is the gradient w.r.t. ``a_l``
    (``gs[0]`` w.r.t. the input) and ``es[l]`` the gradient w.r.t. the
    pre-activation of layer ``l``.
    """
    L = len(params.weights)
    B = acts[0].shape[0]
    gs = [None] * L
    es = [None] * L
    gs[L - 1] = np.broadcast_to(params.weights[-1][0], (B, params.weights[-1].shape[1]))
    for l in range(L - 1, 0, -1):
        a = acts[l]
        es[l] = gs[l] * (1 - a * a)
        gs[l - 1] = es[l] @ params.weights[l - 1]
    return gs, es


def forward_potential(params: MlpParams, x, y, t):
    """Scalar potential ``h(x, y, t)``."""
    Z, shape = net_input(x, y, t)
    out, _ = mlp_forward(params, Z)
    return out[:, 0].reshape(shape[:-1])


def potential_score(params: MlpParams, x, y, t, m=None):
    """``grad_y h(x, y, t)``, projected to ``T_y`` when embedded."""
    Z, shape = net_input(x, y, t)
    _, acts = mlp_forward(params, Z)
    gs, _ = _potential_input_grad(params, acts)
    n = shape[-1]
    out = gs[0][:, n : 2 * n].reshape(shape)
    if m is not None and get_manifold(m).embedded:
        out = get_manifold(m).proj(np.broadcast_to(y, shape), out)
    return out


# ---------------------------------------------------------------------------
# denoising score matching
# ---------------------------------------------------------------------------


def dsm_targets(m, y, prev, dt, mode="isotropic"):
    """One-step denoising targets.

    Embedded manifolds: ``P_y(prev - y) / dt``. Charts: the one-step
    Euler-Maruyama mean ``prev + drift(prev) dt`` replaces ``prev``;
    ``isotropic`` returns ``(mean - y) / dt`` and ``metric_weighted``
    returns ``g(prev) (mean - y) / dt``, the exact one-step Gaussian score.
    """
    m = get_manifold(m)
    y, prev = np.asarray(y, float), np.asarray(prev, float)
    dt = np.asarray(dt, float)
    if np.any(dt <= 0):
        raise ValidationError("step dt must be positive")
    if mode not in ("isotropic", "metric_weighted"):
        raise ValidationError(f"unknown dsm mode {mode!r}")
    if m.embedded:
        return m.proj(y, prev - y) / dt[..., None]
    mean = prev + m.chart_drift(prev) * dt[..., None]
    r = (mean - y) / dt[..., None]
    if mode == "metric_weighted":
        r = np.einsum("...ij,...j->...i", m.chart_metric(prev), r)
    return r


def dsm_loss(params: MlpParams, m, x0, y, t, targets, kind="score"):
    """Mean of ``1/2 |s(x0, y, t) - target|^2`` and its parameter gradient.

    Returns ``(loss, grads)`` with ``grads`` laid out like
    ``params.arrays()``.
    """
    m = get_manifold(m)
    Z, shape = net_input(x0, y, t)
    B = Z.shape[0]
    targets = np.asarray(targets, float).reshape(B, -1)
    yb = np.broadcast_to(np.asarray(y, float), shape).reshape(B, -1)
    _, acts = mlp_forward(params, Z)
    if kind == "score":
        out = params.weights[-1] @ acts[-1].T
        out = out.T + params.biases[-1]
        s = m.proj(yb, out) if m.embedded else out
        r = s - targets
        loss = 0.5 * np.sum(r * r) / B
        dout = (m.proj(yb, r) if m.embedded else r) / B
        dW, db, _ = mlp_backward(params, acts, dout)
        return float(loss), dW + db
    if kind != "potential":
        raise ValidationError(f"unknown model kind {kind!r}")
    n = yb.shape[-1]
    gs, es = _potential_input_grad(params, acts)
    s = gs[0][:, n : 2 * n]
    if m.embedded:
        s = m.proj(yb, s)
    r = s - targets
    loss = 0.5 * np.sum(r * r) / B
    # adjoint of the input-gradient chain
    L = len(params.weights)
    dW = [np.zeros_like(W) for W in params.weights]
    db = [np.zeros_like(b) for b in params.biases]
    gbar = np.zeros_like(gs[0])
    gbar[:, n : 2 * n] = (m.proj(yb, r) if m.embedded else r) / B
    inject = {}
    for l in range(1, L):
        W = params.weights[l - 1]
        dW[l - 1] += es[l].T @ gbar
        ebar = gbar @ W.T
        a = acts[l]
        inject[l] = ebar * gs[l] * (-2 * a)
        gbar = ebar * (1 - a * a)
    dW[-1] += gbar.sum(0)[None, :]
    # ordinary reverse pass through the forward chain with injected adjoints
    zero_out = np.zeros((B, 1))
    dW2, db2, _ = mlp_backward(params, acts, zero_out, extra=inject)
    for l in range(L):
        dW[l] += dW2[l]
        db[l] += db2[l]
    return float(loss), dW + db


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule. One epoch is one optimizer step on one minibatch."""

    epochs: int = 50000
    lr: float = 1e-3
    warmup_epochs: int = 1000
    batch_size: int = 256
    dsm_mode: str = "isotropic"
    kind: str = "score"
    hidden: tuple | None = None
    seed: int = 2712
    log_every: int = 100

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.log_every) < 1 or self.warmup_epochs < 0:
            raise ValidationError("epochs, batch size and log interval must be positive")
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")
        if self.dsm_mode not in ("isotropic", "metric_weighted"):
            raise ValidationError(f"unknown dsm mode {self.dsm_mode!r}")
        if self.kind not in ("score", "potential"):
            raise ValidationError(f"unknown model kind {self.kind!r}")

    def lr_at(self, epoch: int) -> float:
        warm = min(self.warmup_epochs, self.epochs // 2)
        return warmup_cosine(epoch, self.lr, warm, self.epochs)


@dataclass(eq=False)
class Checkpoint:
    manifold: str
    layer_dims: list
    params: MlpParams
    representation: str = "chart"
    kind: str = "score"
    dsm_mode: str = "isotropic"
    seed: int = 2712
    epochs: int = 0
    final_loss: float = float("nan")
    loss_curve: list = field(default_factory=list)

    def __post_init__(self):
        if list(self.layer_dims) != self.params.layer_dims:
            raise ValidationError("parameter shapes do not match layer_dims")

    def to_json(self) -> dict:
        return {
            "manifold": self.manifold,
            "layer_dims": list(self.layer_dims),
            "representation": self.representation,
            "kind": self.kind,
            "dsm_mode": self.dsm_mode,
            "activation": "tanh",
            "seed": self.seed,
            "epochs": self.epochs,
            "final_loss": self.final_loss,
            "loss_curve": [list(p) for p in self.loss_curve],
            "weights": [W.tolist() for W in self.params.weights],
            "biases": [b.tolist() for b in self.params.biases],
        }

    @classmethod
    def from_json(cls, obj) -> "Checkpoint":
        try:
            params = MlpParams(
                [np.asarray(W, float) for W in obj["weights"]],
                [np.asarray(b, float) for b in obj["biases"]],
            )
            return cls(
                manifold=obj["manifold"],
                layer_dims=list(obj["layer_dims"]),
                params=params,
                representation=obj.get("representation", "chart"),
                kind=obj.get("kind", "score"),
                dsm_mode=obj.get("dsm_mode", "isotropic"),
                seed=obj.get("seed", 2712),
                epochs=obj.get("epochs", 0),
                final_loss=obj.get("final_loss", float("nan")),
                loss_curve=[tuple(p) for p in obj.get("loss_curve", [])],
            )
        except KeyError as exc:
            raise ValidationError(f"checkpoint is missing field {exc.args[0]!r}") from None

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, default=_json_default)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def layer_dims_for(m, hidden=None, kind="score"):
    m = get_manifold(m)
    hidden = tuple(hidden) if hidden is not None else DEFAULT_HIDDEN[m.id.family]
    n = m.rep_dim
    return [2 * n + 1, *hidden, n if kind == "score" else 1]


def train(dataset, cfg: TrainConfig = TrainConfig(), init: MlpParams | None = None, callback=None):
    """Fit a score (or potential) network to ``dataset`` by DSM with ADAM.

    Targets are computed once. Minibatches are drawn by reshuffled passes
    over the records using ``cfg.seed``. A non-finite loss raises
    :class:`TrainingError` carrying the last finite checkpoint.
    """
    m = get_manifold(dataset.manifold)
    rng = np.random.default_rng(cfg.seed)
    dims = layer_dims_for(m, cfg.hidden, cfg.kind)
    params = init.copy() if init is not None else MlpParams.init(dims, rng)
    if params.layer_dims != dims:
        raise ValidationError("initial parameters do not match the architecture")
    targets = dsm_targets(m, dataset.y, dataset.prev, dataset.dt, cfg.dsm_mode)
    N = len(dataset)
    B = min(cfg.batch_size, N)
    opt = Adam([a.shape for a in params.arrays()])
    order = rng.permutation(N)
    pos = 0
    curve = []
    running = None
    last_good = params.copy()

    def checkpoint(p, epochs, loss):
        return Checkpoint(
            str(m.id),
            dims,
            p,
            "embedded" if m.embedded else "chart",
            cfg.kind,
            cfg.dsm_mode,
            cfg.seed,
            epochs,
            loss,
            list(curve),
        )

    for epoch in range(cfg.epochs):
        if pos + B > N:
            order = rng.permutation(N)
            pos = 0
        idx = order[pos : pos + B]
        pos += B
        with np.errstate(over="ignore", invalid="ignore"):  # non-finite values handled below
            loss, grads = dsm_loss(
                params, m, dataset.x0[idx], dataset.y[idx], dataset.t[idx], targets[idx], cfg.kind
            )
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingError(
                f"loss became non-finite at epoch {epoch}",
                checkpoint=checkpoint(last_good, epoch, running),
            )
        running = loss if running is None else 0.99 * running + 0.01 * loss
        lr = cfg.lr_at(epoch)
        arrays = params.arrays()
        for a, u in zip(arrays, opt.step(grads, lr)):
            a -= u
        if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
            curve.append((epoch + 1, loss, running))
            last_good = params.copy()
            if callback is not None:
                callback(epoch + 1, loss, running)
    return checkpoint(params, cfg.epochs, float(running))


def evaluate_dsm(params, dataset, dsm_mode="isotropic", kind="score", chunk=4096):
    """Mean DSM loss of ``params`` over a whole dataset."""
    m = get_manifold(dataset.manifold)
    targets = dsm_targets(m, dataset.y, dataset.prev, dataset.dt, dsm_mode)
    total = 0.0
    for s in range(0, len(dataset), chunk):
        sl = slice(s, s + chunk)
        loss, _ = dsm_loss(params, m, dataset.x0[sl], dataset.y[sl], dataset.t[sl], targets[sl], kind)
        total += loss * len(dataset.t[sl])
    return total / len(dataset)


def provider_dsm_loss(provider, dataset, dsm_mode="isotropic"):
    """DSM loss of an arbitrary provider (e.g. the analytic floor)."""
    m = get_manifold(dataset.manifold)
    targets = dsm_targets(m, dataset.y, dataset.prev, dataset.dt, dsm_mode)
    s = provider.score(dataset.x0, dataset.y, dataset.t)
    if not m.embedded and dsm_mode == "isotropic":
        s = m.sharp(dataset.y, s)
    return float(0.5 * np.mean(np.sum((s - targets) ** 2, axis=-1)))


class NetProvider(ScoreProvider):
    """Score provider backed by a trained checkpoint.

    Isotropic-mode chart networks regress the raised score ``g^{-1} ds``;
    their output is lowered with ``g(y)`` so every provider returns the
    same covector convention.
    """

    t_min = 0.0
    t_max = 1.0

    def __init__(self, checkpoint: Checkpoint):
        super().__init__(checkpoint.manifold)
        self.ckpt = checkpoint
        self.params = checkpoint.params

    def check_t(self, t):
        t = np.asarray(t, float)
        if np.any(t <= 0):
            from .errors import DomainError

            raise DomainError("t must be positive")
        return t

    def score(self, x, y, t):
        t = self.check_t(t)
        m = self.manifold
        if self.ckpt.kind == "potential":
            s = potential_score(self.params, x, y, t, m)
        else:
            s = forward(self.params, x, y, t, m)
        if not m.embedded and self.ckpt.dsm_mode == "isotropic":
            y = np.broadcast_to(np.asarray(y, float), s.shape)
            s = np.einsum("...ij,...j->...i", m.metric(y), s)
        return s

    def log_p(self, x, y, t):
        if self.ckpt.kind != "potential":
            raise NotImplementedError("first-order score networks have no potential")
        return forward_potential(self.params, x, y, self.check_t(t))


# ---------------------------------------------------------------------------
# time derivative from the score
# ---------------------------------------------------------------------------


def dt_log_p_from_score(provider, m, x, y, t, h=FD_JACOBIAN_STEP, exact=None):
    """``d/dt log p = 1/2 (Laplacian_y log p + |grad_y log p|^2)`` from the score alone.

    The Laplacian is ``tr(g^{-1} J) - g^{jk} Gamma^l_jk s_l`` with ``J`` the
    chart Jacobian of the score, by central differences with step ``h``
    unless ``exact`` (default: when the provider offers an exact Jacobian).
    Spheres use a stereographic chart centred at ``y`` where the
    Christoffel symbols vanish and ``g = 4 I``.
    """
    m = get_manifold(m)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    shape = np.broadcast_shapes(x.shape, y.shape)
    x = np.broadcast_to(x, shape).reshape(-1, shape[-1])
    y = np.broadcast_to(y, shape).reshape(-1, shape[-1])
    t = np.broadcast_to(np.asarray(t, float), shape[:-1]).reshape(-1)
    d = m.dim
    s = provider.score(x, y, t)
    if exact is None:
        exact = bool(getattr(provider, "exact_jacobian", False))

    if m.embedded:
        E = m.tangent_basis(y)
        sc = 2 * np.einsum("bij,bi->bj", E, s)  # chart covector at u = 0
        J = np.empty((len(y), d, d))
        for k in range(d):
            u = np.zeros((len(y), d))
            u[:, k] = h
            cols = []
            for sign in (1.0, -1.0):
                uk = sign * u
                p = m.chart_to_rep(uk, y)
                Jc = m.chart_jacobian(uk, y)
                cols.append(np.einsum("bij,bi->bj", Jc, provider.score(x, p, t)))
            J[:, k] = (cols[0] - cols[1]) / (2 * h)
        lap = 0.25 * np.trace(J, axis1=-2, axis2=-1)
        norm2 = 0.25 * np.sum(sc * sc, axis=-1)
    else:
        g = m.chart_metric(y)
        g_inv = np.linalg.inv(g)
        if exact and hasattr(provider, "score_jacobian"):
            J = provider.score_jacobian(x, y, t)
        else:
            J = np.empty((len(y), d, d))
            for k in range(d):
                step = h * np.maximum(1.0, np.abs(y[:, k]))
                e = np.zeros_like(y)
                e[:, k] = step
                J[:, k] = (provider.score(x, y + e, t) - provider.score(x, y - e, t)) / (
                    2 * step[:, None]
                )
        gam = m.chart_christoffel(y)
        contracted = np.einsum("bjk,bljk->bl", g_inv, gam)
        lap = np.einsum("bjk,bjk->b", g_inv, J) - np.sum(contracted * s, axis=-1)
        norm2 = np.einsum("bi,bij,bj->b", s, g_inv, s)
    out = 0.5 * (lap + norm2)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite score Jacobian")
    return out.reshape(shape[:-1])
