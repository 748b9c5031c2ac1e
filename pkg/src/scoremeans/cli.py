"""Command-line interface.

Exit codes: 0 success, 1 validation or domain error (bad flags, malformed
files, unsupported operations), 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import io
from .errors import NumericalError, ScoreMeansError, ValidationError
from .manifold import Point, get_manifold

DEFAULT_SEED = 2712
BENCH_MANIFOLDS = ("r2", "r3", "s2", "s3", "sym2")
BENCH_HEADER = "manifold,provider,mu_err,t_err,iters,seed"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _provider(spec, m):
    from .oracle import oracle_provider
    from .scorenet import Checkpoint, NetProvider

    if spec in (None, "oracle"):
        return oracle_provider(m)
    if not os.path.exists(spec):
        raise ValidationError(f"--provider: checkpoint {spec!r} not found")
    ck = Checkpoint.from_json(io.read_json(spec))
    if get_manifold(ck.manifold).id != m.id:
        raise ValidationError(f"--provider: checkpoint is for {ck.manifold}, not {m.id}")
    return NetProvider(ck)


def _point(m, text, name):
    """Named sphere point, or comma-separated coordinates (embedded for spheres)."""
    if text is None:
        raise ValidationError(f"--{name} is required")
    if m.embedded and text.strip().lower() in ("north", "south", "equator"):
        return m.named_point(text)
    try:
        vals = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ValidationError(f"--{name}: cannot parse {text!r}") from None
    if m.embedded and len(vals) == m.dim:
        return m.chart_to_rep(vals)
    return m.validate(vals)


def _arch(text):
    text = text.strip().lower()
    try:
        if "x" in text:
            width, depth = text.split("x")
            return (int(width),) * int(depth)
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"--arch: cannot parse {text!r}") from None


def _write(path, obj):
    if path is None or path == "-":
        sys.stdout.write(io.dumps(obj) + "\n")
    else:
        io.write_json(path, obj)


def _config(args):
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_sample(args):
    """Endpoints to ``.csv``, otherwise a JSON-lines training corpus.

    With ``--batches k`` the corpus chains ``k`` batches, each starting
    from the previous batch's endpoints.
    """
    from .sampler import SamplingConfig, build_dataset, sample_paths

    m = get_manifold(args.manifold)
    x0 = _point(m, args.x0, "x0") if args.x0 else m.default_origin()
    if not args.out:
        raise ValidationError("--out is required")
    if args.out.endswith(".csv"):
        paths = sample_paths(m, x0, args.t, args.steps, args.paths, args.seed, args.algorithm)
        io.write_observations(args.out, m, paths.endpoints)
    else:
        cfg = SamplingConfig(
            n_starts=args.paths, T=args.t, n_steps=args.steps, n_batches=args.batches,
            algorithm=args.algorithm, x0=tuple(x0),
        )
        io.write_dataset(args.out, build_dataset(m, cfg, args.seed))
    return 0


def cmd_train(args):
    from .scorenet import TrainConfig, train

    ds = io.read_dataset(args.data, args.manifold)
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        warmup_epochs=args.warmup,
        batch_size=args.batch_size,
        dsm_mode=args.dsm_mode,
        kind=args.kind,
        hidden=_arch(args.arch) if args.arch else None,
        seed=args.seed,
    )
    ck = train(ds, cfg)
    _write(args.out, ck.to_json())
    return 0


def _estimator_cfg(args, m, frechet=False):
    from .estimators import OptimizerConfig

    alpha = args.alpha
    if alpha is None:
        alpha = 0.01 if (frechet and m.embedded) else 0.1
    return OptimizerConfig(alpha=alpha, t0=args.t0, iters=args.iters, method=args.method)


def cmd_diffusion_mean(args):
    from .estimators import diffusion_mean

    m = get_manifold(args.manifold)
    X = io.read_observations(args.data, m)
    est = diffusion_mean(_provider(args.provider, m), m, X, _estimator_cfg(args, m))
    _write(args.out, {**est.to_json(), "config": _config(args)})
    return 0


def cmd_frechet_mean(args):
    from .estimators import frechet_mean

    m = get_manifold(args.manifold)
    X = io.read_observations(args.data, m)
    est = frechet_mean(_provider(args.provider, m), m, X, _estimator_cfg(args, m, True), args.t_small)
    _write(args.out, {**est.to_json(), "config": _config(args)})
    return 0


def cmd_logmap(args):
    from .estimators import log_map_score

    m = get_manifold(args.manifold)
    x, y = _point(m, args.x, "x"), _point(m, args.y, "y")
    v = log_map_score(_provider(args.provider, m), m, x, y, args.t)
    _write(args.out, {"base": y, "log": v, "norm": float(m.norm(y, v)), "config": _config(args)})
    return 0


def cmd_dist(args):
    from .estimators import varadhan_distance

    m = get_manifold(args.manifold)
    x, y = _point(m, args.x, "x"), _point(m, args.y, "y")
    d, flag = varadhan_distance(_provider(args.provider, m), m, x, y, args.t, return_flag=True)
    if args.out:
        io.write_json(args.out, {"dist": d, "clamped": flag, "config": _config(args)})
    print(io.fmt(d))
    return 0


def cmd_kmeans(args):
    from .apps import riemannian_kmeans

    m = get_manifold(args.manifold)
    X = io.read_observations(args.data, m)
    res = riemannian_kmeans(
        _provider(args.provider, m), m, X, args.k, iters=args.iters, t_rank=args.t_rank,
        t_small=args.t_small, seed=args.seed,
    )
    _write(args.out, {**res.to_json(), "config": _config(args)})
    return 0


def cmd_regress(args):
    from .apps import RegressionConfig, mlrr_fit

    if args.mode != "geodesic":
        raise ValidationError(f"--mode: only 'geodesic' is supported, got {args.mode!r}")
    m = get_manifold(args.manifold)
    Xc = io.read_matrix(args.covariates)
    Y = io.read_observations(args.responses, m)
    cfg = RegressionConfig(iters=args.iters, lr=args.lr, seed=args.seed)
    model = mlrr_fit(_provider(args.provider, m), m, Xc, Y, cfg, mode=args.sigma_mode)
    _write(args.out, {**model.to_json(), "config": _config(args)})
    return 0


def benchmark_table1_desk(seed=DEFAULT_SEED, checkpoints=None, oracle_only=False, n=1000, T=0.5, log=None):
    """Rows ``(manifold, provider, mu_err, t_err, iters, seed)`` for the desk-scale protocol.

    Each manifold samples ``n`` endpoints at time ``T`` from its canonical
    origin and runs the diffusion-mean estimator with default settings.
    """
    from .estimators import OptimizerConfig, diffusion_mean
    from .oracle import oracle_provider
    from .sampler import sample_paths
    from .scorenet import Checkpoint, NetProvider

    checkpoints = checkpoints or {}
    rows = []
    for name in BENCH_MANIFOLDS:
        m = get_manifold(name)
        x0 = m.default_origin()
        X = sample_paths(m, x0, T, 100, n, seed).endpoints
        providers = [("oracle", oracle_provider(m))]
        if not oracle_only:
            path = checkpoints.get(name)
            if path is None or not os.path.exists(path):
                if log:
                    log(f"benchmark: no checkpoint for {name}; skipping trained row")
            else:
                providers.append(("trained", NetProvider(Checkpoint.from_json(io.read_json(path)))))
        for kind, pr in providers:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                est = diffusion_mean(pr, m, X, OptimizerConfig())
            mu_err = float(np.linalg.norm(est.mu_rep - x0))
            rows.append((name, kind, mu_err, abs(est.t - T), est.iters_used, seed))
    return rows


def cmd_benchmark(args):
    if args.suite != "table1-desk":
        raise ValidationError(f"--suite: unknown suite {args.suite!r}")
    ckpts = {}
    for item in args.ckpt or []:
        if "=" not in item:
            raise ValidationError(f"--ckpt: expected manifold=path, got {item!r}")
        k, v = item.split("=", 1)
        ckpts[str(get_manifold(k).id)] = v
    rows = benchmark_table1_desk(args.seed, ckpts, args.oracle_only, args.n, log=_log)
    lines = [BENCH_HEADER] + [
        f"{r[0]},{r[1]},{io.fmt(r[2])},{io.fmt(r[3])},{r[4]},{r[5]}" for r in rows
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get("SCOREMEANS_THREADS", "1")),
        help="worker threads; 1 gives the canonical deterministic output",
    )
    p.add_argument("--config", help="JSON file whose keys replace flag values")
    p.add_argument("--out")


def _provider_flags(p):
    p.add_argument("--provider", default="oracle", help="'oracle' or a checkpoint path")
    p.add_argument("--oracle", dest="provider", action="store_const", const="oracle")


def build_parser():
    parser = argparse.ArgumentParser(prog="scoremeans", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="simulate Brownian paths")
    _common(p)
    p.add_argument("--manifold", required=True)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--x0")
    p.add_argument("--algorithm", choices=("coords", "tangent"), default="coords")
    p.add_argument("--batches", type=int, default=1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-score", help="train a score network by DSM")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--manifold")
    p.add_argument("--arch")
    p.add_argument("--epochs", type=int, default=50000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--dsm-mode", choices=("isotropic", "metric_weighted"), default="isotropic")
    p.add_argument("--kind", choices=("score", "potential"), default="score")
    p.set_defaults(func=cmd_train)

    for name, func, frechet in (
        ("diffusion-mean", cmd_diffusion_mean, False),
        ("frechet-mean", cmd_frechet_mean, True),
    ):
        p = sub.add_parser(name)
        _common(p)
        _provider_flags(p)
        p.add_argument("--manifold", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--alpha", type=float)
        p.add_argument("--t0", type=float, default=0.2)
        p.add_argument("--iters", type=int, default=1000)
        p.add_argument("--method", choices=("plain", "adam"))
        if frechet:
            p.add_argument("--t-small", type=float, default=0.01)
        p.set_defaults(func=func)

    for name, func, t_default in (("logmap", cmd_logmap, 0.01), ("dist", cmd_dist, 0.1)):
        p = sub.add_parser(name)
        _common(p)
        _provider_flags(p)
        p.add_argument("--manifold", required=True)
        p.add_argument("--x", required=True)
        p.add_argument("--y", required=True)
        p.add_argument("--t", type=float, default=t_default)
        p.set_defaults(func=func)

    p = sub.add_parser("kmeans")
    _common(p)
    _provider_flags(p)
    p.add_argument("--manifold", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--t-rank", type=float, default=0.1)
    p.add_argument("--t-small", type=float, default=0.1)
    p.set_defaults(func=cmd_kmeans)

    p = sub.add_parser("regress")
    _common(p)
    _provider_flags(p)
    p.add_argument("--manifold", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--mode", default="geodesic")
    p.add_argument("--sigma-mode", choices=("constant_sigma", "learned_sigma"), default="constant_sigma")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.01)
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("benchmark")
    _common(p)
    p.add_argument("--suite", default="table1-desk")
    p.add_argument("--oracle-only", action="store_true")
    p.add_argument("--ckpt", action="append", help="manifold=checkpoint.json, repeatable")
    p.add_argument("--n", type=int, default=1000)
    p.set_defaults(func=cmd_benchmark)
    return parser


def _log(msg):
    sys.stderr.write(msg + "\n")


def _apply_config(parser, args, argv):
    if not args.config:
        return args
    try:
        overrides = io.read_json(args.config)
    except OSError as exc:
        raise ValidationError(f"--config: {exc.strerror}: {args.config}") from None
    if not isinstance(overrides, dict):
        raise ValidationError("--config must hold a JSON object")
    for key, val in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ValidationError(f"--config: unknown option {key!r}")
        setattr(args, attr, val)
    return args


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        args = _apply_config(parser, args, argv)
        if args.threads < 1:
            raise ValidationError("--threads must be at least 1")
        _log("config " + json.dumps(_config(args), sort_keys=True, default=str))
        return args.func(args)
    except NumericalError as exc:
        _log(f"numerical error: {exc}")
        return 2
    except (ScoreMeansError, ValueError) as exc:
        _log(f"error: {exc}")
        return 1
    except OSError as exc:
        _log(f"error: {exc.strerror}: {exc.filename}")
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
