"""File formats: JSON-lines datasets, observation CSV, JSON documents.

Floats are written with 17 significant digits, which round-trips every
double exactly.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from .errors import ValidationError
from .manifold import get_manifold
from .sampler import PathDataset


def fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    out = format(x, ".17g")
    if out.lstrip("-").isdigit():
        out += ".0"
    return out


def dumps(obj) -> str:
    """Compact JSON with 17-significant-digit floats."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps(obj))
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def write_dataset(path, ds: PathDataset):
    """One JSON object per record.

    Chart manifolds store coordinates directly. Spheres store every point
    in the stereographic chart anchored at ``y`` (so ``y`` itself is the
    zero vector) together with ``anchor_y``.
    """
    m = get_manifold(ds.manifold)
    with open(path, "w") as fh:
        fh.write(dumps({"manifold": str(m.id), "seed": ds.seed, "records": len(ds)}) + "\n")
        for i in range(len(ds)):
            if m.embedded:
                a = ds.y[i]
                rec = {
                    "x0": m.rep_to_chart(ds.x0[i], a),
                    "y": np.zeros(m.dim),
                    "prev": m.rep_to_chart(ds.prev[i], a),
                    "t": ds.t[i],
                    "dt": ds.dt[i],
                    "anchor_y": a,
                }
            else:
                rec = {"x0": ds.x0[i], "y": ds.y[i], "prev": ds.prev[i], "t": ds.t[i], "dt": ds.dt[i]}
            fh.write(dumps(rec) + "\n")


def read_dataset(path, manifold=None) -> PathDataset:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty dataset")
    header = json.loads(lines[0])
    if "manifold" in header and "x0" not in header:
        body, first = lines[1:], 2
        manifold = manifold or header["manifold"]
        seed = header.get("seed", 2712)
    else:
        body, first, seed = lines, 1, 2712
    if manifold is None:
        raise ValidationError(f"{path}: manifold not recorded; pass --manifold")
    m = get_manifold(manifold)
    cols = {k: [] for k in ("x0", "y", "prev", "t", "dt")}
    for n, ln in enumerate(body, start=first):
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError:
            raise ValidationError(f"{path}:{n}: malformed JSON record") from None
        for key in cols:
            if key not in rec:
                raise ValidationError(f"{path}:{n}: record is missing field {key!r}")
        if m.embedded:
            if "anchor_y" not in rec:
                raise ValidationError(f"{path}:{n}: sphere record is missing field 'anchor_y'")
            a = np.asarray(rec["anchor_y"], float)
            cols["x0"].append(m.chart_to_rep(np.asarray(rec["x0"], float), a))
            cols["y"].append(_chart_point(m, rec["y"], a))
            cols["prev"].append(m.chart_to_rep(np.asarray(rec["prev"], float), a))
        else:
            for key in ("x0", "y", "prev"):
                cols[key].append(np.asarray(rec[key], float))
        cols["t"].append(float(rec["t"]))
        cols["dt"].append(float(rec["dt"]))
    arr = {k: np.asarray(v, float) for k, v in cols.items()}
    for key in ("x0", "y", "prev"):
        m.validate(arr[key])
    return PathDataset(m, arr["x0"], arr["y"], arr["prev"], arr["t"], arr["dt"], seed)


def _chart_point(m, coords, anchor):
    coords = np.asarray(coords, float)
    if not np.any(coords):
        return np.asarray(anchor, float)  # exact: the chart centre
    return m.chart_to_rep(coords, anchor)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


def write_observations(path, m, points):
    """CSV of points.

    Chart manifolds: one column per coordinate. Spheres: chart coordinates
    (all zero) followed by the anchor, which is the point itself; reading
    back reproduces the embedded vector bit for bit.
    """
    m = get_manifold(m)
    P = np.atleast_2d(np.asarray(points, float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"c{i}" for i in range(m.dim)]
        if m.embedded:
            header += [f"a{i}" for i in range(m.rep_dim)]
        w.writerow(header)
        for p in P:
            row = [fmt(0.0)] * m.dim + [fmt(v) for v in p] if m.embedded else [fmt(v) for v in p]
            w.writerow(row)


def read_observations(path, m):
    """Points as a representation array; see :func:`write_observations`.

    Spheres also accept rows of chart coordinates alone (chart at the
    north pole) or embedded unit vectors.
    """
    m = get_manifold(m)
    rows = []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if n == 1:
                    continue  # header
                raise ValidationError(f"{path}:{n}: non-numeric value") from None
    if not rows:
        raise ValidationError(f"{path}: no observations")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValidationError(f"{path}: rows have differing column counts {sorted(widths)}")
    A = np.asarray(rows, float)
    k = A.shape[1]
    if not m.embedded:
        if k != m.dim:
            raise ValidationError(f"{path}: expected {m.dim} columns for {m.id}, got {k}")
        return m.validate(A)
    if k == m.dim + m.rep_dim:
        out = np.stack([_chart_point(m, r[: m.dim], r[m.dim :]) for r in A])
    elif k == m.rep_dim:
        out = A
    elif k == m.dim:
        out = m.chart_to_rep(A)
    else:
        raise ValidationError(
            f"{path}: expected {m.dim}, {m.rep_dim} or {m.dim + m.rep_dim} columns for {m.id}, got {k}"
        )
    return m.validate(out)


def read_matrix(path):
    """Plain numeric CSV (covariates); an optional non-numeric header is skipped."""
    rows = []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if n == 1:
                    continue
                raise ValidationError(f"{path}:{n}: non-numeric value") from None
    if not rows:
        raise ValidationError(f"{path}: empty file")
    return np.asarray(rows, float)
