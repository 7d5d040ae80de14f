"""Deterministic report serialization: canonical JSON with fixed 17-digit
float formatting (byte-identical for identical inputs) and delimited output."""

from __future__ import annotations

import csv

import numpy as np


def _fmt_float(x: float) -> str:
    if x != x:
        return "NaN"
    if x in (float("inf"), float("-inf")):
        return '"Infinity"' if x > 0 else '"-Infinity"'
    return format(float(x), ".17g")


def canonical_json(obj, indent: int = 0) -> str:
    """Render with sorted keys and 17-significant-digit floats."""
    pad = " " * indent
    inner = " " * (indent + 2)
    if obj is None:
        return "null"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        out = obj.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        return f'"{out}"'
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [canonical_json(v, indent + 2) for v in obj]
        return "[\n" + ",\n".join(inner + s for s in items) + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = []
        for k in sorted(obj, key=str):
            items.append(f'{inner}"{k}": ' + canonical_json(obj[k], indent + 2))
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj)!r}")


def write_report(path, payload: dict):
    with open(path, "w") as fh:
        fh.write(canonical_json(payload))
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format(v, ".17g") if isinstance(v, (float, np.floating))
                             else v for v in row])


def cloud_csv(path, cloud, adapted):
    n = cloud.states.shape[1]
    header = ([f"x{i}" for i in range(1, n + 1)]
              + ["adapted_x1", "adapted_xn", "family", "sup_dist", "l2_dist"])
    rows = []
    for k in range(cloud.size):
        rows.append(list(cloud.states[k]) + [adapted[k, 0], adapted[k, 1],
                                             int(cloud.family[k]),
                                             cloud.sup_dist[k], cloud.l2_dist[k]])
    write_csv(path, header, rows)


def curve_csv(path, curve):
    write_csv(path, ["x1", "xn"], list(zip(curve.x1, curve.xn)))


def spectrum_csv(path, ts, columns: dict):
    names = sorted(columns)
    rows = [[t] + [columns[c][k] for c in names] for k, t in enumerate(ts)]
    write_csv(path, ["T"] + names, rows)
