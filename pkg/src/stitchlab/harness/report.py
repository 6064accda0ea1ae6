"""Summary tables and per-plot CSV bundles.

Every bundle has the columns ``experiment, layer, method, hyperparameters,
metric, n, mean, std``: one row per (group, metric), where a group is a
(layer, method, hyperparameters) cell aggregated over seeds. ``std`` is the
unbiased sample standard deviation and is left empty for a single seed.
Rows are sorted, so output order does not depend on record order.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..errors import SchemaViolation, ShapeMismatch
from ..stitch import StitchingLayer, evaluate, frankenstein
from .records import MetricRecord

BUNDLES = {
    "Exp1_Match": "matchability.csv",
    "Exp2_Width": "width.csv",
    "Exp3_IndicesDuringTraining": "indices_during_training.csv",
    "Exp4_CkaPenalty": "cka_penalty.csv",
    "Exp5_InitSensitivity": "init_sensitivity.csv",
    "Exp6_ModeConnect": "mode_connectivity.csv",
    "Exp7_Sparsity": "sparsity.csv",
    "Exp8_LowRank": "low_rank.csv",
    "AppB_Weighted": "weighted_matching.csv",
    "AppC1_Grid": "cross_layer.csv",
}
COLUMNS = ("experiment", "layer", "method", "hyperparameters", "metric", "n", "mean", "std")


def _coerce(records) -> list[MetricRecord]:
    out = []
    for r in records:
        if isinstance(r, MetricRecord):
            r.validate()
            out.append(r)
        elif isinstance(r, dict):
            out.append(MetricRecord.from_dict(r))
        else:
            raise SchemaViolation(f"cannot interpret record of type {type(r).__name__}")
    return out


def _metrics(r: MetricRecord) -> dict:
    vals = {"rel_acc": r.rel_acc, "cross_entropy": r.cross_entropy}
    vals.update({f"sim_{k}": v for k, v in r.similarity.items()})
    vals.update(r.extra)
    return vals


def summarize(records) -> list[dict]:
    """Mean and unbiased std over seeds for every (experiment, layer, method, hyperparameters, metric)."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in _coerce(records):
        hp = json.dumps(r.hyperparameters, sort_keys=True)
        for metric, value in _metrics(r).items():
            groups[(r.experiment, r.layer, r.method, hp, metric)].append(float(value))
    rows = []
    for key in sorted(groups):
        vals = np.asarray(groups[key])
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else math.nan
        rows.append(dict(zip(COLUMNS, (*key, len(vals), float(np.mean(vals)), std))))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def emit_plot_data(records, out_dir) -> dict[str, Path]:
    """Write one CSV per experiment bundle (headers only when it has no records)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recs = _coerce(records)
    unknown = {r.experiment for r in recs} - set(BUNDLES)
    if unknown:
        raise SchemaViolation(f"records for unknown experiments {sorted(unknown)}")
    by_exp = defaultdict(list)
    for r in recs:
        by_exp[r.experiment].append(r)
    paths = {}
    for exp, name in BUNDLES.items():
        path = out_dir / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for row in summarize(by_exp.get(exp, [])):
                w.writerow([_fmt(row[c]) for c in COLUMNS])
        paths[exp] = path
    return paths


def format_table(rows: list[dict]) -> str:
    lines = []
    for row in rows:
        std = "" if math.isnan(row["std"]) else f" ± {row['std']:.4f}"
        lines.append(f"{row['layer']:>10} {row['method']:<18} {row['hyperparameters']:<32} {row['metric']:<14} "
                     f"{row['mean']:.4f}{std} (n={row['n']})")
    return "\n".join(lines)


def baseline_no_transform(model1, model2, layer: str, data, experiment: str = "Exp1_Match", seed: int = 0,
                          layer_m: str | None = None) -> MetricRecord:
    """Stitch with the identity map and no training; records cross-entropy to model 2 outputs."""
    f = frankenstein(model1, model2, layer, layer_m)
    c1, c2 = f.channels
    if c1 != c2:
        raise ShapeMismatch(f"identity stitching needs equal widths, got {c1} and {c2}")
    ev = evaluate(f.with_stitcher(StitchingLayer.full(np.eye(c1))), data)
    return MetricRecord(experiment, layer, seed, "no_transform", {}, ev["rel_acc"], ev["cross_entropy"])
