"""Merge run directories into plot-ready CSVs and one JSON summary."""

import json
import logging
from pathlib import Path

from data_io import MetricsWriter
from data_io import atomic_write_json
from data_io import read_metrics

logger = logging.getLogger(__name__)

SCATTER_FIELDS = ["run", "kind", "trial", "E", "payload_bits", "metric", "deployed_metric"]
ENVELOPE_FIELDS = ["run", "trials", "mean_best", "std_best", "searched_metric"]
NORM_FIELDS = ["run", "number_format", "epoch", "stage", "weight_norm", "metric"]


def _summary(run: Path) -> dict | None:
    path = run / "summary.json"
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def merge_reports(run_dirs, out_dir) -> dict:
    """
    Writes size_vs_metric.csv (searched and random configurations),
    random_envelope.csv (best-so-far over trials, with the searched metric
    alongside), weight_norms.csv (per-epoch ‖θ‖₂² of every finetune) and
    summary.json.
    """
    out = Path(out_dir)
    runs = [Path(r) for r in run_dirs]
    for run in runs:
        if not run.is_dir():
            raise FileNotFoundError(f"run directory not found: {run}")
    for stale in ("size_vs_metric.csv", "random_envelope.csv", "weight_norms.csv"):
        (out / stale).unlink(missing_ok=True)

    scatter = MetricsWriter(out / "size_vs_metric.csv", SCATTER_FIELDS)
    envelope = MetricsWriter(out / "random_envelope.csv", ENVELOPE_FIELDS)
    norms = MetricsWriter(out / "weight_norms.csv", NORM_FIELDS)
    summary = {}
    searched = [s["metric"] for s in map(_summary, runs) if s and s.get("kind") == "udc"]
    searched_metric = max(searched) if searched else ""

    for run in runs:
        name = run.name
        entry = _summary(run)
        if entry:
            summary[name] = entry
            scatter.write({"run": name, "kind": entry["kind"], "trial": "", "E": entry["E"],
                           "payload_bits": entry["payload_bits"], "metric": entry["metric"],
                           "deployed_metric": entry["deployed_metric"]})
        trials = run / "random_search.csv"
        if trials.exists():
            rows = read_metrics(trials)
            for row in rows:
                scatter.write({"run": name, "kind": "random", "trial": int(row["trial"]), "E": float(row["E"]),
                               "payload_bits": int(row["payload_bits"]), "metric": float(row["metric"]),
                               "deployed_metric": float(row["deployed_metric"])})
            summary[name] = {"kind": "random", "trials": len(rows), "best": max(float(r["metric"]) for r in rows)}
        curve = run / "random_search_envelope.csv"
        if curve.exists():
            for row in read_metrics(curve):
                envelope.write({"run": name, "trials": int(row["trials"]), "mean_best": float(row["mean_best"]),
                                "std_best": float(row["std_best"]), "searched_metric": searched_metric})
        epochs = run / "finetune_metrics.csv"
        if epochs.exists():
            fmt = entry.get("number_format", "") if entry else ""
            for row in read_metrics(epochs):
                norms.write({"run": name, "number_format": fmt, "epoch": int(row["epoch"]),
                             "stage": int(row["stage"]), "weight_norm": float(row["weight_norm"]),
                             "metric": float(row["metric"])})

    atomic_write_json(out / "summary.json", summary)
    logger.info("merged %d runs into %s", len(runs), out)
    return summary
