"""Run artifacts: per-run metric/CSV files and the ablation summary table.

Layout under ``output_dir``::

    summary.txt
    <label>/metrics.json
    <label>/accuracy_matrix.csv      stage, task_0 .. task_{T-1}
    <label>/stage_accuracy.csv       stage, union, clip_global, visual_only
    <label>/losses.csv               task, step, epoch, loss_cls, loss_acgd, loss_tsgr, loss_total, lr
    <label>/drift.csv                stage, sample_id, own_class_cosine, jsd, partition (jsd in nats)
    <label>/anchor_trajectory.csv    stage, iteration, text_cosine, prototype_cosine, target_probability
    <label>/anchor_stats.csv
    <label>/predictions.csv          sample_id, true_class, predicted_class, fused logits...
    <label>/{anchors,bank,model}_stage{t}.json   per-stage snapshots, written by run_experiment
"""

import csv
import json
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .clmetrics import AccuracyMatrix
from .segp_train import LOSS_COLUMNS
from .streambench import RunRecord, run_directory_names

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("ACGD", "TSGR", "PT", "V.", "Last", "F", "Avg", "BWT", "FWT")


def _number(value: Optional[float]) -> Optional[float]:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return round(float(value), 6)


def metrics_document(record: RunRecord) -> Dict:
    """Contents of metrics.json (no timing, so reruns are byte-identical)."""
    matrix = record.accuracy
    return {
        "label": record.label,
        "config_hash": record.config_hash,
        "flags": asdict(record.flags),
        "avg": _number(record.metrics.get("avg")),
        "last": _number(record.metrics.get("last")),
        "fwt": _number(record.metrics.get("fwt")),
        "bwt": _number(record.metrics.get("bwt")),
        "forgetting": _number(record.metrics.get("forgetting")),
        "per_task_matrix": [[_number(v) for v in row] for row in matrix.values],
        "union_accuracy": [_number(v) for v in matrix.union],
        "clip_global": [_number(v) for v in matrix.clip_global],
        "clip_per_task_matrix": [[_number(v) for v in row] for row in matrix.clip_per_task],
        "visual_global": [_number(v) for v in matrix.visual_global],
        "visual_per_task_matrix": [[_number(v) for v in row] for row in matrix.visual_per_task],
        "drift_summary": {str(stage): summary.as_dict() for stage, (_, summary) in sorted(record.drift.items())},
        "anchor_stats": {str(stage): asdict(stats) for stage, stats in sorted(record.anchor_stats.items())},
        "failed_stage": record.failed_stage,
    }


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _cell(value: float) -> str:
    return "" if math.isnan(value) else f"{value:.6f}"


def write_run(record: RunRecord, run_dir: Union[str, Path]) -> Dict[str, str]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    matrix = record.accuracy
    T = matrix.num_tasks
    paths = {}

    path = run_dir / "metrics.json"
    with open(path, "w") as f:
        json.dump(metrics_document(record), f, indent=2, sort_keys=True)
    paths["metrics"] = path

    paths["accuracy_matrix"] = _write_csv(
        run_dir / "accuracy_matrix.csv", ["stage"] + [f"task_{j}" for j in range(T)],
        ([i] + [_cell(v) for v in matrix.values[i]] for i in range(T)))
    paths["stage_accuracy"] = _write_csv(
        run_dir / "stage_accuracy.csv", ["stage", "union", "clip_global", "visual_only"],
        ([i, _cell(matrix.union[i]), _cell(matrix.clip_global[i]), _cell(matrix.visual_global[i])] for i in range(T)))
    paths["losses"] = _write_csv(
        run_dir / "losses.csv", ("task",) + LOSS_COLUMNS,
        ([task] + [getattr(r, c) for c in LOSS_COLUMNS]
         for task, history in sorted(record.loss_histories.items()) for r in history))
    paths["drift"] = _write_csv(
        run_dir / "drift.csv", ["stage", "sample_id", "own_class_cosine", "jsd", "partition"],
        ([stage, r.sample_id, f"{r.own_class_cosine:.6f}", f"{r.jsd:.8f}", r.partition.value]
         for stage, (records, _) in sorted(record.drift.items()) for r in records))
    paths["anchor_trajectory"] = _write_csv(
        run_dir / "anchor_trajectory.csv",
        ["stage", "iteration", "text_cosine", "prototype_cosine", "target_probability"],
        ([stage, p.iteration, f"{p.text_cosine:.6f}", f"{p.prototype_cosine:.6f}", f"{p.target_probability:.6f}"]
         for stage, points in sorted(record.trajectories.items()) for p in points))
    paths["anchor_stats"] = _write_csv(
        run_dir / "anchor_stats.csv",
        ["stage", "count", "seed_target_probability", "anchor_target_probability", "improved_fraction"],
        ([stage, s.count, f"{s.seed_target_probability:.6f}", f"{s.anchor_target_probability:.6f}",
          f"{s.improved_fraction:.6f}"] for stage, s in sorted(record.anchor_stats.items())))
    width = len(record.predictions[0].fused_logits) if record.predictions else 0
    paths["predictions"] = _write_csv(
        run_dir / "predictions.csv",
        ["sample_id", "true_class", "predicted_class"] + [f"logit_{i}" for i in range(width)],
        ([p.sample_id, p.true_class, p.predicted_class] + [f"{v:.6f}" for v in p.fused_logits]
         for p in record.predictions))
    return {name: str(p) for name, p in paths.items()}


def _fmt(value: Optional[float], scale: float = 100.0) -> str:
    return "n/a" if value is None else f"{value * scale:.1f}"


def summary_table(records: Sequence[RunRecord]) -> str:
    """Plain-text table: one row per run, flag columns then metrics in percent."""
    label_width = max(len("run"), *(len(r.label) for r in records))
    header = f"{'run':<{label_width}}  " + "  ".join(f"{c:>5}" for c in SUMMARY_COLUMNS)
    lines = [header, "-" * len(header)]
    for record in records:
        flags = record.flags
        marks = ["x" if on else "-" for on in
                 (flags.acgd, flags.tsgr, flags.prototype_transfer, flags.visual_branch)]
        m = record.metrics
        values = marks + [_fmt(m.get("last")), _fmt(m.get("forgetting")), _fmt(m.get("avg")),
                          _fmt(m.get("bwt")), _fmt(m.get("fwt"))]
        lines.append(f"{record.label:<{label_width}}  " + "  ".join(f"{v:>5}" for v in values))
    return "\n".join(lines) + "\n"


def emit_report(records: Sequence[RunRecord], output_dir: Union[str, Path]) -> Dict[str, str]:
    """Write every run's artifacts plus summary.txt; returns name -> path."""
    if not records:
        raise ValueError("no run records to report")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for record, name in zip(records, run_directory_names([r.label for r in records])):
        files = write_run(record, output_dir / name)
        record.artifacts.update(files)
        written.update({f"{name}/{key}": path for key, path in files.items()})

    summary = output_dir / "summary.txt"
    summary.write_text(summary_table(records))
    written["summary"] = str(summary)
    logger.info("Wrote %d run(s) to %s", len(records), output_dir)
    return written


def read_accuracy(run_dir: Union[str, Path]) -> AccuracyMatrix:
    """Rebuild an AccuracyMatrix from accuracy_matrix.csv and stage_accuracy.csv."""
    run_dir = Path(run_dir)
    matrix_path = run_dir / "accuracy_matrix.csv"
    if not matrix_path.exists():
        raise FileNotFoundError(f"Accuracy matrix not found: {matrix_path}")
    with open(matrix_path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    values = np.array([[float(v) if v else np.nan for v in row[1:]] for row in rows])
    matrix = AccuracyMatrix.from_values(values)
    stage_path = run_dir / "stage_accuracy.csv"
    if stage_path.exists():
        with open(stage_path, newline="") as f:
            for row in list(csv.reader(f))[1:]:
                stage = int(row[0])
                if row[1]:
                    clip_only, visual_only = (float(v) if v else None for v in (row + ["", ""])[2:4])
                    matrix.record_union(stage, float(row[1]), clip_only, visual_only)
    return matrix
