"""Stratified evaluation reports over image scores and detections.

A report covers three strata: every evaluated image, the wide-field
subset, and the dermoscopy subset.  Image-level ranking metrics come
from the score stream; detection metrics compare the detection stream
against the manifest's ROI boxes.  A metric that is undefined on a
stratum (single class, no ground truth) is reported as missing rather
than invented.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .data import DatasetManifest, ImageRecord
from .errors import MetricUndefinedError, ReportError
from .metrics import (
    auc,
    average_precision,
    iou_summary,
    map_at,
    match_detections,
    recall_any_overlap,
)

STRATA = ("all", "wide_field", "dermoscopy")

METRIC_ORDER = (
    "n_images",
    "n_lesions",
    "auc",
    "ap",
    "map_50",
    "map_75",
    "map_50_95",
    "recall_any_overlap",
    "iou_median",
    "iou_q1",
    "iou_q3",
)

_FOOTER = (
    "ROC anchored at (FPR,TPR)=(0,0) and (1,1); PR anchored at (TPR=0, PPV=1).",
    "map_50_95 averages IoU thresholds 0.50:0.05:0.95; matching is class-agnostic.",
    "iou_* summarize per-ground-truth best overlap (IoU > 0); quantiles interpolate linearly.",
    "blank cell = metric has no defined value on that stratum.",
)


@dataclass(frozen=True)
class StratumMetrics:
    stratum: str
    values: dict

    def get(self, name: str):
        return self.values.get(name)


@dataclass(frozen=True)
class EvalReport:
    strata: tuple[StratumMetrics, ...]

    def stratum(self, name: str) -> StratumMetrics:
        for s in self.strata:
            if s.stratum == name:
                return s
        raise KeyError(name)


def _guarded(fn):
    try:
        return fn()
    except MetricUndefinedError:
        return None


def _stratum_values(
    records: Sequence[ImageRecord],
    scores: Mapping[str, float],
    detections: Mapping[str, Sequence],
) -> dict:
    values: dict = {
        "n_images": len(records),
        "n_lesions": sum(len(r.rois) for r in records),
    }
    scored = [(scores[r.image_id], r.image_label) for r in records if r.image_id in scores]
    values["auc"] = _guarded(lambda: auc(scored)) if scored else None
    values["ap"] = _guarded(lambda: average_precision(scored)) if scored else None

    preds = {r.image_id: list(detections.get(r.image_id, ())) for r in records}
    gts = {r.image_id: list(r.rois) for r in records}
    result = _guarded(lambda: map_at(preds, gts, thresholds=(0.5, 0.75)))
    values["map_50"] = result.per_threshold[0.5] if result else None
    values["map_75"] = result.per_threshold[0.75] if result else None
    values["map_50_95"] = result.mean_50_95 if result else None
    values["recall_any_overlap"] = _guarded(lambda: recall_any_overlap(preds, gts))
    summary = _guarded(
        lambda: iou_summary(
            match_detections(preds[r.image_id], gts[r.image_id], 0.5) for r in records
        )
    )
    values["iou_median"] = summary.median if summary else None
    values["iou_q1"] = summary.q1 if summary else None
    values["iou_q3"] = summary.q3 if summary else None
    return values


def stratified_report(
    manifest: DatasetManifest,
    scores: Mapping[str, float],
    detections: Mapping[str, Sequence] | None = None,
    split: str | None = None,
) -> EvalReport:
    """Metrics per stratum over the scored/detected images.

    ``split`` restricts evaluation to one split of the manifest; the
    evaluated set is then every record with a score or a detection list.
    Unknown image ids are an error rather than silently ignored.
    """
    detections = detections or {}
    known = {r.image_id for r in manifest.records}
    for image_id in list(scores) + list(detections):
        if image_id not in known:
            raise ReportError(f"scored image {image_id!r} is not in the manifest")

    pool = manifest.split_records(split) if split else manifest.records
    evaluated = [r for r in pool if r.image_id in scores or r.image_id in detections]
    strata = []
    for name in STRATA:
        records = evaluated if name == "all" else [r for r in evaluated if r.capture == name]
        strata.append(StratumMetrics(stratum=name, values=_stratum_values(records, scores, detections)))
    return EvalReport(strata=tuple(strata))


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return f"{value:.17g}"


def render_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stratum", "metric", "value"])
    for s in report.strata:
        for name in METRIC_ORDER:
            writer.writerow([s.stratum, name, _format_value(s.get(name))])
    return buf.getvalue()


def render_text(report: EvalReport) -> str:
    """Fixed-width table: one row per metric, one column per stratum."""
    width = max(len(n) for n in METRIC_ORDER)
    col = 12
    lines = [
        " ".join(["metric".ljust(width)] + [s.stratum.rjust(col) for s in report.strata])
    ]
    lines.append("-" * len(lines[0]))
    for name in METRIC_ORDER:
        cells = []
        for s in report.strata:
            v = s.get(name)
            if v is None:
                cells.append("undefined".rjust(col))
            elif isinstance(v, int):
                cells.append(str(v).rjust(col))
            else:
                cells.append(f"{v:.4f}".rjust(col))
        lines.append(" ".join([name.ljust(width)] + cells))
    lines.append("")
    lines.extend(_FOOTER)
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, directory: str | Path) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / "report.csv"
    txt_path = directory / "report.txt"
    csv_path.write_text(render_csv(report), encoding="utf-8")
    txt_path.write_text(render_text(report), encoding="utf-8")
    return csv_path, txt_path


def sweep_grid(
    cells: Mapping[tuple, Sequence],
    labels: Mapping[str, int],
) -> list[dict]:
    """12-row strategy/aggregator comparison from sweep_scores output.

    Every strategy appears once per aggregator; the direct strategy has
    no aggregation step, so its single score list fills all three of its
    rows.  Cell metric is AUC over (score probability, image label).
    """
    from .scoring import AGGREGATORS, STRATEGIES

    rows = []
    for strategy in STRATEGIES:
        for aggregator in AGGREGATORS:
            key = ("direct", None) if strategy == "direct" else (strategy, aggregator)
            scores = cells.get(key)
            if scores is None:
                continue
            pairs = [(s.probability, labels[s.image_id]) for s in scores]
            value = _guarded(lambda: auc(pairs)) if pairs else None
            rows.append(
                {
                    "strategy": strategy,
                    "aggregator": aggregator,
                    "n": len(scores),
                    "auc": value,
                }
            )
    return rows


def render_sweep(rows: Sequence[Mapping]) -> str:
    header = f"{'strategy':<20} {'aggregator':<10} {'n':>6} {'auc':>8}"
    lines = [header, "-" * len(header)]
    for row in rows:
        value = "undef" if row["auc"] is None else f"{row['auc']:.4f}"
        lines.append(
            f"{row['strategy']:<20} {row['aggregator']:<10} {row['n']:>6} {value:>8}"
        )
    return "\n".join(lines) + "\n"


def write_sweep_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["strategy", "aggregator", "n", "auc"])
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["auc"] = "" if row["auc"] is None else f"{row['auc']:.17g}"
            writer.writerow(out)


def read_report_csv(path: str | Path) -> EvalReport:
    """Inverse of render_csv for tooling that post-processes reports."""
    by_stratum: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["stratum", "metric", "value"]:
            raise ReportError(f"{path}: unexpected report header {reader.fieldnames}")
        for row in reader:
            raw = row["value"]
            if raw == "":
                value = None
            elif row["metric"].startswith("n_"):
                value = int(raw)
            else:
                value = float(raw)
            by_stratum.setdefault(row["stratum"], {})[row["metric"]] = value
    strata = tuple(StratumMetrics(stratum=k, values=v) for k, v in by_stratum.items())
    return EvalReport(strata=strata)
