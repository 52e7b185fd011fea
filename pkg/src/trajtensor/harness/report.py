"""Report files. Names embed the run-config hash so repeated runs of the same
configuration overwrite their own files and nothing else."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

from ..metrics import FoldMetrics, MetricsReport, PrCurve


def write_metrics(out_dir: Path, stem: str, report: MetricsReport) -> list[Path]:
    txt, js = out_dir / f"{stem}.txt", out_dir / f"{stem}.json"
    txt.write_text(report.to_text())
    js.write_text(report.to_json())
    return [txt, js]


def write_sweep_csv(path: Path, rows: Sequence[dict]) -> Path:
    if not rows:
        path.write_text("")
        return path
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def report(
    out_dir: str | Path,
    config_hash: str,
    metrics: MetricsReport,
    curves: Optional[dict[int, PrCurve]] = None,
    single_view: Optional[MetricsReport] = None,
    sweep_rows: Optional[Sequence[dict]] = None,
    task: str = "which",
) -> list[Path]:
    """Write the text and JSON metric reports, PR-curve CSVs and an optional
    sweep table into ``out_dir`` (created if missing)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = write_metrics(out, f"metrics-{config_hash}", metrics)
    for fold, curve in sorted((curves or {}).items()):
        path = out / f"pr-{task}-fold{fold}-{config_hash}.csv"
        curve.to_csv(path)
        written.append(path)
    if single_view is not None:
        written += write_metrics(out, f"metrics-single-view-{config_hash}", single_view)
    if sweep_rows is not None:
        written.append(write_sweep_csv(out / f"sweep-{config_hash}.csv", sweep_rows))
    return written


def report_from_json(path: str | Path) -> MetricsReport:
    """Rebuild a MetricsReport from its JSON file."""
    doc = json.loads(Path(path).read_text())
    return MetricsReport([FoldMetrics(**f) for f in doc["folds"]], doc.get("config", {}))
