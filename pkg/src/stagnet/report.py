"""Report rendering: structured text, delimited curves, and figure files.

The report path always writes ``report.json`` plus CSVs of the PR curve and
per-video TTA table; unless disabled it also renders the PR curve and a
probability-timeline figure as PNGs next to them.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from stagnet.metrics import MetricsReport
from stagnet.model import PredictionSeries


def report_dict(report: MetricsReport) -> dict:
    return {
        "ap": report.ap,
        "ap_percent": round(100.0 * report.ap, 2),
        "mtta_seconds": report.mtta,
        "baseline_ap": report.baseline_ap,
        "baseline_ap_percent": round(100.0 * report.baseline_ap, 1),
        "video_level_ap": report.video_level_ap,
        "thresholds": len(report.threshold_grid),
        "pr_points": len(report.pr_points),
        "positive_videos": len(report.tta_table),
        "flags": report.flags,
    }


def write_report(report: MetricsReport, out_dir, records: list[PredictionSeries] | None = None,
                 plots: bool = True) -> dict[str, Path]:
    """Write report files into ``out_dir``; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    path = out_dir / "report.json"
    path.write_text(json.dumps(report_dict(report), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    written["report"] = path

    path = out_dir / "pr_curve.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cutoff", "precision", "recall"])
        for p in report.pr_points:
            writer.writerow([repr(p.cutoff), repr(p.precision), repr(p.recall)])
    written["pr_curve"] = path

    path = out_dir / "tta_table.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "onset", "fps", "crossings", "tta_at_0.5", "mean_tta"])
        for row in report.tta_table:
            writer.writerow([
                row["video_id"], row["onset"], row["fps"], row["crossings"],
                "" if row["tta_at_0.5"] is None else repr(row["tta_at_0.5"]),
                "" if row["mean_tta"] is None else repr(row["mean_tta"]),
            ])
    written["tta_table"] = path

    if plots:
        written["pr_figure"] = _render_pr_curve(report, out_dir / "pr_curve.png")
        if records:
            written["timeline_figure"] = _render_timelines(records, out_dir / "prob_timelines.png")
    return written


def _render_pr_curve(report: MetricsReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    recalls = [0.0] + [p.recall for p in report.pr_points]
    precisions = [report.pr_points[0].precision if report.pr_points else 1.0] + [
        p.precision for p in report.pr_points
    ]
    ax.step(recalls, precisions, where="post")
    ax.axhline(report.baseline_ap, color="gray", linestyle=":", linewidth=1,
               label=f"baseline AP {100 * report.baseline_ap:.1f}%")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"AP {100 * report.ap:.2f}%  mTTA {report.mtta:.2f}s")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _render_timelines(records: list[PredictionSeries], path: Path, max_per_class: int = 8) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    shown_pos = shown_neg = 0
    for record in records:
        frames = range(1, len(record.probs) + 1)
        if record.label == 1 and shown_pos < max_per_class:
            ax.plot(frames, record.probs, color="firebrick", alpha=0.6, linewidth=1)
            ax.axvline(record.onset, color="firebrick", alpha=0.15, linewidth=1)
            shown_pos += 1
        elif record.label == 0 and shown_neg < max_per_class:
            ax.plot(frames, record.probs, color="steelblue", alpha=0.5, linewidth=1)
            shown_neg += 1
        if shown_pos >= max_per_class and shown_neg >= max_per_class:
            break
    ax.set_xlabel("frame")
    ax.set_ylabel("accident probability")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("per-frame probabilities (red: accident videos, blue: normal)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
