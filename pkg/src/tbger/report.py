"""Evaluation report emission: JSON, aligned text, per-question CSV, figures."""

from __future__ import annotations

import csv
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport

REPORT_FORMAT_VERSION = 1

_METRIC_NAMES = ("MRR", "P@1", "P@3")


def _block_label(block_start: int) -> str:
    return datetime.fromtimestamp(block_start, tz=timezone.utc).strftime("%Y-%m-%d")


def report_payload(report: EvalReport) -> dict:
    cold = None
    if report.cold is not None:
        cold = {
            "threshold": report.cold_threshold,
            "evaluated": report.cold.evaluated,
            "mrr": report.cold.mrr,
            "p_at_1": report.cold.p_at_1,
            "p_at_3": report.cold.p_at_3,
        }
    return {
        "format": REPORT_FORMAT_VERSION,
        "method": report.method,
        "site_name": report.site_name,
        "config_fingerprint": report.config_fingerprint,
        "counts": {
            "test_questions": report.total_questions,
            "evaluated": report.evaluated,
            "excluded_ground_truth_not_candidate": report.excluded_ground_truth_not_candidate,
            "unscorable": report.unscorable,
            "candidates": report.extras.get("candidates"),
        },
        "metrics": {"mrr": report.mrr, "p_at_1": report.p_at_1, "p_at_3": report.p_at_3},
        "cold_start": cold,
        "mf_hyperparams": report.mf_hyperparams,
        "per_question": [
            {
                "question_id": r.question_id,
                "ground_truth_user": r.ground_truth_user,
                "rank": r.rank,
                "scorable": r.scorable,
                "query_block_start": r.query_block_start,
            }
            for r in report.results
        ],
    }


def report_to_json_bytes(report: EvalReport) -> bytes:
    return (json.dumps(report_payload(report), indent=2) + "\n").encode("utf-8")


def save_report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_bytes(report_to_json_bytes(report))


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def report_to_text(report: EvalReport) -> str:
    lines = [
        f"method: {report.method}    site: {report.site_name or '(unnamed)'}",
        f"config fingerprint: {report.config_fingerprint}",
        "",
        f"{'test questions':<38}{report.total_questions:>8}",
        f"{'evaluated':<38}{report.evaluated:>8}",
        f"{'excluded (ground truth not candidate)':<38}{report.excluded_ground_truth_not_candidate:>8}",
        f"{'unscorable (no known tags)':<38}{report.unscorable:>8}",
        "",
        f"{'metric':<10}{'value':>8}",
        f"{'MRR':<10}{_fmt(report.mrr):>8}",
        f"{'P@1':<10}{_fmt(report.p_at_1):>8}",
        f"{'P@3':<10}{_fmt(report.p_at_3):>8}",
    ]
    if report.cold is not None:
        lines += [
            "",
            f"cold start (ground truth with < {report.cold_threshold} training answers)",
            f"{'evaluated':<10}{report.cold.evaluated:>8}",
            f"{'MRR':<10}{_fmt(report.cold.mrr):>8}",
            f"{'P@1':<10}{_fmt(report.cold.p_at_1):>8}",
            f"{'P@3':<10}{_fmt(report.cold.p_at_3):>8}",
        ]
    if report.mf_hyperparams:
        hp = report.mf_hyperparams
        lines += ["", f"mf hyperparameters: lr={hp['learning_rate']} l2={hp['l2']} epochs={hp['epochs']}"]
    return "\n".join(lines) + "\n"


def comparison_text(reports: Sequence[EvalReport]) -> str:
    """One aligned row per method, for multi-method runs."""
    lines = [f"{'method':<10}{'MRR':>8}{'P@1':>8}{'P@3':>8}{'evaluated':>11}"]
    for report in reports:
        lines.append(
            f"{report.method:<10}{_fmt(report.mrr):>8}{_fmt(report.p_at_1):>8}"
            f"{_fmt(report.p_at_3):>8}{report.evaluated:>11}"
        )
    return "\n".join(lines) + "\n"


def save_per_question_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write(f"# config_fingerprint={report.config_fingerprint}\n")
        writer = csv.writer(handle)
        writer.writerow(["question_id", "method", "rank_q", "t_q_block"])
        for r in report.results:
            writer.writerow(
                [r.question_id, report.method, r.rank, _block_label(r.query_block_start)]
            )


def render_report_figures(
    reports: Sequence[EvalReport], outdir: str | Path, prefix: str = ""
) -> list[Path]:
    """Render the metric bars and rank-CDF figures next to the delimited output."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    site = reports[0].site_name if reports else ""
    meta = {"Comment": f"config_fingerprint={reports[0].config_fingerprint}"} if reports else None

    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(reports), 1)
    base = np.arange(len(_METRIC_NAMES))
    for i, report in enumerate(reports):
        values = [report.mrr or 0.0, report.p_at_1 or 0.0, report.p_at_3 or 0.0]
        ax.bar(base + i * width, values, width=width, label=report.method)
    ax.set_xticks(base + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(_METRIC_NAMES)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"Ranking quality{f' on {site}' if site else ''}")
    ax.legend(frameon=False)
    fig.tight_layout()
    metrics_path = outdir / f"{prefix}metrics.png"
    fig.savefig(metrics_path, dpi=120, metadata=meta)
    plt.close(fig)
    paths.append(metrics_path)

    fig, ax = plt.subplots(figsize=(7, 4))
    plotted = False
    for report in reports:
        ranks = np.sort([r.rank for r in report.results if r.scorable])
        if len(ranks) == 0:
            continue
        fractions = np.arange(1, len(ranks) + 1) / len(ranks)
        ax.step(ranks, fractions, where="post", label=report.method)
        plotted = True
    if plotted:
        ax.set_xscale("log")
        ax.set_xlabel("rank of ground-truth answerer")
        ax.set_ylabel("fraction of questions")
        ax.set_ylim(0, 1.02)
        ax.set_title(f"Rank distribution{f' on {site}' if site else ''}")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        cdf_path = outdir / f"{prefix}rank_cdf.png"
        fig.savefig(cdf_path, dpi=120, metadata=meta)
        paths.append(cdf_path)
    plt.close(fig)
    return paths
