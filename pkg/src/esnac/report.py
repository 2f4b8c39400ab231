"""Search-result reports: delimited tables plus rendered figures.

Writes a reward-versus-evaluation-index CSV, a reward histogram CSV, and a
one-row summary of the best architecture, and renders the curve and
histogram as PNG files next to the tables.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .archgraph import param_count
from .evaluator import compression_ratio
from .search import SearchTrace

HISTOGRAM_BINS = 20


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_report(trace: SearchTrace, out_dir: str | Path) -> dict[str, Path]:
    """Write all report artifacts into out_dir and return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    records = [s.record for s in trace.steps] or trace.finalists
    rewards = np.array([rec.reward for rec in records], dtype=float)

    curve_rows = [[i + 1, s.step, s.kernel, f"{s.record.reward:.10g}",
                   f"{s.record.accuracy:.10g}", s.record.params]
                  for i, s in enumerate(trace.steps)]
    paths["rewards"] = out / "rewards.csv"
    _write_rows(paths["rewards"],
                ["index", "step", "kernel", "reward", "accuracy", "params"],
                curve_rows)

    top = max(1.0, float(rewards.max())) if rewards.size else 1.0
    counts, edges = np.histogram(rewards, bins=HISTOGRAM_BINS, range=(0.0, top))
    hist_rows = [[f"{edges[i]:.10g}", f"{edges[i + 1]:.10g}", int(counts[i])]
                 for i in range(len(counts))]
    paths["histogram"] = out / "reward_hist.csv"
    _write_rows(paths["histogram"], ["bin_low", "bin_high", "count"], hist_rows)

    summary_rows = []
    teacher = trace.eval_set.teacher
    if teacher is not None and trace.eval_set.teacher_accuracy is not None:
        t_params = param_count(teacher)
        summary_rows.append(["teacher", f"{trace.eval_set.teacher_accuracy:.6g}",
                             t_params, 0.0, 1.0, ""])
        best = trace.best
        if best is not None:
            ratio = compression_ratio(best.params, t_params)
            times = t_params / best.params if best.params else float("inf")
            summary_rows.append(["best", f"{best.accuracy:.6g}", best.params,
                                 f"{ratio:.6g}", f"{times:.6g}",
                                 f"{best.reward:.6g}"])
    paths["summary"] = out / "summary.csv"
    _write_rows(paths["summary"],
                ["label", "accuracy", "params", "ratio", "times", "reward"],
                summary_rows)

    fig, ax = plt.subplots(figsize=(6, 4))
    if rewards.size:
        ax.plot(np.arange(1, rewards.size + 1), rewards, ".", label="evaluated")
        ax.plot(np.arange(1, rewards.size + 1), np.maximum.accumulate(rewards),
                "-", label="best so far")
        ax.legend(loc="lower right")
    ax.set_xlabel("evaluation index")
    ax.set_ylabel("reward")
    fig.tight_layout()
    paths["curve_figure"] = out / "reward_curve.png"
    fig.savefig(paths["curve_figure"], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    widths = np.diff(edges)
    ax.bar(edges[:-1], counts, width=widths, align="edge", edgecolor="black")
    ax.set_xlabel("reward")
    ax.set_ylabel("count")
    fig.tight_layout()
    paths["histogram_figure"] = out / "reward_hist.png"
    fig.savefig(paths["histogram_figure"], dpi=120)
    plt.close(fig)

    return paths
