"""Per-round accuracy reports: a delimited table plus an SVG line chart.

Scans experiment summaries under a runs directory, groups the per-seed
accuracy records by method, and renders one mean line per method with a
band of one sample standard deviation.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import jsonio  # noqa: E402
from .errors import ConfigurationError  # noqa: E402


def collect_accuracy(runs_dir) -> dict[str, dict[int, list[float]]]:
    """Per-method, per-round accuracy samples from every summary.json found
    below runs_dir (one sample per seed per experiment)."""
    runs_dir = Path(runs_dir)
    summaries = sorted(runs_dir.rglob("summary.json"))
    if not summaries:
        raise ConfigurationError(f"no summary.json found under {runs_dir}")
    table: dict[str, dict[int, list[float]]] = {}
    for path in summaries:
        summary = jsonio.load(path)
        method = summary["method"]
        rounds = table.setdefault(method, {})
        for record in summary["per_seed"]:
            for metrics in record["rounds"]:
                rounds.setdefault(metrics["round"], []).append(metrics["accuracy"])
    return table


def write_accuracy_report(runs_dir, out_dir) -> tuple[Path, Path]:
    """Write accuracy.csv (method, round, mean, std) and accuracy.svg.

    A single-seed method gets a zero-width band.  Returns both paths.
    """
    table = collect_accuracy(runs_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "accuracy.csv"
    svg_path = out_dir / "accuracy.svg"

    rows = []
    for method in sorted(table):
        for round_index in sorted(table[method]):
            samples = table[method][round_index]
            mean = float(np.mean(samples))
            std = float(np.std(samples, ddof=1)) if len(samples) > 1 else 0.0
            rows.append((method, round_index, mean, std))

    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "round", "accuracy_mean", "accuracy_std"])
        for method, round_index, mean, std in rows:
            writer.writerow([method, round_index,
                             jsonio.format_float(mean), jsonio.format_float(std)])

    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for method in sorted(table):
        rounds = np.asarray(sorted(table[method]))
        means = np.asarray([np.mean(table[method][r]) for r in rounds])
        stds = np.asarray([np.std(table[method][r], ddof=1)
                           if len(table[method][r]) > 1 else 0.0 for r in rounds])
        ax.plot(rounds, means, marker="o", label=method)
        ax.fill_between(rounds, means - stds, means + stds, alpha=0.2)
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_xticks(sorted({r for rounds in table.values() for r in rounds}))
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path)
    plt.close(fig)
    return csv_path, svg_path
