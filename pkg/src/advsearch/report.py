"""Render ledger records to delimited tables and matplotlib figures.

Outputs are deterministic: CSVs have a fixed column order and exclude
timestamps/wall times, and the SVG figures are written with a fixed hash salt
and no embedded date, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ArgumentError  # noqa: E402

plt.rcParams["svg.hashsalt"] = "advsearch"

_SUMMARY_COLUMNS = ("index", "kind", "strategy", "seed", "robust_acc", "cost_units",
                    "final_metric", "config_hash")


def _summary_row(i, record):
    result = record["result"]
    return [
        i,
        result.get("kind", ""),
        result.get("strategy", ""),
        result.get("seed", ""),
        result.get("robust_acc", ""),
        result.get("cost_units", ""),
        result.get("final_metric", ""),
        record["config_hash"],
    ]


def _front_points(record):
    """(rank, robust_acc, cost_units) rows for records carrying fronts."""
    result = record["result"]
    if "fronts" in result:
        return [(row["rank"], row["robust_acc"], row["cost_units"])
                for row in result["fronts"]]
    if "robust_acc" in result and "cost_units" in result:
        return [(0, result["robust_acc"], result["cost_units"])]
    return []


def _save_front_figure(points, path, title):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ranks = sorted({r for r, _, _ in points})
    for rank in ranks:
        xs = [c for r, _, c in points if r == rank]
        ys = [a for r, a, _ in points if r == rank]
        series = ax.scatter(xs, ys, s=24, label=f"front {rank}")
        series.set_gid(f"front-{rank}")
    ax.set_xlabel("cost (gradient evaluations)")
    ax.set_ylabel("robust accuracy")
    ax.set_title(title)
    if ranks:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def report(records, out_dir):
    """Write the summary CSV, per-record point CSVs, and front scatter SVGs."""
    records = list(records)
    if not records:
        raise ArgumentError("report: no ledger records selected")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    summary_path = out_dir / "records.csv"
    with open(summary_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_SUMMARY_COLUMNS)
        for i, record in enumerate(records):
            writer.writerow(_summary_row(i, record))
    written.append(summary_path)

    for i, record in enumerate(records):
        points = _front_points(record)
        if not points:
            continue
        points_path = out_dir / f"record_{i}_points.csv"
        with open(points_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["rank", "robust_acc", "cost_units"])
            for row in points:
                writer.writerow(row)
        written.append(points_path)
        fig_path = out_dir / f"record_{i}_front.svg"
        kind = record["result"].get("kind", "record")
        strategy = record["result"].get("strategy", "")
        _save_front_figure(points, fig_path, f"{kind} {strategy}".strip())
        written.append(fig_path)
    return written
