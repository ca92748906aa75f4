"""Accuracy-vs-depth report: per-(dataset, routing) series CSVs for external
plotting plus rendered figures.

Input is a sweep runs CSV (run_id,dataset,routing,depth,skip,seed,epoch,
train_loss,test_acc). For every (dataset, routing) group the final-epoch
accuracy is averaged over seeds and written as one wide CSV with a no-skip
and a skip series over strictly increasing depth, alongside a PNG with the
skip curve in blue and the plain curve in red.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .data import DataFormatError
from .sweep import RUNS_HEADER, final_epoch_rows
from .train import fmt

SERIES_HEADER = ["depth", "no_skip", "skip"]
ALL_SERIES_NAME = "series_all.csv"


def _validate_runs_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
    if header != RUNS_HEADER:
        raise DataFormatError(
            f"{path}: expected sweep runs header {','.join(RUNS_HEADER)}, got {header}"
        )


def _series(finals):
    """{(dataset, routing): {depth: {skip_bool: mean acc}}}"""
    acc = {}
    for row in finals:
        key = (row["dataset"], row["routing"])
        depth = int(row["depth"])
        skip = row["skip"] == "true"
        acc.setdefault(key, {}).setdefault(depth, {}).setdefault(skip, []).append(
            float(row["test_acc"])
        )
    return {
        key: {
            depth: {skip: sum(v) / len(v) for skip, v in per_skip.items()}
            for depth, per_skip in depths.items()
        }
        for key, depths in acc.items()
    }


def _plot_group(dataset, routing, depths, series, path):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for skip, color, label in ((True, "tab:blue", "skip"), (False, "tab:red", "no skip")):
        xs = [d for d in depths if skip in series[d]]
        if not xs:
            continue
        ax.plot(xs, [series[d][skip] for d in xs], marker="o", color=color, label=label)
    ax.set_xlabel("capsule layers")
    ax.set_ylabel("test accuracy")
    ax.set_title(f"{dataset} / {routing}")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_report(runs_csv, out_dir) -> list:
    """Emit series CSVs and figures; returns the written paths.

    series_all.csv (long format, header always present) is written even for
    an empty input; group files appear only for groups that have rows.
    """
    _validate_runs_csv(runs_csv)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    finals = final_epoch_rows(runs_csv)
    grouped = _series(finals)

    written = []
    all_path = out_dir / ALL_SERIES_NAME
    with open(all_path, "w", encoding="utf-8", newline="") as f:
        f.write("dataset,routing,depth,skip,accuracy\n")
        for (dataset, routing), depths in sorted(grouped.items()):
            for depth in sorted(depths):
                for skip in sorted(depths[depth]):
                    skip_name = "skip" if skip else "no_skip"
                    f.write(
                        f"{dataset},{routing},{depth},{skip_name},{fmt(depths[depth][skip])}\n"
                    )
    written.append(all_path)

    for (dataset, routing), depths in sorted(grouped.items()):
        ordered = sorted(depths)  # strictly increasing x values
        csv_path = out_dir / f"{dataset}_{routing}.csv"
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            f.write(",".join(SERIES_HEADER) + "\n")
            for d in ordered:
                no_skip = fmt(depths[d][False]) if False in depths[d] else ""
                skip = fmt(depths[d][True]) if True in depths[d] else ""
                f.write(f"{d},{no_skip},{skip}\n")
        written.append(csv_path)

        png_path = out_dir / f"{dataset}_{routing}.png"
        _plot_group(dataset, routing, ordered, depths, png_path)
        written.append(png_path)
    return written
