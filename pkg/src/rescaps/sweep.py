"""Depth sweeps: the Cartesian product of datasets x routings x depths x
skip x seeds, appended to a shared runs CSV with resume support and a
paper-table-shaped summary."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .layers import MAX_DEPTH, MIN_DEPTH, ConfigError, ModelConfig
from .train import RunRecord, fmt, make_run_id, run_training

RUNS_HEADER = ["run_id", "dataset", "routing", "depth", "skip", "seed", "epoch", "train_loss", "test_acc"]
STATUS_HEADER = ["run_id", "status", "final_test_acc", "wall_time_s"]

SKIP_CHOICES = {"on": (True,), "off": (False,), "both": (False, True)}


@dataclass
class SweepSpec:
    datasets: list
    routings: list
    depths: list
    skip: str = "both"           # on | off | both
    epochs: int = 30
    seeds: list = field(default_factory=lambda: [0])
    batch_size: int | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    learning_rate: float = 1e-4
    recon_weight: float = 1e-5

    def validate(self):
        if not self.datasets or not self.routings or not self.depths or not self.seeds:
            raise ConfigError("sweep axes must be non-empty")
        if self.skip not in SKIP_CHOICES:
            raise ConfigError(f"skip must be one of {sorted(SKIP_CHOICES)}")
        for d in self.depths:
            if not MIN_DEPTH <= d <= MAX_DEPTH:
                raise ConfigError(f"sweep depth {d} outside [{MIN_DEPTH}, {MAX_DEPTH}]")
        return self

    def configs(self):
        for dataset in self.datasets:
            for routing in self.routings:
                for depth in self.depths:
                    for use_skip in SKIP_CHOICES[self.skip]:
                        for seed in self.seeds:
                            yield ModelConfig(
                                dataset=dataset,
                                routing=routing,
                                depth=depth,
                                use_skip=use_skip,
                                seed=seed,
                                epochs=self.epochs,
                                batch_size=self.batch_size,
                                learning_rate=self.learning_rate,
                                recon_weight=self.recon_weight,
                            )


def _append_rows(path, header, rows):
    """Single-writer append; the header is created once, rows for one run go
    out in one write so a reader never sees a torn run."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as f:
        block = []
        if new:
            block.append(",".join(header))
        block.extend(",".join(r) for r in rows)
        f.write("\n".join(block) + "\n")
        f.flush()


def _completed_run_ids(status_path):
    path = Path(status_path)
    if not path.exists():
        return set()
    with open(path, encoding="utf-8", newline="") as f:
        return {row["run_id"] for row in csv.DictReader(f)}


def run_record_rows(record: RunRecord):
    c = record.config
    skip = "true" if c.use_skip else "false"
    for m in record.epoch_metrics:
        yield [
            record.run_id, c.dataset, c.routing, str(c.depth), skip, str(c.seed),
            str(m.epoch), fmt(m.train_loss), fmt(m.test_acc),
        ]


def run_sweep(spec: SweepSpec, data_dir, out_dir, log=None) -> Path:
    """Execute every (dataset, routing, depth, skip, seed) cell, appending
    per-epoch rows to sweep_runs.csv and one status row per run to
    sweep_status.csv. Completed run ids are skipped on resume; a run that
    fails does not abort the rest. Returns the summary CSV path."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs_path = out_dir / "sweep_runs.csv"
    status_path = out_dir / "sweep_status.csv"
    done = _completed_run_ids(status_path)

    for config in spec.configs():
        run_id = make_run_id(config)
        if run_id in done:
            if log:
                log(f"[{run_id}] already complete, skipping")
            continue
        try:
            record = run_training(
                config,
                data_dir,
                train_limit=spec.train_limit,
                test_limit=spec.test_limit,
                log=log,
            )
        except (FileNotFoundError, ConfigError):
            raise  # affects every run; let the caller map it to an exit code
        except Exception as e:  # one broken run must not sink the sweep
            if log:
                log(f"[{run_id}] failed: {e}")
            _append_rows(status_path, STATUS_HEADER, [[run_id, "error", "", ""]])
            continue
        _append_rows(runs_path, RUNS_HEADER, list(run_record_rows(record)))
        final = fmt(record.final_test_acc) if record.epoch_metrics else ""
        _append_rows(
            status_path,
            STATUS_HEADER,
            [[run_id, record.status, final, f"{record.wall_time_s:.3f}"]],
        )
    return write_summary(runs_path, out_dir / "sweep_summary.csv")


def final_epoch_rows(runs_path):
    """Last-epoch row per run_id from a sweep runs CSV."""
    finals = {}
    with open(runs_path, encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            row["epoch"] = int(row["epoch"])
            prev = finals.get(row["run_id"])
            if prev is None or row["epoch"] > prev["epoch"]:
                finals[row["run_id"]] = row
    return list(finals.values())


def write_summary(runs_path, summary_path) -> Path:
    """Final test accuracy per (dataset, routing, skip) row across depth
    columns, averaged over seeds, shaped like an accuracy-vs-depth table."""
    finals = final_epoch_rows(runs_path) if Path(runs_path).exists() else []
    depths = sorted({int(r["depth"]) for r in finals})
    cells = {}
    for r in finals:
        key = (r["dataset"], r["routing"], r["skip"], int(r["depth"]))
        cells.setdefault(key, []).append(float(r["test_acc"]))

    header = ["dataset", "routing", "skip"] + [str(d) for d in depths]
    lines = [",".join(header)]
    for dataset, routing, skip in sorted({k[:3] for k in cells}):
        row = [dataset, routing, skip]
        for d in depths:
            accs = cells.get((dataset, routing, skip, d))
            row.append(fmt(sum(accs) / len(accs)) if accs else "")
        lines.append(",".join(row))
    summary_path = Path(summary_path)
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return summary_path
