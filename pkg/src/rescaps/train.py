"""Single training runs: the optimization loop, evaluation, and RunRecord
persistence.

A run is fully determined by (ModelConfig, data subset, thread count): model
init and the augmentation/shuffle stream are derived from the config seed
via separate SeedSequence spawns, and the per-epoch metrics CSV contains no
timing columns, so two identical runs produce byte-identical metrics files.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DATASETS, Dataset, batch_iter, load_dataset, prepare_batch
from .layers import CapsNet, ConfigError, ModelConfig, build_model, save_checkpoint
from .losses import (
    Adam,
    DivergedRunError,
    LossConfig,
    margin_loss,
    one_hot,
    reconstruction_loss,
    total_loss,
)

METRICS_HEADER = ["epoch", "train_loss", "train_acc", "test_acc"]
RECORD_HEADER = [
    "run_id", "dataset", "routing", "depth", "skip", "seed", "epochs", "batch_size",
    "learning_rate", "recon_weight", "routing_iters", "train_size", "test_size",
    "status", "final_test_acc", "best_test_acc", "wall_time_s",
]


def fmt(x) -> str:
    """The one float format used in every CSV cell, so equal values always
    produce equal bytes."""
    return f"{x:.6f}"


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class RunRecord:
    run_id: str
    config: ModelConfig
    train_size: int
    test_size: int
    epoch_metrics: list = field(default_factory=list)
    status: str = "ok"
    wall_time_s: float = 0.0

    @property
    def final_test_acc(self):
        return self.epoch_metrics[-1].test_acc if self.epoch_metrics else float("nan")

    @property
    def best_test_acc(self):
        return max((m.test_acc for m in self.epoch_metrics), default=float("nan"))


def make_run_id(config: ModelConfig) -> str:
    skip = "skip" if config.use_skip else "noskip"
    return f"{config.dataset}-{config.routing}-d{config.depth}-{skip}-s{config.seed}"


def evaluate(model: CapsNet, dataset: Dataset, batch_size: int) -> float:
    """Top-1 accuracy over the center-crop evaluation path."""
    if len(dataset) == 0:
        raise ConfigError("evaluation split is empty")
    spec = DATASETS[model.config.dataset]
    correct = 0
    for idx in batch_iter(len(dataset), batch_size):
        x, _ = prepare_batch(dataset.images[idx], spec, train=False)
        correct += int((model.predict(x.astype(model.dtype)) == dataset.labels[idx]).sum())
    return correct / len(dataset)


def run_training(
    config: ModelConfig,
    data_dir,
    out_dir=None,
    train_limit=None,
    test_limit=None,
    save_final_checkpoint=True,
    log=None,
) -> RunRecord:
    """Train one model per the standard recipe (Adam, margin + weighted
    reconstruction, r routing iterations) and evaluate after every epoch.

    If out_dir is given, writes out_dir/<run_id>/{metrics.csv, record.csv,
    model.ckpt}. A non-finite loss or gradient marks the record diverged and
    stops training; everything recorded so far is kept.
    """
    config.validate()
    spec = DATASETS[config.dataset]
    train_ds = load_dataset(config.dataset, data_dir, "train", train_limit)
    test_ds = load_dataset(config.dataset, data_dir, "test", test_limit)
    if len(train_ds) == 0:
        raise ConfigError("training split is empty")

    init_seq, stream_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = build_model(config, rng=np.random.default_rng(init_seq))
    rng = np.random.default_rng(stream_seq)  # epoch shuffles + augmentation
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    loss_cfg = LossConfig(recon_weight=config.recon_weight)
    batch_size = config.resolved_batch_size()

    record = RunRecord(make_run_id(config), config, len(train_ds), len(test_ds))
    started = time.perf_counter()
    try:
        for epoch in range(1, config.epochs + 1):
            epoch_started = time.perf_counter()
            loss_sum = 0.0
            correct = 0
            seen = 0
            for idx in batch_iter(len(train_ds), batch_size, rng):
                x, recon_target = prepare_batch(train_ds.images[idx], spec, train=True, rng=rng)
                labels = train_ds.labels[idx]
                caps = model.forward(x)
                recon = model.reconstruct(caps, labels=labels)
                loss = total_loss(
                    margin_loss(caps.activations, one_hot(labels, spec.classes), loss_cfg),
                    reconstruction_loss(recon, recon_target),
                    config.recon_weight,
                )
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergedRunError(f"non-finite loss at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                loss_sum += value * len(idx)
                correct += int((CapsNet.predict_from(caps) == labels).sum())
                seen += len(idx)
            test_acc = evaluate(model, test_ds, batch_size)
            metrics = EpochMetrics(
                epoch, loss_sum / seen, correct / seen, test_acc,
                time.perf_counter() - epoch_started,
            )
            record.epoch_metrics.append(metrics)
            if log:
                log(
                    f"[{record.run_id}] epoch {epoch}/{config.epochs} "
                    f"loss={fmt(metrics.train_loss)} train_acc={fmt(metrics.train_acc)} "
                    f"test_acc={fmt(metrics.test_acc)} ({metrics.seconds:.1f}s)"
                )
    except DivergedRunError as e:
        record.status = "diverged"
        if log:
            log(f"[{record.run_id}] diverged: {e}")
    record.wall_time_s = time.perf_counter() - started

    if out_dir is not None:
        write_run_outputs(record, model, Path(out_dir), save_final_checkpoint)
    return record


def metrics_rows(record: RunRecord):
    for m in record.epoch_metrics:
        yield [str(m.epoch), fmt(m.train_loss), fmt(m.train_acc), fmt(m.test_acc)]


def record_row(record: RunRecord):
    c = record.config
    return [
        record.run_id, c.dataset, c.routing, str(c.depth), str(c.use_skip).lower(),
        str(c.seed), str(c.epochs), str(c.resolved_batch_size()), repr(c.learning_rate),
        repr(c.recon_weight), str(c.routing_iters), str(record.train_size),
        str(record.test_size), record.status,
        fmt(record.final_test_acc) if record.epoch_metrics else "",
        fmt(record.best_test_acc) if record.epoch_metrics else "",
        f"{record.wall_time_s:.3f}",
    ]


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def write_run_outputs(record: RunRecord, model: CapsNet, out_dir: Path, save_ckpt=True):
    run_dir = out_dir / record.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    write_csv(run_dir / "metrics.csv", METRICS_HEADER, metrics_rows(record))
    write_csv(run_dir / "record.csv", RECORD_HEADER, [record_row(record)])
    if save_ckpt:
        save_checkpoint(model, run_dir / "model.ckpt")
    return run_dir
