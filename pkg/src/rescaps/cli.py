"""The rescaps command line: train | eval | sweep | gradcheck | plotdata |
selftest.

Exit codes: 0 success, 2 usage/validation (including missing dataset
files), 3 numerical failure (diverged run, gradient check over tolerance),
4 I/O (malformed files, filesystem errors). Flags override config-file
keys; --data-dir falls back to $RESCAPS_DATA_DIR, then ./data.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .data import DataFormatError, DATASETS
from .gradcheck import MODEL_TOLERANCE, run_model_gradcheck
from .layers import ConfigError, ModelConfig, ROUTINGS, load_checkpoint
from .losses import DivergedRunError
from .sweep import SweepSpec, run_sweep
from .train import evaluate, fmt, run_training

CONFIG_KEYS = {
    "dataset": str, "routing": str, "depth": int, "skip": None, "epochs": int,
    "batch_size": int, "seed": int, "data_dir": str, "out": str, "lr": float,
    "recon_weight": float, "routing_iters": int, "train_limit": int, "test_limit": int,
}


def _err(msg):
    print(f"rescaps: {msg}", file=sys.stderr)


def _parse_bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_config_file(path):
    """Flat key=value lines mirroring the flag names; # starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def _pick(args_value, file_cfg, key, default):
    if args_value is not None:
        return args_value
    if key in file_cfg:
        cast = CONFIG_KEYS[key]
        return _parse_bool(file_cfg[key]) if cast is None else cast(file_cfg[key])
    return default


def _data_dir(flag_value, file_cfg=None):
    if flag_value is not None:
        return flag_value
    if file_cfg and "data_dir" in file_cfg:
        return file_cfg["data_dir"]
    return os.environ.get("RESCAPS_DATA_DIR", "data")


def _parse_int_list(text):
    """Comma list with ranges: '3,5,7-9' -> [3, 5, 7, 8, 9]."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, _, hi = part.partition("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ConfigError(f"empty integer list: {text!r}")
    return out


# -- subcommands ---------------------------------------------------------------


def cmd_train(args):
    file_cfg = parse_config_file(args.config) if args.config else {}
    config = ModelConfig(
        dataset=_pick(args.dataset, file_cfg, "dataset", "mnist"),
        routing=_pick(args.routing, file_cfg, "routing", "rba"),
        depth=_pick(args.depth, file_cfg, "depth", 3),
        use_skip=_pick(args.skip, file_cfg, "skip", False),
        seed=_pick(args.seed, file_cfg, "seed", 0),
        epochs=_pick(args.epochs, file_cfg, "epochs", 30),
        batch_size=_pick(args.batch_size, file_cfg, "batch_size", None),
        learning_rate=_pick(args.lr, file_cfg, "lr", 1e-4),
        recon_weight=_pick(args.recon_weight, file_cfg, "recon_weight", 1e-5),
        routing_iters=_pick(args.routing_iters, file_cfg, "routing_iters", 2),
    ).validate()
    data_dir = _data_dir(args.data_dir, file_cfg)
    out_dir = _pick(args.out, file_cfg, "out", "runs")
    record = run_training(
        config,
        data_dir,
        out_dir=out_dir,
        train_limit=_pick(args.train_limit, file_cfg, "train_limit", None),
        test_limit=_pick(args.test_limit, file_cfg, "test_limit", None),
        save_final_checkpoint=not args.no_checkpoint,
        log=print,
    )
    if record.status == "diverged":
        _err(f"run {record.run_id} diverged; partial record written to {out_dir}")
        return 3
    print(
        f"run {record.run_id}: final_test_acc={fmt(record.final_test_acc)} "
        f"best_test_acc={fmt(record.best_test_acc)} ({record.wall_time_s:.1f}s)"
    )
    return 0


def cmd_eval(args):
    model, config = load_checkpoint(args.checkpoint)
    dataset_name = args.dataset or config.dataset
    if DATASETS[dataset_name].classes != model.classes:
        raise ConfigError(
            f"checkpoint has {model.classes} class capsules but {dataset_name} has "
            f"{DATASETS[dataset_name].classes} classes"
        )
    if DATASETS[dataset_name].channels != model.channels:
        raise ConfigError(
            f"checkpoint expects {model.channels}-channel images but {dataset_name} "
            f"has {DATASETS[dataset_name].channels}"
        )
    from .data import load_dataset

    ds = load_dataset(dataset_name, _data_dir(args.data_dir), args.split, args.limit)
    acc = evaluate(model, ds, config.resolved_batch_size())
    print(f"accuracy={fmt(acc)}")
    return 0


def cmd_sweep(args):
    spec = SweepSpec(
        datasets=[d.strip() for d in args.datasets.split(",") if d.strip()],
        routings=[r.strip() for r in args.routings.split(",") if r.strip()],
        depths=_parse_int_list(args.depths),
        skip=args.skip,
        epochs=args.epochs,
        seeds=_parse_int_list(args.seeds),
        batch_size=args.batch_size,
        train_limit=args.train_limit,
        test_limit=args.test_limit,
        learning_rate=args.lr,
        recon_weight=args.recon_weight,
    )
    summary = run_sweep(spec, _data_dir(args.data_dir), args.out, log=print)
    print(f"summary written to {summary}")
    return 0


def cmd_gradcheck(args):
    routers = list(ROUTINGS) if args.routing == "all" else [args.routing]
    failed = False
    for routing in routers:
        errs = run_model_gradcheck(routing, h=args.h, seed=args.seed)
        worst = max(errs.values())
        print(f"== {routing}: max relative error {worst:.3e} (tolerance {MODEL_TOLERANCE:g})")
        for name, err in sorted(errs.items()):
            marker = "ok " if err < MODEL_TOLERANCE else "FAIL"
            print(f"  [{marker}] {name}: {err:.3e}")
        failed |= worst >= MODEL_TOLERANCE
    return 3 if failed else 0


def cmd_plotdata(args):
    from .report import write_report

    out_dir = args.out or str(Path(args.runs_csv).parent / "report")
    written = write_report(args.runs_csv, out_dir)
    for path in written:
        print(path)
    return 0


def cmd_selftest(_args):
    from . import autodiff as ad
    from .data import load_canonical, save_canonical
    from .layers import FcCapsuleLayer, ResidualBlock
    from .routing import CapsuleTensor, rba_route, sda_route

    checks = []

    def check(name, fn):
        checks.append((name, fn))

    def squash_and_softmax():
        s = ad.Tensor(np.array([[3.0, 0.0, 0.0]]))
        assert abs(np.linalg.norm(ad.squash(s, -1).data) - 0.9) < 1e-6
        sm = ad.softmax(ad.Tensor(np.array([np.log(2.0), 0.0])), axis=0).data
        assert np.allclose(sm, [2 / 3, 1 / 3])

    def coupling_normalization():
        rng = np.random.default_rng(0)
        votes = ad.Tensor(rng.normal(size=(4, 5, 3, 4)))
        bias = ad.Tensor(np.zeros((3, 4)))
        child = CapsuleTensor(
            ad.Tensor(rng.normal(size=(4, 5, 4))),
            ad.Tensor(rng.uniform(0.1, 1, size=(4, 5))),
        )
        for route in (lambda: rba_route(votes, bias, 2, True),
                      lambda: sda_route(child, votes, bias, 2, True)):
            _, state = route()
            for c in state.couplings:
                assert np.allclose(c.sum(axis=2), 1.0, atol=1e-5)

    def residual_identity():
        rng = np.random.default_rng(1)
        for routing in ROUTINGS:
            block = ResidualBlock(
                FcCapsuleLayer(4, 3, 4, 3, routing, 2, rng, np.float32, name="a"),
                FcCapsuleLayer(4, 3, 4, 3, routing, 2, rng, np.float32, name="b"),
            )
            for p in block.parameters().values():
                p.data = np.zeros_like(p.data)
            x = CapsuleTensor(
                ad.Tensor(rng.normal(size=(2, 4, 3)).astype(np.float32)),
                ad.Tensor(rng.uniform(0.1, 1, size=(2, 4)).astype(np.float32)),
            )
            assert np.array_equal(block.forward(x).poses.data, x.poses.data)

    def canonical_roundtrip():
        rng = np.random.default_rng(2)
        with tempfile.TemporaryDirectory() as tmp:
            for arr in (rng.integers(0, 255, size=(3, 5, 5, 1)).astype(np.uint8),
                        rng.normal(size=(4, 2)).astype(np.float32)):
                save_canonical(Path(tmp) / "t.caps", arr)
                back = load_canonical(Path(tmp) / "t.caps")
                assert back.dtype == arr.dtype and np.array_equal(back, arr)

    def tiny_gradcheck():
        errs = run_model_gradcheck("rba")
        assert max(errs.values()) < MODEL_TOLERANCE

    check("squash and softmax closed forms", squash_and_softmax)
    check("coupling normalization", coupling_normalization)
    check("residual zero-block identity", residual_identity)
    check("canonical container round-trip", canonical_roundtrip)
    check("rba finite-difference gradients", tiny_gradcheck)

    failed = 0
    for name, fn in checks:
        try:
            fn()
        except Exception as e:  # report every check before deciding
            print(f"[FAIL] {name}: {e}")
            failed += 1
        else:
            print(f"[PASS] {name}")
    return 3 if failed else 0


# -- parser ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rescaps",
        description="capsule network experiments: routing x depth x skip connections",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--data-dir", help="dataset root (default $RESCAPS_DATA_DIR or ./data)")

    p = sub.add_parser("train", help="train a single model")
    p.add_argument("--dataset", choices=sorted(DATASETS))
    p.add_argument("--routing", choices=ROUTINGS)
    p.add_argument("--depth", type=int)
    p.add_argument("--skip", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--recon-weight", type=float)
    p.add_argument("--routing-iters", type=int)
    p.add_argument("--train-limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--out")
    p.add_argument("--config", help="key=value config file; flags win")
    p.add_argument("--no-checkpoint", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", choices=sorted(DATASETS))
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int)
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a depth sweep grid")
    p.add_argument("--datasets", default="mnist")
    p.add_argument("--routings", default="rba")
    p.add_argument("--depths", default="3-8", help="e.g. 3-8 or 3,5,7")
    p.add_argument("--skip", choices=("on", "off", "both"), default="both")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seeds", default="0")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--recon-weight", type=float, default=1e-5)
    p.add_argument("--train-limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--out", default="runs/sweep")
    add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of tiny models")
    p.add_argument("--routing", choices=ROUTINGS + ("all",), default="all")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plotdata", help="accuracy-vs-depth series and figures from a sweep CSV")
    p.add_argument("runs_csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("selftest", help="quick internal consistency checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        _err(str(e))
        return 2
    except FileNotFoundError as e:
        _err(f"missing file: {e}")
        return 2
    except DivergedRunError as e:
        _err(f"diverged: {e}")
        return 3
    except DataFormatError as e:
        _err(str(e))
        return 4
    except OSError as e:
        _err(str(e))
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
