"""Command-line driver: ``kercnn {train,eval,sweep,kernel,corrupt,summarize}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corruptions import KINDS, CorruptionSpec, corrupt_batch
from .data import REGISTRY, Dataset, load_dataset, save_idx_dataset, split_train_val, take, zscore_fit_apply
from .experiments import SweepConfig, format_summary, read_records, run_sweep, summarize, write_summary
from .lateral import lateral_kernel, propagate_kernel, save_kernel
from .models import count_parameters, load_checkpoint, mnist_cnn, mnist_kercnn, mnist_reccnn, save_checkpoint
from .train import TrainConfig, evaluate, train, write_log_csv

log = logging.getLogger("kercnn")


class CliError(Exception):
    pass


def _model_config(args):
    if args.variant == "cnn":
        return mnist_cnn()
    if args.variant == "kercnn":
        return mnist_kercnn(args.t1, args.t2)
    return mnist_reccnn(args.rec_steps, args.rec_layer - 1)


def _normalized(ds: Dataset, meta: dict) -> Dataset:
    stats = meta.get("stats")
    if not stats:
        raise CliError("checkpoint carries no normalization statistics")
    mean, std = (np.asarray(s) for s in stats)
    return ds.replace(images=(ds.images - mean) / std, stats=(mean, std))


def cmd_train(args) -> int:
    config = _model_config(args)
    full = load_dataset(args.dataset, "train", args.data)
    tr, va = split_train_val(full, args.val_count, args.seed)
    tr = take(tr, args.train_subset, args.seed)
    va = take(va, args.val_subset, args.seed)
    tr, (va,), stats = zscore_fit_apply(tr, [va])
    cfg = TrainConfig(max_epochs=args.epochs, patience=args.patience, seed=args.seed, dtype=args.dtype)
    log.info("training %s (%d parameters) on %d images", config.tag(), count_parameters(config), len(tr))
    state, history = train(cfg, config, tr, va if len(va) else None,
                           progress=lambda r: print(f"epoch {r.epoch}: loss {r.train_loss:.4f} "
                                                    f"train {r.train_acc:.4f} val {r.val_acc:.4f}", flush=True))
    meta = {"dataset": args.dataset, "seed": args.seed, "stats": [np.asarray(s).tolist() for s in stats],
            "best_epoch": history.best_epoch, "stop_epoch": history.stop_epoch, "diverged": history.diverged}
    save_checkpoint(args.out, state, config, meta)
    if args.log:
        write_log_csv(args.log, history)
    print(f"saved {args.out} (best epoch {history.best_epoch})")
    return 0


def _spec(args) -> CorruptionSpec:
    severity = {"none": 0.0, "patches": args.gamma, "strips": args.shift, "fgsm": args.eps}[args.corrupt]
    if severity is None:
        flag = {"patches": "--gamma", "strips": "--shift", "fgsm": "--eps"}[args.corrupt]
        raise CliError(f"--corrupt {args.corrupt} needs {flag}")
    return CorruptionSpec(args.corrupt, float(severity), args.patch_count, args.thickness, args.seed)


def cmd_eval(args) -> int:
    state, config, meta = load_checkpoint(args.ckpt)
    if args.t1 is not None or args.t2 is not None:
        if config.variant not in ("cnn", "kercnn"):
            raise CliError("stopping times only apply to cnn/kercnn checkpoints")
        times = (args.t1 or config.stopping_times[0], args.t2 or config.stopping_times[1])
        config = mnist_kercnn(*times)
    test = _normalized(take(load_dataset(meta.get("dataset", args.dataset), "test", args.data), args.test_subset), meta)
    dtype = np.dtype(args.dtype).type
    res = evaluate(state.astype(dtype), config, test, _spec(args), dtype=dtype)
    print(f"{config.tag()} {args.corrupt} accuracy {res.accuracy!r} ({res.correct}/{res.total})")
    if args.confusion:
        np.savetxt(args.confusion, res.confusion, fmt="%d", delimiter=",")
    return 0


def cmd_sweep(args) -> int:
    cfg = SweepConfig.load(args.config)
    records = run_sweep(cfg, args.out, workers=args.workers,
                        progress=lambda r: print(f"{r.variant}({r.T1},{r.T2}) seed {r.seed} {r.kind} "
                                                 f"{r.severity:g}: {r.accuracy:.4f}", flush=True))
    print(f"{len(records)} records in {args.out}")
    return 0


def cmd_summarize(args) -> int:
    records = read_records(args.results)
    if not records:
        raise CliError(f"{args.results} holds no records")
    rows = summarize(records)
    print(format_summary(rows))
    if args.out:
        write_summary(args.out, rows)
    if args.figures:
        from .plotting import render_report

        for path in render_report(records, args.figures):
            print(f"wrote {path}")
    return 0


def cmd_kernel(args) -> int:
    state, config, _ = load_checkpoint(args.ckpt)
    name = f"conv{args.layer}.w"
    if name not in state.params:
        raise CliError(f"checkpoint has no layer {args.layer}")
    kernel = lateral_kernel(state[name], args.layer)
    mass = kernel.values.data.sum(axis=(0, 1, 3))
    if not np.allclose(mass, 1.0, atol=1e-6):
        raise CliError(f"kernel mass check failed: {mass}")
    values = kernel.values.data if args.steps == 1 else propagate_kernel(kernel, args.steps)
    out = Path(args.out)
    if out.suffix.lower() in (".bin", ".ker"):
        save_kernel(out, values)
    else:
        from .plotting import save_montage

        save_montage(values, out, args.feature, title=f"layer {args.layer}, {args.steps} step(s)")
    print(f"wrote {out} {tuple(values.shape)}")
    return 0


def cmd_corrupt(args) -> int:
    spec = _spec(args)
    raw = take(load_dataset(args.dataset, args.split, args.data), args.count)
    state = config = None
    if spec.kind == "fgsm":
        if not args.ckpt:
            raise CliError("fgsm needs --ckpt")
        state, config, meta = load_checkpoint(args.ckpt)
        ds = _normalized(raw, meta)
    else:
        # patches and strips commute with z-scoring, so raw pixels are fine
        ds = raw
    images = corrupt_batch(ds.images, ds.labels, spec, np.arange(len(ds)), state, config)
    save_idx_dataset(args.images, args.labels, ds.replace(images=images), as_bytes=not args.float)
    print(f"wrote {len(ds)} corrupted images to {args.images}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kercnn", description="KerCNN experiments on MNIST-family data")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--seed", type=int, default=0)
        if data:
            sp.add_argument("--data", help="data root (default: $KERCNN_DATA or ./data)")
            sp.add_argument("--dataset", default="mnist", choices=sorted(REGISTRY))

    def corruption(sp):
        sp.add_argument("--corrupt", default="none", choices=KINDS)
        sp.add_argument("--gamma", type=float, help="patch std in pixels")
        sp.add_argument("--shift", type=int, help="max strip shift D in pixels")
        sp.add_argument("--eps", type=float, help="FGSM step")
        sp.add_argument("--patch-count", type=int, default=4)
        sp.add_argument("--thickness", type=int, default=2)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--variant", default="cnn", choices=("cnn", "kercnn", "reccnn"))
    sp.add_argument("--t1", type=int, default=1)
    sp.add_argument("--t2", type=int, default=1)
    sp.add_argument("--rec-steps", type=int, default=2)
    sp.add_argument("--rec-layer", type=int, default=1, choices=(1, 2))
    sp.add_argument("--epochs", type=int, default=15)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--train-subset", type=int, default=10000)
    sp.add_argument("--val-count", type=int, default=10000)
    sp.add_argument("--val-subset", type=int, default=2000)
    sp.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="per-epoch CSV log")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint under one corruption")
    common(sp)
    corruption(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--t1", type=int, help="override stopping time of layer 1")
    sp.add_argument("--t2", type=int, help="override stopping time of layer 2")
    sp.add_argument("--test-subset", type=int, default=2000)
    sp.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    sp.add_argument("--confusion", help="write the confusion matrix as CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train and evaluate a grid from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True, help="results CSV (appended, resumable)")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0, help="unused; sweep seeds come from the config")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("summarize", help="base vs best architecture per corruption level")
    sp.add_argument("--results", required=True)
    sp.add_argument("--out", help="summary CSV")
    sp.add_argument("--figures", help="directory for report figures")
    sp.add_argument("--seed", type=int, default=0, help="unused; summaries are deterministic")
    sp.set_defaults(func=cmd_summarize)

    sp = sub.add_parser("kernel", help="export a lateral kernel or its n-step propagation")
    common(sp, data=False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--layer", type=int, default=1, help="1-based layer index")
    sp.add_argument("--steps", type=int, default=1)
    sp.add_argument("--feature", type=int, help="only the slices of this source feature")
    sp.add_argument("--out", required=True, help=".png/.pgm montage or .bin dump")
    sp.set_defaults(func=cmd_kernel)

    sp = sub.add_parser("corrupt", help="write a corrupted copy of a split as IDX")
    common(sp)
    corruption(sp)
    sp.add_argument("--split", default="test", choices=("train", "test"))
    sp.add_argument("--count", type=int, help="first N images only")
    sp.add_argument("--ckpt", help="model to attack (fgsm)")
    sp.add_argument("--float", action="store_true", help="store float32 pixels instead of bytes")
    sp.add_argument("--images", required=True)
    sp.add_argument("--labels", required=True)
    sp.set_defaults(func=cmd_corrupt)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, FileNotFoundError, ad.NonFiniteError) as exc:
        print(f"kercnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
