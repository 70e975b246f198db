"""Sweeps over architectures, seeds and corruptions, and their summaries.

A sweep trains one model per (variant, stopping times, seed) cell, caches
its checkpoint, and evaluates it on every corruption in the grid. Records
are appended to a CSV as they are produced; each carries a digest of the
full configuration that produced it, so rerunning an interrupted sweep
skips everything already on disk.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corruptions import KINDS, CorruptionSpec
from .data import Dataset, load_dataset, split_train_val, take, zscore_fit_apply
from .models import ModelConfig, load_checkpoint, mnist_cnn, mnist_kercnn, mnist_reccnn, save_checkpoint
from .train import TrainConfig, evaluate, train, write_log_csv

__all__ = [
    "SweepConfig",
    "ExperimentRecord",
    "SummaryRow",
    "CSV_FIELDS",
    "prepare_data",
    "sweep_cells",
    "run_sweep",
    "model_checkpoint",
    "read_records",
    "write_records",
    "summarize",
    "write_summary",
    "format_summary",
    "mean_ci",
]

log = logging.getLogger(__name__)

CSV_FIELDS = ["variant", "T1", "T2", "kind", "severity", "seed", "accuracy", "n", "digest", "timestamp"]


@dataclass(frozen=True)
class SweepConfig:
    """Everything that determines a sweep's numbers.

    ``corruptions`` maps a kind to its severity list; ``none`` needs no
    severities. ``stopping_times`` applies to ``kercnn``, ``rec_steps`` to
    ``reccnn``; ``cnn`` is a single architecture.
    """

    dataset: str = "mnist"
    variants: tuple[str, ...] = ("cnn", "kercnn")
    stopping_times: tuple[tuple[int, int], ...] = ((1, 1), (3, 2))
    rec_steps: tuple[int, ...] = (2,)
    rec_layer: int = 0
    corruptions: dict = field(default_factory=lambda: {"none": [0], "patches": [15]})
    seeds: tuple[int, ...] = (0, 1, 2)
    train_subset: int | None = 10000
    val_count: int = 10000
    val_subset: int | None = 2000
    test_subset: int | None = 2000
    data_seed: int = 0
    max_epochs: int = 15
    patience: int = 10
    batch_size: int = 50
    dtype: str = "float32"
    eval_batch: int = 500

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "stopping_times", tuple(tuple(int(t) for t in ts) for ts in self.stopping_times))
        object.__setattr__(self, "rec_steps", tuple(int(t) for t in self.rec_steps))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        grid = {}
        for kind, sev in dict(self.corruptions).items():
            if kind not in KINDS:
                raise ValueError(f"unknown corruption kind {kind!r}")
            grid[kind] = [0.0] if kind == "none" else [float(s) for s in sev]
        object.__setattr__(self, "corruptions", grid)
        if not self.variants or not self.seeds or not any(self.corruptions.values()):
            raise ValueError("variants, seeds and the corruption grid must be non-empty")
        if "kercnn" in self.variants and not self.stopping_times:
            raise ValueError("kercnn needs at least one stopping-time pair")
        if "reccnn" in self.variants and not self.rec_steps:
            raise ValueError("reccnn needs at least one time-step count")
        for v in self.variants:
            if v not in ("cnn", "kercnn", "reccnn"):
                raise ValueError(f"unknown variant {v!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sweep config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SweepConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs, batch_size=self.batch_size, patience=self.patience,
            seed=seed, dtype=self.dtype,
        )

    def specs(self, seed: int) -> list[CorruptionSpec]:
        # perturbations vary with the model seed, one derived seed per image
        return [CorruptionSpec(kind, sev, seed=seed) for kind, sevs in self.corruptions.items() for sev in sevs]


@dataclass(frozen=True)
class ExperimentRecord:
    variant: str
    T1: int
    T2: int
    kind: str
    severity: float
    seed: int
    accuracy: float
    n: int
    digest: str = ""
    timestamp: str = ""

    def key(self) -> tuple:
        return (self.variant, self.T1, self.T2, self.kind, self.severity, self.seed)


def _digest(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# ----------------------------------------------------------------- cells


@dataclass(frozen=True)
class _Cell:
    variant: str
    times: tuple[int, int]
    seed: int
    model: ModelConfig

    @property
    def trained_as(self) -> ModelConfig:
        # KerCNN with every stopping time at 1 is the base CNN; share its model
        if self.variant == "kercnn" and set(self.times) == {1}:
            return mnist_cnn()
        return self.model


def sweep_cells(cfg: SweepConfig) -> list[_Cell]:
    cells = []
    for seed in cfg.seeds:
        for variant in cfg.variants:
            if variant == "cnn":
                cells.append(_Cell("cnn", (1, 1), seed, mnist_cnn()))
            elif variant == "kercnn":
                cells += [_Cell("kercnn", (t1, t2), seed, mnist_kercnn(t1, t2)) for t1, t2 in cfg.stopping_times]
            else:
                cells += [
                    _Cell("reccnn", (t, 0), seed, mnist_reccnn(t, cfg.rec_layer)) for t in cfg.rec_steps
                ]
    return cells


def _data_key(cfg: SweepConfig) -> dict:
    return {k: getattr(cfg, k) for k in ("dataset", "train_subset", "val_count", "val_subset", "test_subset", "data_seed")}


def _model_digest(cfg: SweepConfig, cell: _Cell) -> str:
    return _digest({
        "data": _data_key(cfg), "model": cell.trained_as.to_dict(), "train": cfg.train_config(cell.seed).to_dict(),
    })


def _record_digest(cfg: SweepConfig, cell: _Cell, spec: CorruptionSpec) -> str:
    return _digest({
        "model": _model_digest(cfg, cell), "eval": cell.model.to_dict(), "spec": spec.to_dict(),
        "eval_batch": cfg.eval_batch,
    })


def prepare_data(cfg: SweepConfig, root=None) -> tuple[Dataset, Dataset, Dataset]:
    """Train/val/test splits at sweep scale, z-scored with training statistics."""
    full = load_dataset(cfg.dataset, "train", root)
    test = load_dataset(cfg.dataset, "test", root)
    train_ds, val_ds = split_train_val(full, cfg.val_count, cfg.data_seed)
    train_ds = take(train_ds, cfg.train_subset, cfg.data_seed)
    val_ds = take(val_ds, cfg.val_subset, cfg.data_seed)
    test = take(test, cfg.test_subset)
    train_ds, (val_ds, test), _ = zscore_fit_apply(train_ds, [val_ds, test])
    return train_ds, val_ds, test


# ----------------------------------------------------------------- sweep


def _run_cell(cfg: SweepConfig, cell: _Cell, missing: list[CorruptionSpec], out_dir: str, data) -> list[ExperimentRecord]:
    train_ds, val_ds, test = data if data is not None else prepare_data(cfg)
    dtype = np.dtype(cfg.dtype).type
    ckpt = Path(out_dir) / "models" / f"{_model_digest(cfg, cell)}.ckpt"
    if ckpt.exists():
        state, _, _ = load_checkpoint(ckpt)
    else:
        t0 = time.perf_counter()
        state, history = train(cfg.train_config(cell.seed), cell.trained_as, train_ds, val_ds)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        meta = {"seed": cell.seed, "best_epoch": history.best_epoch, "stop_epoch": history.stop_epoch,
                "diverged": history.diverged, "seconds": time.perf_counter() - t0, "stats": _stats(train_ds)}
        tmp = ckpt.with_name(ckpt.name + ".part")
        save_checkpoint(tmp, state, cell.trained_as, meta)
        os.replace(tmp, ckpt)
        os.replace(tmp.with_name(tmp.name + ".txt"), ckpt.with_name(ckpt.name + ".txt"))
        write_log_csv(ckpt.with_suffix(".log.csv"), history)
    # evaluate from the stored precision so resumed runs see identical weights
    state = state.astype(dtype)
    records = []
    for spec in missing:
        res = evaluate(state, cell.model, test, spec, cfg.eval_batch, dtype)
        records.append(ExperimentRecord(
            cell.variant, cell.times[0], cell.times[1], spec.kind, spec.severity, cell.seed,
            res.accuracy, res.total, _record_digest(cfg, cell, spec),
            time.strftime("%Y-%m-%dT%H:%M:%S"),
        ))
    return records


def _stats(ds: Dataset) -> list:
    if ds.stats is None:
        return []
    return [np.asarray(s).tolist() for s in ds.stats]


def run_sweep(cfg: SweepConfig, out_csv, workers: int = 1, data=None, progress=None) -> list[ExperimentRecord]:
    """Run (or resume) a sweep, appending records to ``out_csv``.

    Trained models are cached under ``<out_csv stem>_cache/models/``; a JSON sidecar
    holds the sweep config. Returns every record of this sweep, old and new,
    in grid order.
    """
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_dir = out_csv.with_name(out_csv.stem + "_cache")
    out_csv.with_suffix(".json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    done = {r.digest: r for r in read_records(out_csv)} if out_csv.exists() else {}

    jobs = []
    for cell in sweep_cells(cfg):
        missing = [s for s in cfg.specs(cell.seed) if _record_digest(cfg, cell, s) not in done]
        if missing:
            jobs.append((cell, missing))
    log.info("%d of %d cells need work", len(jobs), len(sweep_cells(cfg)))

    def _store(records):
        write_records(out_csv, records, append=True)
        for r in records:
            done[r.digest] = r
            if progress is not None:
                progress(r)

    if jobs and data is None and workers <= 1:
        data = prepare_data(cfg)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, cfg, cell, missing, str(out_dir), data) for cell, missing in jobs]
            for fut in futures:
                _store(fut.result())
    else:
        for cell, missing in jobs:
            _store(_run_cell(cfg, cell, missing, str(out_dir), data))

    ordered = []
    for cell in sweep_cells(cfg):
        ordered += [done[_record_digest(cfg, cell, s)] for s in cfg.specs(cell.seed)]
    return ordered


def model_checkpoint(cfg: SweepConfig, out_csv, variant: str, times=(1, 1), seed: int = 0) -> Path:
    """Where ``run_sweep`` caches the model of one grid cell."""
    for cell in sweep_cells(cfg):
        if (cell.variant, cell.times, cell.seed) == (variant, tuple(times), seed):
            out_csv = Path(out_csv)
            return out_csv.with_name(out_csv.stem + "_cache") / "models" / f"{_model_digest(cfg, cell)}.ckpt"
    raise KeyError(f"no cell {variant}{tuple(times)} seed {seed} in this sweep")


def write_records(path, records, append: bool = False) -> None:
    path = Path(path)
    fresh = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_FIELDS)
        for r in records:
            # repr keeps every bit of the float
            writer.writerow([r.variant, r.T1, r.T2, r.kind, repr(float(r.severity)), r.seed,
                             repr(float(r.accuracy)), r.n, r.digest, r.timestamp])


def read_records(path) -> list[ExperimentRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_FIELDS[:8]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            ExperimentRecord(
                row["variant"], int(row["T1"]), int(row["T2"]), row["kind"], float(row["severity"]),
                int(row["seed"]), float(row["accuracy"]), int(row["n"]), row.get("digest", ""), row.get("timestamp", ""),
            )
            for row in reader
        ]


# --------------------------------------------------------------- summary


@dataclass(frozen=True)
class SummaryRow:
    kind: str
    severity: float
    base: str
    base_accuracy: float
    base_ci: float
    best: str
    best_T: tuple[int, int]
    best_accuracy: float
    best_ci: float
    difference: float
    seeds: int


def mean_ci(values) -> tuple[float, float]:
    """Mean and half-width of the 95% normal-approximation interval."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.959963984540054 * v.std(ddof=1) / np.sqrt(v.size))


def _arch(r: ExperimentRecord) -> tuple[str, int, int]:
    # the base CNN and KerCNN(1, 1) are one architecture
    if r.variant == "kercnn" and (r.T1, r.T2) == (1, 1):
        return ("cnn", 1, 1)
    return (r.variant, r.T1, r.T2)


def _label(arch) -> str:
    v, t1, t2 = arch
    if v == "cnn":
        return "cnn"
    return f"kercnn({t1},{t2})" if v == "kercnn" else f"reccnn(T={t1})"


def summarize(records) -> list[SummaryRow]:
    """Base model against the best architecture for every (kind, severity).

    Accuracies are averaged over seeds per architecture; the best is the
    highest mean, ties going to the smaller ``T1 + T2``. The base is the CNN
    when present, else the architecture with the smallest stopping times.
    """
    groups: dict[tuple, dict[tuple, dict[int, float]]] = defaultdict(lambda: defaultdict(dict))
    for r in records:
        # duplicate rows for one seed (cnn and kercnn(1,1)) are the same model
        groups[(r.kind, r.severity)][_arch(r)][r.seed] = r.accuracy
    rows = []
    for (kind, sev) in sorted(groups, key=lambda k: (KINDS.index(k[0]), k[1])):
        archs = groups[(kind, sev)]
        stats = {a: mean_ci([acc for _, acc in sorted(s.items())]) for a, s in archs.items()}
        order = sorted(archs, key=lambda a: (a[0] != "cnn", a[1] + a[2], a))
        base = order[0]
        best = min(order, key=lambda a: (-stats[a][0], a[1] + a[2], a[0] != "cnn", a))
        rows.append(SummaryRow(
            kind, sev, _label(base), stats[base][0], stats[base][1], _label(best), (best[1], best[2]),
            stats[best][0], stats[best][1], stats[best][0] - stats[base][0], len(archs[best]),
        ))
    return rows


def write_summary(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "severity", "base", "baseAcc", "baseCI", "best", "bestT1", "bestT2",
                         "bestAcc", "bestCI", "difference", "seeds"])
        for r in rows:
            writer.writerow([r.kind, f"{r.severity:g}", r.base, f"{r.base_accuracy:.4f}", f"{r.base_ci:.4f}",
                             r.best, r.best_T[0], r.best_T[1], f"{r.best_accuracy:.4f}", f"{r.best_ci:.4f}",
                             f"{r.difference:+.4f}", r.seeds])


def format_summary(rows) -> str:
    lines = [f"{'kind':<8} {'sev':>5}  {'base':>15}  {'best':>22}  {'diff':>8}"]
    for r in rows:
        lines.append(
            f"{r.kind:<8} {r.severity:>5g}  {100 * r.base_accuracy:6.2f}% ±{100 * r.base_ci:5.2f}  "
            f"{r.best:>13} {100 * r.best_accuracy:6.2f}%  {100 * r.difference:+7.2f}"
        )
    return "\n".join(lines)
