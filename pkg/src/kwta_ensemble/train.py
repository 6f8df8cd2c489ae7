"""Training loop, validation checkpointing, evaluation and experiment grids."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .data import Dataset, batches, prepare_dataset
from .ensemble import EnsembleModel, Family, backward_for_family, build_model, forward, save_model
from .linalg import PRNG_ALGORITHM, argmax_rows, spawn_rngs
from .nn import cross_entropy
from .optim import PoisonedStateError, SgdConfig, sgd_step

__all__ = [
    "PAPER_SEEDS",
    "PAPER_VARIANTS",
    "PAPER_MS",
    "TrainConfig",
    "RunRecord",
    "FitResult",
    "TrainingDiverged",
    "accuracy",
    "evaluate",
    "per_class_accuracy",
    "fit_ensemble",
    "train_one",
    "grid_configs",
    "run_grid",
    "load_records",
]

log = logging.getLogger(__name__)

PAPER_SEEDS = (42, 1234, 73, 1024, 86400, 31415, 2718, 30, 22, 17)
PAPER_MS = (2, 3, 4, 5)
# (family, competition delay) columns of the comparison tables
PAPER_VARIANTS = (("kwta", 0), ("kwta", 3), ("kwta", 5), ("kwta", 7), ("moe", 0), ("cooperative", 0))
RECORD_SCHEMA_VERSION = 1
EVAL_CHUNK = 5000
N_SAMPLE_OUTPUTS = 3


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    dataset: str = "wdbc"
    family: str = "kwta"
    M: int = 2
    d: int = 0
    k_frac: float = 0.75
    member_output: str = "probs"
    epochs: int = 20
    batch_size: int = 100
    hidden_dim: int = 100
    lr_start: float = 1e-1
    lr_end: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    schedule: str = "exponential"
    seed: int = 42
    split_first: bool = False
    reload_each_epoch: bool = False
    train_limit: int | None = None

    def __post_init__(self):
        self.family = Family(self.family).value
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.d < 0:
            raise ValueError(f"d must be >= 0, got {self.d}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.field_names())
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def sgd_config(self, total_steps: int) -> SgdConfig:
        return SgdConfig(
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            total_steps=max(total_steps, 1),
            schedule=self.schedule,
        )

    @property
    def key(self) -> str:
        return f"{self.dataset}_{self.family}_M{self.M}_d{self.d}_seed{self.seed}"


@dataclass
class FitResult:
    curves: dict[str, list[tuple[int, float]]]
    best_val_epoch: int
    best_val_accuracy: float
    steps: int


@dataclass
class RunRecord:
    config: TrainConfig
    curves: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    best_val_epoch: int = -1
    best_val_accuracy: float | None = None
    test_accuracy: float | None = None
    test_loss: float | None = None
    per_class_subnet_accuracy: list[list[float | None]] | None = None
    sample_outputs: list[dict] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": RECORD_SCHEMA_VERSION,
            "prng": PRNG_ALGORITHM.split("/")[0],
            "config": self.config.to_dict(),
            "curves": {k: [[e, v] for e, v in pts] for k, pts in self.curves.items()},
            "best_val_epoch": self.best_val_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "test_accuracy": self.test_accuracy,
            "test_loss": self.test_loss,
            "per_class_subnet_accuracy": self.per_class_subnet_accuracy,
            "sample_outputs": self.sample_outputs,
            "steps": self.steps,
            "wall_time": self.wall_time,
            "status": self.status,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("schema_version") != RECORD_SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {d.get('schema_version')!r}")
        return cls(
            config=TrainConfig.from_dict(d["config"]),
            curves={k: [(int(e), None if v is None else float(v)) for e, v in pts] for k, pts in d["curves"].items()},
            best_val_epoch=d["best_val_epoch"],
            best_val_accuracy=d["best_val_accuracy"],
            test_accuracy=d["test_accuracy"],
            test_loss=d["test_loss"],
            per_class_subnet_accuracy=d["per_class_subnet_accuracy"],
            sample_outputs=d.get("sample_outputs", []),
            steps=d["steps"],
            wall_time=d["wall_time"],
            status=d["status"],
            error=d["error"],
        )

    @property
    def filename(self) -> str:
        return f"{self.config.key}.json"

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / self.filename
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(self.to_json() + "\n")
        tmp.replace(path)
        return path


# --- metrics ------------------------------------------------------------------------


def accuracy(probs: np.ndarray, labels) -> float:
    """Share of rows whose arg max (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(argmax_rows(probs) == labels))


def _predict_chunks(model: EnsembleModel, x: np.ndarray, current_epoch=None):
    finals, subnets = [], []
    for start in range(0, x.shape[0], EVAL_CHUNK):
        out = forward(model, x[start : start + EVAL_CHUNK], current_epoch)
        finals.append(out.final_probs)
        subnets.append(np.stack(out.subnet_probs))
    if not finals:
        k = model.n_classes
        return np.empty((0, k)), np.empty((model.n_subnets, 0, k))
    return np.concatenate(finals), np.concatenate(subnets, axis=1)


def evaluate(model: EnsembleModel, ds: Dataset, current_epoch: int | None = None) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) of the combined output on ``ds``."""
    if len(ds) == 0:
        return float("nan"), float("nan")
    final, _ = _predict_chunks(model, ds.features, current_epoch)
    return cross_entropy(final, ds.labels), accuracy(final, ds.labels)


def per_class_accuracy(model: EnsembleModel, test: Dataset, current_epoch: int | None = None) -> np.ndarray:
    """Per-class accuracy of every sub-network, plus the full model in the last column.

    Cell ``(c, m)`` is the share of class-``c`` samples that member ``m``
    labels ``c``. Classes without test samples are NaN.
    """
    final, subnet = _predict_chunks(model, test.features, current_epoch)
    preds = [argmax_rows(p) for p in subnet] + [argmax_rows(final)] if len(test) else []
    table = np.full((test.class_count, model.n_subnets + 1), np.nan)
    for c in range(test.class_count):
        rows = test.labels == c
        if not rows.any():
            continue
        for m, pred in enumerate(preds):
            table[c, m] = np.mean(pred[rows] == c)
    return table


# --- training -------------------------------------------------------------------


def fit_ensemble(
    model: EnsembleModel,
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    shuffle_rng: np.random.Generator,
) -> FitResult:
    """Train ``model`` in place and leave it holding the best-validation parameters.

    A snapshot is taken whenever validation accuracy strictly improves. With
    ``config.reload_each_epoch`` the best snapshot is also reloaded at the end
    of every epoch that did not improve on it.
    """
    n_batches = math.ceil(len(train) / config.batch_size)
    sgd = config.sgd_config(config.epochs * n_batches)
    params = model.parameter_sets()
    curves = {k: [] for k in ("train_loss", "train_accuracy", "val_loss", "val_accuracy")}
    best = model.snapshot()
    best_acc, best_epoch = -math.inf, -1
    step = 0

    for epoch in range(config.epochs):
        model.epoch = epoch
        loss_sum, correct = 0.0, 0
        for xb, yb in batches(train, config.batch_size, shuffle_rng):
            out = forward(model, xb, epoch)
            loss = backward_for_family(model, out, yb)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss {loss}", epoch, step)
            try:
                sgd_step(params, sgd, step)
            except PoisonedStateError as exc:
                raise TrainingDiverged(str(exc), epoch, step) from exc
            loss_sum += loss * len(yb)
            correct += int(np.sum(argmax_rows(out.final_probs) == yb))
            step += 1
        curves["train_loss"].append((epoch, loss_sum / len(train)))
        curves["train_accuracy"].append((epoch, correct / len(train)))

        val_loss, val_acc = evaluate(model, val, epoch)
        curves["val_loss"].append((epoch, val_loss))
        curves["val_accuracy"].append((epoch, val_acc))
        # An empty validation set means every epoch counts as the best so far.
        if math.isnan(val_acc) or val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best = model.snapshot()
        elif config.reload_each_epoch:
            model.restore(best)
        log.debug("epoch %d: train_loss=%.4f val_acc=%.4f", epoch, loss_sum / len(train), val_acc)

    model.restore(best)
    return FitResult(curves, best_epoch, best_acc if best_epoch >= 0 else float("nan"), step)


def _nan_to_none(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def _clean_curves(curves):
    return {k: [(e, _nan_to_none(v)) for e, v in pts] for k, pts in curves.items()}


def train_one(config: TrainConfig, data=None, data_dir=None, checkpoint_path=None) -> RunRecord:
    """Train and evaluate one configuration; failures are captured in the record.

    ``data`` is an optional (train, val, test) triple; otherwise the dataset
    is loaded from ``data_dir``. With ``checkpoint_path`` the restored
    best-validation model is also written there.
    """
    started = time.perf_counter()
    record = RunRecord(config=config)
    try:
        if data is None:
            data = prepare_dataset(
                config.dataset,
                data_dir,
                config.seed,
                split_first=config.split_first,
                train_limit=config.train_limit,
            )
        train, val, test = data
        init_rng, shuffle_rng = spawn_rngs(config.seed, 2)
        model = build_model(
            config.family,
            train.dim,
            train.class_count,
            config.M,
            init_rng,
            hidden_dim=config.hidden_dim,
            k_frac=config.k_frac,
            delay_epochs=config.d,
            member_output=config.member_output,
        )
        fit = fit_ensemble(model, train, val, config, shuffle_rng)
        record.curves = _clean_curves(fit.curves)
        record.best_val_epoch = fit.best_val_epoch
        record.best_val_accuracy = _nan_to_none(fit.best_val_accuracy)
        record.steps = fit.steps
        if checkpoint_path is not None:
            save_model(model, checkpoint_path)

        test_loss, test_acc = evaluate(model, test)
        record.test_loss = _nan_to_none(test_loss)
        record.test_accuracy = _nan_to_none(test_acc)
        table = per_class_accuracy(model, test)
        record.per_class_subnet_accuracy = [[_nan_to_none(v) for v in row] for row in table]
        record.sample_outputs = _sample_outputs(model, test)
    except (TrainingDiverged, FloatingPointError) as exc:
        record.status = "failed"
        record.error = str(exc)
        log.warning("run %s failed: %s", config.key, exc)
    record.wall_time = time.perf_counter() - started
    return record


def _sample_outputs(model: EnsembleModel, test: Dataset) -> list[dict]:
    """Per-member and combined probability vectors for the first few test rows."""
    n = min(N_SAMPLE_OUTPUTS, len(test))
    if n == 0:
        return []
    out = forward(model, test.features[:n])
    samples = []
    for i in range(n):
        entry = {
            "index": i,
            "label": int(test.labels[i]),
            "subnet_probs": [p[i].tolist() for p in out.subnet_probs],
            "final_probs": out.final_probs[i].tolist(),
        }
        if out.gate_probs is not None:
            entry["gate_probs"] = out.gate_probs[i].tolist()
        samples.append(entry)
    return samples


# --- grids ------------------------------------------------------------------------


def grid_configs(
    base: TrainConfig,
    variants: Iterable[tuple[str, int]],
    Ms: Iterable[int],
    seeds: Iterable[int],
) -> list[TrainConfig]:
    """Cartesian product of (family, d) variants, sub-network counts and seeds."""
    base_dict = base.to_dict()
    out = []
    for M in Ms:
        for family, d in variants:
            for seed in seeds:
                out.append(TrainConfig.from_dict({**base_dict, "family": family, "d": d, "M": M, "seed": seed}))
    return out


def load_records(records_dir) -> list[RunRecord]:
    records = []
    for path in sorted(Path(records_dir).glob("*.json")):
        try:
            doc = json.loads(path.read_text())
            if not isinstance(doc, dict) or "config" not in doc:
                continue  # e.g. a report written next to the records
            records.append(RunRecord.from_dict(doc))
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("skipping %s: %s", path, exc)
    return records


def _completed(out_dir: Path, config: TrainConfig) -> RunRecord | None:
    path = out_dir / f"{config.key}.json"
    if not path.exists():
        return None
    try:
        rec = RunRecord.from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError, TypeError):
        return None
    if rec.status != "ok" or rec.config != config:
        return None
    return rec


def _grid_worker(config_dict: dict, data_dir) -> dict:
    return train_one(TrainConfig.from_dict(config_dict), data_dir=data_dir).to_dict()


def run_grid(
    configs: list[TrainConfig],
    out_dir,
    data_dir=None,
    jobs: int = 1,
    on_record: Callable[[RunRecord, bool], None] | None = None,
) -> list[RunRecord]:
    """Train every configuration not already completed in ``out_dir``.

    Records are written by this process only, one file per run, as soon as
    each run finishes. ``on_record(record, reused)`` is called for every
    configuration, including ones skipped because their record exists.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, RunRecord] = {}
    pending = []
    for cfg in configs:
        done = _completed(out, cfg)
        if done is not None:
            results[cfg.key] = done
            if on_record:
                on_record(done, True)
        else:
            pending.append(cfg)

    def finish(rec: RunRecord):
        rec.save(out)
        results[rec.config.key] = rec
        if on_record:
            on_record(rec, False)

    if jobs <= 1:
        def data_key(cfg):
            return (cfg.dataset, cfg.seed, cfg.split_first, cfg.train_limit or 0)

        # Splits depend on the seed only, so runs sharing a seed share one loaded copy.
        cache: dict[tuple, tuple] = {}
        for cfg in sorted(pending, key=data_key):
            if data_key(cfg) not in cache:
                cache.clear()
                cache[data_key(cfg)] = prepare_dataset(
                    cfg.dataset, data_dir, cfg.seed, split_first=cfg.split_first, train_limit=cfg.train_limit
                )
            finish(train_one(cfg, data=cache[data_key(cfg)]))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_grid_worker, cfg.to_dict(), data_dir) for cfg in pending]
            for fut in as_completed(futures):
                finish(RunRecord.from_dict(fut.result()))

    return [results[cfg.key] for cfg in configs]
