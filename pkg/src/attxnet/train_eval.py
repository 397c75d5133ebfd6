"""Optimizers, the training loop, leave-one-subject-out evaluation, metrics and
the connection-type x stage sweep.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import hashlib
import io
import json
import logging
import math
import multiprocessing
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attx import ConnectionType, TYPE_I, TYPE_II, TYPE_III, format_stages
from .errors import ConfigurationError, NumericalError
from .model import Model, PipelineConfig, build_pipeline, loss_for

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# optimizers


class Optimizer:
    def __init__(self, params: Sequence[nx.Tensor]):
        self.params = list(params)
        self.steps = 0

    def zero_grad(self) -> None:
        nx.zero_grad(self.params)

    def _grads(self, grads):
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ConfigurationError(f"{len(grads)} gradients for {len(self.params)} parameters")
        out = []
        for p, g in zip(self.params, grads):
            if g is None:
                g = np.zeros_like(p.data)
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ConfigurationError(f"gradient shape {g.shape} does not match parameter {p.name!r} {p.shape}")
            out.append(g)
        return out

    def step(self, grads=None) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict:
        raise NotImplementedError


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        grads = self._grads(grads)
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


class AdaDelta(Optimizer):
    """Accumulates raw updates (before ``lr`` scaling) in the delta average."""

    def __init__(self, params, lr: float = 5e-3, rho: float = 0.95, eps: float = 1e-6):
        super().__init__(params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.acc_grad = [np.zeros_like(p.data) for p in self.params]
        self.acc_delta = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        grads = self._grads(grads)
        self.steps += 1
        for p, g, eg, ed in zip(self.params, grads, self.acc_grad, self.acc_delta):
            eg *= self.rho
            eg += (1.0 - self.rho) * g * g
            update = np.sqrt(ed + self.eps) / np.sqrt(eg + self.eps) * g
            ed *= self.rho
            ed += (1.0 - self.rho) * update * update
            p.data = p.data - self.lr * update

    def state_dict(self) -> dict:
        return {"kind": "adadelta", "lr": self.lr, "rho": self.rho, "eps": self.eps}


OPTIMIZERS = {"adam": Adam, "adadelta": AdaDelta}


def make_optimizer(kind: str, params, lr: float | None = None) -> Optimizer:
    try:
        cls = OPTIMIZERS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown optimizer {kind!r}; expected one of {sorted(OPTIMIZERS)}") from None
    return cls(params) if lr is None else cls(params, lr=lr)


# --------------------------------------------------------------------------
# metrics


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    predictions, labels = np.asarray(predictions, dtype=int), np.asarray(labels, dtype=int)
    if predictions.shape != labels.shape:
        raise ConfigurationError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    cm = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def metrics(predictions, labels, num_classes: int) -> tuple[float, float, np.ndarray]:
    """Accuracy, macro-F1 and confusion matrix.

    A class with ``P + R = 0`` scores F1 = 0 and still counts in the macro
    average, including classes absent from both truth and predictions.
    """
    cm = confusion_matrix(predictions, labels, num_classes)
    total = cm.sum()
    accuracy = float(np.trace(cm) / total) if total else 0.0
    f1 = []
    for k in range(num_classes):
        tp = cm[k, k]
        pred, true = cm[:, k].sum(), cm[k, :].sum()
        precision = tp / pred if pred else 0.0
        recall = tp / true if true else 0.0
        f1.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
    return accuracy, float(np.mean(f1)), cm


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    optimizer: str = "adam"
    lr: float | None = None
    val_fraction: float = 0.2
    selection: str = "best"  # best validation loss, or "last"
    patience: int | None = None
    target_train_accuracy: float | None = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}; expected one of {sorted(OPTIMIZERS)}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.selection not in ("best", "last"):
            raise ConfigurationError(f"selection must be 'best' or 'last', got {self.selection!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)  # one dict per epoch
    best_epoch: int | None = None
    train_subjects: list = field(default_factory=list)
    val_subjects: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def split_validation(subjects: Sequence[str], fraction: float, seed: int) -> tuple[list, list]:
    """Hold out ``round(fraction * n)`` (at least one) whole subjects for validation."""
    subjects = sorted(set(subjects))
    if fraction <= 0 or len(subjects) < 2:
        return subjects, []
    n_val = min(len(subjects) - 1, max(1, int(round(fraction * len(subjects)))))
    order = np.random.default_rng(seed).permutation(len(subjects))
    val = sorted(subjects[i] for i in order[:n_val])
    return [s for s in subjects if s not in val], val


def _batches(inputs, idx, batch_size):
    for start in range(0, len(idx), batch_size):
        b = idx[start : start + batch_size]
        yield start // batch_size, b, [x[b] for x in inputs]


def evaluate_loss(model: Model, inputs, labels, batch_size: int = 256) -> float:
    loss_fn = loss_for(model.config)
    total = 0.0
    with nx.no_grad():
        for _, b, xs in _batches(inputs, np.arange(len(labels)), batch_size):
            total += loss_fn(model.forward(xs, "eval"), labels[b]).item() * len(b)
    return total / len(labels)


def predict(model: Model, inputs, batch_size: int = 256) -> np.ndarray:
    out = []
    with nx.no_grad():
        for _, _, xs in _batches(inputs, np.arange(inputs[0].shape[0]), batch_size):
            out.append(model.forward(xs, "eval").data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def _nan_diagnostics(model: Model, epoch: int, batch: int, what: str) -> NumericalError:
    for name, p in model.named_parameters().items():
        if not np.all(np.isfinite(p.data)):
            culprit = f"parameter {name!r} holds non-finite values"
            break
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            culprit = f"gradient of {name!r} is non-finite"
            break
    else:
        culprit = "no parameter is non-finite; the loss itself overflowed"
    return NumericalError(f"non-finite {what} at epoch {epoch}, batch {batch}: {culprit}")


def train(model: Model, dataset, cfg: TrainConfig | None = None, optimizer: Optimizer | None = None) -> TrainResult:
    """Mini-batch training with subject-level validation.

    The model is updated in place. With ``selection="best"`` and a
    validation split, the parameters from the epoch with the lowest
    validation loss are restored at the end.
    """
    cfg = (cfg or TrainConfig()).validate()
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    train_subj, val_subj = split_validation(dataset.subjects, cfg.val_fraction, cfg.seed)
    subj = dataset.subject_ids
    tr_idx = np.flatnonzero(np.isin(subj, train_subj))
    va_idx = np.flatnonzero(np.isin(subj, val_subj))
    inputs = dataset.arrays(model.config.modalities)
    labels = dataset.labels
    tr_inputs, tr_labels = [x[tr_idx] for x in inputs], labels[tr_idx]
    va_inputs, va_labels = [x[va_idx] for x in inputs], labels[va_idx]

    result = TrainResult(model, train_subjects=train_subj, val_subjects=val_subj)
    if cfg.epochs == 0:
        return result
    params = model.parameters()
    opt = optimizer or make_optimizer(cfg.optimizer, params, cfg.lr)
    loss_fn = loss_for(model.config)
    rng = np.random.default_rng(cfg.seed)
    best_val, best_state, stale = np.inf, None, 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tr_labels))
        total = 0.0
        for batch, b, xs in _batches(tr_inputs, order, cfg.batch_size):
            opt.zero_grad()
            loss = loss_fn(model.forward(xs, "train"), tr_labels[b])
            value = float(loss.data)
            if not np.isfinite(value):
                raise _nan_diagnostics(model, epoch, batch, "loss")
            nx.backward(loss)
            opt.step()
            for p in params:
                if not np.all(np.isfinite(p.data)):
                    raise _nan_diagnostics(model, epoch, batch, "parameter update")
            total += value * len(b)
        entry = {"epoch": epoch, "loss": total / len(tr_labels)}
        if len(va_labels):
            entry["val_loss"] = evaluate_loss(model, va_inputs, va_labels, cfg.batch_size)
        if cfg.target_train_accuracy is not None:
            entry["train_accuracy"] = float(np.mean(predict(model, tr_inputs, cfg.batch_size) == tr_labels))
        result.history.append(entry)
        log.debug("epoch %d %s", epoch, entry)

        if "val_loss" in entry:
            if entry["val_loss"] < best_val:
                best_val, stale = entry["val_loss"], 0
                result.best_epoch = epoch
                if cfg.selection == "best":
                    best_state = model.snapshot()
            else:
                stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
        if cfg.target_train_accuracy is not None and entry["train_accuracy"] >= cfg.target_train_accuracy:
            break

    if best_state is not None:
        model.load_state_arrays(best_state)
    elif cfg.selection == "last" or not len(va_labels):
        result.best_epoch = len(result.history)
    return result


# --------------------------------------------------------------------------
# leave-one-subject-out


@dataclass
class FoldResult:
    subject: str
    n_test: int
    accuracy: float
    macro_f1: float
    confusion: np.ndarray
    train_subjects: list
    val_subjects: list
    epochs_run: int
    best_epoch: int | None


@dataclass
class EvalReport:
    folds: list
    fingerprint: str
    config: dict
    skipped: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def accuracy(self) -> float:
        return math.fsum(f.accuracy for f in self.folds) / len(self.folds) if self.folds else float("nan")

    @property
    def macro_f1(self) -> float:
        return math.fsum(f.macro_f1 for f in self.folds) / len(self.folds) if self.folds else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "subject", "n_test", "accuracy", "macro_f1"])
        for k, f in enumerate(self.folds, 1):
            w.writerow([k, f.subject, f.n_test, repr(f.accuracy), repr(f.macro_f1)])
        w.writerow(["mean", "", sum(f.n_test for f in self.folds), repr(self.accuracy), repr(self.macro_f1)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "config": self.config,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "skipped": self.skipped,
            "seconds": self.seconds,
            "folds": [
                {
                    "subject": f.subject,
                    "n_test": f.n_test,
                    "accuracy": f.accuracy,
                    "macro_f1": f.macro_f1,
                    "confusion": f.confusion.tolist(),
                    "train_subjects": f.train_subjects,
                    "val_subjects": f.val_subjects,
                    "epochs_run": f.epochs_run,
                    "best_epoch": f.best_epoch,
                }
                for f in self.folds
            ],
        }


def fingerprint(config: PipelineConfig, train_cfg: TrainConfig, dataset) -> str:
    blob = json.dumps(
        {"pipeline": config.to_dict(), "train": train_cfg.to_dict(), "data": dataset.fingerprint()}, sort_keys=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def loso_folds(dataset, subjects: Sequence[str] | None = None):
    """Yield ``(subject, train_indices, test_indices)`` per held-out subject."""
    subj = dataset.subject_ids
    for s in subjects if subjects is not None else dataset.subjects:
        test = np.flatnonzero(subj == s)
        train_idx = np.flatnonzero(subj != s)
        yield s, train_idx, test


def _run_fold(config: PipelineConfig, train_cfg: TrainConfig, dataset, subject, train_idx, test_idx) -> FoldResult:
    assert not set(train_idx) & set(test_idx), f"fold {subject}: train and test overlap"
    train_set = dataset.subset(train_idx)
    test_set = dataset.subset(test_idx)
    assert subject not in train_set.subjects
    model = build_pipeline(config)
    res = train(model, train_set, train_cfg)
    assert subject not in res.val_subjects and subject not in res.train_subjects
    preds = predict(model, test_set.arrays(config.modalities), train_cfg.batch_size)
    acc, f1, cm = metrics(preds, test_set.labels, config.num_classes)
    return FoldResult(subject, len(test_idx), acc, f1, cm, res.train_subjects, res.val_subjects, len(res.history), res.best_epoch)


def _pool(workers: int):
    ctx = multiprocessing.get_context("fork") if "fork" in multiprocessing.get_all_start_methods() else None
    return cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx)


def loso_evaluate(
    config: PipelineConfig,
    dataset,
    train_cfg: TrainConfig | None = None,
    subjects: Sequence[str] | None = None,
    workers: int = 1,
) -> EvalReport:
    """Train on all subjects but one, test on that one, for every subject.

    Every fold starts from the same seeded initialisation. The aggregate is
    the unweighted mean over folds.
    """
    train_cfg = (train_cfg or TrainConfig()).validate()
    config.validate()
    if len(dataset.subjects) < 2:
        raise ConfigurationError("leave-one-subject-out needs at least 2 subjects")
    t0 = time.perf_counter()
    jobs, skipped = [], []
    for s, tr, te in loso_folds(dataset, subjects):
        if len(te) == 0:
            warnings.warn(f"subject {s} has no test samples; fold skipped", stacklevel=2)
            skipped.append(s)
            continue
        jobs.append((s, tr, te))
    if workers > 1 and len(jobs) > 1:
        with _pool(workers) as pool:
            futures = [pool.submit(_run_fold, config, train_cfg, dataset, *job) for job in jobs]
            folds = [f.result() for f in futures]
    else:
        folds = [_run_fold(config, train_cfg, dataset, *job) for job in jobs]
    return EvalReport(
        folds,
        fingerprint(config, train_cfg, dataset),
        {"pipeline": config.to_dict(), "train": train_cfg.to_dict()},
        skipped,
        time.perf_counter() - t0,
    )


# --------------------------------------------------------------------------
# sweep

DEFAULT_STAGE_SETS = ((1,), (2,), (3,), (1, 2), (2, 3), (1, 3), (1, 2, 3))
SWEEP_COLUMNS = ("encoder", "type", "stages", "accuracy", "macro_f1", "seconds")


@dataclass
class SweepGrid:
    encoders: tuple = ("vgg",)
    types: tuple = (TYPE_I, TYPE_II, TYPE_III)
    stage_sets: tuple = DEFAULT_STAGE_SETS
    include_baseline: bool = True

    def __post_init__(self):
        self.encoders = tuple(self.encoders)
        self.types = tuple(ConnectionType.parse(t) if isinstance(t, str) else t for t in self.types)
        self.stage_sets = tuple(tuple(sorted(int(s) for s in st)) for st in self.stage_sets)
        for st in self.stage_sets:
            if not st:
                raise ConfigurationError("empty stage set in grid; the baseline row is added via include_baseline")

    def cells(self) -> list[tuple[str, ConnectionType | None, tuple]]:
        """``(encoder, type, stages)`` in fixed order: baseline first, then type-major."""
        out = []
        for enc in self.encoders:
            if self.include_baseline:
                out.append((enc, None, ()))
            for t in self.types:
                for st in self.stage_sets:
                    out.append((enc, t, st))
        return out

    def __len__(self) -> int:
        return len(self.cells())


@dataclass
class SweepRow:
    encoder: str
    type: str
    stages: str
    accuracy: float
    macro_f1: float
    seconds: float
    fingerprint: str

    @property
    def key(self) -> str:
        return f"{self.encoder}|{self.type}|{self.stages}"


@dataclass
class SweepResult:
    rows: list
    complete: bool
    reports: dict = field(default_factory=dict)

    @property
    def best(self) -> SweepRow | None:
        if not self.rows:
            return None
        return min(self.rows, key=lambda r: (-r.accuracy, -r.macro_f1, r.key))

    def aggregate(self, by: str) -> dict:
        """Mean accuracy and macro-F1 per ``type`` or per ``stages`` value, in first-seen order.

        Sums are correctly rounded (``math.fsum``) so the means do not depend
        on row order.
        """
        if by not in ("type", "stages", "encoder"):
            raise ConfigurationError(f"cannot aggregate by {by!r}")
        groups: dict[str, list] = {}
        for r in self.rows:
            groups.setdefault(getattr(r, by), []).append(r)
        return {
            k: {
                "accuracy": math.fsum(r.accuracy for r in rs) / len(rs),
                "macro_f1": math.fsum(r.macro_f1 for r in rs) / len(rs),
                "n": len(rs),
            }
            for k, rs in groups.items()
        }

    def to_csv(self, record_time: bool = False) -> str:
        """Sweep table. ``seconds`` is left blank unless ``record_time``, so reruns diff cleanly."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            sec = f"{r.seconds:.3f}" if record_time else ""
            w.writerow([r.encoder, r.type, r.stages, repr(r.accuracy), repr(r.macro_f1), sec])
        return buf.getvalue()


def cell_config(base: PipelineConfig, encoder: str, ctype, stages) -> PipelineConfig:
    return replace(base, encoder=encoder, connection_type=ctype, attx_stages=frozenset(stages)).validate()


def sweep(
    grid: SweepGrid,
    dataset,
    base: PipelineConfig,
    train_cfg: TrainConfig | None = None,
    budget_seconds: float | None = None,
    completed: dict | None = None,
    workers: int = 1,
    on_row=None,
) -> SweepResult:
    """LOSO-evaluate every grid cell.

    ``completed`` maps cell fingerprints to earlier rows, which are reused
    instead of recomputed. When ``budget_seconds`` runs out the remaining
    cells are skipped and the result is marked incomplete.
    """
    train_cfg = (train_cfg or TrainConfig()).validate()
    completed = completed or {}
    t0 = time.perf_counter()
    rows, reports, complete = [], {}, True
    for enc, ctype, stages in grid.cells():
        cfg = cell_config(base, enc, ctype, stages)
        fp = fingerprint(cfg, train_cfg, dataset)
        if fp in completed:
            rows.append(completed[fp])
            continue
        if budget_seconds is not None and time.perf_counter() - t0 >= budget_seconds:
            complete = False
            log.warning("sweep budget exhausted after %d of %d cells", len(rows), len(grid))
            break
        report = loso_evaluate(cfg, dataset, train_cfg, workers=workers)
        row = SweepRow(enc, cfg.type_label, format_stages(stages), report.accuracy, report.macro_f1, report.seconds, fp)
        rows.append(row)
        reports[fp] = report
        if on_row is not None:
            on_row(row)
    return SweepResult(rows, complete, reports)
