"""Optimization loop, plateau scheduler, early stopping, and experiment
protocols (standalone baseline, distillation run, temperature/alpha sweep).

All randomness flows from TrainConfig.seed through named substreams
(data order, augmentation, dropout), so a standalone run and a
distillation run with the same seed see exactly the same batches,
augmentations, and dropout masks and differ only in the loss.

Validation loss is the run's own objective evaluated in eval mode; the
scheduler and early stopping both watch it with independent counters.
Test metrics always come from the best-validation-loss weights.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import preprocess
from .distill import KDConfig, final_loss, one_hot, predict, student_loss
from .errors import ContractError
from .metrics import MetricsReport, confusion, scores
from .nn import Model
from .seeding import derive_seed, substream
from .tensor import Tensor, no_grad
from .weights import clone_state, restore_state


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    momentum: float = 0.0
    dropout_p: float = 0.2
    max_epochs: int = 100
    early_stop_patience: int = 20
    scheduler_factor: float = 0.1
    scheduler_patience: int = 5
    scheduler_min_lr: float = 1e-6
    min_delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.early_stop_patience < 1 or self.scheduler_patience < 1:
            raise ContractError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ContractError("batch_size and max_epochs must be >= 1")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    val_report: MetricsReport


@dataclass
class RunRecord:
    epochs: list[EpochRow] = field(default_factory=list)
    best_epoch: int = -1
    test_report: MetricsReport | None = None
    kd: KDConfig | None = None
    seed: int = 0
    stopped_early: bool = False


# -- optimizer ------------------------------------------------------------------


def sgd_step(params: dict[str, Tensor], lr: float, momentum: float = 0.0,
             velocities: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """v <- momentum * v + g; p <- p - lr * v. Returns the velocity state."""
    if velocities is None:
        velocities = {}
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient; run backward first")
        if momentum != 0.0:
            v = velocities.get(name)
            v = p.grad if v is None else momentum * v + p.grad
            velocities[name] = v
        else:
            v = p.grad
        p.data = p.data - lr * v
    return velocities


# -- monitors -------------------------------------------------------------------


class PlateauScheduler:
    """Multiply lr by `factor` after `patience` epochs without a strictly
    lower monitored loss (beyond min_delta); never below min_lr."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5,
                 min_lr: float = 1e-6, min_delta: float = 0.0):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.min_delta = min_delta
        self.best = None
        self.stall = 0

    def step(self, val_loss: float) -> float:
        if self.best is None or val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stall = 0
        return self.lr


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience: int = 20, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = None
        self.stall = 0

    def step(self, val_loss: float) -> bool:
        if self.best is None or val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stall = 0
            return False
        self.stall += 1
        return self.stall >= self.patience


def scheduler_step(state: PlateauScheduler, val_loss: float) -> float:
    return state.step(val_loss)


def early_stop_check(state: EarlyStopper, val_loss: float) -> bool:
    return state.step(val_loss)


# -- data plumbing -----------------------------------------------------------------


def split_arrays(dataset: preprocess.PatchDataset) -> tuple[np.ndarray, np.ndarray]:
    """Stack a split's patches into (N, P, P, 3) uint8 + (N,) labels."""
    if not dataset.records:
        raise ContractError(f"split {dataset.split!r} is empty")
    x = np.stack([r.pixels for r in dataset.records])
    y = np.array([r.label for r in dataset.records], dtype=np.int64)
    return x, y


def _augment_batch(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = pixels.copy()
    n = out.shape[0]
    hflip = rng.random(n) < 0.5
    vflip = rng.random(n) < 0.5
    rot = rng.integers(0, 4, size=n)
    out[hflip] = out[hflip, :, ::-1]
    out[vflip] = out[vflip, ::-1, :]
    for k in (1, 2, 3):
        sel = rot == k
        if sel.any():
            out[sel] = np.rot90(out[sel], k, axes=(1, 2))
    return out


def _forward_batches(model: Model, x_u8: np.ndarray, batch_size: int) -> np.ndarray:
    """Eval-mode logits over a whole split."""
    model.eval()
    outs = []
    with no_grad():
        for lo in range(0, len(x_u8), batch_size):
            xb = Tensor(preprocess.normalize_array(x_u8[lo : lo + batch_size]))
            outs.append(model(xb).data)
    return np.concatenate(outs, axis=0)


def evaluate_split(model: Model, dataset: preprocess.PatchDataset,
                   batch_size: int = 256) -> MetricsReport:
    x, y = split_arrays(dataset)
    logits = _forward_batches(model, x, batch_size)
    return scores(confusion(y, predict(logits)))


# -- fit engine --------------------------------------------------------------------


def _num_classes(model: Model) -> int:
    return model.parameters()["head.b"].size if "head.b" in model.parameters() else \
        next(reversed(model.parameters().values())).size


def _fit(student: Model, teacher: Model | None, datasets: dict[str, preprocess.PatchDataset],
         cfg: TrainConfig, kd: KDConfig) -> RunRecord:
    for split in ("train", "val"):
        if split not in datasets or not datasets[split].records:
            raise ContractError(f"training needs a non-empty {split!r} split")

    x_train, y_train = split_arrays(datasets["train"])
    x_val, y_val = split_arrays(datasets["val"])
    n_classes = _num_classes(student)
    if y_train.max() >= n_classes:
        raise ContractError("labels exceed the student's class count")

    need_teacher = kd.alpha < 1.0
    if need_teacher:
        if teacher is None:
            raise ContractError("distillation with alpha < 1 needs a teacher")
        if _num_classes(teacher) != n_classes:
            raise ContractError(
                f"teacher has {_num_classes(teacher)} classes, student {n_classes}"
            )
    if teacher is not None:
        teacher.eval()

    student.set_dropout(cfg.dropout_p)
    dropout_rng = substream(cfg.seed, "dropout")
    y_val_onehot = one_hot(y_val, n_classes)

    # fixed val inputs: teacher logits there never change
    val_teacher_logits = None
    if need_teacher:
        val_teacher_logits = _forward_batches(teacher, x_val, cfg.batch_size)

    scheduler = PlateauScheduler(cfg.learning_rate, cfg.scheduler_factor,
                                 cfg.scheduler_patience, cfg.scheduler_min_lr, cfg.min_delta)
    stopper = EarlyStopper(cfg.early_stop_patience, cfg.min_delta)
    velocities: dict[str, np.ndarray] = {}
    record = RunRecord(kd=kd, seed=cfg.seed)
    best_val = np.inf
    best_state = clone_state(student)
    lr = cfg.learning_rate

    for epoch in range(cfg.max_epochs):
        order = substream(cfg.seed, "data", epoch).permutation(len(x_train))
        aug_rng = substream(cfg.seed, "augment", epoch)
        x_epoch = _augment_batch(x_train[order], aug_rng)
        y_epoch = y_train[order]

        student.train()
        total, seen = 0.0, 0
        for lo in range(0, len(x_epoch), cfg.batch_size):
            xb_u8 = x_epoch[lo : lo + cfg.batch_size]
            yb = y_epoch[lo : lo + cfg.batch_size]
            xb = Tensor(preprocess.normalize_array(xb_u8))
            t_logits = None
            if need_teacher:
                with no_grad():
                    t_logits = teacher(xb).detach()
            s_logits = student(xb, rng=dropout_rng)
            loss = final_loss(one_hot(yb, n_classes), s_logits, t_logits, kd)
            student.zero_grad()
            loss.backward()
            velocities = sgd_step(student.parameters(), lr, cfg.momentum, velocities)
            total += loss.item() * len(yb)
            seen += len(yb)
        train_loss = total / seen

        student.eval()
        val_logits = _forward_batches(student, x_val, cfg.batch_size)
        with no_grad():
            t_val = Tensor(val_teacher_logits) if need_teacher else None
            val_loss = final_loss(y_val_onehot, Tensor(val_logits), t_val, kd).item()
        val_report = scores(confusion(y_val, predict(val_logits)))

        record.epochs.append(EpochRow(epoch=epoch, train_loss=train_loss,
                                      val_loss=val_loss, lr=lr, val_report=val_report))
        if val_loss < best_val:
            best_val = val_loss
            best_state = clone_state(student)
            record.best_epoch = epoch

        lr = scheduler.step(val_loss)
        if stopper.step(val_loss):
            record.stopped_early = True
            break

    restore_state(student, best_state)
    student.eval()
    if "test" in datasets and datasets["test"].records:
        record.test_report = evaluate_split(student, datasets["test"], cfg.batch_size)
    return record


def fit_standalone(student: Model, datasets: dict[str, preprocess.PatchDataset],
                   cfg: TrainConfig) -> RunRecord:
    """Plain cross-entropy baseline: alpha = 1, temperature = 1, no teacher."""
    return _fit(student, None, datasets, cfg, KDConfig(temperature=1.0, alpha=1.0))


def fit_distill(student: Model, teacher: Model, datasets: dict[str, preprocess.PatchDataset],
                cfg: TrainConfig, kd: KDConfig) -> RunRecord:
    """Distillation run: frozen eval-mode teacher, mixed loss into the student."""
    if teacher is None:
        raise ContractError("fit_distill needs a teacher model")
    return _fit(student, teacher, datasets, cfg, kd)


# -- sweep --------------------------------------------------------------------------


@dataclass
class SweepCell:
    teacher_id: str
    temperature: float
    alpha: float
    record: RunRecord | None = None
    error: str | None = None


def sweep(teachers: list[tuple[str, Model]], temperatures, alphas,
          datasets: dict[str, preprocess.PatchDataset], cfg: TrainConfig,
          student_factory, kl_direction: str = "student_to_teacher") -> list[SweepCell]:
    """Baseline plus one distillation run per (teacher, T, alpha) cell.

    Cell seeds derive from (cfg.seed, teacher id, T, alpha), so results
    are independent of execution order. A failing cell is recorded and
    the sweep continues.
    """
    if not temperatures or not alphas:
        raise ContractError("sweep needs non-empty temperature and alpha grids")
    cells: list[SweepCell] = []

    base_seed = derive_seed(cfg.seed, "sweep", "baseline")
    base_cfg = _reseed(cfg, base_seed)
    baseline = SweepCell(teacher_id="baseline", temperature=1.0, alpha=1.0)
    try:
        student = student_factory(base_seed)
        baseline.record = fit_standalone(student, datasets, base_cfg)
    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
        baseline.error = f"{type(exc).__name__}: {exc}"
    cells.append(baseline)

    for teacher_id, teacher in teachers:
        for temp in temperatures:
            for alpha in alphas:
                cell = SweepCell(teacher_id=teacher_id, temperature=float(temp), alpha=float(alpha))
                cell_seed = derive_seed(cfg.seed, "sweep", teacher_id, temp, alpha)
                try:
                    kd = KDConfig(temperature=float(temp), alpha=float(alpha),
                                  kl_direction=kl_direction)
                    student = student_factory(cell_seed)
                    cell.record = fit_distill(student, teacher, datasets,
                                              _reseed(cfg, cell_seed), kd)
                except Exception as exc:  # noqa: BLE001
                    cell.error = f"{type(exc).__name__}: {exc}"
                cells.append(cell)
    return cells


def _reseed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg, seed=seed)


SWEEP_COLUMNS = ("teacher_id", "T", "alpha", "split", "accuracy", "f1", "mcc")


def write_sweep_report(cells: list[SweepCell], path) -> None:
    """TSV rows (val and test per cell), sorted by (teacher, T, alpha)."""
    rows = []
    for cell in sorted(cells, key=lambda c: (c.teacher_id, c.temperature, c.alpha)):
        if cell.record is None:
            rows.append([cell.teacher_id, cell.temperature, cell.alpha,
                         "failed", "", "", ""])
            continue
        best = cell.record.epochs[cell.record.best_epoch].val_report
        for split, rep in (("val", best), ("test", cell.record.test_report)):
            if rep is None:
                continue
            rows.append([cell.teacher_id, cell.temperature, cell.alpha, split,
                         f"{rep.accuracy:.6f}", f"{rep.f1:.6f}", f"{rep.mcc:.6f}"])
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows(rows)


# -- run record persistence -----------------------------------------------------------


RUN_COLUMNS = ("row_type", "epoch", "train_loss", "val_loss", "lr", "split",
               "accuracy", "f1", "mcc", "tp", "fp", "fn", "tn")


def write_run_record(record: RunRecord, path) -> None:
    """Per-epoch rows plus one summary row holding the best-epoch test metrics."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_COLUMNS)
        for row in record.epochs:
            rep = row.val_report
            c = rep.confusion
            writer.writerow(["epoch", row.epoch, f"{row.train_loss:.8f}",
                             f"{row.val_loss:.8f}", f"{row.lr:.8g}", "val",
                             f"{rep.accuracy:.6f}", f"{rep.f1:.6f}", f"{rep.mcc:.6f}",
                             c.tp, c.fp, c.fn, c.tn])
        if record.test_report is not None:
            rep = record.test_report
            c = rep.confusion
            writer.writerow(["summary", record.best_epoch, "", "", "", "test",
                             f"{rep.accuracy:.6f}", f"{rep.f1:.6f}", f"{rep.mcc:.6f}",
                             c.tp, c.fp, c.fn, c.tn])


def read_run_record_rows(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
