"""Training loops for the guideline recipes, evaluation, and CSV logging.

Recipes:
  ce          cross-entropy on ground-truth labels with label smoothing
  hard_kd     cross-entropy against the frozen teacher's argmax labels
  soft_kd     temperature-softened KL against teacher logits, no labels
  soft_kd_mi  soft_kd plus the phase-gated module-imitation terms
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from math import cos, pi
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Dataset
from .imitation import (ImitationConfig, LossReport, load_from_teacher,
                        loss_in_prime, loss_out, loss_rel, loss_soft,
                        select_layers, total_loss)
from .models import CaptureSet, ModelWeights, forward
from .optim import AdamW
from .tensor import NumericsError, Tape, Tensor

RECIPES = ("ce", "hard_kd", "soft_kd", "soft_kd_mi")
LOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_soft", "loss_in_prime",
               "loss_out", "loss_rel", "val_top1")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last per-term values."""


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: Optional[float] = None  # None -> batch_size / 1024 * 1e-3
    weight_decay: float = 0.05
    seed: int = 0
    label_smoothing: float = 0.1
    tau: float = 1.0
    recipe: str = "ce"
    imitation: Optional[ImitationConfig] = None
    init_from_teacher: bool = False
    warmup_epochs: int = 2
    cosine: bool = True

    def validate(self) -> None:
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}")
        if self.recipe == "soft_kd_mi" and self.imitation is None:
            raise ValueError("recipe soft_kd_mi requires an imitation config")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.imitation is not None:
            self.imitation.validate()

    @property
    def base_lr(self) -> float:
        return self.lr if self.lr is not None else self.batch_size / 1024 * 1e-3

    def lr_at(self, epoch: int) -> float:
        base = self.base_lr
        if epoch < self.warmup_epochs:
            return base * (epoch + 1) / self.warmup_epochs
        if not self.cosine:
            return base
        span = max(self.epochs - self.warmup_epochs, 1)
        frac = (epoch - self.warmup_epochs) / span
        return base * (0.01 + 0.99 * 0.5 * (1.0 + cos(pi * frac)))

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.imitation is not None:
            d["imitation"] = self.imitation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("imitation"):
            d["imitation"] = ImitationConfig.from_dict(d["imitation"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TrainResult:
    model: ModelWeights
    log: list[dict] = field(default_factory=list)
    final_val_top1: float = 0.0


def evaluate(model: ModelWeights, data: Dataset, batch_size: int = 64) -> float:
    """Top-1 accuracy; argmax ties resolve to the lower class index."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for xb, yb in data.batches(batch_size):
        logits = forward(model, Tensor(xb))
        correct += int((np.argmax(logits.data, axis=1) == yb).sum())
    return correct / len(data)


def _smoothed_targets(labels: np.ndarray, num_classes: int,
                      eps: float) -> np.ndarray:
    q = np.full((len(labels), num_classes), eps / num_classes, np.float32)
    q[np.arange(len(labels)), labels] += 1.0 - eps
    return q


def _cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    log_probs = T.log_softmax(logits)
    n = logits.shape[0]
    return T.mul(T.tsum(T.mul(Tensor(targets), log_probs)), -1.0 / n)


def train(model: ModelWeights, train_data: Dataset, val_data: Dataset,
          cfg: TrainConfig, teacher: Optional[ModelWeights] = None,
          log_path: Optional[str] = None) -> TrainResult:
    cfg.validate()
    needs_teacher = cfg.recipe != "ce" or cfg.init_from_teacher
    if needs_teacher and teacher is None:
        raise ValueError(f"recipe {cfg.recipe!r} requires a teacher model")
    if cfg.init_from_teacher:
        load_from_teacher(model, teacher)

    opt = AdamW(list(model.named_parameters()), lr=cfg.base_lr,
                weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng([cfg.seed, 101])
    droppath_rng = np.random.default_rng([cfg.seed, 202])

    mi_cfg = cfg.imitation
    mi_layers: tuple[int, ...] = ()
    if cfg.recipe == "soft_kd_mi":
        mi_layers = mi_cfg.layers or select_layers(model.spec, mi_cfg.layer_count)

    log_rows: list[dict] = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        sums = {"total": 0.0, "soft": 0.0, "in_prime": 0.0, "out": 0.0,
                "rel": 0.0}
        steps = 0
        for xb, yb in train_data.batches(cfg.batch_size, shuffle_rng):
            report = _step(model, teacher, xb, yb, cfg, mi_layers, epoch, opt,
                           lr, droppath_rng)
            sums["total"] += report.total
            sums["soft"] += report.soft
            sums["in_prime"] += report.in_prime
            sums["out"] += report.out
            sums["rel"] += report.rel
            steps += 1
        val_top1 = evaluate(model, val_data)
        row = {"epoch": epoch, "lr": lr, "loss_total": sums["total"] / steps,
               "val_top1": val_top1}
        if cfg.recipe != "ce":
            row["loss_soft"] = sums["soft"] / steps
        if cfg.recipe == "soft_kd_mi":
            row["loss_in_prime"] = sums["in_prime"] / steps
            row["loss_out"] = sums["out"] / steps
            row["loss_rel"] = sums["rel"] / steps
        log_rows.append(row)

    if log_path:
        write_log(log_rows, log_path)
    return TrainResult(model=model, log=log_rows,
                       final_val_top1=log_rows[-1]["val_top1"])


def _step(model, teacher, xb, yb, cfg: TrainConfig,
          mi_layers: tuple[int, ...], epoch: int, opt: AdamW, lr: float,
          droppath_rng: np.random.Generator) -> LossReport:
    mi_active = False
    teacher_logits = teacher_cap = None
    if cfg.recipe == "soft_kd_mi":
        active = cfg.imitation.active_terms(epoch)
        mi_active = bool(active - {"soft"})
    if teacher is not None and cfg.recipe != "ce":
        # Outside any tape: teacher activations come out as constants, so the
        # teacher receives no gradient and its weights are untouched.
        teacher_cap = (CaptureSet.for_layers(mi_layers) if mi_active else None)
        teacher_logits = forward(teacher, Tensor(xb), capture=teacher_cap)

    try:
        with Tape() as tape:
            student_cap = (CaptureSet.for_layers(mi_layers) if mi_active
                           else None)
            logits = forward(model, Tensor(xb), training=True,
                             rng=droppath_rng, capture=student_cap)
            if cfg.recipe == "ce":
                targets = _smoothed_targets(yb, model.spec.num_classes,
                                            cfg.label_smoothing)
                loss = _cross_entropy(logits, targets)
                report = LossReport(total=loss.item(), active=("ce",))
            elif cfg.recipe == "hard_kd":
                hard = np.argmax(teacher_logits.data, axis=1)
                targets = _smoothed_targets(hard, model.spec.num_classes, 0.0)
                loss = _cross_entropy(logits, targets)
                report = LossReport(total=loss.item(), active=("hard",))
            elif cfg.recipe == "soft_kd":
                loss = loss_soft(logits, teacher_logits, cfg.tau)
                report = LossReport(soft=loss.item(), total=loss.item(),
                                    active=("soft",))
            else:  # soft_kd_mi
                soft = loss_soft(logits, teacher_logits, cfg.imitation.tau)
                per_layer: dict[int, dict[str, Tensor]] = {}
                if mi_active:
                    active = cfg.imitation.active_terms(epoch)
                    for m in mi_layers:
                        terms: dict[str, Tensor] = {}
                        if "in_prime" in active:
                            terms["in_prime"] = loss_in_prime(
                                student_cap.block_out[m],
                                teacher_cap.block_out[m])
                        if "out" in active:
                            terms["out"] = loss_out(
                                student_cap.mixer_out[m],
                                teacher_cap.mixer_out[m])
                        if "rel" in active:
                            terms["rel"] = loss_rel(
                                student_cap.block_out[m],
                                teacher_cap.block_out[m])
                        per_layer[m] = terms
                loss, report = total_loss(soft, per_layer, epoch,
                                          cfg.imitation, len(yb))
            tape.backward(loss)
    except NumericsError as e:
        raise TrainingDiverged(
            f"non-finite loss at epoch {epoch} (recipe {cfg.recipe}): {e}"
        ) from e
    opt.step(lr)
    opt.zero_grad()
    return report


def write_log(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
