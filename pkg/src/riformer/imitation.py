"""Block-wise distillation losses between an affine student and its teacher.

A frozen pooling-mixer teacher and the affine student run side by side on the
same batch; on a selected set of blocks the student's first sub-block is
supervised to mimic the teacher's token mixer through three terms (block-output
MSE, mixer-output MSE, relation-matrix MSE) on top of soft logit distillation.
The three terms are phase-gated over the training schedule: the feature terms
run first, the relation term second, and only the soft loss afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from math import ceil

from . import tensor as T
from .models import ModelSpec, ModelWeights
from .tensor import Tensor

FEATURE_TERMS = ("in_prime", "out")
REL_TERM = "rel"


@dataclass
class ImitationConfig:
    """Loss weights are stored as lambda*batch_size products and divided by the
    batch size at use, so one config transfers across batch sizes."""
    lambda1_x_batch: float = 0.0001
    lambda2_x_batch: float = 0.001
    lambda3_x_batch: float = 1.0
    tau: float = 1.0
    layer_count: int = 4
    layers: tuple[int, ...] | None = None
    feat_epochs: int = 40
    rel_epochs: int = 10
    total_epochs: int = 60
    use_hard: bool = False
    use_gt_label: bool = False

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.feat_epochs < 0 or self.rel_epochs < 0:
            raise ValueError("phase epoch counts must be non-negative")
        if self.feat_epochs + self.rel_epochs > self.total_epochs:
            raise ValueError("feat_epochs + rel_epochs must not exceed total_epochs")
        any_lambda = (self.lambda1_x_batch or self.lambda2_x_batch
                      or self.lambda3_x_batch)
        if any_lambda and self.layer_count < 1 and not self.layers:
            raise ValueError("an intermediate layer set is required when any "
                             "loss weight is nonzero")

    def active_terms(self, epoch: int) -> frozenset[str]:
        if not (0 <= epoch < self.total_epochs):
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        if epoch < self.feat_epochs:
            return frozenset(("soft",) + FEATURE_TERMS)
        if epoch < self.feat_epochs + self.rel_epochs:
            return frozenset(("soft", REL_TERM))
        return frozenset(("soft",))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["layers"] is not None:
            d["layers"] = list(d["layers"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ImitationConfig":
        d = dict(d)
        if d.get("layers") is not None:
            d["layers"] = tuple(d["layers"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class LossReport:
    soft: float = 0.0
    in_prime: float = 0.0
    out: float = 0.0
    rel: float = 0.0
    total: float = 0.0
    active: tuple[str, ...] = field(default_factory=tuple)


def _check_4d_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise T.ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise T.ShapeError(f"expected 4-D activations, got {a.shape}")


def loss_in(student_ln_out: Tensor, teacher_ln_out: Tensor) -> Tensor:
    """MSE between the normalized mixer inputs of student and teacher."""
    _check_4d_pair(student_ln_out, teacher_ln_out)
    return T.mse(student_ln_out, teacher_ln_out)


def loss_in_prime(student_block_out: Tensor, teacher_block_out: Tensor) -> Tensor:
    """MSE between block outputs (the next block's inputs)."""
    _check_4d_pair(student_block_out, teacher_block_out)
    return T.mse(student_block_out, teacher_block_out)


def loss_out(student_mixer_out: Tensor, teacher_mixer_out: Tensor) -> Tensor:
    """MSE between the mixer outputs themselves; this is the only term that
    supervises the affine coefficients directly."""
    _check_4d_pair(student_mixer_out, teacher_mixer_out)
    return T.mse(student_mixer_out, teacher_mixer_out)


def relation_matrix(t: Tensor) -> Tensor:
    """Token-by-token Gram matrix of row-normalized features.

    (N, C, H, W) is reshaped to (N, HW, C) tokens; each token is L2-normalized
    over channels (with a small guard against zero rows) and the per-sample
    (HW x HW) inner-product matrix is returned.
    """
    if t.ndim != 4:
        raise T.ShapeError(f"expected 4-D input, got {t.shape}")
    n, c, h, w = t.shape
    tokens = T.transpose(T.reshape(t, (n, c, h * w)), (0, 2, 1))
    sq = T.tsum(T.mul(tokens, tokens), axis=2, keepdims=True)
    norm = T.add(T.sqrt(T.add(sq, 1e-24)), 1e-12)
    normed = T.div(tokens, norm)
    return T.matmul(normed, T.transpose(normed, (0, 2, 1)))


def loss_rel(student_out: Tensor, teacher_out: Tensor) -> Tensor:
    """Squared Frobenius distance of relation matrices, scaled by 1/(N*(HW)^2)."""
    _check_4d_pair(student_out, teacher_out)
    return T.mse(relation_matrix(student_out), relation_matrix(teacher_out))


def loss_soft(student_logits: Tensor, teacher_logits: Tensor,
              tau: float = 1.0) -> Tensor:
    """Temperature-softened KL from teacher to student, scaled by tau^2 and
    averaged over the batch. No ground-truth labels are involved."""
    if student_logits.shape != teacher_logits.shape:
        raise T.ShapeError(f"logit shape mismatch: {student_logits.shape} vs "
                           f"{teacher_logits.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    log_q = T.log_softmax(T.mul(student_logits, 1.0 / tau))
    log_p = T.log_softmax(T.mul(teacher_logits, 1.0 / tau))
    return T.mul(T.kl_div(log_p, log_q), tau * tau)


def total_loss(soft: Tensor, per_layer: dict[int, dict[str, Tensor]],
               epoch: int, cfg: ImitationConfig,
               batch_size: int) -> tuple[Tensor, LossReport]:
    """Combine the per-layer imitation terms with the soft loss for one step.

    `per_layer` maps block index -> {"in_prime": .., "out": .., "rel": ..}
    scalar tensors; terms outside the epoch's active phase are ignored.
    """
    active = cfg.active_terms(epoch)
    lam1 = cfg.lambda1_x_batch / batch_size
    lam2 = cfg.lambda2_x_batch / batch_size
    lam3 = cfg.lambda3_x_batch / batch_size
    total = soft
    report = LossReport(soft=soft.item(), active=tuple(sorted(active)))

    def accumulate(term: str, lam: float) -> Tensor | None:
        terms = [layer[term] for layer in per_layer.values() if term in layer]
        if not terms or lam == 0.0:
            return None
        acc = terms[0]
        for extra in terms[1:]:
            acc = T.add(acc, extra)
        return T.mul(acc, lam)

    if "in_prime" in active:
        contrib = accumulate("in_prime", lam1)
        if contrib is not None:
            report.in_prime = contrib.item() / lam1
            total = T.add(total, contrib)
    if "out" in active:
        contrib = accumulate("out", lam2)
        if contrib is not None:
            report.out = contrib.item() / lam2
            total = T.add(total, contrib)
    if REL_TERM in active:
        contrib = accumulate(REL_TERM, lam3)
        if contrib is not None:
            report.rel = contrib.item() / lam3
            total = T.add(total, contrib)
    report.total = total.item()
    return total, report


def select_layers(spec: ModelSpec, count: int) -> tuple[int, ...]:
    """Choose `count` block indices for imitation.

    With count equal to the stage count the last block of each stage is used;
    otherwise blocks are evenly spaced over the cumulative index, ties going
    to the later block.
    """
    total = spec.total_blocks
    if not (1 <= count <= total):
        raise ValueError(f"count must be in [1, {total}], got {count}")
    if count == len(spec.stages):
        picks = []
        offset = 0
        for st in spec.stages:
            offset += st.depth
            picks.append(offset - 1)
        return tuple(picks)
    return tuple(ceil((j + 1) * total / count) - 1 for j in range(count))


def load_from_teacher(student: ModelWeights, teacher: ModelWeights) -> ModelWeights:
    """Copy every teacher weight except the token mixer into the student.

    The student's affine coefficients are left at their initialization, so on a
    spatially constant probe both models still produce identical logits (both
    mixers vanish there).
    """
    s_spec, t_spec = student.spec, teacher.spec
    if t_spec.mixer_kind != "pooling":
        raise ValueError("teacher must use the pooling mixer")
    if s_spec.mixer_kind != "affine":
        raise ValueError("student must use the affine mixer")
    if student.deploy or teacher.deploy:
        raise ValueError("both models must be in train form")
    iso = [(st.depth, st.dim, st.patch_size, st.stride, st.mlp_ratio)
           for st in s_spec.stages]
    iso_t = [(st.depth, st.dim, st.patch_size, st.stride, st.mlp_ratio)
             for st in t_spec.stages]
    if iso != iso_t or s_spec.num_classes != t_spec.num_classes:
        raise ValueError("student and teacher specs are not isomorphic")
    teacher_params = dict(teacher.named_parameters())
    for name, p in student.named_parameters():
        if ".mixer." in name:
            continue
        p.data = teacher_params[name].data.copy()
    return student
