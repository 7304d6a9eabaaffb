"""Training loop: determinism, logging schema, recipes, evaluation."""
import csv

import numpy as np
import pytest

from riformer import (LOG_COLUMNS, SynthSpec, Tensor, TrainConfig, build_model,
                      evaluate, save_checkpoint, synth_dataset, train,
                      write_log)
from riformer.data import Dataset
from helpers import tiny_spec


def small_data(seed=0, per_class=4, classes=4):
    spec = SynthSpec(seed=seed, num_classes=classes, samples_per_class=per_class,
                     resolution=32, stream="train")
    vspec = SynthSpec(seed=seed, num_classes=classes, samples_per_class=per_class,
                      resolution=32, stream="val")
    return synth_dataset(spec), synth_dataset(vspec)


def quick_cfg(recipe="ce", epochs=2, **kw):
    kw.setdefault("batch_size", 8)
    kw.setdefault("lr", 1e-3)
    kw.setdefault("warmup_epochs", 1)
    return TrainConfig(recipe=recipe, epochs=epochs, **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(recipe="mse").validate()
    with pytest.raises(ValueError):
        TrainConfig(recipe="soft_kd_mi").validate()
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()


def test_lr_rule_default():
    assert TrainConfig(batch_size=1024).base_lr == pytest.approx(1e-3)
    assert TrainConfig(batch_size=512).base_lr == pytest.approx(5e-4)
    assert TrainConfig(batch_size=32, lr=0.01).base_lr == 0.01


def test_lr_schedule_warmup_then_cosine():
    cfg = TrainConfig(epochs=10, warmup_epochs=2, lr=1.0)
    assert cfg.lr_at(0) == pytest.approx(0.5)
    assert cfg.lr_at(1) == pytest.approx(1.0)
    assert cfg.lr_at(2) == pytest.approx(1.0)
    assert cfg.lr_at(9) > 0.0
    assert cfg.lr_at(9) < cfg.lr_at(5) < cfg.lr_at(2)


def test_missing_teacher_rejected():
    model = build_model(tiny_spec("affine"), seed=0)
    tr, va = small_data()
    with pytest.raises(ValueError):
        train(model, tr, va, quick_cfg("soft_kd"))


def test_ce_log_has_only_ce_columns(tmp_path):
    model = build_model(tiny_spec("identity"), seed=0)
    tr, va = small_data()
    log = str(tmp_path / "log.csv")
    train(model, tr, va, quick_cfg("ce", epochs=1), log_path=log)
    rows = list(csv.DictReader(open(log)))
    assert list(rows[0].keys()) == list(LOG_COLUMNS)
    assert rows[0]["loss_total"] != ""
    assert rows[0]["loss_soft"] == ""
    assert rows[0]["loss_rel"] == ""
    assert rows[0]["val_top1"] != ""


def test_determinism_identical_checkpoints(tmp_path):
    tr, va = small_data()

    def run(path):
        model = build_model(tiny_spec("identity"), seed=7)
        result = train(model, tr, va, quick_cfg("ce", epochs=2, seed=7))
        save_checkpoint(result.model, path)

    run(str(tmp_path / "a.ckpt"))
    run(str(tmp_path / "b.ckpt"))
    assert (open(tmp_path / "a.ckpt", "rb").read()
            == open(tmp_path / "b.ckpt", "rb").read())


def test_loss_decreases_over_training():
    model = build_model(tiny_spec("identity"), seed=0)
    tr, va = small_data(per_class=6)
    result = train(model, tr, va, quick_cfg("ce", epochs=4, lr=2e-3))
    first, last = result.log[0]["loss_total"], result.log[-1]["loss_total"]
    assert last < first


def test_teacher_unchanged_by_distillation():
    teacher = build_model(tiny_spec("pooling"), seed=3)
    before = {n: p.data.copy() for n, p in teacher.named_parameters()}
    student = build_model(tiny_spec("affine"), seed=4)
    tr, va = small_data()
    train(student, tr, va, quick_cfg("soft_kd"), teacher=teacher)
    for name, p in teacher.named_parameters():
        assert np.array_equal(p.data, before[name]), name


def test_soft_kd_mi_populates_all_loss_columns():
    from riformer import ImitationConfig
    teacher = build_model(tiny_spec("pooling"), seed=3)
    student = build_model(tiny_spec("affine"), seed=4)
    tr, va = small_data()
    mi = ImitationConfig(feat_epochs=1, rel_epochs=1, total_epochs=2,
                         lambda1_x_batch=0.01, lambda2_x_batch=0.1,
                         lambda3_x_batch=1.0)
    cfg = quick_cfg("soft_kd_mi", epochs=2, imitation=mi)
    result = train(student, tr, va, cfg, teacher=teacher)
    feat_row, rel_row = result.log[0], result.log[1]
    assert feat_row["loss_in_prime"] > 0.0
    assert feat_row["loss_out"] > 0.0
    assert feat_row["loss_rel"] == 0.0
    assert rel_row["loss_rel"] > 0.0


def test_init_from_teacher_starts_at_teacher_function():
    teacher = build_model(tiny_spec("pooling"), seed=5)
    student = build_model(tiny_spec("affine"), seed=6)
    tr, va = small_data()
    from riformer import load_from_teacher, forward
    load_from_teacher(student, teacher)
    x = Tensor(np.full((1, 3, 32, 32), 0.25, np.float32))
    assert np.array_equal(forward(student, x).data, forward(teacher, x).data)


# ---------------------------------------------------------------------------
# Evaluation

def test_evaluate_perfect_and_constant_models():
    class Recorder:
        pass

    # brute-force oracle comparison on a real model
    model = build_model(tiny_spec("identity"), seed=0)
    _, va = small_data()
    acc = evaluate(model, va)
    from riformer import forward
    correct = 0
    for i in range(len(va)):
        logits = forward(model, Tensor(va.images[i:i + 1])).data[0]
        if int(np.argmax(logits)) == va.labels[i]:
            correct += 1
    assert acc == pytest.approx(correct / len(va))


def test_evaluate_tie_breaks_to_lower_index():
    # all-zero head: constant equal logits, argmax picks class 0
    model = build_model(tiny_spec("identity"), seed=0)
    model.head_w.data[:] = 0.0
    model.head_b.data[:] = 0.0
    _, va = small_data()
    freq0 = float((va.labels == 0).mean())
    assert evaluate(model, va) == pytest.approx(freq0)


def test_evaluate_empty_dataset_rejected():
    model = build_model(tiny_spec("identity"), seed=0)
    empty = Dataset(images=np.zeros((0, 3, 32, 32), np.float32),
                    labels=np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        evaluate(model, empty)


def test_write_log_schema(tmp_path):
    path = str(tmp_path / "log.csv")
    write_log([{"epoch": 0, "lr": 0.1, "loss_total": 1.0, "val_top1": 0.5}],
              path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0].keys()) == list(LOG_COLUMNS)
    assert rows[0]["loss_soft"] == ""
