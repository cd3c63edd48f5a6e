import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gad import tensor as T
from gad.config import ModelConfig, TrainConfig
from gad.data import Dataset, PointCloud, synth_dataset
from gad.network import init_params, named_tensors
from gad.tensor import Tensor
from gad.training import (
    DataError,
    Metrics,
    accuracy_from_confusion,
    augment,
    confusion_matrix,
    cosine_lr,
    cross_entropy,
    evaluate,
    instance_iou,
    mean_instance_iou,
    metrics_from_predictions,
    sgd_momentum_step,
    train,
    _batches,
)
from oracles import central_diff, iou_by_hand


# --- loss ----------------------------------------------------------------------


def test_uniform_logits_give_log_k():
    assert float(cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6]).data) == pytest.approx(math.log(7), abs=1e-15)


def test_margin_drives_loss_to_zero():
    margins = (1, 10, 30, 100, 1000)
    losses = [float(cross_entropy(Tensor(np.array([[m, 0.0, 0.0]])), [0]).data) for m in margins]
    # closed form for one hot class against two zero logits; log-sum-exp is accurate to ~ulp(1)
    assert losses == pytest.approx([math.log1p(2 * math.exp(-m)) for m in margins], rel=1e-12, abs=4e-16)
    assert all(a >= b for a, b in zip(losses, losses[1:]))
    assert losses[-1] == 0.0


def test_cross_entropy_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    z0, y = rng.normal(size=(4, 5)), rng.integers(0, 5, 4)
    z = Tensor(z0.copy(), requires_grad=True)
    with T.Tape() as tape:
        tape.backward(cross_entropy(z, y))

    def f(a):
        s = a - a.max(axis=1, keepdims=True)
        return float((np.log(np.exp(s).sum(axis=1)) - s[np.arange(4), y]).mean())

    assert np.allclose(z.grad, central_diff(f, z0.copy()), atol=1e-8)


def test_cross_entropy_label_range():
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])


def test_cross_entropy_per_point_logits():
    z = np.random.default_rng(1).normal(size=(2, 5, 4))
    y = np.random.default_rng(2).integers(0, 4, size=(2, 5))
    flat = float(cross_entropy(Tensor(z.reshape(10, 4)), y.reshape(10)).data)
    assert float(cross_entropy(Tensor(z), y).data) == pytest.approx(flat, abs=1e-15)


# --- optimizer / schedule -----------------------------------------------------------


def test_sgd_zero_momentum_is_plain_descent():
    p, g = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    (new,), _ = sgd_momentum_step([p], [g], [np.zeros(2)], 0.1, 0.0)
    assert np.array_equal(new, p - 0.1 * g)


def test_constant_gradient_velocity_geometric_series():
    g, m = np.array([2.0]), 0.9
    p, v = [np.zeros(1)], [np.zeros(1)]
    for t in range(1, 8):
        p, v = sgd_momentum_step(p, [g], v, 0.01, m)
        assert v[0][0] == pytest.approx(g[0] * (1 - m**t) / (1 - m), rel=1e-12)


def test_two_hand_stepped_iterations():
    # p0 = 1, g1 = 0.5, g2 = -0.2, lr 0.1, m 0.9
    # v1 = 0.5, p1 = 0.95; v2 = 0.9*0.5 - 0.2 = 0.25, p2 = 0.925
    p, v = sgd_momentum_step([np.array([1.0])], [np.array([0.5])], [np.zeros(1)], 0.1, 0.9)
    assert (p[0][0], v[0][0]) == pytest.approx((0.95, 0.5))
    p, v = sgd_momentum_step(p, [np.array([-0.2])], v, 0.1, 0.9)
    assert (p[0][0], v[0][0]) == pytest.approx((0.925, 0.25))


@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), st.floats(1e-4, 1.0), st.floats(0, 0.99))
def test_step_is_descent_direction(g, lr, m):
    if not np.any(g):
        g = g + 1.0
    p0 = np.zeros(6)
    (p1,), _ = sgd_momentum_step([p0], [g], [np.zeros(6)], lr, m)
    assert float(g @ (p1 - p0)) < 0


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 200, 0.1, 0.001) == pytest.approx(0.1)
    assert cosine_lr(200, 200, 0.1, 0.001) == pytest.approx(0.001)
    assert cosine_lr(100, 200, 0.1, 0.001) == pytest.approx(0.0505)


@given(st.integers(1, 500))
def test_cosine_monotone(total):
    lrs = [cosine_lr(e, total, 0.1, 0.001) for e in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# --- augmentation ------------------------------------------------------------------


def test_augment_all_off_is_identity():
    c = PointCloud(np.random.default_rng(3).normal(size=(20, 3)), np.arange(20) % 2, 1)
    off = TrainConfig(displacement=False, scaling=False, perturbation=False)
    out = augment(c, off, np.random.default_rng(0))
    assert np.array_equal(out.coords, c.coords)
    assert out.point_labels is c.point_labels and out.class_label == 1


def test_scaling_scales_pairwise_distances():
    c = PointCloud(np.random.default_rng(4).normal(size=(15, 3)))
    cfg = TrainConfig(displacement=False, perturbation=False)
    out = augment(c, cfg, np.random.default_rng(5))
    d0 = np.linalg.norm(c.coords[:, None] - c.coords[None], axis=-1)
    d1 = np.linalg.norm(out.coords[:, None] - out.coords[None], axis=-1)
    s = d1[0, 1] / d0[0, 1]
    assert 2 / 3 <= s <= 1.5
    assert np.allclose(d1, s * d0, atol=1e-12)


def test_displacement_is_global_translation():
    c = PointCloud(np.random.default_rng(6).normal(size=(15, 3)))
    out = augment(c, TrainConfig(scaling=False, perturbation=False), np.random.default_rng(7))
    shift = out.coords - c.coords
    assert np.allclose(shift, shift[0]) and np.all(np.abs(shift[0]) <= 0.2)


def test_jitter_statistics():
    c = PointCloud(np.zeros((100_000 // 3 + 1, 3)))
    out = augment(c, TrainConfig(scaling=False, displacement=False), np.random.default_rng(8)).coords
    assert abs(out.std() - 0.01) < 0.05 * 0.01
    assert np.abs(out).max() <= 0.05


# --- metrics -----------------------------------------------------------------------------


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 1, 0])
    oa, macc = accuracy_from_confusion(confusion_matrix(labels, labels, 3))
    assert oa == macc == 1.0
    pred = [np.array([0, 1, 1]), np.array([2, 2, 3])]
    assert mean_instance_iou(pred, pred, [[0, 1], [2, 3]]) == 1.0


def test_hand_computed_miou_example():
    # instance A: part 0 IoU 1.0, part 1 IoU 0.5; instance B: part 0 IoU 0.25
    a_true = np.array([0, 0, 1, 1])
    a_pred = np.array([0, 0, 1, 2])
    b_true = np.array([0, 1, 1, 1])
    b_pred = np.array([0, 0, 0, 0])
    assert iou_by_hand(a_pred, a_true, 0) == 1.0 and iou_by_hand(a_pred, a_true, 1) == 0.5
    assert iou_by_hand(b_pred, b_true, 0) == 0.25
    assert instance_iou(a_pred, a_true, [0, 1]) == 0.75
    assert instance_iou(b_pred, b_true, [0]) == 0.25
    assert mean_instance_iou([a_pred, b_pred], [a_true, b_true], [[0, 1], [0]]) == 0.5


def test_absent_part_counts_as_one():
    assert instance_iou(np.array([0, 0]), np.array([0, 0]), [0, 1]) == 1.0


def test_constant_predictor_balanced():
    true = np.array([0, 1] * 10)
    oa, macc = accuracy_from_confusion(confusion_matrix(np.zeros(20, dtype=int), true, 2))
    assert oa == 0.5 and macc == 0.5


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_confusion_row_sums_and_streaming_oa(pairs):
    pred = np.array([p for p, _ in pairs])
    true = np.array([t for _, t in pairs])
    conf = confusion_matrix(pred, true, 4)
    assert np.array_equal(conf.sum(axis=1), np.bincount(true, minlength=4))
    oa, macc = accuracy_from_confusion(conf)
    assert oa == np.trace(conf) / conf.sum()
    hits = 0
    for p, t in pairs:
        hits += p == t
    assert oa == hits / len(pairs)
    assert 0 <= oa <= 1 and 0 <= macc <= 1


def test_metrics_from_predictions_segmentation_uses_category_parts():
    cfg = ModelConfig(task="part_seg", num_parts=4, category_count=2, k=2)
    clouds = [PointCloud(np.zeros((4, 3)), np.array([0, 0, 1, 1]), 0), PointCloud(np.zeros((4, 3)), np.array([2, 3, 3, 3]), 1)]
    ds = Dataset(clouds, "part_seg", 0, 4, 2, {0: [0, 1], 1: [2, 3]})
    preds = [np.array([0, 0, 1, 3]), np.array([2, 2, 2, 2])]
    m = metrics_from_predictions(cfg, ds, clouds, preds, [c.point_labels for c in clouds])
    assert m.mean_iou == pytest.approx(((1.0 + 0.5) / 2 + (1 / 4 + 0.0) / 2) / 2)


# --- train / evaluate -------------------------------------------------------------------


def tiny_setup(points=32):
    ds = synth_dataset("cls2", seed=0, points=points)
    cfg = ModelConfig(num_classes=2, channels=8, k=6, global_width=16, cls_hidden=(16, 8), seed=3)
    return ds, cfg


def test_batches_merge_trailing_singleton():
    assert [s.stop - s.start for s in _batches(9, 4)] == [4, 5]
    assert [s.stop - s.start for s in _batches(8, 4)] == [4, 4]
    assert [s.stop - s.start for s in _batches(1, 4)] == [1]


def test_lr_zero_leaves_parameters_unchanged():
    ds, cfg = tiny_setup()
    before = named_tensors(init_params(cfg))
    res = train(cfg, TrainConfig(epochs=2, batch_size=16, lr_max=0.0, lr_min=0.0), ds["train"].subset(range(0, 64, 4)))
    after = named_tensors(res.params)
    weights = [(n, a, b) for (n, a), (_, b) in zip(before, after) if not n.endswith(("running_mean", "running_var"))]
    assert all(np.array_equal(a, b) for _, a, b in weights)


def test_same_seed_identical_logs(tmp_path):
    ds, cfg = tiny_setup()
    sub = ds["train"].subset(range(0, 64, 4))
    tcfg = TrainConfig(epochs=2, batch_size=8, seed=5)
    a = train(cfg, tcfg, sub, ds["test"], out_dir=tmp_path / "a")
    b = train(cfg, tcfg, sub, ds["test"], out_dir=tmp_path / "b")
    assert a.csv_text() == b.csv_text()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "best.gadc").read_bytes() == (tmp_path / "b" / "best.gadc").read_bytes()
    header = a.csv_text().splitlines()[0]
    assert header == "epoch,lr,train_loss,val_OA,val_mAcc"
    assert len(a.rows) == 2


def test_task_mismatch_rejected():
    ds, cfg = tiny_setup()
    seg_cfg = ModelConfig(task="part_seg", num_parts=4, category_count=2, channels=8, k=4)
    with pytest.raises(T.ConfigError):
        train(seg_cfg, TrainConfig(epochs=1), ds["train"])


def test_evaluate_order_independent_and_bounded():
    ds, cfg = tiny_setup()
    params = init_params(cfg)
    test = ds["test"]
    a = evaluate(params, cfg, test)
    b = evaluate(params, cfg, test.subset(np.random.default_rng(0).permutation(len(test))))
    assert a.as_row() == b.as_row()
    assert np.array_equal(a.confusion, b.confusion)
    assert isinstance(a, Metrics) and 0 <= a.overall_accuracy <= 1


def test_evaluate_segmentation_reports_miou():
    ds = synth_dataset("seg2", seed=0, points=32)
    cfg = ModelConfig(task="part_seg", num_parts=ds["train"].num_parts, category_count=2, channels=8, k=6,
                      global_width=16, seg_hidden=(16, 8, 8))
    m = evaluate(init_params(cfg), cfg, ds["test"].subset(range(6)))
    assert m.mean_iou is not None and 0 <= m.mean_iou <= 1


def test_evaluate_empty_dataset():
    _, cfg = tiny_setup()
    with pytest.raises(DataError):
        evaluate(init_params(cfg), cfg, Dataset([], "classification", 2))
