"""Loss, optimizer, schedule, augmentation, metrics and the training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import Dataset, PointCloud, check_labels
from .network import ModelParams, init_params, model_forward, parameters, save_params
from .tensor import ConfigError, Tensor


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class over every row of ``logits``."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise T.DimensionError(f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels.max() if labels.max() >= k else labels.min()
        raise DataError(f"label {int(bad)} outside [0, {k})")
    z = logits.data.reshape(-1, k)
    y = labels.reshape(-1).astype(np.int64)
    rows = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(rows), y]
    loss = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(rows), y] -= 1.0
        return ((p * (g / rows)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return T.record("cross_entropy", (logits,), loss, backward)


# ---------------------------------------------------------------------------
# optimizer and schedule


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float):
    """Classical momentum: v <- m*v + g; p <- p - lr*v. Returns (params, velocity)."""
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity, strict=True):
        if p.shape != g.shape or p.shape != v.shape:
            raise T.DimensionError(f"sgd: shapes {p.shape}, {g.shape}, {v.shape}")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


class SGD:
    """In-place wrapper of :func:`sgd_momentum_step` over model tensors."""

    def __init__(self, tensors: list[Tensor], momentum: float):
        self.tensors = tensors
        self.momentum = momentum
        self.velocity = [np.zeros_like(t.data) for t in tensors]

    def step(self, lr: float) -> None:
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]
        new_p, self.velocity = sgd_momentum_step(
            [t.data for t in self.tensors], grads, self.velocity, lr, self.momentum
        )
        for t, p in zip(self.tensors, new_p):
            t.data = p.astype(t.data.dtype, copy=False)
            t.grad = None


def cosine_lr(epoch: float, total_epochs: int, lr_max: float, lr_min: float) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


# ---------------------------------------------------------------------------
# augmentation


def augment_coords(coords: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Scale, translate and jitter (N, 3) or (B, N, 3) coordinates; one draw per cloud."""
    batched = coords.ndim == 3
    x = coords if batched else coords[None]
    b, n, _ = x.shape
    out = x.astype(np.float64, copy=True)
    if cfg.scaling:
        out *= rng.uniform(cfg.scale_low, cfg.scale_high, size=(b, 1, 1))
    if cfg.displacement:
        out += rng.uniform(-cfg.shift_range, cfg.shift_range, size=(b, 1, 3))
    if cfg.perturbation:
        out += np.clip(rng.normal(0.0, cfg.jitter_std, size=(b, n, 3)), -cfg.jitter_clip, cfg.jitter_clip)
    return out if batched else out[0]


def augment(cloud: PointCloud, cfg: TrainConfig, rng: np.random.Generator) -> PointCloud:
    return cloud.with_coords(augment_coords(cloud.coords, cfg, rng))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    overall_accuracy: float
    mean_class_accuracy: float
    confusion: np.ndarray
    mean_iou: float | None = None

    def as_row(self) -> dict[str, float]:
        row = {"OA": self.overall_accuracy, "mAcc": self.mean_class_accuracy}
        if self.mean_iou is not None:
            row["mIoU"] = self.mean_iou
        return row


def confusion_matrix(pred, true, k: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    return np.bincount(true * k + pred, minlength=k * k).reshape(k, k).astype(np.int64)


def accuracy_from_confusion(conf: np.ndarray) -> tuple[float, float]:
    """(OA, mAcc); mAcc averages over classes present in the ground truth."""
    total = conf.sum()
    oa = float(np.trace(conf) / total) if total else 0.0
    support = conf.sum(axis=1)
    present = support > 0
    per_class = np.diag(conf)[present] / support[present]
    macc = math.fsum(per_class) / len(per_class) if len(per_class) else 0.0
    return oa, macc


def instance_iou(pred, true, parts) -> float:
    """Mean IoU over ``parts``; a part absent from both prediction and truth scores 1."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    ious = []
    for p in parts:
        a = pred == p
        b = true == p
        union = np.count_nonzero(a | b)
        ious.append(1.0 if union == 0 else np.count_nonzero(a & b) / union)
    return math.fsum(ious) / len(ious)


def mean_instance_iou(preds, trues, part_sets) -> float:
    vals = [instance_iou(p, t, s) for p, t, s in zip(preds, trues, part_sets, strict=True)]
    return math.fsum(vals) / len(vals)


def _batches(n_items: int, batch_size: int) -> list[slice]:
    """Contiguous slices; a trailing batch of one is merged into the previous one."""
    edges = list(range(0, n_items, batch_size)) + [n_items]
    if len(edges) > 2 and edges[-1] - edges[-2] == 1:
        edges.pop(-2)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _stack(clouds: list[PointCloud], cfg: ModelConfig):
    n = clouds[0].n
    if any(c.n != n for c in clouds):
        raise DataError("clouds in one batch must share the same point count")
    coords = np.stack([c.coords for c in clouds])
    onehot = None
    if cfg.uses_category:
        rows = []
        for c in clouds:
            if c.category_onehot is not None:
                rows.append(np.asarray(c.category_onehot, dtype=np.float64))
            elif c.class_label is not None:
                v = np.zeros(cfg.category_count)
                v[c.class_label] = 1.0
                rows.append(v)
            else:
                raise DataError("part segmentation needs a category per cloud")
        onehot = np.stack(rows)
    return coords, onehot


def _targets(clouds: list[PointCloud], cfg: ModelConfig) -> np.ndarray:
    if cfg.task == "classification":
        return np.array([c.class_label for c in clouds], dtype=np.int64)
    return np.stack([c.point_labels for c in clouds])


def predict(params: ModelParams, cfg: ModelConfig, clouds: list[PointCloud], batch_size: int = 32) -> np.ndarray:
    """Inference-mode argmax labels: (M,) for classification, (M, N) otherwise."""
    out = []
    with T.no_tape():
        for sl in _batches(len(clouds), batch_size):
            coords, onehot = _stack(clouds[sl], cfg)
            logits = model_forward(Tensor(coords.astype(_np_dtype(cfg))), params, cfg, onehot, training=False)
            out.append(logits.data.argmax(axis=-1))
    return np.concatenate(out)


def _np_dtype(cfg: ModelConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def evaluate(params: ModelParams, cfg: ModelConfig, dataset: Dataset, batch_size: int = 32) -> Metrics:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    _check_dataset(dataset, cfg)
    # group by point count so mixed-size sets still batch
    order = sorted(range(len(dataset)), key=lambda i: dataset.clouds[i].n)
    clouds = [dataset.clouds[i] for i in order]
    preds = []
    start = 0
    while start < len(clouds):
        end = start
        while end < len(clouds) and clouds[end].n == clouds[start].n:
            end += 1
        preds += list(predict(params, cfg, clouds[start:end], batch_size))
        start = end
    truths = [_targets([c], cfg)[0] for c in clouds]
    return metrics_from_predictions(cfg, dataset, clouds, preds, truths)


def metrics_from_predictions(cfg: ModelConfig, dataset: Dataset, clouds, preds, truths) -> Metrics:
    if cfg.task == "classification":
        conf = confusion_matrix(np.array(preds), np.array(truths), cfg.num_classes)
        oa, macc = accuracy_from_confusion(conf)
        return Metrics(oa, macc, conf)
    conf = confusion_matrix(np.concatenate(preds), np.concatenate(truths), cfg.num_parts)
    oa, macc = accuracy_from_confusion(conf)
    part_sets = []
    for c in clouds:
        if dataset.category_parts and c.class_label is not None and c.class_label in dataset.category_parts:
            part_sets.append(dataset.category_parts[c.class_label])
        else:
            part_sets.append(range(cfg.num_parts))
    return Metrics(oa, macc, conf, mean_instance_iou(preds, truths, part_sets))


def _check_dataset(ds: Dataset, cfg: ModelConfig) -> None:
    if ds.task != cfg.task:
        raise ConfigError(f"dataset task {ds.task!r} does not match model task {cfg.task!r}")
    for i, c in enumerate(ds.clouds):
        if cfg.task == "classification":
            if c.class_label is None:
                raise DataError(f"cloud {i} has no class label")
            check_labels(c, num_classes=cfg.num_classes, where=f"cloud {i}: ")
        else:
            if c.point_labels is None:
                raise DataError(f"cloud {i} has no part labels")
            check_labels(c, num_parts=cfg.num_parts, where=f"cloud {i}: ")


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    rows: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None
    steps: int = 0

    def csv_text(self) -> str:
        return metrics_csv(self.rows)


def _columns(rows: list[dict]) -> list[str]:
    cols = ["epoch", "lr", "train_loss", "val_OA", "val_mAcc"]
    if any("val_mIoU" in r for r in rows):
        cols.append("val_mIoU")
    return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = _columns(rows)
    writer.writerow(cols)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def train_step(params: ModelParams, cfg: ModelConfig, opt: SGD, clouds: list[PointCloud], lr: float,
               tcfg: TrainConfig, aug_rng, drop_rng) -> float:
    coords, onehot = _stack(clouds, cfg)
    coords = augment_coords(coords, tcfg, aug_rng)
    with T.Tape() as tape:
        logits = model_forward(Tensor(coords.astype(_np_dtype(cfg))), params, cfg, onehot, training=True, rng=drop_rng)
        loss = cross_entropy(logits, _targets(clouds, cfg))
        tape.backward(loss)
    opt.step(lr)
    return float(loss.data)


def train(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    train_set: Dataset,
    val_set: Dataset | None = None,
    out_dir=None,
    params: ModelParams | None = None,
    progress=None,
) -> TrainResult:
    """SGD with momentum and a per-epoch cosine learning rate.

    Writes ``metrics.csv``, ``best.gadc`` and ``final.gadc`` to ``out_dir``
    when given. ``progress(row)`` is called after every epoch.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    _check_dataset(train_set, cfg)
    if val_set is not None:
        _check_dataset(val_set, cfg)
    params = params if params is not None else init_params(cfg)
    opt = SGD(parameters(params), tcfg.momentum)
    shuffle_rng = np.random.default_rng([tcfg.seed, 1])
    aug_rng = np.random.default_rng([tcfg.seed, 2])
    drop_rng = np.random.default_rng([tcfg.seed, 3])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(params)
    score_key = "OA" if cfg.task == "classification" else "mIoU"
    for epoch in range(tcfg.epochs):
        lr = cosine_lr(epoch, tcfg.epochs, tcfg.lr_max, tcfg.lr_min)
        order = shuffle_rng.permutation(len(train_set))
        total, count = 0.0, 0
        for sl in _batches(len(order), tcfg.batch_size):
            batch = [train_set.clouds[i] for i in order[sl]]
            total += train_step(params, cfg, opt, batch, lr, tcfg, aug_rng, drop_rng) * len(batch)
            count += len(batch)
            result.steps += 1
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / count}
        last = epoch + 1 == tcfg.epochs
        if val_set is not None and ((epoch + 1) % tcfg.eval_every == 0 or last):
            m = evaluate(params, cfg, val_set, tcfg.batch_size)
            row.update({f"val_{k}": v for k, v in m.as_row().items()})
            score = m.as_row()[score_key]
            if result.best_score is None or score > result.best_score:
                result.best_score, result.best_epoch = score, epoch + 1
                if out is not None:
                    save_params(out / "best.gadc", params, cfg)
        result.rows.append(row)
        if out is not None:
            (out / "metrics.csv").write_text(metrics_csv(result.rows))
        if progress is not None:
            progress(row)
        hit = row.get("val_OA")
        if tcfg.target_val_oa is not None and hit is not None and hit >= tcfg.target_val_oa:
            break
    if out is not None:
        save_params(out / "final.gadc", params, cfg)
        if val_set is None:
            save_params(out / "best.gadc", params, cfg)
    return result
