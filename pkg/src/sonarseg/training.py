"""Loss, LR schedule, metrics, train/evaluate loops and throughput benchmark."""
from __future__ import annotations

import contextlib
import copy
import dataclasses
import logging
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import DEFAULT_CLASS_MIX, IGNORE, augment
from .model import count_parameters

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 6e-5
    weight_decay: float = 1e-2
    warmup_epochs: int = 3
    poly_power: float = 0.9
    seed: int = 0
    class_weights: list[float] | str = "auto"
    augment: bool = True
    # stop as soon as an epoch's training pixel accuracy reaches this value
    target_train_acc: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.base_lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, base_lr > 0")
        if self.weight_decay < 0 or self.warmup_epochs < 0 or self.poly_power <= 0:
            raise ValueError("weight_decay, warmup_epochs must be >= 0 and poly_power > 0")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if isinstance(self.class_weights, str) and self.class_weights != "auto":
            raise ValueError("class_weights must be 'auto' or a list of numbers")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class MetricsReport:
    per_class_iou: list[float]
    miou: float
    pixel_accuracy: float
    fps: float | None = None
    params: int | None = None
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["per_class_iou"] = [None if math.isnan(v) else v for v in self.per_class_iou]
        return d


def auto_class_weights(frequencies=DEFAULT_CLASS_MIX):
    """Mean-normalized inverse frequency."""
    inv = 1.0 / np.asarray(frequencies, dtype=np.float64)
    return inv / inv.mean()


def resolve_class_weights(weights, num_classes, frequencies=DEFAULT_CLASS_MIX):
    if isinstance(weights, str):
        return torch.tensor(auto_class_weights(frequencies), dtype=torch.float32)
    w = torch.as_tensor(weights, dtype=torch.float32)
    if w.shape != (num_classes,):
        raise ValueError(f"expected {num_classes} class weights, got {list(w.shape)}")
    return w


def weighted_cross_entropy(logits, target, weights=None, ignore=IGNORE):
    """Mean over non-ignored pixels of w[y] * -log softmax(logits)[y]."""
    target = target.long()
    valid = target != ignore
    n = int(valid.sum())
    if n == 0:
        raise ValueError("every pixel is ignored; loss is undefined")
    nll = F.cross_entropy(logits, target.masked_fill(~valid, 0), reduction="none")
    if weights is not None:
        nll = nll * weights.to(nll.dtype)[target.masked_fill(~valid, 0)]
    return (nll * valid).sum() / n


def poly_lr(step, total_steps, warmup_steps, base_lr, power=0.9):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * (1.0 - frac) ** power


def confusion_matrix(pred, target, num_classes, ignore=IGNORE):
    """Rows are targets, columns predictions; ignored pixels dropped."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    target = np.asarray(target).ravel().astype(np.int64)
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    keep = target != ignore
    pred, target = pred[keep], target[keep]
    if ((target < 0) | (target >= num_classes) | (pred < 0) | (pred >= num_classes)).any():
        raise ValueError("labels outside [0, num_classes)")
    return np.bincount(target * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def report_from_confusion(cm):
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("no non-ignored pixels to score")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    return MetricsReport(
        per_class_iou=iou.tolist(),
        miou=float(iou[present].mean()),
        pixel_accuracy=float(tp.sum() / total),
        confusion=cm.tolist(),
    )


def mean_iou(pred, target, num_classes=4, ignore=IGNORE):
    return report_from_confusion(confusion_matrix(pred, target, num_classes, ignore))


@contextlib.contextmanager
def deterministic(enabled=True):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _as_tensors(images, masks):
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 3:
        x = x[:, None]
    y = torch.as_tensor(np.asarray(masks, dtype=np.int64))
    return x, y


@torch.inference_mode()
def predict(model, images, batch_size=8):
    model.eval()
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 3:
        x = x[:, None]
    out = [model(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy().astype(np.uint8)


def evaluate(model, images, masks, batch_size=8, num_classes=None):
    """Global-confusion-matrix metrics of `model` over a set of tiles."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty set")
    num_classes = num_classes or model.config.num_classes
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    model.eval()
    with torch.inference_mode():
        for i in range(0, len(images), batch_size):
            x, y = _as_tensors(images[i:i + batch_size], masks[i:i + batch_size])
            cm += confusion_matrix(model(x).argmax(1).numpy(), y.numpy(), num_classes)
    report = report_from_confusion(cm)
    report.params = count_parameters(model)
    return report


def _augment_batch(images, masks, seeds):
    out_i, out_m = [], []
    for img, msk, s in zip(images, masks, seeds):
        a, b = augment(img, msk, int(s))
        out_i.append(a)
        out_m.append(b)
    return np.stack(out_i), np.stack(out_m)


def train(model, images, masks, config: TrainConfig, val=None, class_frequency=DEFAULT_CLASS_MIX):
    """Train in place; returns (best state_dict, history).

    `val` is an optional (images, masks) pair; the retained checkpoint is the
    best validation mIoU, or the lowest training loss without validation.
    """
    if len(images) == 0:
        raise ValueError("training set is empty")
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks, dtype=np.uint8)
    weights = resolve_class_weights(config.class_weights, model.config.num_classes, class_frequency)
    history = []
    best_state = copy.deepcopy(model.state_dict())
    if config.epochs == 0:
        return best_state, history

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(images) / config.batch_size)
    total = steps_per_epoch * config.epochs
    warmup = steps_per_epoch * config.warmup_epochs
    best_score = -math.inf
    step = 0

    with deterministic():
        for epoch in range(config.epochs):
            model.train()
            order = rng.permutation(len(images))
            aug_seeds = rng.integers(0, 2**31 - 1, size=len(images))
            loss_sum, correct, counted = 0.0, 0, 0
            for b in range(steps_per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                bi, bm = images[idx], masks[idx]
                if config.augment:
                    bi, bm = _augment_batch(bi, bm, aug_seeds[idx])
                x, y = _as_tensors(bi, bm)
                lr = poly_lr(step, total, warmup, config.base_lr, config.poly_power)
                for g in opt.param_groups:
                    g["lr"] = lr
                logits = model(x)
                loss = weighted_cross_entropy(logits, y, weights)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"loss became {loss.item()} at epoch {epoch}, step {step}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                with torch.no_grad():
                    valid = y != IGNORE
                    correct += int(((logits.argmax(1) == y) & valid).sum())
                    counted += int(valid.sum())
                    loss_sum += loss.item() * len(idx)

            record = {
                "epoch": epoch + 1,
                "loss": loss_sum / len(images),
                "train_acc": correct / max(counted, 1),
                "lr": lr,
            }
            if val is not None and len(val[0]):
                rep = evaluate(model, val[0], val[1])
                record["val_miou"] = rep.miou
                score = rep.miou
            else:
                score = -record["loss"]
            history.append(record)
            log.info("epoch %d loss %.4f acc %.4f%s", epoch + 1, record["loss"], record["train_acc"],
                     f" val mIoU {record['val_miou']:.4f}" if "val_miou" in record else "")
            if score > best_score:
                best_score = score
                best_state = copy.deepcopy(model.state_dict())
            if config.target_train_acc is not None and record["train_acc"] >= config.target_train_acc:
                break
    return best_state, history


@torch.inference_mode()
def benchmark_throughput(model, input_shape=(1, 1, 256, 256), warmup_iters=3, timed_iters=10, threads=1):
    """Median single-batch forward latency turned into images per second."""
    prev = torch.get_num_threads()
    if threads:
        torch.set_num_threads(threads)
    try:
        model.eval()
        x = torch.rand(input_shape)
        for _ in range(warmup_iters):
            model(x)
        times = []
        for _ in range(timed_iters):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    finally:
        torch.set_num_threads(prev)
    return input_shape[0] / statistics.median(times)
