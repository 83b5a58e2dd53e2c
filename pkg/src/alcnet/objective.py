"""Soft-IoU objective, AdaGrad optimization and the training loop."""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tensor, backward, sigmoid
from .data import augment
from .evaluation import evaluate
from .net import Network, save_checkpoint
from .nn import he_init  # noqa: F401  (initialization strategy lives with the layers)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 400
    weight_decay: float = 1e-4
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.weight_decay < 0:
            raise ValueError(f"invalid training configuration: {self}")


def _coerce_pair(p, y):
    p = p if isinstance(p, Tensor) else Tensor(p)
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if p.data.shape != y_arr.shape:
        raise ValueError(f"soft_iou: shape mismatch {p.data.shape} vs {y_arr.shape}")
    if not np.all((y_arr == 0.0) | (y_arr == 1.0)):
        raise ValueError("soft_iou: ground truth must be binary")
    if p.data.min() < 0.0 or p.data.max() > 1.0:
        raise ValueError("soft_iou: scores must lie in [0, 1]")
    return p, Tensor(y_arr)


def soft_iou(p, y):
    """sum(p*y) / sum(p + y - p*y); 1.0 by convention when both are empty."""
    p, y = _coerce_pair(p, y)
    inter = (p * y).sum()
    union = p.sum() + y.sum() - inter
    if union.data == 0.0:
        log.info("soft_iou: empty prediction and ground truth, returning 1.0 by convention")
        return Tensor(1.0)
    return inter / union


def training_loss(p, y):
    """1 - soft_iou per pair, summed when given batches (lists)."""
    if isinstance(p, (list, tuple)):
        if len(p) != len(y):
            raise ValueError("training_loss: batch lengths differ")
        total = None
        for pi, yi in zip(p, y):
            term = 1.0 - soft_iou(pi, yi)
            total = term if total is None else total + term
        return total
    return 1.0 - soft_iou(p, y)


def adagrad_step(params, grads, state, lr, weight_decay=0.0, eps=1e-10):
    """acc += g^2; theta -= lr * g / (sqrt(acc) + eps), decay added to g first."""
    for p, g in zip(params, grads):
        name = getattr(p, "name", None) or f"param#{getattr(p, 'uid', '?')}"
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if weight_decay:
            g = g + weight_decay * p.data
        key = id(p)
        if key not in state:
            state[key] = np.zeros_like(p.data)
        acc = state[key]
        acc += g * g
        p.data -= lr * g / (np.sqrt(acc) + eps)


class Adagrad:
    def __init__(self, params, lr, weight_decay=0.0, eps=1e-10):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = {}

    def step(self):
        grads = [p.grad for p in self.params]
        adagrad_step(self.params, grads, self.state, self.lr, self.weight_decay, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    log_path: str
    best_path: str
    last_path: str
    best_val_iou: float
    epochs_run: int
    history: list = field(default_factory=list)


def _forward_loss(model, sample_image, sample_mask):
    x = Tensor(sample_image[None, :, :])
    scores = model(x)
    p = sigmoid(scores)
    return training_loss(p, Tensor(sample_mask[None, :, :].astype(np.float64)))


def train(model: Network, train_samples, val_samples, cfg: TrainConfig, resize_to: int,
          crop_to: int, run_dir, stop_iou: float | None = None) -> TrainResult:
    """Shuffle/batch/augment/step for cfg.epochs; logs CSV per epoch and keeps
    the best-validation checkpoint. Loss going non-finite aborts with the last
    good checkpoint attached to the exception."""
    if not train_samples:
        raise ValueError("train: empty dataset")
    os.makedirs(run_dir, exist_ok=True)
    log_path = os.path.join(run_dir, "train_log.csv")
    best_path = os.path.join(run_dir, "best.alcn")
    last_path = os.path.join(run_dir, "last.alcn")
    rng = np.random.default_rng(cfg.seed)
    opt = Adagrad(model.parameters(), cfg.lr, cfg.weight_decay)
    save_checkpoint(last_path, model)  # last-good starts at the initial state
    best_val = -1.0
    history = []
    epochs_run = 0
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "val_iou", "val_niou"])
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = rng.permutation(len(train_samples))
            loss_sum = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                model.zero_grad()
                for idx in batch:
                    sample = augment(train_samples[idx], resize_to, crop_to, rng,
                                     keep_target_tries=5)
                    loss = _forward_loss(model, sample.image, sample.mask)
                    if not np.isfinite(loss.data):
                        raise TrainingDiverged(
                            f"loss diverged at epoch {epoch}", checkpoint=last_path)
                    backward(loss)  # per-sample backward; batch gradient is the sum
                    loss_sum += float(loss.data)
                try:
                    opt.step()
                except FloatingPointError as err:
                    raise TrainingDiverged(str(err), checkpoint=last_path) from err
            mean_loss = loss_sum / len(order)
            model.eval()
            report = evaluate(model, val_samples) if val_samples else None
            val_iou = report.iou if report else float("nan")
            val_niou = report.niou if report else float("nan")
            writer.writerow([epoch, f"{mean_loss:.6f}", f"{val_iou:.4f}", f"{val_niou:.4f}"])
            fh.flush()
            history.append((epoch, mean_loss, val_iou, val_niou))
            save_checkpoint(last_path, model)
            if report and val_iou > best_val:
                best_val = val_iou
                save_checkpoint(best_path, model)
            epochs_run = epoch
            if stop_iou is not None and report and val_iou >= stop_iou:
                break
    if not os.path.exists(best_path):
        save_checkpoint(best_path, model)
    return TrainResult(log_path, best_path, last_path, best_val, epochs_run, history)
