"""Segmentation metrics: IoU, per-image-normalized IoU, pixel-level ROC and
connected-component error diagnosis."""

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, sigmoid

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _as_binary(mask, label: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{label} mask must be binary")
    return arr.astype(bool)


def iou(pred_mask, gt_mask) -> float:
    """|pred & gt| / |pred | gt|; 1.0 when both are empty."""
    pred = _as_binary(pred_mask, "prediction")
    gt = _as_binary(gt_mask, "ground-truth")
    if pred.shape != gt.shape:
        raise ValueError(f"iou: shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def niou(pairs) -> float:
    """Mean of per-image IoUs (TP / (T + P - TP) per image)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("niou: empty list of mask pairs")
    return float(np.mean([iou(p, g) for p, g in pairs]))


def roc(score_maps, gt_masks, thresholds=None):
    """Pixel-level (threshold, tpr, fpr) pooled over the set.

    Pixels score >= threshold are predicted positive, so threshold 0 gives
    (tpr, fpr) = (1, 1) for scores in [0, 1].
    """
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, 101)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    pos_hist = np.zeros(len(thresholds))
    neg_hist = np.zeros(len(thresholds))
    edges = np.concatenate([thresholds, [np.inf]])
    n_pos = 0
    n_neg = 0
    for scores, gt in zip(score_maps, gt_masks):
        s = np.asarray(scores, dtype=np.float64).ravel()
        if s.min() < 0.0 or s.max() > 1.0:
            raise ValueError("roc: scores must lie in [0, 1]")
        g = _as_binary(gt, "ground-truth").ravel()
        pos_hist += np.histogram(s[g], bins=edges)[0]
        neg_hist += np.histogram(s[~g], bins=edges)[0]
        n_pos += int(g.sum())
        n_neg += int((~g).sum())
    # suffix sums: count of scores >= thresholds[i]; scores below the first
    # threshold fall outside every bin and every suffix, as they should
    tp = np.cumsum(pos_hist[::-1])[::-1]
    fp = np.cumsum(neg_hist[::-1])[::-1]
    tpr = tp / n_pos if n_pos else np.zeros_like(tp)
    fpr = fp / n_neg if n_neg else np.zeros_like(fp)
    return [(float(t), float(a), float(b)) for t, a, b in zip(thresholds, tpr, fpr)]


def diagnose(pred_mask, gt_mask) -> dict:
    """Connected-component error counters (8-connectivity).

    A ground-truth component with no overlapping prediction component is a
    miss; one overlapped by two or more prediction components is a split;
    symmetric-difference pixels between matched components count as
    boundary error.
    """
    pred = _as_binary(pred_mask, "prediction")
    gt = _as_binary(gt_mask, "ground-truth")
    pred_labels, _ = ndimage.label(pred, structure=EIGHT_CONNECTED)
    gt_labels, n_gt = ndimage.label(gt, structure=EIGHT_CONNECTED)
    missed = 0
    splits = 0
    boundary = 0
    for comp in range(1, n_gt + 1):
        region = gt_labels == comp
        overlapping = np.unique(pred_labels[region])
        overlapping = overlapping[overlapping != 0]
        if overlapping.size == 0:
            missed += 1
            continue
        if overlapping.size >= 2:
            splits += 1
        matched_pred = np.isin(pred_labels, overlapping)
        boundary += int(np.logical_xor(matched_pred, region).sum())
    return {"boundary_error_px": boundary, "missed_targets": missed,
            "split_detections": splits}


@dataclass
class ImageRecord:
    id: str
    tp: int
    fp: int
    fn: int
    iou: float


@dataclass
class MetricReport:
    records: list = field(default_factory=list)
    roc_points: list | None = None

    @property
    def iou(self) -> float:
        """Aggregate IoU from pooled tp/fp/fn."""
        tp = sum(r.tp for r in self.records)
        denom = sum(r.tp + r.fp + r.fn for r in self.records)
        return 1.0 if denom == 0 else tp / denom

    @property
    def niou(self) -> float:
        """Mean of per-image IoUs."""
        if not self.records:
            raise ValueError("empty report")
        return float(np.mean([r.iou for r in self.records]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "tp", "fp", "fn", "iou"])
            for r in self.records:
                writer.writerow([r.id, r.tp, r.fp, r.fn, f"{r.iou:.6f}"])
            writer.writerow(["<aggregate>", "", "", "", f"{self.iou:.6f}"])
            writer.writerow(["<niou>", "", "", "", f"{self.niou:.6f}"])

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"type": "image", "id": r.id, "tp": r.tp,
                                     "fp": r.fp, "fn": r.fn, "iou": r.iou}) + "\n")
            fh.write(json.dumps({"type": "aggregate", "iou": self.iou,
                                 "niou": self.niou}) + "\n")


def roc_to_csv(points, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "tpr", "fpr"])
        for t, a, b in points:
            writer.writerow([f"{t:.4f}", f"{a:.6f}", f"{b:.6f}"])


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("ALCNET_THREADS", "1")))
    except ValueError:
        return 1


def _raw_scores(model, image: np.ndarray) -> np.ndarray:
    scores = model(Tensor(image[None, :, :]))
    return sigmoid(scores).data[0]


def predict_scores(model, image: np.ndarray) -> np.ndarray:
    """Sigmoid score map for one grayscale image.

    Inference normalizes with the map's own per-channel moments (the batch
    axis is an outer loop over samples, so batch norm acts per sample during
    training; running-average normalization measurably degrades the squared
    contrast features). Running statistics are left untouched.
    """
    from .nn import set_stat_tracking

    was_training = model.training
    set_stat_tracking(model, False)
    model.train(True)
    try:
        return _raw_scores(model, image)
    finally:
        model.train(was_training)
        set_stat_tracking(model, True)


def record_for(sample_id, pred, gt) -> ImageRecord:
    pred = _as_binary(pred, "prediction")
    gt = _as_binary(gt, "ground-truth")
    tp = int(np.logical_and(pred, gt).sum())
    fp = int(np.logical_and(pred, ~gt).sum())
    fn = int(np.logical_and(~pred, gt).sum())
    return ImageRecord(sample_id, tp, fp, fn, iou(pred, gt))


def evaluate(model, samples, threshold: float = 0.5, with_roc: bool = False,
             thresholds=None) -> MetricReport:
    """Score every sample, binarize at `threshold`, pool the counts.

    Images are independent, so scoring parallelizes across ALCNET_THREADS
    workers with a deterministic in-order reduction.
    """
    from .nn import set_stat_tracking

    was_training = model.training
    set_stat_tracking(model, False)
    model.train(True)
    try:
        workers = _workers()
        if workers > 1 and len(samples) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                score_maps = list(pool.map(lambda s: _raw_scores(model, s.image), samples))
        else:
            score_maps = [_raw_scores(model, s.image) for s in samples]
    finally:
        model.train(was_training)
        set_stat_tracking(model, True)
    report = MetricReport()
    for sample, scores in zip(samples, score_maps):
        report.records.append(record_for(sample.id, scores >= threshold, sample.mask))
    if with_roc:
        report.roc_points = roc(score_maps, [s.mask for s in samples], thresholds)
    return report
