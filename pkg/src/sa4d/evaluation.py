"""Segmentation metrics: per-object IoU and accuracy on masks binarized at
the 0.1 rendered-mask threshold, averaged over objects and frames."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

MASK_THRESHOLD = 0.1

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    per_object: dict               # oid -> {"iou": float, "acc": float, "frames": int}
    mean_iou: float
    mean_acc: float
    per_frame: list                # [{"frame": i, "miou": ..., "macc": ...}]
    threshold: float = MASK_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "mean_acc": self.mean_acc,
            "threshold": self.threshold,
            "per_object": {str(k): v for k, v in sorted(self.per_object.items())},
            "per_frame": self.per_frame,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _binarize(mask: np.ndarray, threshold: float) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    return mask > threshold


def _object_scores(pred: np.ndarray, gt: np.ndarray):
    """IoU plus accuracy over the bounding region of the union."""
    union = pred | gt
    inter = pred & gt
    n_union = int(union.sum())
    iou = inter.sum() / n_union if n_union else 0.0
    ys, xs = np.nonzero(union)
    if len(ys) == 0:
        return iou, 1.0
    box = (slice(ys.min(), ys.max() + 1), slice(xs.min(), xs.max() + 1))
    acc = float(np.mean(pred[box] == gt[box]))
    return float(iou), acc


def evaluate(predictions, gt_masks, threshold: float = MASK_THRESHOLD) -> MetricsReport:
    """predictions: per frame, a dict object_id -> mask (float raster in
    [0, 1] or boolean); gt_masks: per frame, an integer ID raster.

    Objects with empty GT in a frame are skipped for that frame.
    """
    if len(predictions) != len(gt_masks):
        raise ValueError("predictions and gt_masks differ in frame count")

    object_ious: dict = {}
    object_accs: dict = {}
    per_frame = []
    for fi, (pred, gt) in enumerate(zip(predictions, gt_masks)):
        gt = np.asarray(gt)
        frame_ious, frame_accs = [], []
        for oid, pmask in sorted(pred.items()):
            gmask = gt == oid
            if not gmask.any():
                log.warning("frame %d: object %d has empty GT, skipped", fi, oid)
                continue
            iou, acc = _object_scores(_binarize(pmask, threshold), gmask)
            object_ious.setdefault(oid, []).append(iou)
            object_accs.setdefault(oid, []).append(acc)
            frame_ious.append(iou)
            frame_accs.append(acc)
        per_frame.append({
            "frame": fi,
            "miou": float(np.mean(frame_ious)) if frame_ious else float("nan"),
            "macc": float(np.mean(frame_accs)) if frame_accs else float("nan"),
        })

    per_object = {
        oid: {"iou": float(np.mean(object_ious[oid])),
              "acc": float(np.mean(object_accs[oid])),
              "frames": len(object_ious[oid])}
        for oid in object_ious
    }
    mean_iou = float(np.mean([v["iou"] for v in per_object.values()])) if per_object else 0.0
    mean_acc = float(np.mean([v["acc"] for v in per_object.values()])) if per_object else 0.0
    return MetricsReport(per_object=per_object, mean_iou=mean_iou,
                         mean_acc=mean_acc, per_frame=per_frame, threshold=threshold)


def masks_from_id_raster(ids: np.ndarray, object_ids) -> dict:
    """Binary per-object masks from a predicted ID raster."""
    ids = np.asarray(ids)
    return {oid: ids == oid for oid in object_ids}
