"""Training and refinement objectives.

Three losses drive the system: per-pixel cross-entropy against the (noisy)
mask supervision, a KL regularizer pulling each sampled Gaussian's class
distribution toward those of its k nearest neighbors in deformed space, and
the mask projection loss used by boundary pruning. A deterministic exact
k-NN index backs the KL term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .field import classifier_logits, softmax
from .splatting import RenderOutput, backward_payload

PROB_FLOOR = 1e-12  # clamp inside logs


class LossDataError(ValueError):
    """Raised for label/shape mismatches in loss inputs."""


@dataclass(frozen=True)
class LossConfig:
    lambda_2d: float = 1.0
    lambda_3d: float = 2.0
    k: int = 5
    sample_count: int = 1000
    lambda_proj: float = 1.0

    def __post_init__(self):
        if self.k < 1 or self.sample_count < 1:
            raise LossDataError("k and sample_count must be >= 1")
        if min(self.lambda_2d, self.lambda_3d, self.lambda_proj) < 0:
            raise LossDataError("loss weights must be non-negative")


class NeighborIndex:
    """Exact k-NN over deformed Gaussian positions with deterministic
    tie-breaking (ascending distance, then ascending index)."""

    def __init__(self, positions: np.ndarray):
        self.positions = np.asarray(positions, dtype=float)
        self._tree = cKDTree(self.positions)

    def __len__(self):
        return len(self.positions)

    def query(self, indices: np.ndarray, k: int) -> np.ndarray:
        """(len(indices), k) neighbor indices, self excluded."""
        indices = np.asarray(indices, dtype=int)
        n = len(self.positions)
        if k + 1 > n:
            raise LossDataError(f"k={k} needs at least {k + 1} gaussians, have {n}")
        # over-query to survive duplicate points sitting on top of the query
        kq = min(n, k + 2)
        dists, nbrs = self._tree.query(self.positions[indices], k=kq)
        out = np.empty((len(indices), k), dtype=int)
        for row, qi in enumerate(indices):
            cand = [(d, j) for d, j in zip(dists[row], nbrs[row]) if j != qi]
            if len(cand) < k:  # heavy duplication: fall back to a full scan
                d_all = np.linalg.norm(self.positions - self.positions[qi], axis=1)
                cand = [(d, j) for j, d in enumerate(d_all) if j != qi]
            cand.sort()
            out[row] = [j for _, j in cand[:k]]
        return out


def loss_2d(pred_logits: np.ndarray, mask: np.ndarray):
    """Mean per-pixel cross-entropy; void (ID 0) is an ordinary class.

    Returns (scalar, gradient raster of the same shape as pred_logits).
    """
    logits = np.asarray(pred_logits, dtype=float)
    mask = np.asarray(mask)
    if logits.shape[:-1] != mask.shape:
        raise LossDataError(f"logit raster {logits.shape} vs mask {mask.shape}")
    n_classes = logits.shape[-1]
    if mask.min() < 0 or mask.max() >= n_classes:
        raise LossDataError(f"mask IDs outside [0, {n_classes})")

    probs = softmax(logits)
    n_pixels = mask.size
    flat_probs = probs.reshape(n_pixels, n_classes)
    flat_ids = mask.reshape(n_pixels)
    picked = flat_probs[np.arange(n_pixels), flat_ids]
    loss = -np.mean(np.log(np.maximum(picked, PROB_FLOOR)))

    grad = flat_probs.copy()
    grad[np.arange(n_pixels), flat_ids] -= 1.0
    grad /= n_pixels
    return loss, grad.reshape(logits.shape)


def _kl_terms(f_j: np.ndarray, f_i: np.ndarray):
    """KL(f_j || f_i) per row with the probability floor, plus dL/df pieces."""
    fj_c = np.maximum(f_j, PROB_FLOOR)
    fi_c = np.maximum(f_i, PROB_FLOOR)
    log_ratio = np.log(fj_c) - np.log(fi_c)
    kl = np.sum(f_j * log_ratio, axis=-1)
    # d/df_j [f_j (log f_j - log f_i)] = log_ratio + 1[f_j above floor]
    d_fj = log_ratio + (f_j > PROB_FLOOR)
    d_fi = -(f_j / fi_c) * (f_i > PROB_FLOOR)
    return kl, d_fj, d_fi


def loss_3d(encodings: np.ndarray, params, index: NeighborIndex,
            cfg: LossConfig, rng: np.random.Generator):
    """KL regularizer over m sampled Gaussians and their k nearest neighbors.

    Returns (scalar, grad w.r.t. encodings, grad w.r.t. classifier weights).
    """
    encodings = np.asarray(encodings, dtype=float)
    n = encodings.shape[0]
    if n < cfg.k + 1:
        raise LossDataError(f"need more than k={cfg.k} gaussians, have {n}")
    m = cfg.sample_count
    if m > n:
        raise LossDataError(f"sample_count {m} exceeds gaussian count {n}")

    samples = rng.choice(n, size=m, replace=False)
    neighbors = index.query(samples, cfg.k)

    logits = classifier_logits(params, encodings)
    probs = softmax(logits)

    grad_probs = np.zeros_like(probs)
    total = 0.0
    for col in range(cfg.k):
        nbr = neighbors[:, col]
        kl, d_fj, d_fi = _kl_terms(probs[samples], probs[nbr])
        total += kl.sum()
        np.add.at(grad_probs, samples, d_fj)
        np.add.at(grad_probs, nbr, d_fi)
    scale = 1.0 / (m * cfg.k)
    loss = total * scale
    grad_probs *= scale

    # chain through softmax: dL/dz = f * (dL/df - sum(f * dL/df))
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    grad_logits = probs * (grad_probs - inner)

    w = params.weights
    grad_encodings = grad_logits @ w["wc"]
    grad_classifier = {"wc": grad_logits.T @ encodings, "bc": grad_logits.sum(axis=0)}
    return loss, grad_encodings, grad_classifier


def loss_proj(rendered_mask: RenderOutput, gt_mask: np.ndarray, lambda_proj: float):
    """Mask projection loss: reward rendered mass on GT pixels, penalize spill.

    Returns (scalar, per-Gaussian gradients dL/dm_j).
    """
    m_img = rendered_mask.image[:, :, 0]
    gt = np.asarray(gt_mask, dtype=float)
    if gt.shape != m_img.shape:
        raise LossDataError(f"rendered mask {m_img.shape} vs GT {gt.shape}")
    loss = float(-np.sum(gt * m_img) + lambda_proj * np.sum((1.0 - gt) * m_img))
    upstream = lambda_proj * (1.0 - gt) - gt
    grads = backward_payload(rendered_mask, upstream)
    return loss, grads[:, 0]
