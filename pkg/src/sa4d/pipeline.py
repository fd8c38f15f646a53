"""Training loop, 4D segmentation refinement, and the Gaussian identity table.

Training alternates: sample a frame, export the deformed scene, evaluate
identity encodings at (canonical position, t), splat them, and take one Adam
step on lambda_2d * CE + lambda_3d * KL. Refinement post-processes raw
per-timestamp segmentations (outlier removal, then gradient-based boundary
pruning against the mask supervision) and stores the result per timestamp;
inference reads the table by nearest-timestamp lookup and never re-runs the
field.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .deformation import export_scene
from .field import (AdamState, FieldNumericalError, IdentityFieldParams,
                    adam_step, classifier_logits, field_backward, field_forward)
from .losses import LossConfig, NeighborIndex, loss_2d, loss_3d, loss_proj
from .scene import Camera, CanonicalScene
from .splatting import RenderOutput, compute_plan, render


class PipelineError(RuntimeError):
    """Raised for unusable training inputs or diverged runs."""


@dataclass(frozen=True)
class TrainingFrame:
    camera: Camera
    timestamp: float
    mask: np.ndarray           # (H, W) int object IDs, 0 = void
    image: np.ndarray = None   # (H, W, 3) optional RGB, diagnostics only

    def __post_init__(self):
        if not (0.0 <= self.timestamp <= 1.0):
            raise PipelineError(f"frame timestamp {self.timestamp} outside [0,1]")
        if self.mask.shape != (self.camera.height, self.camera.width):
            raise PipelineError("mask dimensions do not match camera")


@dataclass(frozen=True)
class RefinementConfig:
    stride: int = 1
    k_out: int = 10
    sigma_mult: float = 3.0
    lambda_proj: float = 1.0
    mask_threshold: float = 0.1
    invert_prune_sign: bool = False  # A/B switch for the gradient-sign rule

    def __post_init__(self):
        if self.stride < 1:
            raise PipelineError("refinement stride must be >= 1")


@dataclass
class IdentityTable:
    """Per training timestamp, object ID -> set of canonical indices."""

    timestamps: list                 # sorted, strictly increasing
    entries: list                    # per timestamp: dict object_id -> frozenset
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        recs = []
        for ti, entry in enumerate(self.entries):
            for oid in sorted(entry):
                recs.append({"t_index": ti, "object_id": int(oid),
                             "indices": sorted(int(i) for i in entry[oid])})
        return {"timestamps": list(self.timestamps), "entries": recs, "meta": self.meta}

    @staticmethod
    def from_dict(data: dict) -> "IdentityTable":
        timestamps = list(data["timestamps"])
        entries = [dict() for _ in timestamps]
        for rec in data["entries"]:
            entries[rec["t_index"]][rec["object_id"]] = frozenset(rec["indices"])
        return IdentityTable(timestamps=timestamps, entries=entries,
                             meta=data.get("meta", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def load(path) -> "IdentityTable":
        with open(path) as fh:
            return IdentityTable.from_dict(json.load(fh))


def lookup(table: IdentityTable, t: float, object_id: int) -> frozenset:
    """Entry at the stored timestamp nearest to t; ties go to the earlier one;
    unknown object IDs yield the empty set."""
    if not table.timestamps:
        raise PipelineError("identity table is empty")
    ts = np.asarray(table.timestamps)
    best = int(np.argmin(np.abs(ts - t)))  # argmin takes the first on ties
    return table.entries[best].get(object_id, frozenset())


@dataclass
class TrainResult:
    params: IdentityFieldParams
    state: AdamState
    trace: np.ndarray  # (iters, 4): iter, L2d, L3d, L


def _frame_plans(canonical, motion, frames):
    """Deformed scenes and compositing plans are geometry-only, so they are
    computed once per frame and reused every iteration."""
    plans = []
    for fr in frames:
        deformed = export_scene(canonical, motion, fr.timestamp)
        plans.append((deformed, compute_plan(deformed, fr.camera)))
    return plans


def train(canonical: CanonicalScene, motion, frames, cfg: LossConfig = None,
          iterations: int = 5000, seed: int = 0, lr: float = 5e-4,
          params: IdentityFieldParams = None,
          checkpoint_on_error=None) -> TrainResult:
    """Optimize the identity field against the frames' mask supervision."""
    if not frames:
        raise PipelineError("no training frames")
    cfg = cfg or LossConfig()
    params = params.copy() if params is not None else IdentityFieldParams.init(seed=seed)
    state = AdamState.init(params, lr=lr)
    rng = np.random.Generator(np.random.Philox(seed))

    plans = _frame_plans(canonical, motion, frames)
    positions = canonical.positions()
    m_eff = min(cfg.sample_count, len(canonical))
    cfg3d = LossConfig(lambda_2d=cfg.lambda_2d, lambda_3d=cfg.lambda_3d, k=cfg.k,
                       sample_count=m_eff, lambda_proj=cfg.lambda_proj)
    # neighbor structure depends only on geometry: one index per frame
    nbr_indices = [NeighborIndex(deformed.positions()) for deformed, _ in plans]

    trace = np.zeros((iterations, 4))
    for it in range(iterations):
        fi = int(rng.integers(len(frames)))
        frame = frames[fi]
        deformed, plan = plans[fi]

        e, acts = field_forward(params, positions, frame.timestamp,
                                return_activations=True)
        out = render(deformed, frame.camera, e, plan=plan)
        logits = classifier_logits(params, out.image)
        l2d, grad_logits = loss_2d(logits, frame.mask)
        l3d, grad_e_3d, grad_cls_3d = loss_3d(e, params, nbr_indices[fi], cfg3d, rng)
        total = cfg.lambda_2d * l2d + cfg.lambda_3d * l3d
        if not np.isfinite(total):
            if checkpoint_on_error is not None:
                checkpoint_on_error(params, state)
            raise FieldNumericalError(f"non-finite loss at iteration {it}")

        # CE path: logits -> feature raster -> splat weights -> encodings
        h, w_, c = grad_logits.shape
        flat = grad_logits.reshape(-1, c)
        grad_feat = (flat @ params.weights["wc"]).reshape(h, w_, -1)
        grad_e_2d = plan.apply_transpose(grad_feat)
        grad_wc_2d = flat.T @ out.image.reshape(-1, out.image.shape[-1])
        grad_bc_2d = flat.sum(axis=0)

        grad_e = cfg.lambda_2d * grad_e_2d + cfg.lambda_3d * grad_e_3d
        grads = field_backward(params, acts, grad_e)
        grads["wc"] = cfg.lambda_2d * grad_wc_2d + cfg.lambda_3d * grad_cls_3d["wc"]
        grads["bc"] = cfg.lambda_2d * grad_bc_2d + cfg.lambda_3d * grad_cls_3d["bc"]
        adam_step(params, grads, state)
        trace[it] = (it, l2d, l3d, total)

    return TrainResult(params=params, state=state, trace=trace)


def classify_gaussians(params: IdentityFieldParams, canonical: CanonicalScene,
                       t: float) -> np.ndarray:
    """Argmax class ID per Gaussian at timestamp t (ties to the lower class)."""
    e = field_forward(params, canonical.positions(), t)
    logits = classifier_logits(params, e)
    return np.argmax(logits, axis=-1)


def segment_at(params: IdentityFieldParams, canonical: CanonicalScene, motion,
               t: float, object_id: int) -> frozenset:
    """Canonical indices whose classified identity at t equals object_id."""
    if not (0 <= object_id < 256):
        raise PipelineError(f"object_id {object_id} outside 0..255")
    labels = classify_gaussians(params, canonical, t)
    return frozenset(np.nonzero(labels == object_id)[0].tolist())


def remove_outliers(indices, positions: np.ndarray, cfg: RefinementConfig) -> frozenset:
    """Drop members whose mean distance to their k_out nearest co-members
    exceeds mean + sigma_mult * std of that statistic. Single pass."""
    members = np.array(sorted(indices), dtype=int)
    if len(members) <= cfg.k_out:
        return frozenset(members.tolist())
    pts = np.asarray(positions)[members]
    tree = cKDTree(pts)
    dists, _ = tree.query(pts, k=cfg.k_out + 1)  # first column is self
    stat = dists[:, 1:].mean(axis=1)
    cutoff = stat.mean() + cfg.sigma_mult * stat.std()
    return frozenset(members[stat <= cutoff].tolist())


def prune_boundary(indices, deformed, frame: TrainingFrame, object_id: int,
                   cfg: RefinementConfig, plan=None) -> frozenset:
    """Remove members whose rendered point-mask gradient says their presence
    increases the projection loss (mass mostly outside the object's mask)."""
    members = sorted(indices)
    if not members:
        return frozenset()
    gt = (frame.mask == object_id).astype(float)
    if not gt.any():
        # no supervision for this object in this frame (e.g. a tracker
        # dropout): nothing to prune against, keep the membership
        return frozenset(members)
    payload = np.zeros((len(deformed), 1))
    payload[members, 0] = 1.0
    out = render(deformed, frame.camera, payload, plan=plan)
    _, grads = loss_proj(out, gt, cfg.lambda_proj)
    keep = []
    for j in members:
        g = grads[j]
        drop = (g < 0) if cfg.invert_prune_sign else (g > 0)
        if not drop:
            keep.append(j)
    return frozenset(keep)


def supervising_frame_index(frames, fi: int, object_id: int):
    """The frame nearest in time to frames[fi] whose mask contains object_id,
    preferring fi itself; None when the object never appears (e.g. a tracker
    dropped it in every frame)."""
    if np.any(frames[fi].mask == object_id):
        return fi
    t = frames[fi].timestamp
    candidates = [(abs(fr.timestamp - t), j) for j, fr in enumerate(frames)
                  if np.any(fr.mask == object_id)]
    return min(candidates)[1] if candidates else None


def build_table(params: IdentityFieldParams, canonical: CanonicalScene, motion,
                frames, cfg: RefinementConfig = None) -> IdentityTable:
    """Segment every object at each stride-th training timestamp, refine, and
    store the index sets."""
    cfg = cfg or RefinementConfig()
    ordered = sorted(range(len(frames)), key=lambda i: frames[i].timestamp)
    picked = ordered[::cfg.stride]

    t0 = time.perf_counter()
    geometry = {}

    def geom(fi):
        # deformed scenes and plans reused across objects and fallbacks
        if fi not in geometry:
            deformed = export_scene(canonical, motion, frames[fi].timestamp)
            geometry[fi] = (deformed, compute_plan(deformed, frames[fi].camera))
        return geometry[fi]

    timestamps, entries = [], []
    for fi in picked:
        t = frames[fi].timestamp
        deformed, _ = geom(fi)
        positions = deformed.positions()
        labels = classify_gaussians(params, canonical, t)
        entry = {}
        for oid in range(1, canonical.object_count + 1):
            raw = frozenset(np.nonzero(labels == oid)[0].tolist())
            refined = remove_outliers(raw, positions, cfg)
            # prune against the nearest frame that actually supervises the
            # object; its own frame may have lost it to tracker dropout
            pi = supervising_frame_index(frames, fi, oid)
            if pi is not None:
                p_deformed, p_plan = geom(pi)
                refined = prune_boundary(refined, p_deformed, frames[pi], oid,
                                         cfg, plan=p_plan)
            entry[oid] = refined
        timestamps.append(t)
        entries.append(entry)
    seconds = time.perf_counter() - t0

    meta = {"stride": cfg.stride, "lambda_proj": cfg.lambda_proj,
            "k_out": cfg.k_out, "sigma_mult": cfg.sigma_mult,
            "mask_threshold": cfg.mask_threshold, "build_seconds": seconds}
    return IdentityTable(timestamps=timestamps, entries=entries, meta=meta)
