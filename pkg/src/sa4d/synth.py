"""Synthetic dynamic scene factory.

Builds blob-per-object scenes with known per-Gaussian ground truth, an
optional drift cohort that transfers from the first object to the second at
a chosen time, rendered ground-truth ID masks, and noisy pseudo-masks
emulating a video tracker's failure modes (void dropout, boundary flips,
whole-object ID swaps).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .deformation import (MotionProgram, Track, Trajectory, export_scene,
                          ground_truth_labels)
from .images import read_pgm16, read_ppm, write_pgm16, write_ppm
from .pipeline import TrainingFrame
from .scene import (Camera, CanonicalScene, Gaussian, SceneError,
                    load_cameras, load_scene, save_cameras, save_scene)
from .splatting import compute_plan


@dataclass(frozen=True)
class NoiseModel:
    void_dropout: float = 0.0    # P(object region relabeled void, per frame)
    boundary_flip: float = 0.0   # P(pixel near a boundary flips to the neighbor)
    boundary_dist: int = 2       # band half-width in pixels
    wrong_id: float = 0.0        # P(whole object relabeled, per frame)
    seed: int = 0

    def __post_init__(self):
        for rate in (self.void_dropout, self.boundary_flip, self.wrong_id):
            if not (0.0 <= rate <= 1.0):
                raise SceneError(f"noise rate {rate} outside [0,1]")

    def to_dict(self):
        return {"void_dropout": self.void_dropout, "boundary_flip": self.boundary_flip,
                "boundary_dist": self.boundary_dist, "wrong_id": self.wrong_id,
                "seed": self.seed}

    @staticmethod
    def from_dict(d):
        return NoiseModel(**d)


@dataclass(frozen=True)
class SceneSpec:
    object_count: int = 2
    gaussians_per_object: int = 200
    drift_cohort: int = 0        # taken out of object 1's allotment
    drift_time: float = 0.5
    drift_blend: float = 0.0
    frame_count: int = 20
    image_size: int = 48
    seed: int = 0
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if self.object_count > 255:
            raise SceneError(f"object_count {self.object_count} exceeds 255")
        if self.drift_cohort >= self.gaussians_per_object:
            raise SceneError("drift cohort must be smaller than one object")

    def to_dict(self):
        d = {k: getattr(self, k) for k in
             ("object_count", "gaussians_per_object", "drift_cohort", "drift_time",
              "drift_blend", "frame_count", "image_size", "seed")}
        d["noise"] = self.noise.to_dict()
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["noise"] = NoiseModel.from_dict(d["noise"])
        return SceneSpec(**d)


@dataclass
class Dataset:
    spec: SceneSpec
    canonical: CanonicalScene
    motion: MotionProgram
    cameras: list            # [training camera, held-out camera]
    frames: list             # TrainingFrame with noisy masks
    gt_masks: list           # clean GT ID rasters, parallel to frames

    @property
    def train_camera(self) -> Camera:
        return self.cameras[0]

    @property
    def heldout_camera(self) -> Camera:
        return self.cameras[1]

    def timestamps(self):
        return [f.timestamp for f in self.frames]


SCENE_DEPTH = 6.0
BLOB_SPACING = 3.0
BLOB_RADIUS = 0.55


def _make_camera(size: int, yaw: float = 0.0, shift=(0.0, 0.0, 0.0)) -> Camera:
    c, s = np.cos(yaw), np.sin(yaw)
    ext = np.eye(4)
    ext[:3, :3] = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    ext[:3, 3] = np.asarray(shift, dtype=float)
    return Camera(extrinsic=ext, fx=float(size), fy=float(size),
                  cx=size / 2.0, cy=size / 2.0, width=size, height=size)


def _object_centers(n: int) -> np.ndarray:
    if n == 1:
        return np.array([[0.0, 0.0, SCENE_DEPTH]])
    if n == 2:
        half = BLOB_SPACING / 2.0
        return np.array([[-half, 0.0, SCENE_DEPTH], [half, 0.0, SCENE_DEPTH]])
    angles = 2 * np.pi * np.arange(n) / n
    r = BLOB_SPACING / 2.0
    return np.stack([r * np.cos(angles), r * np.sin(angles),
                     np.full(n, SCENE_DEPTH)], axis=1)


def _object_color(i: int, n: int) -> np.ndarray:
    hue = i / max(n, 1)
    return np.array([0.5 + 0.5 * np.cos(2 * np.pi * hue),
                     0.5 + 0.5 * np.cos(2 * np.pi * (hue + 1 / 3)),
                     0.5 + 0.5 * np.cos(2 * np.pi * (hue + 2 / 3))])


def generate_scene(spec: SceneSpec):
    """Returns a Dataset: canonical scene, motion program, cameras, frames
    with clean GT and noisy pseudo-masks. Bit-reproducible from the seed."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    centers = _object_centers(spec.object_count)

    gaussians = []
    per_object_indices = []
    idx = 0
    for oi in range(spec.object_count):
        color = _object_color(oi, spec.object_count)
        obj_idx = []
        for _ in range(spec.gaussians_per_object):
            offset = rng.normal(0.0, BLOB_RADIUS / 1.8, size=3)
            offset[2] *= 0.4  # keep blobs shallow so self-occlusion stays mild
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            gaussians.append(Gaussian(
                index=idx, position=centers[oi] + offset, rotation=q,
                scale=rng.uniform(0.08, 0.14, size=3),
                opacity=float(rng.uniform(0.6, 0.9)),
                color=np.clip(color + rng.normal(0, 0.05, size=3), 0, 1)))
            obj_idx.append(idx)
            idx += 1
        per_object_indices.append(obj_idx)

    canonical = CanonicalScene(gaussians=tuple(gaussians),
                               object_count=spec.object_count)
    motion = _build_motion(spec, canonical, per_object_indices, centers)

    cameras = [_make_camera(spec.image_size),
               _make_camera(spec.image_size, yaw=0.06, shift=(0.12, 0.05, 0.0))]

    timestamps = np.linspace(0.0, 1.0, spec.frame_count)
    frames, gt_masks = [], []
    noise_rng = np.random.Generator(np.random.Philox(spec.noise.seed + 1))
    for t in timestamps:
        deformed = export_scene(canonical, motion, float(t))
        plan = compute_plan(deformed, cameras[0])
        labels = ground_truth_labels(motion, len(canonical), float(t))
        gt = ids_from_labels(plan, labels)
        noisy = apply_noise(gt, spec.noise, noise_rng)
        rgb = plan.apply(np.array([g.color for g in deformed.gaussians]))
        frames.append(TrainingFrame(camera=cameras[0], timestamp=float(t),
                                    mask=noisy, image=rgb))
        gt_masks.append(gt)

    return Dataset(spec=spec, canonical=canonical, motion=motion,
                   cameras=cameras, frames=frames, gt_masks=gt_masks)


def _build_motion(spec, canonical, per_object_indices, centers):
    tracks = []
    # object-owned tracks first so drift can reference them by index
    for oi, obj_idx in enumerate(per_object_indices):
        tracks.append(Track(indices=tuple(obj_idx), trajectory=Trajectory.static(),
                            object_id=oi + 1))
    if spec.drift_cohort > 0:
        # cohort = a compact sub-cluster of object 1, nearest to a pivot point
        obj1 = np.array(per_object_indices[0], dtype=int)
        pivot = centers[0] + np.array([BLOB_RADIUS * 0.5, 0.0, 0.0])
        pos = canonical.positions()[obj1]
        order = np.argsort(np.linalg.norm(pos - pivot, axis=1))
        cohort = obj1[order[:spec.drift_cohort]]
        remaining = tuple(i for i in per_object_indices[0] if i not in set(cohort))
        tracks[0] = Track(indices=remaining, trajectory=Trajectory.static(),
                          object_id=1)
        # destination: circular glide around the scene midpoint, parking the
        # cohort on object 2's side of the scene after the transfer
        mid = centers.mean(axis=0) + np.array([0.0, 0.35, 0.0])
        dest = Track(indices=(), object_id=2,
                     trajectory=Trajectory.circular(center=mid, axis=(0, 0, 1),
                                                    angular_velocity=-1.6 * np.pi))
        tracks.append(dest)
        drift_traj = Trajectory.drift(from_track=0, to_track=len(tracks) - 1,
                                      transfer_time=spec.drift_time,
                                      blend_width=spec.drift_blend)
        tracks.append(Track(indices=tuple(int(i) for i in cohort),
                            trajectory=drift_traj, object_id=1,
                            drift_target_object=2))
    return MotionProgram(tracks=tuple(tracks))


def ids_from_labels(plan, labels: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """ID raster from per-Gaussian labels: composite a point mask per label,
    assign each pixel the strongest label above the threshold, else void."""
    present = sorted(set(int(l) for l in labels if l > 0))
    if not present:
        return np.zeros((plan.height, plan.width), dtype=int)
    stack = []
    for lab in present:
        payload = (labels == lab).astype(float)[:, None]
        stack.append(plan.apply(payload)[:, :, 0])
    stack = np.stack(stack)
    best = np.argmax(stack, axis=0)
    best_val = np.take_along_axis(stack, best[None], axis=0)[0]
    return np.where(best_val > threshold, np.asarray(present)[best], 0)


def apply_noise(gt: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """One frame of tracker-style corruption. Channels run in a fixed order:
    whole-object ID swaps, void dropout, then boundary flips."""
    out = gt.copy()
    ids = sorted(set(out.ravel().tolist()) - {0})

    for oid in ids:
        if noise.wrong_id > 0 and rng.random() < noise.wrong_id:
            others = [o for o in ids if o != oid]
            if others:
                out[gt == oid] = others[int(rng.integers(len(others)))]
    for oid in ids:
        if noise.void_dropout > 0 and rng.random() < noise.void_dropout:
            out[out == oid] = 0

    if noise.boundary_flip > 0:
        flipped = out.copy()
        coin = rng.random(out.shape)
        for lab in sorted(set(out.ravel().tolist())):
            region = out == lab
            # distance from each member pixel to the nearest foreign pixel
            dist, (iy, ix) = ndimage.distance_transform_edt(region, return_indices=True)
            band = region & (dist <= noise.boundary_dist) & (dist > 0)
            pick = band & (coin < noise.boundary_flip)
            flipped[pick] = out[iy[pick], ix[pick]]
        out = flipped
    return out


# --- dataset directory layout ------------------------------------------------

def save_dataset(root, ds: Dataset):
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    save_scene(root / "scene.json", ds.canonical, motion=ds.motion)
    save_cameras(root / "cameras.json", ds.cameras)
    frame_recs = []
    for i, (fr, gt) in enumerate(zip(ds.frames, ds.gt_masks)):
        stem = root / "frames" / f"{i:04d}"
        write_ppm(f"{stem}.ppm", fr.image)
        write_pgm16(f"{stem}.gt.pgm", gt)
        write_pgm16(f"{stem}.mask.pgm", fr.mask)
        frame_recs.append({"index": i, "timestamp": fr.timestamp, "camera_index": 0})
    manifest = {"spec": ds.spec.to_dict(), "frames": frame_recs,
                "train_camera": 0, "heldout_camera": 1}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_dataset(root) -> Dataset:
    root = Path(root)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    spec = SceneSpec.from_dict(manifest["spec"])
    canonical = load_scene(root / "scene.json")
    with open(root / "scene.json") as fh:
        motion = MotionProgram.from_dict(json.load(fh)["motion"])
    cameras = load_cameras(root / "cameras.json")
    frames, gt_masks = [], []
    for rec in manifest["frames"]:
        stem = root / "frames" / f"{rec['index']:04d}"
        cam = cameras[rec["camera_index"]]
        frames.append(TrainingFrame(camera=cam, timestamp=rec["timestamp"],
                                    mask=read_pgm16(f"{stem}.mask.pgm"),
                                    image=read_ppm(f"{stem}.ppm")))
        gt_masks.append(read_pgm16(f"{stem}.gt.pgm"))
    return Dataset(spec=spec, canonical=canonical, motion=motion,
                   cameras=cameras, frames=frames, gt_masks=gt_masks)
