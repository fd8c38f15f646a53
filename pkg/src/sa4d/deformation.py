"""Analytic motion programs: the export interface from canonical space to a
timestamp, with controllable Gaussian drifting between objects.

A motion program partitions the canonical indices into tracks; each track
owns a trajectory (static, linear, circular, or drift between two tracks).
Drift members follow their source track before the transfer time and the
destination track after it, which reproduces the failure mode where one
primitive serves different objects at different times.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .scene import CanonicalScene, Gaussian, SceneError


class MotionError(ValueError):
    """Raised when a motion program does not cover the scene or is malformed."""


@dataclass(frozen=True)
class Trajectory:
    kind: str                 # "static" | "linear" | "circular" | "drift"
    velocity: np.ndarray = None       # linear
    center: np.ndarray = None         # circular
    axis: np.ndarray = None           # circular, unit
    angular_velocity: float = 0.0     # circular, rad per unit time
    from_track: int = -1              # drift
    to_track: int = -1                # drift
    transfer_time: float = 0.5        # drift, in (0, 1)
    blend_width: float = 0.0          # drift

    @staticmethod
    def static():
        return Trajectory(kind="static")

    @staticmethod
    def linear(velocity):
        return Trajectory(kind="linear", velocity=np.asarray(velocity, dtype=float))

    @staticmethod
    def circular(center, axis, angular_velocity):
        axis = np.asarray(axis, dtype=float)
        return Trajectory(kind="circular", center=np.asarray(center, dtype=float),
                          axis=axis / np.linalg.norm(axis),
                          angular_velocity=float(angular_velocity))

    @staticmethod
    def drift(from_track, to_track, transfer_time, blend_width=0.0):
        if not (0.0 < transfer_time < 1.0):
            raise MotionError(f"drift transfer_time {transfer_time} outside (0,1)")
        return Trajectory(kind="drift", from_track=from_track, to_track=to_track,
                          transfer_time=float(transfer_time), blend_width=float(blend_width))


@dataclass(frozen=True)
class Track:
    indices: tuple            # canonical gaussian indices owned by this track
    trajectory: Trajectory
    object_id: int            # object that owns this track (drift: pre-transfer owner)
    drift_target_object: int = -1  # drift only: owner after the transfer


@dataclass(frozen=True)
class MotionProgram:
    tracks: tuple

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        for tr in self.tracks:
            if tr.trajectory.kind == "drift":
                for ref in (tr.trajectory.from_track, tr.trajectory.to_track):
                    if not (0 <= ref < len(self.tracks)):
                        raise MotionError(f"drift references invalid track {ref}")
                    if self.tracks[ref].trajectory.kind == "drift":
                        raise MotionError("drift track cannot reference another drift track")

    def validate_coverage(self, n: int):
        seen = {}
        for ti, tr in enumerate(self.tracks):
            for idx in tr.indices:
                if idx in seen:
                    raise MotionError(f"index {idx} covered by tracks {seen[idx]} and {ti}")
                seen[idx] = ti
        missing = set(range(n)) - set(seen)
        if missing:
            raise MotionError(f"motion program leaves {len(missing)} indices uncovered")

    def to_dict(self) -> dict:
        recs = []
        for tr in self.tracks:
            traj = tr.trajectory
            rec = {"indices": list(tr.indices), "kind": traj.kind, "object_id": tr.object_id}
            if traj.kind == "linear":
                rec["velocity"] = traj.velocity.tolist()
            elif traj.kind == "circular":
                rec["center"] = traj.center.tolist()
                rec["axis"] = traj.axis.tolist()
                rec["angular_velocity"] = traj.angular_velocity
            elif traj.kind == "drift":
                rec.update(from_track=traj.from_track, to_track=traj.to_track,
                           transfer_time=traj.transfer_time, blend_width=traj.blend_width,
                           drift_target_object=tr.drift_target_object)
            recs.append(rec)
        return {"tracks": recs}

    @staticmethod
    def from_dict(data: dict) -> "MotionProgram":
        tracks = []
        for rec in data["tracks"]:
            kind = rec["kind"]
            if kind == "static":
                traj = Trajectory.static()
            elif kind == "linear":
                traj = Trajectory.linear(rec["velocity"])
            elif kind == "circular":
                traj = Trajectory.circular(rec["center"], rec["axis"], rec["angular_velocity"])
            elif kind == "drift":
                traj = Trajectory.drift(rec["from_track"], rec["to_track"],
                                        rec["transfer_time"], rec.get("blend_width", 0.0))
            else:
                raise MotionError(f"unknown trajectory kind {kind!r}")
            tracks.append(Track(indices=tuple(rec["indices"]), trajectory=traj,
                                object_id=rec["object_id"],
                                drift_target_object=rec.get("drift_target_object", -1)))
        return MotionProgram(tracks=tuple(tracks))


@dataclass(frozen=True)
class DeformedScene:
    """The canonical scene evaluated at one timestamp."""

    timestamp: float
    gaussians: tuple
    object_count: int

    def __len__(self):
        return len(self.gaussians)

    def positions(self) -> np.ndarray:
        return np.array([g.position for g in self.gaussians]).reshape(-1, 3)


def _rotate_about_axis(p, center, axis, angle):
    # Rodrigues rotation of p about the line through center along axis.
    v = p - center
    c, s = np.cos(angle), np.sin(angle)
    return center + v * c + np.cross(axis, v) * s + axis * np.dot(axis, v) * (1 - c)


def _evaluate_trajectory(traj: Trajectory, p0: np.ndarray, t: float) -> np.ndarray:
    if traj.kind == "static":
        return p0
    if traj.kind == "linear":
        return p0 + traj.velocity * t
    if traj.kind == "circular":
        return _rotate_about_axis(p0, traj.center, traj.axis, traj.angular_velocity * t)
    raise MotionError(f"cannot evaluate trajectory kind {traj.kind!r} directly")


def _smoothstep(x: float) -> float:
    x = min(1.0, max(0.0, x))
    return x * x * (3 - 2 * x)


def export_scene(canonical: CanonicalScene, mp: MotionProgram, t: float) -> DeformedScene:
    """Map the canonical scene to timestamp t in [0, 1]."""
    if not (0.0 <= t <= 1.0):
        raise MotionError(f"timestamp {t} outside [0,1]")
    mp.validate_coverage(len(canonical))

    positions = canonical.positions().copy()
    for tr in mp.tracks:
        idx = np.array(tr.indices, dtype=int)
        if idx.size == 0:
            continue
        traj = tr.trajectory
        if traj.kind == "drift":
            src = mp.tracks[traj.from_track].trajectory
            dst = mp.tracks[traj.to_track].trajectory
            lo = traj.transfer_time - traj.blend_width / 2
            hi = traj.transfer_time + traj.blend_width / 2
            for i in idx:
                p0 = canonical.gaussians[i].position
                if t < lo:
                    positions[i] = _evaluate_trajectory(src, p0, t)
                elif t > hi:
                    positions[i] = _evaluate_trajectory(dst, p0, t)
                elif hi <= lo:
                    # zero blend width: the transfer instant itself already
                    # belongs to the destination, matching the label tie rule
                    positions[i] = _evaluate_trajectory(dst, p0, t)
                else:
                    a = _evaluate_trajectory(src, p0, t)
                    b = _evaluate_trajectory(dst, p0, t)
                    u = _smoothstep((t - lo) / (hi - lo))
                    positions[i] = (1 - u) * a + u * b
        else:
            for i in idx:
                positions[i] = _evaluate_trajectory(traj, canonical.gaussians[i].position, t)

    gaussians = tuple(
        replace(g, position=positions[g.index]) for g in canonical.gaussians
    )
    return DeformedScene(timestamp=float(t), gaussians=gaussians,
                         object_count=canonical.object_count)


def ground_truth_labels(mp: MotionProgram, n: int, t: float) -> np.ndarray:
    """Per-Gaussian object IDs at timestamp t; drift members switch owner at
    the transfer time (the transfer instant itself belongs to the destination)."""
    mp.validate_coverage(n)
    labels = np.zeros(n, dtype=int)
    for tr in mp.tracks:
        idx = np.array(tr.indices, dtype=int)
        if idx.size == 0:
            continue
        if tr.trajectory.kind == "drift" and t >= tr.trajectory.transfer_time:
            labels[idx] = tr.drift_target_object
        else:
            labels[idx] = tr.object_id
    return labels
