"""Core scene types: 3D Gaussians, cameras, and screen-space projection.

Projection follows the EWA convention: the 3D covariance R diag(s^2) R^T is
pushed through the world-to-camera rotation and the perspective Jacobian,
then regularized with a small isotropic low-pass term so every footprint
stays at least a fraction of a pixel wide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Footprint regularization and compositing constants shared across modules.
COV2D_REGULARIZATION = 0.3   # px^2 added to the projected covariance diagonal
ALPHA_CLAMP = 0.99           # per-splat opacity ceiling
ALPHA_CUTOFF = 1.0 / 255.0   # contributions below this are dropped entirely
NEAR_PLANE = 0.01            # camera-space z at or below this is culled
CULL_SIGMA = 3.0             # screen-space bounding ellipse used for culling


class SceneError(ValueError):
    """Raised for malformed scenes, cameras, or scene files."""


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic 3D Gaussian primitive in world space."""

    index: int
    position: np.ndarray   # (3,)
    rotation: np.ndarray   # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray      # (3,) per-axis standard deviations, > 0
    opacity: float         # in (0, 1]
    color: np.ndarray      # (3,) RGB in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float))
        if self.index < 0:
            raise SceneError(f"negative gaussian index {self.index}")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise SceneError(f"gaussian {self.index}: quaternion not unit norm")
        if not np.all(self.scale > 0):
            raise SceneError(f"gaussian {self.index}: non-positive scale")
        if not (0.0 < self.opacity <= 1.0):
            raise SceneError(f"gaussian {self.index}: opacity {self.opacity} outside (0,1]")

    def covariance(self) -> np.ndarray:
        """World-space 3x3 covariance R diag(s^2) R^T."""
        r = quaternion_to_matrix(self.rotation)
        return r @ np.diag(self.scale**2) @ r.T


@dataclass(frozen=True)
class CanonicalScene:
    """The reference (rest) configuration of all Gaussians in a scene."""

    gaussians: tuple
    object_count: int

    def __post_init__(self):
        object.__setattr__(self, "gaussians", tuple(self.gaussians))
        if not (0 < self.object_count <= 255):
            raise SceneError(f"object_count {self.object_count} outside 1..255")
        indices = [g.index for g in self.gaussians]
        if indices != list(range(len(indices))):
            raise SceneError("gaussian indices must be 0..N-1 contiguous")

    def __len__(self):
        return len(self.gaussians)

    def positions(self) -> np.ndarray:
        return np.array([g.position for g in self.gaussians]).reshape(-1, 3)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: 4x4 world-to-camera extrinsic plus intrinsics in pixels."""

    extrinsic: np.ndarray  # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "extrinsic", np.asarray(self.extrinsic, dtype=float))
        if self.extrinsic.shape != (4, 4):
            raise SceneError("extrinsic must be 4x4")
        rot = self.extrinsic[:3, :3]
        if abs(np.linalg.det(rot) - 1.0) > 1e-6 or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise SceneError("extrinsic rotation block must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return pts @ self.extrinsic[:3, :3].T + self.extrinsic[:3, 3]


@dataclass(frozen=True)
class SplatFootprint:
    """Screen-space footprint of one projected Gaussian."""

    source_index: int
    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray   # (2, 2) pixels^2, positive definite
    depth: float        # camera-space z
    opacity: float


#: Sentinel returned by project_gaussian when the splat cannot contribute.
CULLED = None


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def matrix_to_quaternion(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix; w >= 0."""
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def project_gaussian(g: Gaussian, cam: Camera):
    """Project one Gaussian to its 2D footprint; returns CULLED when it
    cannot contribute (behind the near plane or 3-sigma ellipse off-screen)."""
    p_cam = cam.world_to_camera(g.position)[0]
    z = p_cam[2]
    if z <= NEAR_PLANE:
        return CULLED

    mean2d = np.array([cam.fx * p_cam[0] / z + cam.cx,
                       cam.fy * p_cam[1] / z + cam.cy])

    rot = cam.extrinsic[:3, :3]
    cov_cam = rot @ g.covariance() @ rot.T
    jac = np.array([
        [cam.fx / z, 0.0, -cam.fx * p_cam[0] / z**2],
        [0.0, cam.fy / z, -cam.fy * p_cam[1] / z**2],
    ])
    cov2d = jac @ cov_cam @ jac.T
    cov2d = cov2d + COV2D_REGULARIZATION * np.eye(2)

    radius = CULL_SIGMA * np.sqrt(_max_eigenvalue_2x2(cov2d))
    if (mean2d[0] + radius < 0 or mean2d[0] - radius > cam.width
            or mean2d[1] + radius < 0 or mean2d[1] - radius > cam.height):
        return CULLED

    return SplatFootprint(source_index=g.index, mean2d=mean2d, cov2d=cov2d,
                          depth=float(z), opacity=float(g.opacity))


def _max_eigenvalue_2x2(c: np.ndarray) -> float:
    a, b, d = c[0, 0], c[0, 1], c[1, 1]
    return 0.5 * (a + d + np.sqrt((a - d) ** 2 + 4 * b * b))


def gaussian_alpha(fp: SplatFootprint, pixel: np.ndarray) -> float:
    """Splat opacity at one pixel; clamped at 0.99 and floored to 0 below 1/255."""
    d = np.asarray(pixel, dtype=float) - fp.mean2d
    inv = np.linalg.inv(fp.cov2d)
    alpha = min(ALPHA_CLAMP, fp.opacity * np.exp(-0.5 * d @ inv @ d))
    return alpha if alpha >= ALPHA_CUTOFF else 0.0


# --- scene / camera file I/O -------------------------------------------------

def scene_to_dict(scene: CanonicalScene, motion=None) -> dict:
    out = {
        "gaussians": [
            {
                "position": g.position.tolist(),
                "rotation": g.rotation.tolist(),
                "scale": g.scale.tolist(),
                "opacity": g.opacity,
                "color": g.color.tolist(),
            }
            for g in scene.gaussians
        ],
        "object_count": scene.object_count,
    }
    if motion is not None:
        out["motion"] = motion.to_dict()
    return out


def scene_from_dict(data: dict) -> CanonicalScene:
    try:
        gaussians = [
            Gaussian(index=i, position=g["position"], rotation=g["rotation"],
                     scale=g["scale"], opacity=g["opacity"], color=g["color"])
            for i, g in enumerate(data["gaussians"])
        ]
        return CanonicalScene(gaussians=tuple(gaussians), object_count=data["object_count"])
    except (KeyError, TypeError) as exc:
        raise SceneError(f"malformed scene file: {exc}") from exc


def save_scene(path, scene: CanonicalScene, motion=None):
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene, motion), fh)


def load_scene(path) -> CanonicalScene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


def camera_to_dict(cam: Camera) -> dict:
    return {
        "extrinsic": cam.extrinsic.reshape(-1).tolist(),
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
    }


def camera_from_dict(data: dict) -> Camera:
    try:
        return Camera(extrinsic=np.array(data["extrinsic"], dtype=float).reshape(4, 4),
                      fx=data["fx"], fy=data["fy"], cx=data["cx"], cy=data["cy"],
                      width=data["width"], height=data["height"])
    except (KeyError, TypeError) as exc:
        raise SceneError(f"malformed camera record: {exc}") from exc


def save_cameras(path, cameras):
    with open(path, "w") as fh:
        json.dump([camera_to_dict(c) for c in cameras], fh)


def load_cameras(path):
    with open(path) as fh:
        return [camera_from_dict(d) for d in json.load(fh)]
