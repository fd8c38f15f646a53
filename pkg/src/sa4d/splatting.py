"""Front-to-back alpha compositing of per-Gaussian payloads.

Because geometry is frozen during identity-field training, the composited
image is linear in the payload: out(p) = sum_i w_i(p) * payload_i with
w_i = alpha_i * prod_{j<i}(1 - alpha_j). The forward pass therefore splits
into a geometry-only "plan" (per-Gaussian footprint weights, reusable across
payloads) and a cheap weighted sum; the backward pass w.r.t. payloads is the
transpose of the same weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import (ALPHA_CLAMP, ALPHA_CUTOFF, Camera, project_gaussian)

# Per-pixel traversal stops below this transmittance. Kept at 1e-6 so the
# truncation residual (bounded by the remaining transmittance) stays under
# the 1e-6 tolerance at which render is compared against the brute-force
# reference for unit-bounded payloads.
T_TERMINATE = 1e-6
WEIGHT_FLOOR = 1e-6      # weights below this are not retained for backward
RASTER_SIGMA = 3.5       # bbox radius in sigma; covers the 1/255 alpha cutoff


class SplatUsageError(RuntimeError):
    """Raised when backward is requested without a retained weight record."""


@dataclass
class Contribution:
    """One Gaussian's retained footprint: weights over a clipped pixel box."""

    index: int
    y0: int
    y1: int
    x0: int
    x1: int
    weights: np.ndarray  # (y1-y0, x1-x0), values in [0, 1]


@dataclass
class RenderPlan:
    """Geometry-only compositing weights for one (scene, camera) pair."""

    height: int
    width: int
    n_gaussians: int
    contributions: list          # depth-sorted Contribution records
    transmittance: np.ndarray    # (H, W) final T per pixel
    weight_sum: np.ndarray       # (H, W) sum of all weights (incl. below floor)

    def apply(self, payload: np.ndarray) -> np.ndarray:
        payload = np.atleast_2d(np.asarray(payload, dtype=float))
        if payload.shape[0] != self.n_gaussians:
            raise SplatUsageError(
                f"payload has {payload.shape[0]} rows, scene has {self.n_gaussians}")
        out = np.zeros((self.height, self.width, payload.shape[1]))
        for c in self.contributions:
            out[c.y0:c.y1, c.x0:c.x1, :] += c.weights[:, :, None] * payload[c.index]
        return out

    def apply_transpose(self, upstream: np.ndarray) -> np.ndarray:
        # backward drops weights under the retention floor; the forward sum
        # stays exact
        upstream = np.asarray(upstream, dtype=float)
        if upstream.ndim == 2:
            upstream = upstream[:, :, None]
        grads = np.zeros((self.n_gaussians, upstream.shape[2]))
        for c in self.contributions:
            w = np.where(c.weights >= WEIGHT_FLOOR, c.weights, 0.0)
            grads[c.index] += np.tensordot(
                w, upstream[c.y0:c.y1, c.x0:c.x1, :], axes=([0, 1], [0, 1]))
        return grads


@dataclass
class RenderOutput:
    image: np.ndarray          # (H, W, D)
    transmittance: np.ndarray  # (H, W)
    plan: RenderPlan           # weight record, None once detached

    @property
    def weight_sum(self):
        return self.plan.weight_sum


def _pixel_grid(y0, y1, x0, x1):
    ys = np.arange(y0, y1) + 0.5
    xs = np.arange(x0, x1) + 0.5
    return np.meshgrid(xs, ys)


def compute_plan(scene, cam: Camera) -> RenderPlan:
    """Project, depth-sort, and composite alphas into reusable weights."""
    footprints = []
    for g in scene.gaussians:
        fp = project_gaussian(g, cam)
        if fp is not None:
            footprints.append(fp)
    footprints.sort(key=lambda f: (f.depth, f.source_index))

    h, w = cam.height, cam.width
    transmittance = np.ones((h, w))
    weight_sum = np.zeros((h, w))
    contributions = []

    for fp in footprints:
        a, b, d = fp.cov2d[0, 0], fp.cov2d[0, 1], fp.cov2d[1, 1]
        lam_max = 0.5 * (a + d + np.sqrt((a - d) ** 2 + 4 * b * b))
        radius = RASTER_SIGMA * np.sqrt(lam_max)
        x0 = max(0, int(np.floor(fp.mean2d[0] - radius)))
        x1 = min(w, int(np.ceil(fp.mean2d[0] + radius)) + 1)
        y0 = max(0, int(np.floor(fp.mean2d[1] - radius)))
        y1 = min(h, int(np.ceil(fp.mean2d[1] + radius)) + 1)
        if x0 >= x1 or y0 >= y1:
            continue

        px, py = _pixel_grid(y0, y1, x0, x1)
        dx = px - fp.mean2d[0]
        dy = py - fp.mean2d[1]
        det = a * d - b * b
        maha2 = (d * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
        alpha = np.minimum(ALPHA_CLAMP, fp.opacity * np.exp(-0.5 * maha2))
        alpha[alpha < ALPHA_CUTOFF] = 0.0

        t_box = transmittance[y0:y1, x0:x1]
        alpha[t_box < T_TERMINATE] = 0.0       # traversal already stopped there
        weights = alpha * t_box
        transmittance[y0:y1, x0:x1] = t_box * (1.0 - alpha)
        weight_sum[y0:y1, x0:x1] += weights

        if np.any(weights > 0):
            contributions.append(Contribution(index=fp.source_index, y0=y0, y1=y1,
                                              x0=x0, x1=x1, weights=weights))

    return RenderPlan(height=h, width=w, n_gaussians=len(scene.gaussians),
                      contributions=contributions, transmittance=transmittance,
                      weight_sum=weight_sum)


def render(scene, cam: Camera, payload: np.ndarray, plan: RenderPlan = None) -> RenderOutput:
    """Composite per-Gaussian payload vectors into an (H, W, D) raster.

    A precomputed plan for the same (scene, cam) pair may be passed to skip
    the geometry work; the weight record is retained for backward_payload.
    """
    if plan is None:
        plan = compute_plan(scene, cam)
    image = plan.apply(payload)
    return RenderOutput(image=image, transmittance=plan.transmittance, plan=plan)


def render_reference(scene, cam: Camera, payload: np.ndarray) -> RenderOutput:
    """Brute-force compositing oracle: no bounding boxes, no early
    termination, extended precision accumulation."""
    payload = np.atleast_2d(np.asarray(payload, dtype=np.longdouble))
    h, w = cam.height, cam.width
    image = np.zeros((h, w, payload.shape[1]), dtype=np.longdouble)
    transmittance = np.ones((h, w), dtype=np.longdouble)

    footprints = []
    for g in scene.gaussians:
        fp = project_gaussian(g, cam)
        if fp is not None:
            footprints.append(fp)
    footprints.sort(key=lambda f: (f.depth, f.source_index))

    px, py = _pixel_grid(0, h, 0, w)
    for fp in footprints:
        a, b, d = fp.cov2d[0, 0], fp.cov2d[0, 1], fp.cov2d[1, 1]
        det = a * d - b * b
        dx = px - fp.mean2d[0]
        dy = py - fp.mean2d[1]
        # alpha itself is evaluated in working precision so the 1/255 cutoff
        # decision cannot disagree with the production path; only the
        # compositing accumulators use extended precision
        maha2 = (d * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
        alpha = np.minimum(ALPHA_CLAMP, fp.opacity * np.exp(-0.5 * maha2))
        alpha[alpha < ALPHA_CUTOFF] = 0.0
        alpha = alpha.astype(np.longdouble)
        image += (alpha * transmittance)[:, :, None] * payload[fp.source_index]
        transmittance = transmittance * (1.0 - alpha)

    return RenderOutput(image=image.astype(float),
                        transmittance=transmittance.astype(float), plan=None)


def backward_payload(out: RenderOutput, upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * image) w.r.t. the per-Gaussian payloads."""
    if out.plan is None:
        raise SplatUsageError("render output has no retained weight record")
    return out.plan.apply_transpose(upstream)
