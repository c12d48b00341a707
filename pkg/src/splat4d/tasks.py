"""Downstream maps from a fitted scene: depth, 2D flow, motion masks, opacity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RelativePose, pose_slerp
from .model import Frame, Scene
from .raster import (
    ATTRIBUTES,
    RasterSettings,
    RenderOutput,
    RenderRequest,
    rasterize,
)

ALPHA_THRESHOLD = 0.5
MOVING_THRESHOLD = 0.05


@dataclass(frozen=True)
class Flow2D:
    flow: np.ndarray  # (H, W, 2) displacement in (u, v) = (col, row) pixels
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.flow.shape[:2] != self.valid.shape or self.flow.shape[-1] != 2:
            raise ValueError(f"flow {self.flow.shape} and mask {self.valid.shape} do not match")


def derive_depth(out: RenderOutput, view: RelativePose | None = None,
                 alpha_threshold: float = ALPHA_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Camera depth from the point map, plus a validity mask.

    The point map is premultiplied by alpha, so moving it into ``view`` adds
    ``A * tau`` rather than ``tau``; the result is then directly comparable
    with the composited z channel. Pixels at or below the alpha threshold are
    zeroed and marked invalid.
    """
    X = out.point
    A = out.alpha
    if view is None or view.is_identity():
        z = X[..., 2].copy()
    else:
        z = X @ view.rotation[2] + A * view.tau[2]
    valid = A > alpha_threshold
    return np.where(valid, z, 0.0), valid


def frame_outputs(scene: Scene, dt: float, view: RelativePose, settings=None,
                  attributes=ATTRIBUTES) -> RenderOutput:
    req = RenderRequest(scene.intrinsics, view, dt, attributes)
    return rasterize(scene.cloud, req, settings)


def derive_optical_flow(scene: Scene, settings: RasterSettings | None = None,
                        alpha_threshold: float = ALPHA_THRESHOLD) -> Flow2D:
    """Project composited scene flow into a 2D displacement field.

    Each pixel's point and motion are taken from the canonical render at
    ``dt=0`` (normalized by alpha), then ``pi(P (X + V)) - pi(X)``.
    """
    settings = settings or RasterSettings()
    out = frame_outputs(scene, 0.0, RelativePose.identity(), settings,
                        frozenset({"point", "flow", "alpha"}))
    K = scene.intrinsics
    X = out.normalized("point")
    V = out.normalized("flow")
    moved = scene.pose.apply(X + V)
    valid = (out.alpha > alpha_threshold) & (X[..., 2] > settings.z_near) & (moved[..., 2] > settings.z_near)
    with np.errstate(divide="ignore", invalid="ignore"):
        flow = K.project(moved) - K.project(X)
    flow = np.where(valid[..., None], flow, 0.0)
    return Flow2D(flow, valid)


def segment_moving(out: RenderOutput, threshold: float = MOVING_THRESHOLD,
                   alpha_threshold: float = ALPHA_THRESHOLD) -> np.ndarray:
    """Pixels whose composited motion exceeds ``threshold`` scene units per step.

    The flow map is used as composited (premultiplied), so a pixel half
    covered by an object moving at speed ``s`` reports ``s / 2``.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    speed = np.linalg.norm(out.flow, axis=-1)
    return (speed > threshold) & (out.alpha > alpha_threshold)


def interpolation_view(scene: Scene, dt: float) -> RelativePose:
    """Camera in between the two inputs: slerp rotation, blend translation."""
    return pose_slerp(RelativePose.identity(), scene.pose, dt)


def interpolate_4d(scene: Scene, dt: float, view: RelativePose | None = None,
                   settings: RasterSettings | None = None, attributes=ATTRIBUTES) -> RenderOutput:
    """Render at time ``t + dt`` from ``view`` (default: the in-between camera)."""
    if view is None:
        view = interpolation_view(scene, dt)
    return frame_outputs(scene, dt, view, settings, attributes)


@dataclass(frozen=True)
class OpacityExport:
    opacity: np.ndarray  # (N,) activated opacity per Gaussian
    source_frame: np.ndarray
    source_pixel: np.ndarray
    maps: np.ndarray  # (2, H, W) opacity of each pixel's source Gaussian, NaN if none
    alpha: np.ndarray  # (H, W) composited alpha at the requested time and view


def opacity_map(scene: Scene, view: RelativePose | None = None, dt: float = 0.0,
                settings: RasterSettings | None = None) -> OpacityExport:
    cloud = scene.cloud
    o = cloud.activated().o
    H, W = scene.intrinsics.height, scene.intrinsics.width
    maps = np.full((2, H, W), np.nan)
    for frame in Frame:
        idx = cloud.frame_indices(frame)
        px = cloud.source_pixel[idx]
        inside = (px[:, 0] >= 0) & (px[:, 0] < H) & (px[:, 1] >= 0) & (px[:, 1] < W)
        idx, px = idx[inside], px[inside]
        maps[int(frame), px[:, 0], px[:, 1]] = o[idx]
    out = frame_outputs(scene, dt, view or RelativePose.identity(), settings, frozenset({"alpha"}))
    return OpacityExport(o, cloud.source_frame.copy(), cloud.source_pixel.copy(), maps, out.alpha)
