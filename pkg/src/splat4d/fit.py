"""Per-scene test-time optimization of a dynamic Gaussian cloud and relative pose."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import sh
from .errors import ContractError, InvalidParameterError
from .geometry import RelativePose
from .grad import FAMILIES, GAUSSIAN_FAMILIES
from .losses import LossWeights, Supervision, loss_total
from .model import (
    CameraIntrinsics,
    Frame,
    GaussianCloud,
    Scene,
    canonicalize_second_frame,
    make_raw_params,
)
from .raster import RasterSettings

log = logging.getLogger(__name__)

# base step sizes per parameter family; mu/v are further multiplied by scene_scale
DEFAULT_LR = {
    "mu": 1e-2,
    "v": 1e-2,
    "r": 1e-3,
    "s": 1e-3,
    "h": 1e-3,
    "o": 1e-3,
    "q": 1e-3,
    "tau": 1e-3,
}


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    scene_scale: float = 1.0
    lr_decay: str = "cosine"
    lr_final_fraction: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    init_depth: float | np.ndarray = 1.0
    sh_degree: int = 1
    freeze: frozenset = frozenset()
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        unknown = set(self.lr) - set(FAMILIES)
        if unknown:
            raise ContractError(f"unknown learning-rate families: {sorted(unknown)}")
        lr = dict(DEFAULT_LR)
        lr.update(self.lr)
        if any(v <= 0 for v in lr.values()):
            raise ContractError("step sizes must be positive")
        object.__setattr__(self, "lr", lr)
        freeze = frozenset(self.freeze)
        expanded = set(freeze)
        if "pose" in freeze:
            expanded |= {"q", "tau"}
        if "motion" in freeze:
            expanded.add("v")
        expanded -= {"pose", "motion"}
        if expanded - set(FAMILIES):
            raise ContractError(f"unknown freeze flags: {sorted(expanded - set(FAMILIES))}")
        object.__setattr__(self, "freeze", frozenset(expanded))
        if self.lr_decay not in ("cosine", "none"):
            raise ContractError("lr_decay must be 'cosine' or 'none'")

    def step_size(self, family: str, it: int) -> float:
        base = self.lr[family] * (self.scene_scale if family in ("mu", "v") else 1.0)
        if self.lr_decay == "none" or self.iterations <= 1:
            return base
        final = base * self.lr_final_fraction
        return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * it / self.iterations))


@dataclass
class FitReport:
    trace: list[dict]
    scene: Scene
    wall_time: float
    converged: bool
    iterations: int

    def trace_columns(self) -> list[str]:
        return ["iteration", "total", "motion", "point", "pose", "photo", "smooth"]


def init_scene(image_t: np.ndarray, image_t1: np.ndarray, K: CameraIntrinsics,
               cfg: FitConfig | None = None) -> Scene:
    """One Gaussian per pixel per frame, back-projected to the initial depth.

    Colors come from the pixel (DC term only), motion is zero, rotation is the
    identity, the scale gives a ~1 px footprint, opacity is 0.5 and the pose
    is the identity. Second-frame Gaussians are then canonicalized.
    """
    cfg = cfg or FitConfig()
    images = [np.asarray(image_t, dtype=np.float64), np.asarray(image_t1, dtype=np.float64)]
    if images[0].shape != images[1].shape:
        raise ContractError(f"image sizes differ: {images[0].shape} vs {images[1].shape}")
    if images[0].shape != (K.height, K.width, 3):
        raise ContractError(f"images are {images[0].shape}, intrinsics expect {(K.height, K.width, 3)}")
    H, W = K.height, K.width
    try:
        depth = np.broadcast_to(np.asarray(cfg.init_depth, dtype=np.float64), (2, H, W))
    except ValueError:
        raise ContractError(f"init_depth of shape {np.shape(cfg.init_depth)} does not fit {(H, W)}") from None
    if np.any(depth <= 0):
        raise ContractError("init_depth must be positive")
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    n = H * W
    params = make_raw_params(2 * n, cfg.sh_degree)
    pose = RelativePose.identity()
    mu, s, h = params.mu.copy(), params.s.copy(), params.h.copy()
    for u in (0, 1):
        sl = slice(u * n, (u + 1) * n)
        d = depth[u].ravel()
        cam = K.backproject(rows, cols, d)
        # camera-u coordinates to canonical: R^T (x - tau)
        mu[sl] = (cam - pose.tau) @ pose.rotation if u else cam
        s[sl] = np.log(d / K.fx)[:, None]
        h[sl, 0, :] = sh.rgb_to_dc(images[u].reshape(n, 3))
    params = params.replace(mu=mu, s=s, h=h)
    frames = np.repeat([Frame.T, Frame.T1], n)
    pixels = np.tile(np.stack([rows, cols], axis=1), (2, 1))
    cloud = canonicalize_second_frame(GaussianCloud(params, frames, pixels))
    return Scene(cloud, pose, K)


class Adam:
    """Per-family adaptive-moment optimizer over raw parameter arrays."""

    def __init__(self, cfg: FitConfig, shapes: dict):
        self.cfg = cfg
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, values: dict, grads: dict, it: int) -> dict:
        cfg = self.cfg
        self.t += 1
        out = {}
        for k, x in values.items():
            if k in cfg.freeze:
                out[k] = x
                continue
            g = grads[k]
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            m_hat = self.m[k] / (1 - cfg.beta1**self.t)
            v_hat = self.v[k] / (1 - cfg.beta2**self.t)
            out[k] = x - cfg.step_size(k, it) * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        return out


def optimize(scene: Scene, image_t, image_t1, sup: Supervision | None = None,
             cfg: FitConfig | None = None, settings: RasterSettings | None = None,
             callback=None) -> tuple[Scene, FitReport]:
    """Minimize the total loss over raw Gaussian parameters and the pose."""
    cfg = cfg or FitConfig()
    sup = sup or Supervision.empty()
    images = [np.asarray(image_t, dtype=np.float64), np.asarray(image_t1, dtype=np.float64)]
    t0 = time.perf_counter()
    values = {f: getattr(scene.cloud.params, f) for f in GAUSSIAN_FAMILIES}
    values["q"] = scene.pose.q
    values["tau"] = scene.pose.tau
    adam = Adam(cfg, {k: v.shape for k, v in values.items()})
    scene.cloud.activated()  # reject non-finite input parameters up front
    trace = []
    converged = True
    for it in range(cfg.iterations):
        try:
            res = loss_total(scene, images, sup, cfg.weights, settings)
        except InvalidParameterError as exc:
            # a step pushed some parameter to inf/nan
            log.error("non-finite parameters at iteration %d (%s); aborting", it, exc)
            converged = False
            break
        grads = {f: res.grads.get(f) for f in FAMILIES}
        finite = math.isfinite(res.total) and all(np.all(np.isfinite(g)) for g in grads.values())
        trace.append({"iteration": it, "total": res.total, **res.components})
        if not finite:
            log.error("non-finite loss or gradient at iteration %d; aborting", it)
            converged = False
            break
        if callback is not None:
            callback(it, scene, res)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %5d  total %.6f  %s", it, res.total,
                     " ".join(f"{k}={v:.5f}" for k, v in res.components.items()))
        values = adam.step(values, grads, it)
        params = scene.cloud.params.replace(**{f: values[f] for f in GAUSSIAN_FAMILIES})
        pose = scene.pose if {"q", "tau"} <= cfg.freeze else RelativePose(values["q"], values["tau"])
        values["q"] = pose.q
        scene = scene.replace(cloud=scene.cloud.with_params(params), pose=pose)
    wall = time.perf_counter() - t0
    return scene, FitReport(trace, scene, wall, converged, len(trace))


# ---------------------------------------------------------------------------
# synthetic scenes with exact ground truth


@dataclass(frozen=True)
class SyntheticSpec:
    """A textured plane plus an optional moving sphere, seen by two cameras."""

    size: int = 64
    focal: float = 64.0
    plane_point: tuple = (0.0, 0.0, 4.0)
    plane_normal: tuple = (0.1, -0.05, -1.0)
    sphere: bool = True
    sphere_center: tuple = (-0.35, 0.1, 2.6)
    sphere_radius: float = 0.55
    sphere_velocity: tuple = (0.2, 0.0, -0.05)
    camera_axis: tuple = (0.0, 1.0, 0.0)
    camera_angle_deg: float = 2.0
    camera_translation: tuple = (-0.25, 0.02, 0.03)
    texture_scale: float = 1.0
    gt_opacity: float = 0.97
    gt_footprint_px: float = 0.6
    sh_degree: int = 1

    @property
    def static(self) -> bool:
        return (not self.sphere) or not np.any(np.asarray(self.sphere_velocity))


@dataclass
class SyntheticScene:
    images: tuple
    intrinsics: CameraIntrinsics
    supervision: Supervision
    gt_scene: Scene
    sphere_coverage: np.ndarray  # (2, H, W) composited sphere weight
    spec: SyntheticSpec

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.gt_scene.pose.tau))

    @property
    def mean_depth(self) -> float:
        return float(np.mean(self.supervision.point[0][..., 2]))


def _texture(local: np.ndarray, phases: np.ndarray, scale: float) -> np.ndarray:
    x, y = local[..., 0] * scale, local[..., 1] * scale
    z = local[..., 2] * scale
    r = 0.5 + 0.3 * np.sin(2.1 * x + phases[0]) * np.cos(1.7 * y + phases[1])
    g = 0.5 + 0.3 * np.sin(1.3 * y + 0.8 * z + phases[2])
    b = 0.5 + 0.25 * np.cos(1.9 * x - 1.1 * y + phases[3])
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def _cast(origins, dirs, spec: SyntheticSpec, sphere_center):
    """Nearest hit of rays with the plane and sphere: ``(t, on_sphere)``."""
    n = np.asarray(spec.plane_normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    p0 = np.asarray(spec.plane_point, dtype=np.float64)
    denom = dirs @ n
    t_plane = ((p0 - origins) @ n) / np.where(np.abs(denom) > 1e-12, denom, np.nan)
    t_plane = np.where(t_plane > 0, t_plane, np.inf)
    t_sphere = np.full(len(dirs), np.inf)
    if spec.sphere:
        oc = origins - sphere_center
        b = np.sum(dirs * oc, axis=1)
        c = np.sum(oc * oc, axis=1) - spec.sphere_radius**2
        a = np.sum(dirs * dirs, axis=1)
        disc = b * b - a * c
        hit = disc >= 0
        root = (-b - np.sqrt(np.where(hit, disc, 0.0))) / a
        t_sphere = np.where(hit & (root > 0), root, np.inf)
    on_sphere = t_sphere < t_plane
    t = np.where(on_sphere, t_sphere, t_plane)
    if not np.all(np.isfinite(t)):
        raise ContractError("synthetic camera sees empty background; enlarge the plane tilt range")
    return t, on_sphere


def make_synthetic_scene(spec: SyntheticSpec | None = None, seed: int = 0,
                         settings: RasterSettings | None = None) -> SyntheticScene:
    """Render a two-view scene with known geometry, motion and pose.

    The GT cloud holds one Gaussian per pixel per frame on the ray-cast
    surface; images and GT point/flow maps are rasterized from it.
    """
    from .raster import composite_attributes, forward, frame_request

    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, size=(2, 4))
    size = spec.size
    K = CameraIntrinsics(spec.focal, spec.focal, (size - 1) / 2, (size - 1) / 2, size, size)
    axis = np.asarray(spec.camera_axis, dtype=np.float64)
    angle = np.deg2rad(spec.camera_angle_deg)
    q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis / np.linalg.norm(axis)])
    pose = RelativePose(q, spec.camera_translation)
    velocity = np.asarray(spec.sphere_velocity, dtype=np.float64) if spec.sphere else np.zeros(3)
    center0 = np.asarray(spec.sphere_center, dtype=np.float64)

    H = W = size
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    n = H * W
    params = make_raw_params(2 * n, spec.sh_degree)
    mu, v, s, h = params.mu.copy(), params.v.copy(), params.s.copy(), params.h.copy()
    is_sphere = np.zeros(2 * n, bool)
    for u, view in ((0, RelativePose.identity()), (1, pose)):
        rot = view.rotation
        dirs_cam = K.backproject(rows, cols, np.ones(n))
        dirs = dirs_cam @ rot  # R^T d for each row
        origins = np.broadcast_to(view.camera_center, dirs.shape)
        center = center0 + u * velocity
        t, on_sphere = _cast(origins, dirs, spec, center)
        hit = origins + t[:, None] * dirs
        local = np.where(on_sphere[:, None], (hit - center) * 2.0, hit)
        color = np.where(on_sphere[:, None], _texture(local, phases[1], spec.texture_scale),
                         _texture(local, phases[0], spec.texture_scale))
        sl = slice(u * n, (u + 1) * n)
        motion = np.where(on_sphere[:, None], velocity, 0.0)
        mu[sl] = hit
        # second-frame Gaussians carry backward motion before canonicalization
        v[sl] = -motion if u else motion
        depth = (hit @ rot.T + view.tau)[:, 2]
        s[sl] = np.log(depth * spec.gt_footprint_px / K.fx)[:, None]
        h[sl, 0, :] = sh.rgb_to_dc(color)
        is_sphere[sl] = on_sphere
    # opacity 1 maps to the smallest raw value whose logistic rounds to exactly 1
    raw_o = 40.0 if spec.gt_opacity == 1.0 else np.log(spec.gt_opacity) - np.log1p(-spec.gt_opacity)
    o = np.full(2 * n, raw_o)
    params = params.replace(mu=mu, v=v, s=s, h=h, o=o)
    frames = np.repeat([Frame.T, Frame.T1], n)
    pixels = np.tile(np.stack([rows, cols], axis=1), (2, 1))
    cloud = canonicalize_second_frame(GaussianCloud(params, frames, pixels))
    gt_scene = Scene(cloud, pose, K)

    images, points, flows, masks, coverage = [], [], [], [], []
    for u in (0, 1):
        out, ctx = forward(cloud, frame_request(gt_scene, u), settings)
        images.append(np.clip(out.color, 0.0, 1.0))
        points.append(out.point)
        flows.append(out.flow)
        masks.append(out.alpha > 0.5)
        coverage.append(composite_attributes(ctx, is_sphere.astype(np.float64))[..., 0])
    sup = Supervision(
        point=np.stack(points),
        point_mask=np.stack(masks),
        flow=np.stack(flows),
        flow_mask=np.stack(masks),
        pose=pose,
    )
    return SyntheticScene(tuple(images), K, sup, gt_scene, np.stack(coverage), spec)


def fit_config_replace(cfg: FitConfig, **changes) -> FitConfig:
    return dataclasses.replace(cfg, **changes)
