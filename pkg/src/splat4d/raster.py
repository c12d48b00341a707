"""Forward 4D rasterization: advect, project, depth-sort and alpha-composite.

Color, point, flow and camera-z channels are composited with one shared set
of per-pixel weights ``w_i = a_i * prod_{j<i} (1 - a_j)``, where
``a_i = o_i * exp(-q_i / 2)`` and ``q_i`` is the squared Mahalanobis distance
of the pixel center to the projected 2D Gaussian. Point and flow maps are
premultiplied by alpha.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels, sh
from .errors import ContractError
from .geometry import RelativePose
from .model import CameraIntrinsics, DynamicGaussian, GaussianCloud, Scene, activate

log = logging.getLogger(__name__)

ATTRIBUTES = frozenset({"color", "point", "flow", "depth", "alpha"})

# feature columns composited per Gaussian
_COLOR = slice(0, 3)
_POINT = slice(3, 6)
_FLOW = slice(6, 9)
_DEPTH = 9
N_FEATS = 10


@dataclass(frozen=True)
class RasterSettings:
    eps_reg: float = 0.3
    cutoff_sigma: float = 3.0
    z_near: float = 0.01
    t_min: float = 1e-4
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


class TargetFrame(str, Enum):
    CANONICAL = "canonical"
    SECOND = "second"


@dataclass(frozen=True)
class RenderRequest:
    intrinsics: CameraIntrinsics
    view: RelativePose = field(default_factory=RelativePose.identity)
    dt: float = 0.0
    attributes: frozenset = ATTRIBUTES

    def __post_init__(self):
        attrs = frozenset(self.attributes)
        if not attrs:
            raise ContractError("attribute set must be non-empty")
        unknown = attrs - ATTRIBUTES
        if unknown:
            raise ContractError(f"unknown attributes: {sorted(unknown)}")
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "dt", float(self.dt))


@dataclass(frozen=True)
class RenderOutput:
    """Per-pixel maps; channels not requested are ``None``."""

    color: np.ndarray | None = None
    point: np.ndarray | None = None
    flow: np.ndarray | None = None
    alpha: np.ndarray | None = None
    zdepth: np.ndarray | None = None

    def normalized(self, channel: str, eps: float = 1e-12) -> np.ndarray:
        """``point`` or ``flow`` divided by alpha (visualization only)."""
        data = getattr(self, channel)
        a = self.alpha[..., None]
        return np.where(a > eps, data / np.maximum(a, eps), 0.0)


@dataclass
class Projection:
    """Per-Gaussian quantities at one (time, view) request."""

    centers: np.ndarray  # advected canonical centers (N, 3)
    cam: np.ndarray  # camera-frame centers (N, 3)
    mean2d: np.ndarray  # (N, 2) as (u, v) = (col, row)
    cov3d: np.ndarray  # canonical covariance (N, 3, 3)
    cov_cam: np.ndarray
    jac: np.ndarray  # (N, 2, 3)
    cov2d: np.ndarray  # regularized (N, 2, 2)
    conic: np.ndarray  # (N, 3): a, b, c of the inverse
    radius: np.ndarray
    visible: np.ndarray  # bool (N,)


@dataclass
class RenderContext:
    """Everything the backward pass needs from a forward pass."""

    gauss: DynamicGaussian
    request: RenderRequest
    settings: RasterSettings
    proj: Projection
    dirs: np.ndarray
    dir_norm: np.ndarray
    basis: np.ndarray
    color_active: np.ndarray
    feats: np.ndarray
    order: np.ndarray
    start: np.ndarray
    pair_gauss: np.ndarray
    n_used: np.ndarray
    trans: np.ndarray

    def signature(self) -> tuple:
        """Discrete structure of the render (ordering, membership, kinks)."""
        used = np.concatenate(
            [self.pair_gauss[s : s + n] for s, n in zip(self.start[:-1], self.n_used)]
        ) if len(self.pair_gauss) else self.pair_gauss
        return (
            self.n_used.tobytes(),
            used.tobytes(),
            self.color_active.tobytes(),
            self.gauss.s_clamped.tobytes(),
        )


def advect(cloud: GaussianCloud, dt: float) -> GaussianCloud:
    """Shift every center by ``dt * v``; the input cloud is left untouched."""
    if not 0.0 <= dt <= 1.0:
        log.warning("extrapolating motion to dt=%g outside [0, 1]", dt)
    if dt == 0.0:
        return cloud
    params = cloud.params
    return cloud.with_params(params.replace(mu=params.mu + dt * params.v))


def project(gauss: DynamicGaussian, view: RelativePose, K: CameraIntrinsics, dt: float,
            settings: RasterSettings) -> Projection:
    centers = gauss.mu + dt * gauss.v
    rot = view.rotation
    cam = centers @ rot.T + view.tau
    z = cam[:, 2]
    in_front = z > settings.z_near
    zs = np.where(in_front, z, 1.0)
    x, y = cam[:, 0], cam[:, 1]
    mean2d = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)

    n = len(gauss)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = K.fx / zs
    jac[:, 0, 2] = -K.fx * x / zs**2
    jac[:, 1, 1] = K.fy / zs
    jac[:, 1, 2] = -K.fy * y / zs**2

    rg = gauss.rotations()
    m3 = rg * gauss.s[:, None, :]
    cov3d = m3 @ np.swapaxes(m3, 1, 2)
    cov_cam = rot @ cov3d @ rot.T
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += settings.eps_reg
    cov2d[:, 1, 1] += settings.eps_reg
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = in_front & (det > 0) & np.isfinite(det)
    det_s = np.where(ok, det, 1.0)
    conic = np.stack([c / det_s, -b / det_s, a / det_s], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det_s, 0.0))
    radius = settings.cutoff_sigma * np.sqrt(np.where(ok, lam_max, 0.0))

    u, v = mean2d[:, 0], mean2d[:, 1]
    on_screen = (u + radius >= 0) & (u - radius <= K.width - 1) & (v + radius >= 0) & (v - radius <= K.height - 1)
    visible = ok & on_screen
    return Projection(centers, cam, mean2d, cov3d, cov_cam, jac, cov2d, conic, radius, visible)


def project_gaussian(g: DynamicGaussian, view: RelativePose, K: CameraIntrinsics,
                     settings: RasterSettings | None = None):
    """Project Gaussians; returns ``(mean2d, cov2d, zdepth)`` or ``None`` if culled.

    ``g`` may hold a single Gaussian (returns one tuple) or several (returns a list).
    """
    settings = settings or RasterSettings()
    proj = project(g, view, K, 0.0, settings)
    results = [
        (proj.mean2d[i], proj.cov2d[i], float(proj.cam[i, 2])) if proj.visible[i] else None
        for i in range(len(g))
    ]
    return results[0] if len(g) == 1 else results


def _colors(gauss: DynamicGaussian, centers: np.ndarray, view: RelativePose):
    dirs = centers - view.camera_center
    norm = np.linalg.norm(dirs, axis=1)
    norm = np.where(norm > 0, norm, 1.0)
    unit = dirs / norm[:, None]
    basis = sh.sh_basis(unit, _degree(gauss))
    raw = np.einsum("nk,nkc->nc", basis, gauss.h) + 0.5
    active = raw > 0
    return np.where(active, raw, 0.0), unit, norm, basis, active


def _degree(gauss: DynamicGaussian) -> int:
    return int(round(np.sqrt(gauss.h.shape[1]))) - 1


def forward(cloud: GaussianCloud, req: RenderRequest, settings: RasterSettings | None = None):
    """Render and keep the context for a backward pass."""
    if not cloud.canonicalized:
        raise ContractError("cloud must be canonicalized before rasterization")
    settings = settings or RasterSettings()
    if not 0.0 <= req.dt <= 1.0:
        log.warning("extrapolating motion to dt=%g outside [0, 1]", req.dt)
    gauss = activate(cloud.params)
    K = req.intrinsics
    proj = project(gauss, req.view, K, req.dt, settings)
    color, unit, norm, basis, active = _colors(gauss, proj.centers, req.view)

    n = len(gauss)
    feats = np.zeros((n, N_FEATS))
    feats[:, _COLOR] = color
    feats[:, _POINT] = proj.centers
    feats[:, _FLOW] = gauss.v
    feats[:, _DEPTH] = proj.cam[:, 2]

    vis = np.flatnonzero(proj.visible)
    # front-to-back, ties broken by Gaussian index
    order = vis[np.lexsort((vis, proj.cam[vis, 2]))].astype(np.int64)
    max_q = settings.cutoff_sigma**2
    u = np.ascontiguousarray(proj.mean2d[:, 0])
    v = np.ascontiguousarray(proj.mean2d[:, 1])
    ca, cb, cc = (np.ascontiguousarray(proj.conic[:, i]) for i in range(3))
    start, pair_gauss = _kernels.build_pairs(order, u, v, ca, cb, cc, proj.radius, K.width, K.height, max_q)
    out, n_used, trans = _kernels.composite_forward(
        start, pair_gauss, u, v, ca, cb, cc, gauss.o, feats, K.width, settings.t_min
    )
    ctx = RenderContext(gauss, req, settings, proj, unit, norm, basis, active, feats, order,
                        start, pair_gauss, n_used, trans)
    return _assemble(out, trans, req, settings), ctx


def _assemble(out, trans, req: RenderRequest, settings: RasterSettings) -> RenderOutput:
    H, W = req.intrinsics.height, req.intrinsics.width
    alpha = 1.0 - trans
    maps = {}
    if "color" in req.attributes:
        bg = np.asarray(settings.background, dtype=np.float64)
        maps["color"] = (out[:, _COLOR] + (1.0 - alpha)[:, None] * bg).reshape(H, W, 3)
    if "point" in req.attributes:
        maps["point"] = out[:, _POINT].reshape(H, W, 3)
    if "flow" in req.attributes:
        maps["flow"] = out[:, _FLOW].reshape(H, W, 3)
    if "alpha" in req.attributes:
        maps["alpha"] = alpha.reshape(H, W)
    if "depth" in req.attributes:
        maps["zdepth"] = out[:, _DEPTH].reshape(H, W)
    return RenderOutput(**maps)


def rasterize(cloud: GaussianCloud, req: RenderRequest, settings: RasterSettings | None = None) -> RenderOutput:
    return forward(cloud, req, settings)[0]


def composite_attributes(ctx: RenderContext, values: np.ndarray) -> np.ndarray:
    """Composite arbitrary per-Gaussian ``values`` (N, C) with a render's weights."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    proj = ctx.proj
    out, _, _ = _kernels.composite_forward(
        ctx.start, ctx.pair_gauss,
        np.ascontiguousarray(proj.mean2d[:, 0]), np.ascontiguousarray(proj.mean2d[:, 1]),
        *(np.ascontiguousarray(proj.conic[:, i]) for i in range(3)),
        ctx.gauss.o, values, ctx.request.intrinsics.width, ctx.settings.t_min,
    )
    K = ctx.request.intrinsics
    return out.reshape(K.height, K.width, values.shape[1])


def view_for(scene: Scene, target: TargetFrame | str) -> RelativePose:
    target = TargetFrame(target)
    return scene.pose if target is TargetFrame.SECOND else RelativePose.identity()


def render_at(scene: Scene, dt: float, target: TargetFrame | str = TargetFrame.CANONICAL,
              settings: RasterSettings | None = None, attributes=ATTRIBUTES) -> RenderOutput:
    """Render the scene at ``t + dt`` from the first (canonical) or second camera."""
    req = RenderRequest(scene.intrinsics, view_for(scene, target), dt, attributes)
    return rasterize(scene.cloud, req, settings)


def frame_request(scene: Scene, frame: int, attributes=ATTRIBUTES) -> RenderRequest:
    """Request for input frame ``frame`` (0 or 1) at its own time from its own camera."""
    target = TargetFrame.SECOND if frame else TargetFrame.CANONICAL
    return RenderRequest(scene.intrinsics, view_for(scene, target), float(frame), attributes)


def replace_settings(settings: RasterSettings, **changes) -> RasterSettings:
    return dataclasses.replace(settings, **changes)
