"""Training objective: supervised point/motion/pose terms and self-supervised
photometric and edge-aware smoothness terms.

Each loss returns a :class:`LossTerm` holding its value, direct gradients on
raw parameters, and per-frame cotangents for rendered channels. The total
loss pushes the summed cotangents through one backward pass per frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractError
from .geometry import RelativePose, normalize_vjp
from .grad import ParamGradients, backward
from .model import Frame, GaussianCloud, RawGaussianParams, Scene, make_raw_params
from .raster import RasterSettings, RenderOutput, forward, frame_request

log = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class LossWeights:
    w_point: float = 1.0
    w_pose: float = 1.0
    w_lpips: float = 0.05
    w_smooth: float = 0.1

    def __post_init__(self):
        for name in ("w_point", "w_pose", "w_lpips", "w_smooth"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")


@dataclass(frozen=True)
class Supervision:
    """Ground truth for both frames; arrays are indexed ``[frame]``.

    ``point``/``flow`` are ``(2, H, W, 3)`` with boolean masks ``(2, H, W)``;
    any of them may be ``None``.
    """

    point: np.ndarray | None = None
    point_mask: np.ndarray | None = None
    flow: np.ndarray | None = None
    flow_mask: np.ndarray | None = None
    pose: RelativePose | None = None

    def __post_init__(self):
        for key in ("point", "flow"):
            data, mask = getattr(self, key), getattr(self, f"{key}_mask")
            if data is None:
                continue
            data = np.asarray(data, dtype=np.float64)
            if data.ndim != 4 or data.shape[0] != 2 or data.shape[3] != 3:
                raise ContractError(f"{key} must have shape (2, H, W, 3), got {data.shape}")
            mask = np.ones(data.shape[:3], bool) if mask is None else np.asarray(mask, dtype=bool)
            if mask.shape != data.shape[:3]:
                raise ContractError(f"{key}_mask has shape {mask.shape}, expected {data.shape[:3]}")
            object.__setattr__(self, key, data)
            object.__setattr__(self, f"{key}_mask", mask)

    @classmethod
    def empty(cls) -> "Supervision":
        return cls()


@dataclass
class LossTerm:
    value: float
    params: ParamGradients | None = None
    upstream: list[dict] = field(default_factory=lambda: [{}, {}])


def _safe_unit(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(e, axis=-1)
    unit = np.where(norm[..., None] > 0, e / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    return norm, unit


def _check_map(arr, shape, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != shape:
        raise ContractError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


def _supervised(cloud: GaussianCloud, rendered, gt, mask, channel: str, use_center: bool) -> LossTerm:
    """Shared body of the point and motion losses."""
    grads = ParamGradients.zeros_like(cloud.params)
    upstream = [{}, {}]
    if gt is None:
        return LossTerm(0.0, grads, upstream)
    H, W = gt.shape[1:3]
    total = 0.0
    for u in (0, 1):
        count = int(mask[u].sum())
        if count == 0:
            continue
        ren = _check_map(rendered[u], (H, W, 3), f"rendered {channel} for frame {u}")
        idx = cloud.frame_indices(Frame(u))
        rows, cols = cloud.source_pixel[idx, 0], cloud.source_pixel[idx, 1]
        if np.any(rows >= H) or np.any(cols >= W):
            raise ContractError("Gaussian source pixels fall outside the supervision maps")
        valid = mask[u][rows, cols]
        idx, rows, cols = idx[valid], rows[valid], cols[valid]
        if use_center:
            own = cloud.params.mu[idx] + u * cloud.params.v[idx]
        else:
            own = cloud.params.v[idx]
        n_own, unit_own = _safe_unit(own - gt[u][rows, cols])
        e_ren = np.where(mask[u][..., None], ren - gt[u], 0.0)
        n_ren, unit_ren = _safe_unit(e_ren)
        total += (n_own.sum() + n_ren.sum()) / count
        if use_center:
            grads.mu[idx] += unit_own / count
            grads.v[idx] += u * unit_own / count
        else:
            grads.v[idx] += unit_own / count
        upstream[u][channel] = unit_ren / count
    return LossTerm(float(total), grads, upstream)


def loss_motion(cloud: GaussianCloud, flows, sup: Supervision) -> LossTerm:
    """Per-Gaussian and rasterized motion vs. GT flow, per-pixel L2, mean over valid pixels."""
    return _supervised(cloud, flows, sup.flow, sup.flow_mask, "flow", use_center=False)


def loss_point(cloud: GaussianCloud, points, sup: Supervision) -> LossTerm:
    """Per-Gaussian centers (at their own frame time) and rasterized points vs. GT points."""
    return _supervised(cloud, points, sup.point, sup.point_mask, "point", use_center=True)


def loss_pose(pred: RelativePose, gt: RelativePose | None, like: RawGaussianParams | None = None) -> LossTerm:
    """``|q - q_gt| + |tau - tau_gt|`` with ``q`` sign-aligned to ``q_gt``.

    ``like`` sizes the (zero) per-Gaussian part of the returned gradients.
    """
    like = like if like is not None else make_raw_params(0)
    grads = ParamGradients.zeros_like(like)
    if gt is None:
        return LossTerm(0.0, grads)
    q = pred.q
    sign = 1.0 if np.linalg.norm(q - gt.q) <= np.linalg.norm(-q - gt.q) else -1.0
    nq, uq = _safe_unit(sign * q - gt.q)
    nt, ut = _safe_unit(pred.tau - gt.tau)
    grads.q = normalize_vjp(pred.q, sign * uq)
    grads.tau = ut
    return LossTerm(float(nq + nt), grads)


def gaussian_kernel_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(img: np.ndarray) -> np.ndarray:
    # symmetric kernel + zero padding, so this operator is its own adjoint
    k = gaussian_kernel_1d()
    out = correlate1d(img, k, axis=0, mode="constant")
    return correlate1d(out, k, axis=1, mode="constant")


def ssim_and_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM over pixels and channels, and its gradient w.r.t. ``x``."""
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    sxx, syy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
    num1 = 2 * mx * my + SSIM_C1
    num2 = 2 * sxy + SSIM_C2
    den1 = mx * mx + my * my + SSIM_C1
    den2 = sxx + syy + SSIM_C2
    smap = (num1 * num2) / (den1 * den2)
    n = smap.size
    # partials of the SSIM map w.r.t. mu_x, sigma_xx, sigma_xy
    d_mx = (2 * my * num2) / (den1 * den2) - smap * (2 * mx) / den1
    d_sxx = -smap / den2
    d_sxy = 2 * num1 / (den1 * den2)
    g_m = (d_mx - 2 * mx * d_sxx - my * d_sxy) / n
    g_exx = d_sxx / n
    g_exy = d_sxy / n
    grad = _blur(g_m) + 2 * x * _blur(g_exx) + y * _blur(g_exy)
    return float(smap.mean()), grad


def loss_photometric(colors, images, w_lpips: float) -> LossTerm:
    """Per-frame MSE plus ``w_lpips * (1 - SSIM) / 2``."""
    upstream = [{}, {}]
    total = 0.0
    for u in (0, 1):
        pred = np.asarray(colors[u], dtype=np.float64)
        ref = np.asarray(images[u], dtype=np.float64)
        if pred.shape != ref.shape:
            raise ContractError(f"rendered image {pred.shape} and input image {ref.shape} differ")
        if ref.min() < 0.0 or ref.max() > 1.0:
            log.warning("input image %d outside [0, 1]; clamping", u)
            ref = np.clip(ref, 0.0, 1.0)
        diff = pred - ref
        total += float(np.mean(diff * diff))
        grad = 2.0 * diff / diff.size
        if w_lpips:
            s, g = ssim_and_grad(pred, ref)
            total += w_lpips * (1.0 - s) / 2.0
            grad = grad - 0.5 * w_lpips * g
        upstream[u]["color"] = grad
    return LossTerm(total, None, upstream)


def image_edge_weights(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``exp(-|dI|)`` along x and y, with |dI| averaged over channels."""
    img = np.asarray(image, dtype=np.float64)
    gx = np.mean(np.abs(img[:, 1:] - img[:, :-1]), axis=-1)
    gy = np.mean(np.abs(img[1:, :] - img[:-1, :]), axis=-1)
    return np.exp(-gx), np.exp(-gy)


def loss_smooth(points, flows, images) -> LossTerm:
    """Edge-aware first-order smoothness of rendered point and flow maps.

    Forward differences; the L1 norm of each pixel's difference vector is
    weighted, averaged over the pixels that have a neighbor in that direction,
    and summed over directions, frames and {point, flow}.
    """
    upstream = [{}, {}]
    total = 0.0
    for u in (0, 1):
        wx, wy = image_edge_weights(images[u])
        for channel, maps in (("point", points), ("flow", flows)):
            d = np.asarray(maps[u], dtype=np.float64)
            if d.shape[:2] != wx.shape[:1] + (wx.shape[1] + 1,):
                raise ContractError(f"{channel} map {d.shape} does not match image size")
            dx = d[:, 1:] - d[:, :-1]
            dy = d[1:, :] - d[:-1, :]
            # per-pixel L1 norm over channels, averaged over pixels
            nx, ny = dx.shape[0] * dx.shape[1], dy.shape[0] * dy.shape[1]
            total += float(np.sum(np.abs(dx) * wx[..., None]) / nx + np.sum(np.abs(dy) * wy[..., None]) / ny)
            gx = np.sign(dx) * wx[..., None] / nx
            gy = np.sign(dy) * wy[..., None] / ny
            g = np.zeros_like(d)
            g[:, 1:] += gx
            g[:, :-1] -= gx
            g[1:, :] += gy
            g[:-1, :] -= gy
            upstream[u][channel] = g
    return LossTerm(total, None, upstream)


@dataclass
class LossResult:
    total: float
    components: dict
    grads: ParamGradients
    renders: list
    component_grads: dict | None = None


def _backward_term(term: LossTerm, ctxs, cloud: GaussianCloud, scale: float) -> ParamGradients:
    grads = ParamGradients.zeros_like(cloud.params)
    if term.params is not None:
        grads = grads + term.params.scaled(scale)
    for u in (0, 1):
        if not term.upstream[u]:
            continue
        up = RenderOutput(**{k: scale * v for k, v in term.upstream[u].items()})
        g = backward(ctxs[u], up, cloud.params)
        if u == 0:
            # the canonical view is fixed, so its pose gradient is not a parameter gradient
            g.q = np.zeros(4)
            g.tau = np.zeros(3)
        grads = grads + g
    return grads


def loss_total(scene: Scene, images, sup: Supervision, weights: LossWeights,
               settings: RasterSettings | None = None, per_component: bool = False) -> LossResult:
    """``L_motion + w_point L_point + w_pose L_pose + L_photo + w_smooth L_smooth``.

    Frame ``u`` is rendered at its own time from its own camera. Gradients are
    in the raw chart; ``grads.q``/``grads.tau`` belong to ``scene.pose``.
    """
    cloud = scene.cloud
    renders, ctxs = [], []
    for u in (0, 1):
        out, ctx = forward(cloud, frame_request(scene, u), settings)
        renders.append(out)
        ctxs.append(ctx)
    points = [r.point for r in renders]
    flows = [r.flow for r in renders]
    terms = {
        "motion": (loss_motion(cloud, flows, sup), 1.0),
        "point": (loss_point(cloud, points, sup), weights.w_point),
        "pose": (loss_pose(scene.pose, sup.pose, cloud.params), weights.w_pose),
        "photo": (loss_photometric([r.color for r in renders], images, weights.w_lpips), 1.0),
        "smooth": (loss_smooth(points, flows, images), weights.w_smooth),
    }
    total = sum(w * t.value for t, w in terms.values())
    components = {name: t.value for name, (t, _) in terms.items()}

    # joint pass: merge cotangents, one backward per frame
    joint = LossTerm(0.0, ParamGradients.zeros_like(cloud.params))
    for t, w in terms.values():
        if w == 0.0:
            continue
        if t.params is not None:
            joint.params = joint.params + t.params.scaled(w)
        for u in (0, 1):
            for ch, val in t.upstream[u].items():
                joint.upstream[u][ch] = joint.upstream[u].get(ch, 0.0) + w * val
    grads = _backward_term(joint, ctxs, cloud, 1.0)

    component_grads = None
    if per_component:
        component_grads = {name: _backward_term(t, ctxs, cloud, w) for name, (t, w) in terms.items()}
    return LossResult(float(total), components, grads, renders, component_grads)


def sum_gradients(grads) -> ParamGradients:
    grads = list(grads)
    out = grads[0]
    for g in grads[1:]:
        out = out + g
    return out

