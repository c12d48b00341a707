"""Reverse-mode gradients of rendered maps, plus a finite-difference oracle.

Depth ordering, cutoff membership and early termination are frozen during
the backward pass; everything else (activations, SH, projection Jacobian,
advection, compositing) is differentiated exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, sh
from .errors import ContractError
from .geometry import RelativePose, normalize_vjp, rotation_vjp
from .model import CameraIntrinsics, GaussianCloud, RawGaussianParams, make_raw_params
from .raster import (
    N_FEATS,
    RasterSettings,
    RenderContext,
    RenderOutput,
    RenderRequest,
    forward,
)

GAUSSIAN_FAMILIES = ("mu", "v", "r", "s", "h", "o")
POSE_FAMILIES = ("q", "tau")
FAMILIES = GAUSSIAN_FAMILIES + POSE_FAMILIES


@dataclass
class ParamGradients:
    """Gradients in the raw chart; ``q``/``tau`` refer to the request's view pose."""

    mu: np.ndarray
    v: np.ndarray
    r: np.ndarray
    s: np.ndarray
    h: np.ndarray
    o: np.ndarray
    q: np.ndarray = field(default_factory=lambda: np.zeros(4))
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def zeros_like(cls, params: RawGaussianParams) -> "ParamGradients":
        return cls(*(np.zeros_like(getattr(params, f)) for f in GAUSSIAN_FAMILIES))

    def __add__(self, other: "ParamGradients") -> "ParamGradients":
        return ParamGradients(*(getattr(self, f) + getattr(other, f) for f in FAMILIES))

    def scaled(self, k: float) -> "ParamGradients":
        return ParamGradients(*(k * getattr(self, f) for f in FAMILIES))

    def get(self, family: str) -> np.ndarray:
        return getattr(self, family)

    def max_abs_diff(self, other: "ParamGradients") -> float:
        return max(float(np.max(np.abs(getattr(self, f) - getattr(other, f)), initial=0.0)) for f in FAMILIES)


def _upstream_matrix(upstream: RenderOutput, req: RenderRequest, settings: RasterSettings):
    H, W = req.intrinsics.height, req.intrinsics.width
    n_pix = H * W
    g_feats = np.zeros((n_pix, N_FEATS))
    g_alpha = np.zeros(n_pix)
    expected = {"color": (H, W, 3), "point": (H, W, 3), "flow": (H, W, 3), "alpha": (H, W), "zdepth": (H, W)}
    for name, shape in expected.items():
        arr = getattr(upstream, name)
        if arr is None:
            continue
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != shape:
            raise ContractError(f"upstream '{name}' has shape {arr.shape}, expected {shape}")
        if name == "color":
            g_feats[:, 0:3] = arr.reshape(n_pix, 3)
            # color = sum(w c) + (1 - A) * background
            g_alpha -= arr.reshape(n_pix, 3) @ np.asarray(settings.background, dtype=np.float64)
        elif name == "point":
            g_feats[:, 3:6] = arr.reshape(n_pix, 3)
        elif name == "flow":
            g_feats[:, 6:9] = arr.reshape(n_pix, 3)
        elif name == "zdepth":
            g_feats[:, 9] = arr.reshape(n_pix)
        else:
            g_alpha += arr.reshape(n_pix)
    return g_feats, g_alpha


def backward(ctx: RenderContext, upstream: RenderOutput, params: RawGaussianParams) -> ParamGradients:
    """Gradients of ``<upstream, render>`` with respect to raw parameters and view pose."""
    req, settings, proj, gauss = ctx.request, ctx.settings, ctx.proj, ctx.gauss
    K = req.intrinsics
    g_feats, g_alpha = _upstream_matrix(upstream, req, settings)
    u = np.ascontiguousarray(proj.mean2d[:, 0])
    v = np.ascontiguousarray(proj.mean2d[:, 1])
    ca, cb, cc = (np.ascontiguousarray(proj.conic[:, i]) for i in range(3))
    d_alpha, weight = _kernels.composite_backward(
        ctx.start, ctx.pair_gauss, ctx.n_used, u, v, ca, cb, cc, gauss.o, ctx.feats,
        g_feats, g_alpha, K.width,
    )
    d_feat, d_geo = _kernels.reduce_pairs(
        ctx.start, ctx.pair_gauss, ctx.n_used, u, v, ca, cb, cc, gauss.o,
        d_alpha, weight, g_feats, K.width, len(gauss),
    )
    return _gaussian_backward(ctx, d_feat, d_geo, params)


def _gaussian_backward(ctx: RenderContext, d_feat, d_geo, params: RawGaussianParams) -> ParamGradients:
    req, proj, gauss = ctx.request, ctx.proj, ctx.gauss
    K = req.intrinsics
    view = req.view
    rot = view.rotation
    dt = req.dt
    vis = proj.visible
    n = len(gauss)

    d_u, d_v = d_geo[:, 0], d_geo[:, 1]
    d_conic = d_geo[:, 2:5]
    d_o = d_geo[:, 5]

    # color = relu(SH(h, dir) + 0.5)
    d_col = d_feat[:, 0:3] * ctx.color_active
    d_h = ctx.basis[:, :, None] * d_col[:, None, :]
    dbasis = sh.sh_basis_grad(ctx.dirs, int(round(np.sqrt(gauss.h.shape[1]))) - 1)
    d_unit = np.einsum("nkc,nc,nkd->nd", gauss.h, d_col, dbasis)
    d_dir = (d_unit - ctx.dirs * np.sum(ctx.dirs * d_unit, axis=1, keepdims=True)) / ctx.dir_norm[:, None]

    d_m = d_dir + d_feat[:, 3:6]
    d_vel = d_feat[:, 6:9].copy()
    d_center_cam = -np.sum(d_dir, axis=0)

    # conic = inverse(cov2d)
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    conic_m = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    g_conic = np.stack(
        [np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1), np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2
    )
    d_cov2d = -conic_m @ g_conic @ conic_m
    jac = proj.jac
    d_cov_cam = np.swapaxes(jac, 1, 2) @ d_cov2d @ jac
    d_jac = 2.0 * d_cov2d @ jac @ proj.cov_cam

    x, y = proj.cam[:, 0], proj.cam[:, 1]
    z = np.where(vis, proj.cam[:, 2], 1.0)
    d_cam = np.zeros((n, 3))
    d_cam[:, 0] = d_u * K.fx / z - d_jac[:, 0, 2] * K.fx / z**2
    d_cam[:, 1] = d_v * K.fy / z - d_jac[:, 1, 2] * K.fy / z**2
    d_cam[:, 2] = (
        -d_u * K.fx * x / z**2
        - d_v * K.fy * y / z**2
        - d_jac[:, 0, 0] * K.fx / z**2
        + d_jac[:, 0, 2] * 2.0 * K.fx * x / z**3
        - d_jac[:, 1, 1] * K.fy / z**2
        + d_jac[:, 1, 2] * 2.0 * K.fy * y / z**3
        + d_feat[:, 9]
    )

    # cov_cam = R cov3d R^T
    d_cov3d = rot.T @ d_cov_cam @ rot
    d_rot = np.sum(2.0 * d_cov_cam @ rot @ proj.cov3d, axis=0)

    # cam = R m + tau
    d_m += d_cam @ rot
    d_rot += d_cam.T @ proj.centers
    d_tau = d_cam.sum(axis=0)

    # camera center C = -R^T tau
    d_tau += -rot @ d_center_cam
    d_rot += -np.outer(view.tau, d_center_cam)

    # cov3d = M M^T with M = Rg diag(s)
    rg = gauss.rotations()
    m3 = rg * gauss.s[:, None, :]
    d_m3 = 2.0 * d_cov3d @ m3
    d_rg = d_m3 * gauss.s[:, None, :]
    d_s = np.sum(d_m3 * rg, axis=1)
    d_r = normalize_vjp(params.r, rotation_vjp(gauss.r, d_rg))
    d_s_raw = np.where(gauss.s_clamped, 0.0, d_s * gauss.s)
    d_o_raw = d_o * gauss.o * (1.0 - gauss.o)

    d_mu = d_m
    d_vel = d_vel + dt * d_m

    d_q = normalize_vjp(view.q, rotation_vjp(view.q, d_rot))

    mask = vis[:, None]
    return ParamGradients(
        mu=np.where(mask, d_mu, 0.0),
        v=np.where(mask, d_vel, 0.0),
        r=np.where(mask, d_r, 0.0),
        s=np.where(mask, d_s_raw, 0.0),
        h=np.where(vis[:, None, None], d_h, 0.0),
        o=np.where(vis, d_o_raw, 0.0),
        q=d_q,
        tau=d_tau,
    )


def render_with_gradients(cloud: GaussianCloud, req: RenderRequest, upstream: RenderOutput,
                          settings: RasterSettings | None = None):
    """Forward render plus gradients of ``<upstream, render>``."""
    out, ctx = forward(cloud, req, settings)
    return out, backward(ctx, upstream, cloud.params)


# ---------------------------------------------------------------------------
# finite-difference oracle


def inner_product(out: RenderOutput, upstream: RenderOutput) -> float:
    total = 0.0
    for name in ("color", "point", "flow", "alpha", "zdepth"):
        up = getattr(upstream, name)
        if up is not None:
            total += float(np.sum(np.asarray(getattr(out, name)) * up))
    return total


def _perturbed(cloud: GaussianCloud, req: RenderRequest, family: str, index: tuple, delta: float):
    if family in POSE_FAMILIES:
        q = req.view.q.copy()
        tau = req.view.tau.copy()
        target = q if family == "q" else tau
        target[index] += delta
        return cloud, dataclasses.replace(req, view=RelativePose(q, tau))
    arr = getattr(cloud.params, family).copy()
    arr[index] += delta
    return cloud.with_params(cloud.params.replace(**{family: arr})), req


def finite_difference_gradient(cloud: GaussianCloud, req: RenderRequest, upstream: RenderOutput,
                               families=FAMILIES, step: float = 1e-4,
                               settings: RasterSettings | None = None,
                               return_flips: bool = False):
    """Central differences of ``<upstream, rasterize(.)>`` for each raw parameter.

    With ``return_flips`` also returns, per family, a boolean array marking
    entries whose +/- perturbation changed the discrete structure of the render
    (depth order, contributor membership, early termination or clamp kinks).
    """
    if step <= 0:
        raise ContractError("step must be positive")
    grads = ParamGradients.zeros_like(cloud.params)
    flips = {}
    base_sig = forward(cloud, req, settings)[1].signature() if return_flips else None
    for family in families:
        ref = req.view.q if family == "q" else req.view.tau if family == "tau" else getattr(cloud.params, family)
        out = np.zeros(ref.shape)
        flipped = np.zeros(ref.shape, dtype=bool)
        for index in np.ndindex(*ref.shape):
            c_p, r_p = _perturbed(cloud, req, family, index, step)
            c_m, r_m = _perturbed(cloud, req, family, index, -step)
            out_p, ctx_p = forward(c_p, r_p, settings)
            out_m, ctx_m = forward(c_m, r_m, settings)
            out[index] = (inner_product(out_p, upstream) - inner_product(out_m, upstream)) / (2.0 * step)
            if return_flips:
                flipped[index] = ctx_p.signature() != base_sig or ctx_m.signature() != base_sig
        setattr(grads, family, out)
        flips[family] = flipped
    return (grads, flips) if return_flips else grads


# ---------------------------------------------------------------------------
# gradcheck


@dataclass
class FamilyResult:
    family: str
    max_rel: float
    mean_rel: float
    checked: int
    skipped: int
    worst_index: tuple | None
    passed: bool


@dataclass
class GradcheckReport:
    seed: int
    tolerance: float
    families: list[FamilyResult]
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.families)

    def failures(self) -> list[FamilyResult]:
        return [f for f in self.families if not f.passed]

    def lines(self) -> list[str]:
        out = [f"seed = {self.seed}", f"tolerance = {self.tolerance:g}", f"passed = {str(self.passed).lower()}"]
        for f in self.families:
            out.append(
                f"{f.family}: max_rel={f.max_rel:.3e} mean_rel={f.mean_rel:.3e} "
                f"checked={f.checked} skipped={f.skipped} worst={f.worst_index} "
                f"{'PASS' if f.passed else 'FAIL'}"
            )
        return out


def random_scene(seed: int, n_gaussians: int = 10, size: int = 16, sh_degree: int = 1):
    """Seeded random scene for gradient checking: ``(cloud, request, upstream)``."""
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(fx=size * 1.2, fy=size * 1.1, cx=(size - 1) / 2 + 0.3, cy=(size - 1) / 2 - 0.2,
                         width=size, height=size)
    params = make_raw_params(n_gaussians, sh_degree)
    depth = rng.uniform(2.0, 4.0, n_gaussians)
    rows = rng.uniform(1, size - 2, n_gaussians)
    cols = rng.uniform(1, size - 2, n_gaussians)
    mu = K.backproject(rows, cols, depth)
    r = rng.normal(size=(n_gaussians, 4))
    params = params.replace(
        mu=mu,
        v=rng.normal(scale=0.1, size=(n_gaussians, 3)),
        r=r,
        s=np.log(depth[:, None] / K.fx * rng.uniform(0.8, 2.5, (n_gaussians, 3))),
        h=rng.normal(scale=0.4, size=params.h.shape),
        o=rng.normal(scale=1.0, size=n_gaussians),
    )
    cloud = GaussianCloud(params, np.arange(n_gaussians) % 2, np.zeros((n_gaussians, 2)), canonicalized=True)
    axis = rng.normal(size=3)
    angle = rng.uniform(0.02, 0.08)
    q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis / np.linalg.norm(axis)])
    view = RelativePose(q, rng.normal(scale=0.05, size=3))
    req = RenderRequest(K, view, dt=0.5)
    H = W = size
    upstream = RenderOutput(
        color=rng.normal(size=(H, W, 3)),
        point=rng.normal(size=(H, W, 3)),
        flow=rng.normal(size=(H, W, 3)),
        alpha=rng.normal(size=(H, W)),
        zdepth=rng.normal(size=(H, W)),
    )
    return cloud, req, upstream


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Entry-wise ``|a - f| / max(|a|, |f|, floor)``.

    The floor (1e-4 of the family's largest numeric magnitude, at least 1e-7)
    keeps entries that are negligible at the family's scale from being judged
    on round-off alone.
    """
    scale = float(np.max(np.abs(numeric), initial=0.0))
    floor = max(1e-7, 1e-4 * scale)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(seed: int = 0, n_gaussians: int = 10, size: int = 16, tolerance: float = 1e-3,
              step: float = 1e-4, sh_degree: int = 1, settings: RasterSettings | None = None,
              analytic_fn=None) -> GradcheckReport:
    """Compare analytic and central-difference gradients on a seeded random scene.

    ``analytic_fn(cloud, request, upstream) -> ParamGradients`` replaces the
    analytic path (used for fault injection).
    """
    import time

    t0 = time.perf_counter()
    cloud, req, upstream = random_scene(seed, n_gaussians, size, sh_degree)
    if analytic_fn is None:
        analytic = render_with_gradients(cloud, req, upstream, settings)[1]
    else:
        analytic = analytic_fn(cloud, req, upstream)
    numeric, flips = finite_difference_gradient(cloud, req, upstream, FAMILIES, step, settings, return_flips=True)
    results = []
    for family in FAMILIES:
        a = analytic.get(family)
        f = numeric.get(family)
        keep = ~flips[family]
        rel = relative_errors(a[keep], f[keep])
        if rel.size:
            worst = int(np.argmax(rel))
            worst_index = tuple(int(i) for i in np.argwhere(keep)[worst])
            max_rel, mean_rel = float(rel.max()), float(rel.mean())
        else:
            worst_index, max_rel, mean_rel = None, 0.0, 0.0
        results.append(FamilyResult(family, max_rel, mean_rel, int(keep.sum()), int((~keep).sum()),
                                    worst_index, max_rel < tolerance))
    return GradcheckReport(seed, tolerance, results, time.perf_counter() - t0)
