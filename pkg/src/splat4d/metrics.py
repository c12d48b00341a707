"""Evaluation protocols: median scale alignment, map errors and trajectory errors.

Trajectories are sequences of camera-to-world poses stored as
:class:`RelativePose` (rotation ``q`` and camera position ``tau``), the
convention of TUM-style trajectory files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .geometry import RelativePose, compose_pose, invert_pose, quat_angle

log = logging.getLogger(__name__)

MODES = ("per-frame", "per-valid-pixel")


def _check(pred, gt, mask, channels: int | None):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if channels is not None and (pred.ndim != 3 or pred.shape[-1] != channels):
        raise ContractError(f"expected an H x W x {channels} map, got {pred.shape}")
    spatial = pred.shape[:2]
    mask = np.ones(spatial, bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != spatial:
        raise ContractError(f"mask {mask.shape} does not match maps {spatial}")
    return pred, gt, mask


def _require(mask: np.ndarray, what: str):
    if not mask.any():
        raise UndefinedMetricError(f"{what}: no valid pixels")


@dataclass(frozen=True)
class Alignment:
    aligned: np.ndarray
    scale: float
    skipped: bool


def median_scale_align(pred, gt, mask=None, statistic: str = "z") -> Alignment:
    """Rescale ``pred`` so its median statistic over the mask matches ``gt``.

    ``statistic`` is ``"z"`` (third component, the usual point-map choice) or
    ``"norm"`` (per-pixel L2 norm). When the predicted median is zero the map
    is returned unchanged and flagged as skipped.
    """
    pred, gt, mask = _check(pred, gt, mask, 3)
    _require(mask, "median_scale_align")
    if statistic == "z":
        sp, sg = pred[..., 2][mask], gt[..., 2][mask]
    elif statistic == "norm":
        sp, sg = np.linalg.norm(pred, axis=-1)[mask], np.linalg.norm(gt, axis=-1)[mask]
    else:
        raise ContractError(f"unknown alignment statistic {statistic!r}")
    mp = float(np.median(sp))
    if mp == 0.0:
        log.warning("median prediction is zero; scale alignment skipped")
        return Alignment(pred.copy(), 1.0, True)
    scale = float(np.median(sg)) / mp
    return Alignment(pred * scale, scale, False)


def _epe(pred, gt, mask, what):
    pred, gt, mask = _check(pred, gt, mask, None)
    _require(mask, what)
    err = np.linalg.norm(pred - gt, axis=-1)
    return float(np.mean(err[mask]))


def point_epe(pred, gt, mask=None) -> float:
    return _epe(pred, gt, mask, "point_epe")


def flow_epe3d(pred, gt, mask=None) -> float:
    return _epe(pred, gt, mask, "flow_epe3d")


def _depth_mask(pred, gt, mask):
    pred, gt, mask = _check(pred, gt, mask, None)
    bad = mask & ~(gt > 0)
    if bad.any():
        log.warning("excluding %d pixels with non-positive ground-truth depth", int(bad.sum()))
    mask = mask & (gt > 0)
    return pred, gt, mask


def depth_abs_rel(pred, gt, mask=None) -> float:
    pred, gt, mask = _depth_mask(pred, gt, mask)
    _require(mask, "depth_abs_rel")
    return float(np.mean(np.abs(pred[mask] - gt[mask]) / gt[mask]))


def depth_delta(pred, gt, mask=None, ratio: float = 1.25) -> float:
    """Percentage of pixels with ``max(pred/gt, gt/pred) < ratio``."""
    pred, gt, mask = _depth_mask(pred, gt, mask)
    _require(mask, "depth_delta")
    p, g = pred[mask], gt[mask]
    with np.errstate(divide="ignore", invalid="ignore"):
        worst = np.maximum(p / g, g / p)
    inlier = (p > 0) & (worst < ratio)
    return float(100.0 * np.mean(inlier))


def flow_delta3d(pred, gt, mask=None, radius: float = 0.05) -> float:
    """Percentage of pixels whose 3D motion error is strictly below ``radius``."""
    pred, gt, mask = _check(pred, gt, mask, None)
    _require(mask, "flow_delta3d")
    err = np.linalg.norm(pred - gt, axis=-1)[mask]
    return float(100.0 * np.mean(err < radius))


# ---------------------------------------------------------------------------
# trajectories


def trajectory_from_relative(pose: RelativePose) -> list[RelativePose]:
    """Camera-to-world trajectory ``[first, second]`` for a two-view pose.

    ``pose`` maps canonical (first-camera) coordinates into the second
    camera, so the second camera-to-world transform is its inverse.
    """
    return [RelativePose.identity(), invert_pose(pose)]


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares ``(s, R, t)`` with ``dst ~ s R src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = float(np.mean(np.sum(xs * xs, axis=1)))
    if with_scale and var_s > 0:
        s = float(np.trace(np.diag(D) @ S)) / var_s
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def _check_traj(pred, gt):
    if len(pred) != len(gt):
        raise ContractError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if len(gt) < 2:
        raise ContractError("trajectories need at least two poses")


def pose_ate(pred: list[RelativePose], gt: list[RelativePose], with_scale: bool = True) -> float:
    """RMSE of camera positions after aligning ``pred`` onto ``gt``."""
    _check_traj(pred, gt)
    P = np.array([p.tau for p in pred])
    G = np.array([g.tau for g in gt])
    s, R, t = umeyama(P, G, with_scale)
    err = G - (s * P @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def pose_rpe(pred: list[RelativePose], gt: list[RelativePose]) -> dict:
    """Consecutive-pair relative errors: translation RMSE and rotation RMSE (degrees)."""
    _check_traj(pred, gt)
    trans, rot = [], []
    for i in range(len(gt) - 1):
        rel_p = compose_pose(invert_pose(pred[i]), pred[i + 1])
        rel_g = compose_pose(invert_pose(gt[i]), gt[i + 1])
        e = compose_pose(invert_pose(rel_g), rel_p)
        trans.append(float(np.linalg.norm(e.tau)))
        rot.append(float(np.degrees(quat_angle(e.q))))
    return {
        "trans": float(np.sqrt(np.mean(np.square(trans)))),
        "rot": float(np.sqrt(np.mean(np.square(rot)))),
    }


# ---------------------------------------------------------------------------
# aggregated report


@dataclass
class MetricReport:
    mode: str
    metrics: dict = field(default_factory=dict)
    units: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)  # valid pixels per metric (summed over frames)
    per_frame: list = field(default_factory=list)  # one dict per frame
    flags: list = field(default_factory=list)

    def table(self) -> str:
        width = max((len(k) for k in self.metrics), default=6)
        lines = [f"{'metric':<{width}}  {'value':>12}  {'unit':<8}  count", "-" * (width + 32)]
        for k, v in self.metrics.items():
            lines.append(f"{k:<{width}}  {v:>12.6f}  {self.units.get(k, ''):<8}  {self.counts.get(k, '')}")
        lines.append(f"mode: {self.mode}")
        for f in self.flags:
            lines.append(f"note: {f}")
        return "\n".join(lines) + "\n"

    def key_values(self) -> str:
        lines = [f"mode = {self.mode}"]
        for k, v in self.metrics.items():
            lines.append(f"{k} = {v!r}")
            if k in self.counts:
                lines.append(f"{k}.count = {self.counts[k]}")
        return "\n".join(lines) + "\n"


_UNITS = {
    "point_epe": "units",
    "depth_abs_rel": "ratio",
    "depth_delta_1.25": "%",
    "flow_epe3d": "units",
    "flow_delta3d_0.05": "%",
    "ate": "units",
    "rpe_trans": "units",
    "rpe_rot": "deg",
}


def _frame_metrics(i, pp, gp, pf, gf, mask, align: bool, statistic: str, flow_scale: str, flags):
    out = {}
    scale = 1.0
    if pp is not None:
        if align:
            al = median_scale_align(pp, gp, mask, statistic)
            if al.skipped:
                flags.append(f"frame {i}: point alignment skipped (zero median)")
            pp, scale = al.aligned, al.scale
        out["point_epe"] = point_epe(pp, gp, mask)
        if np.any(mask & (np.asarray(gp)[..., 2] > 0)):
            out["depth_abs_rel"] = depth_abs_rel(pp[..., 2], gp[..., 2], mask)
            out["depth_delta_1.25"] = depth_delta(pp[..., 2], gp[..., 2], mask)
        else:
            flags.append(f"frame {i}: no positive ground-truth depth, depth metrics skipped")
    if pf is not None:
        if align and flow_scale == "point":
            pf = pf * scale
        elif align and flow_scale == "own":
            al = median_scale_align(pf, gf, mask, "norm")
            if al.skipped:
                flags.append(f"frame {i}: flow alignment skipped (zero median)")
            pf = al.aligned
        out["flow_epe3d"] = flow_epe3d(pf, gf, mask)
        out["flow_delta3d_0.05"] = flow_delta3d(pf, gf, mask)
    return out


def report(pred_points=None, gt_points=None, pred_flows=None, gt_flows=None, masks=None,
           mode: str = "per-frame", align: bool = True, statistic: str = "z",
           flow_scale: str = "point", pred_trajectory=None, gt_trajectory=None,
           ate_scale: bool = True) -> MetricReport:
    """Per-frame metrics aggregated by ``mode``.

    Maps are sequences over frames (or a stacked array). ``flow_scale`` picks
    how flows are aligned: ``"point"`` reuses the frame's point scale,
    ``"own"`` aligns by the flow's own median norm, ``"none"`` leaves them.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}")
    if flow_scale not in ("point", "own", "none"):
        raise ContractError("flow_scale must be 'point', 'own' or 'none'")
    rep = MetricReport(mode)
    frames = pred_points if pred_points is not None else pred_flows
    n = 0 if frames is None else len(frames)
    if masks is None:
        ref = gt_points if gt_points is not None else gt_flows
        masks = [None] * n if ref is None else [np.ones(np.shape(r)[:2], bool) for r in ref]
    if len(masks) != n:
        raise ContractError(f"{len(masks)} masks for {n} frames")
    for i in range(n):
        m = np.ones(np.shape(frames[i])[:2], bool) if masks[i] is None else np.asarray(masks[i], bool)
        pp = None if pred_points is None else pred_points[i]
        gp = None if gt_points is None else gt_points[i]
        pf = None if pred_flows is None else pred_flows[i]
        gf = None if gt_flows is None else gt_flows[i]
        if (pp is None) != (gp is None) or (pf is None) != (gf is None):
            raise ContractError("each prediction needs a matching ground truth")
        vals = _frame_metrics(i, pp, gp, pf, gf, m, align, statistic, flow_scale, rep.flags)
        # depth metrics drop non-positive ground truth, so count them separately
        cnt = {}
        for k in vals:
            if k.startswith("depth"):
                cnt[k] = int(np.sum(m & (np.asarray(gp)[..., 2] > 0)))
            else:
                cnt[k] = int(m.sum())
        rep.per_frame.append({"values": vals, "counts": cnt})
    keys = list(dict.fromkeys(k for f in rep.per_frame for k in f["values"]))
    for k in keys:
        frames = [f for f in rep.per_frame if k in f["values"]]
        vals = np.array([f["values"][k] for f in frames])
        cnts = np.array([f["counts"][k] for f in frames])
        if mode == "per-frame":
            rep.metrics[k] = float(np.mean(vals))
        else:
            rep.metrics[k] = float(np.sum(vals * cnts) / np.sum(cnts))
        rep.counts[k] = int(cnts.sum())
        rep.units[k] = _UNITS[k]
    if pred_trajectory is not None or gt_trajectory is not None:
        if pred_trajectory is None or gt_trajectory is None:
            raise ContractError("pose metrics need both trajectories")
        rep.metrics["ate"] = pose_ate(pred_trajectory, gt_trajectory, ate_scale)
        rpe = pose_rpe(pred_trajectory, gt_trajectory)
        rep.metrics["rpe_trans"] = rpe["trans"]
        rep.metrics["rpe_rot"] = rpe["rot"]
        for k in ("ate", "rpe_trans", "rpe_rot"):
            rep.units[k] = _UNITS[k]
            rep.counts[k] = len(gt_trajectory)
    return rep


def scene_report(scene, sup, mode: str = "per-frame", settings=None, align: bool = False,
                 **kwargs) -> MetricReport:
    """Render both input frames of ``scene`` and score them against ``sup``.

    Point maps are canonical-frame composites on both sides, so no alignment
    is applied by default.
    """
    from .raster import frame_request, rasterize

    outs = [rasterize(scene.cloud, frame_request(scene, u), settings) for u in (0, 1)]
    traj = {}
    if sup.pose is not None:
        traj = dict(pred_trajectory=trajectory_from_relative(scene.pose),
                    gt_trajectory=trajectory_from_relative(sup.pose))
    return report(
        pred_points=[o.point for o in outs] if sup.point is not None else None,
        gt_points=sup.point,
        pred_flows=[o.flow for o in outs] if sup.flow is not None else None,
        gt_flows=sup.flow,
        masks=sup.point_mask if sup.point_mask is not None else sup.flow_mask,
        mode=mode, align=align, **traj, **kwargs,
    )
