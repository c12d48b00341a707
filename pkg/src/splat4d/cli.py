"""Command-line entry point: ``splat4d {synth,fit,render,interp,eval,gradcheck}``.

Exit codes: 0 success, 1 invalid input or failed check, 2 I/O failure.
Logs go to standard error; every machine-readable result is written under
``--out``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time

import numpy as np

from . import _kernels, config as config_mod, io, metrics, plotting
from .errors import ContractError, FormatError, Splat4DError
from .fit import SyntheticSpec, init_scene, make_synthetic_scene, optimize
from .geometry import RelativePose, compose_pose, invert_pose
from .grad import gradcheck
from .losses import Supervision
from .raster import RenderRequest, TargetFrame, rasterize, view_for
from .tasks import derive_depth, derive_optical_flow, interpolate_4d, segment_moving

log = logging.getLogger("splat4d")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads (overrides the config)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splat4d", description="Dynamic Gaussian 4D rendering and fitting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic two-view scene with ground truth")
    _common(p)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--static", action="store_true", help="no moving sphere")

    p = sub.add_parser("fit", help="fit a scene and relative pose to an image pair")
    _common(p)
    p.add_argument("--images", nargs=2, required=True, metavar=("I_T", "I_T1"))
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--gt", help="directory with point/flow/mask maps and trajectory.txt")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("render", help="render a saved scene")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--dt", type=float, default=0.0)
    p.add_argument("--camera", choices=[t.value for t in TargetFrame], default="canonical")

    p = sub.add_parser("interp", help="render frames in between the two inputs")
    _common(p)
    p.add_argument("--scene", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--frames", type=int, default=5, help="evenly spaced dt in [0, 1]")
    g.add_argument("--dt", type=float, nargs="+")

    p = sub.add_parser("eval", help="score predicted maps against ground truth")
    _common(p)
    p.add_argument("--pred", required=True, help="directory with point_*/flow_*.pfm")
    p.add_argument("--gt", required=True, help="directory with point_*/flow_*/mask_*.pfm")
    p.add_argument("--mode", choices=metrics.MODES)
    p.add_argument("--no-align", action="store_true")

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    _common(p)
    p.add_argument("--gaussians", type=int, default=10)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-4)
    return parser


def _load_config(args) -> config_mod.Config:
    cfg = config_mod.load(args.config) if args.config else config_mod.Config()
    pairs = {}
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.threads is not None:
        pairs["threads"] = str(args.threads)
    if getattr(args, "iterations", None) is not None:
        pairs["fit.iterations"] = str(args.iterations)
    return config_mod.from_pairs(pairs, cfg)


def _write_render(out, prefix: str, path: str, depth=None):
    io.save_image(np.clip(out.color, 0.0, 1.0), os.path.join(path, f"{prefix}color.png"))
    io.save_float_map(out.point, os.path.join(path, f"{prefix}point.pfm"))
    io.save_float_map(out.flow, os.path.join(path, f"{prefix}flow.pfm"))
    io.save_float_map(out.alpha, os.path.join(path, f"{prefix}alpha.pfm"))
    io.save_float_map(out.zdepth if depth is None else depth, os.path.join(path, f"{prefix}depth.pfm"))


def _write_frames(path, points, flows, masks):
    for u in (0, 1):
        io.save_float_map(points[u], os.path.join(path, f"point_{u}.pfm"))
        io.save_float_map(flows[u], os.path.join(path, f"flow_{u}.pfm"))
        if masks is not None:
            io.save_float_map(np.asarray(masks[u], np.float32), os.path.join(path, f"mask_{u}.pfm"))


def relative_from_trajectory(traj) -> RelativePose:
    """Pose mapping first-camera coordinates into the second camera."""
    return compose_pose(invert_pose(traj[1]), traj[0])


def _read_frames(path, need_mask=False):
    maps = {}
    for key in ("point", "flow", "mask"):
        files = [os.path.join(path, f"{key}_{u}.pfm") for u in (0, 1)]
        if all(os.path.exists(f) for f in files):
            maps[key] = [io.load_float_map(f).astype(np.float64) for f in files]
        elif need_mask and key == "mask":
            maps[key] = None
    traj = os.path.join(path, "trajectory.txt")
    if os.path.exists(traj):
        maps["trajectory"] = io.load_trajectory(traj)[1]
    return maps


def cmd_synth(args, cfg):
    spec = SyntheticSpec(size=args.size, sphere=not args.static)
    syn = make_synthetic_scene(spec, seed=cfg.seed, settings=cfg.raster)
    for u in (0, 1):
        io.save_image(syn.images[u], os.path.join(args.out, f"image_{u}.png"))
    io.save_intrinsics(syn.intrinsics, os.path.join(args.out, "intrinsics.txt"))
    sup = syn.supervision
    _write_frames(args.out, sup.point, sup.flow, sup.point_mask)
    io.save_trajectory(metrics.trajectory_from_relative(sup.pose), os.path.join(args.out, "trajectory.txt"))
    io.save_scene(syn.gt_scene, os.path.join(args.out, "gt_scene.s4d"))
    log.info("synthetic scene written to %s (baseline %.4f, mean depth %.4f)",
             args.out, syn.baseline, syn.mean_depth)
    return 0


def cmd_fit(args, cfg):
    images = [io.load_image(p) for p in args.images]
    K = io.load_intrinsics(args.intrinsics)
    sup = Supervision.empty()
    if args.gt:
        gt = _read_frames(args.gt, need_mask=True)
        traj = gt.get("trajectory")
        masks = gt.get("mask")
        masks = None if masks is None else [m > 0.5 for m in masks]
        sup = Supervision(
            point=None if "point" not in gt else np.stack(gt["point"]),
            point_mask=None if masks is None or "point" not in gt else np.stack(masks),
            flow=None if "flow" not in gt else np.stack(gt["flow"]),
            flow_mask=None if masks is None or "flow" not in gt else np.stack(masks),
            pose=None if traj is None else relative_from_trajectory(traj),
        )
    fit_cfg = dataclasses.replace(cfg.fit, seed=cfg.seed)
    scene = init_scene(images[0], images[1], K, fit_cfg)
    t0 = time.perf_counter()
    scene, rep = optimize(scene, images[0], images[1], sup, fit_cfg, cfg.raster)
    log.info("fit finished: %d iterations in %.1f s", rep.iterations, time.perf_counter() - t0)
    if not rep.converged:
        log.error("optimization stopped on a non-finite value")
    # render from the container precision so save/load/render matches these files
    scene = io.quantize_scene(scene)
    io.save_scene(scene, os.path.join(args.out, "scene.s4d"))
    io.save_trajectory(metrics.trajectory_from_relative(scene.pose), os.path.join(args.out, "trajectory.txt"))
    config_mod.save(cfg, os.path.join(args.out, "config.txt"), include_threads=False)
    cols = rep.trace_columns()
    with open(os.path.join(args.out, "loss_trace.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in rep.trace:
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in cols[1:]])
    # wall time stays in the log so report files are byte-reproducible
    final = rep.trace[-1] if rep.trace else {}
    with open(os.path.join(args.out, "fit_report.txt"), "w") as f:
        f.write(f"iterations = {rep.iterations}\nconverged = {str(rep.converged).lower()}\n")
        for c in cols[1:]:
            if c in final:
                f.write(f"final.{c} = {float(final[c])!r}\n")
        f.write(f"pose.q = {' '.join(repr(float(x)) for x in scene.pose.q)}\n")
        f.write(f"pose.tau = {' '.join(repr(float(x)) for x in scene.pose.tau)}\n")
    plotting.plot_loss_curve(rep.trace, os.path.join(args.out, "loss_curve.png"))
    points, flows = [], []
    for u in (0, 1):
        req = RenderRequest(K, view_for(scene, TargetFrame.SECOND if u else TargetFrame.CANONICAL), float(u))
        out = rasterize(scene.cloud, req, cfg.raster)
        io.save_image(np.clip(out.color, 0.0, 1.0), os.path.join(args.out, f"render_{u}.png"))
        points.append(out.point)
        flows.append(out.flow)
    _write_frames(args.out, points, flows, None)
    return 0 if rep.converged else 1


def cmd_render(args, cfg):
    scene = io.load_scene(args.scene)
    view = view_for(scene, args.camera)
    out = rasterize(scene.cloud, RenderRequest(scene.intrinsics, view, args.dt), cfg.raster)
    depth, _ = derive_depth(out, view, cfg.eval.alpha_threshold)
    _write_render(out, "", args.out, depth)
    moving = segment_moving(out, cfg.eval.moving_threshold, cfg.eval.alpha_threshold)
    io.save_float_map(moving.astype(np.float32), os.path.join(args.out, "moving.pfm"))
    flow = derive_optical_flow(scene, cfg.raster, cfg.eval.alpha_threshold)
    io.save_float_map(np.concatenate([flow.flow, flow.valid[..., None]], axis=-1), os.path.join(args.out, "flow2d.pfm"))
    plotting.plot_flow(flow.flow, flow.valid, os.path.join(args.out, "flow2d.png"))
    return 0


def cmd_interp(args, cfg):
    scene = io.load_scene(args.scene)
    dts = args.dt if args.dt else list(np.linspace(0.0, 1.0, max(args.frames, 2)))
    with open(os.path.join(args.out, "frames.txt"), "w") as f:
        for i, dt in enumerate(dts):
            out = interpolate_4d(scene, float(dt), settings=cfg.raster)
            _write_render(out, f"{i:03d}_", args.out)
            f.write(f"{i:03d}\t{float(dt)!r}\n")
    return 0


def cmd_eval(args, cfg):
    pred = _read_frames(args.pred)
    gt = _read_frames(args.gt)
    for key in ("point", "flow"):
        if (key in pred) != (key in gt):
            raise ContractError(f"{key} maps present in only one of pred/gt")
    if "point" not in gt and "flow" not in gt:
        raise ContractError("no point or flow maps found")
    masks = [m > 0.5 for m in gt["mask"]] if "mask" in gt else None
    traj = {}
    if "trajectory" in pred and "trajectory" in gt:
        traj = dict(pred_trajectory=pred["trajectory"], gt_trajectory=gt["trajectory"])
    ev = cfg.eval
    rep = metrics.report(
        pred_points=pred.get("point"), gt_points=gt.get("point"),
        pred_flows=pred.get("flow"), gt_flows=gt.get("flow"), masks=masks,
        mode=args.mode or ev.mode, align=ev.align and not args.no_align,
        statistic=ev.statistic, flow_scale=ev.flow_scale, **traj,
    )
    with open(os.path.join(args.out, "metrics.txt"), "w") as f:
        f.write(rep.table())
    with open(os.path.join(args.out, "metrics.kv"), "w") as f:
        f.write(rep.key_values())
    if "point" in gt:
        shape = np.shape(gt["point"][0])[:2]
        m = masks or [np.ones(shape, bool)] * 2
        plotting.plot_eval(pred["point"], gt["point"], m, os.path.join(args.out, "eval_errors.png"),
                           pred.get("flow"), gt.get("flow"))
    for line in rep.table().splitlines():
        log.info(line)
    return 0


def cmd_gradcheck(args, cfg):
    rep = gradcheck(seed=cfg.seed, n_gaussians=args.gaussians, size=args.size,
                    tolerance=args.tolerance, step=args.step, settings=cfg.raster)
    with open(os.path.join(args.out, "gradcheck.txt"), "w") as f:
        f.write("\n".join(rep.lines()) + "\n")
    for line in rep.lines():
        log.info(line)
    return 0 if rep.passed else 1


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "render": cmd_render,
    "interp": cmd_interp,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        _kernels.set_threads(cfg.threads)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except FormatError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 2
    except (Splat4DError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
