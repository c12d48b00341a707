import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from splat4d.errors import ContractError
from splat4d.fit import init_scene
from splat4d.geometry import RelativePose, quat_from_axis_angle
from splat4d.grad import FAMILIES, relative_errors
from splat4d.losses import (
    LossWeights,
    Supervision,
    loss_motion,
    loss_photometric,
    loss_point,
    loss_pose,
    loss_smooth,
    loss_total,
    ssim_and_grad,
    sum_gradients,
)
from splat4d.model import CameraIntrinsics, Frame
from splat4d.raster import forward, frame_request

import oracles

H = W = 6


def small_scene(seed=0, size=H):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(size * 1.3, size * 1.3, (size - 1) / 2, (size - 1) / 2, size, size)
    imgs = [rng.uniform(0.1, 0.9, (size, size, 3)) for _ in range(2)]
    scene = init_scene(imgs[0], imgs[1], K)
    p = scene.cloud.params
    n = len(p)
    p = p.replace(
        mu=p.mu * rng.uniform(1.5, 2.5, (n, 1)) + rng.normal(scale=0.01, size=(n, 3)),
        v=rng.normal(scale=0.05, size=(n, 3)),
        r=p.r + rng.normal(scale=0.2, size=(n, 4)),
        s=p.s + rng.normal(scale=0.2, size=(n, 3)) + 0.5,
        h=p.h + rng.normal(scale=0.2, size=p.h.shape),
        o=rng.normal(scale=0.5, size=n),
    )
    pose = RelativePose(quat_from_axis_angle([0.2, 1, 0.1], 0.03), [-0.05, 0.01, 0.02])
    scene = scene.replace(cloud=scene.cloud.with_params(p), pose=pose)
    sup = Supervision(
        point=rng.normal(size=(2, size, size, 3)) + [0, 0, 2],
        point_mask=rng.uniform(size=(2, size, size)) > 0.3,
        flow=rng.normal(scale=0.1, size=(2, size, size, 3)),
        flow_mask=rng.uniform(size=(2, size, size)) > 0.3,
        pose=RelativePose(quat_from_axis_angle([0, 1, 0], 0.05), [-0.1, 0, 0]),
    )
    targets = [rng.uniform(0, 1, (size, size, 3)) for _ in range(2)]
    return scene, sup, targets


def renders(scene):
    return [forward(scene.cloud, frame_request(scene, u))[0] for u in (0, 1)]


def per_gauss(cloud, use_center):
    out = []
    for u in (0, 1):
        idx = cloud.frame_indices(Frame(u))
        rows = []
        for i in idx:
            r, c = cloud.source_pixel[i]
            vec = cloud.params.mu[i] + u * cloud.params.v[i] if use_center else cloud.params.v[i]
            rows.append((r, c, vec))
        out.append(rows)
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_supervised_losses_match_oracle(seed):
    scene, sup, _ = small_scene(seed)
    outs = renders(scene)
    m = loss_motion(scene.cloud, [o.flow for o in outs], sup).value
    p = loss_point(scene.cloud, [o.point for o in outs], sup).value
    m_ref = oracles.supervised_loss(per_gauss(scene.cloud, False), [o.flow for o in outs], sup.flow,
                                    sup.flow_mask, None)
    p_ref = oracles.supervised_loss(per_gauss(scene.cloud, True), [o.point for o in outs], sup.point,
                                    sup.point_mask, None)
    assert abs(m - m_ref) < 1e-6 and abs(p - p_ref) < 1e-6


def test_motion_single_pixel_example():
    scene, _, _ = small_scene()
    cloud = scene.cloud
    gt = np.zeros((2, H, W, 3))
    mask = np.zeros((2, H, W), bool)
    i = cloud.frame_indices(Frame.T)[0]
    r, c = cloud.source_pixel[i]
    mask[0, r, c] = True
    v = cloud.params.v.copy()
    v[i] = [3.0, 4.0, 0.0]
    cloud = cloud.with_params(cloud.params.replace(v=v))
    flows = [np.zeros((H, W, 3)), np.zeros((H, W, 3))]
    term = loss_motion(cloud, flows, Supervision(flow=gt, flow_mask=mask))
    assert term.value == 5.0


def test_exact_fit_and_homogeneity():
    scene, sup, _ = small_scene()
    cloud = scene.cloud
    cloud = cloud.with_params(cloud.params.replace(v=np.zeros_like(cloud.params.v)))
    # put every per-Gaussian center and rendered point exactly on the GT
    mu = cloud.params.mu.copy()
    for u in (0, 1):
        idx = cloud.frame_indices(Frame(u))
        rc = cloud.source_pixel[idx]
        mu[idx] = sup.point[u][rc[:, 0], rc[:, 1]] - u * cloud.params.v[idx]
    exact = cloud.with_params(cloud.params.replace(mu=mu))
    assert loss_point(exact, list(sup.point), sup).value == 0.0
    # doubling every error doubles the loss
    off = [sup.point[u] + 0.3 for u in (0, 1)]
    c1 = cloud.with_params(cloud.params.replace(mu=mu + 0.1))
    c2 = cloud.with_params(cloud.params.replace(mu=mu + 0.2))
    l1 = loss_point(c1, off, sup).value
    l2 = loss_point(c2, [sup.point[u] + 0.6 for u in (0, 1)], sup).value
    assert abs(l2 - 2 * l1) < 1e-12


def test_empty_mask_contributes_zero():
    scene, sup, _ = small_scene()
    sup = dataclasses.replace(sup, flow_mask=np.zeros((2, H, W), bool))
    outs = renders(scene)
    assert loss_motion(scene.cloud, [o.flow for o in outs], sup).value == 0.0


def test_shape_mismatch():
    scene, sup, _ = small_scene()
    with pytest.raises(ContractError):
        loss_point(scene.cloud, [np.zeros((3, 3, 3))] * 2, sup)


def test_pose_examples():
    gt = RelativePose(quat_from_axis_angle([0, 1, 0], 0.3), [1, 2, 3])
    assert loss_pose(gt, gt).value == 0.0
    assert loss_pose(RelativePose(-gt.q, gt.tau), gt).value == 0.0
    assert abs(loss_pose(RelativePose(gt.q, gt.tau + [1, 0, 0]), gt).value - 1.0) < 1e-15


def test_pose_gradient_fd():
    pred = RelativePose(quat_from_axis_angle([1, 1, 0], 0.2), [0.1, 0.2, 0.3])
    gt = RelativePose(quat_from_axis_angle([0, 1, 0], -0.1), [0.0, 0.1, 0.0])
    g = loss_pose(pred, gt).params
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (loss_pose(RelativePose(pred.q + e, pred.tau), gt).value
              - loss_pose(RelativePose(pred.q - e, pred.tau), gt).value) / (2 * h)
        assert abs(fd - g.q[i]) < 1e-7
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (loss_pose(RelativePose(pred.q, pred.tau + e), gt).value
              - loss_pose(RelativePose(pred.q, pred.tau - e), gt).value) / (2 * h)
        assert abs(fd - g.tau[i]) < 1e-7


def test_photometric_examples(rng):
    img = [rng.uniform(0.1, 0.8, (8, 8, 3)) for _ in range(2)]
    assert loss_photometric(img, img, 0.05).value == pytest.approx(0.0, abs=1e-15)
    shifted = [i + 0.1 for i in img]
    assert abs(loss_photometric(shifted, img, 0.0).value - 0.02) < 1e-12
    s, _ = ssim_and_grad(img[0], img[0])
    assert abs(s - 1.0) < 1e-12


def test_photometric_clamps_out_of_range(caplog, rng):
    img = [rng.uniform(0, 1, (4, 4, 3)) for _ in range(2)]
    bad = [img[0] * 2 - 0.5, img[1]]
    with caplog.at_level("WARNING"):
        v = loss_photometric(img, bad, 0.0).value
    assert "clamping" in caplog.text
    assert abs(v - np.mean((img[0] - np.clip(bad[0], 0, 1)) ** 2)) < 1e-12


def test_ssim_matches_oracle_and_fd(rng):
    x, y = rng.uniform(0, 1, (9, 10, 3)), rng.uniform(0, 1, (9, 10, 3))
    s, g = ssim_and_grad(x, y)
    assert abs(s - oracles.ssim_naive(x, y)) < 1e-6
    h = 1e-6
    for idx in [(0, 0, 0), (4, 5, 1), (8, 9, 2), (3, 2, 0)]:
        e = np.zeros_like(x)
        e[idx] = h
        fd = (ssim_and_grad(x + e, y)[0] - ssim_and_grad(x - e, y)[0]) / (2 * h)
        assert abs(fd - g[idx]) < 1e-8


def test_smooth_constant_is_zero(rng):
    const = [np.full((H, W, 3), 2.0)] * 2
    imgs = [rng.uniform(0, 1, (H, W, 3)) for _ in range(2)]
    assert loss_smooth(const, const, imgs).value == 0.0


def test_smooth_matches_oracle(rng):
    pts = [rng.normal(size=(H, W + 1, 3)) for _ in range(2)]
    fl = [rng.normal(size=(H, W + 1, 3)) for _ in range(2)]
    imgs = [rng.uniform(0, 1, (H, W + 1, 3)) for _ in range(2)]
    ours = loss_smooth(pts, fl, imgs).value
    ref = sum(oracles.smooth_loss([pts[u], fl[u]], imgs[u]) for u in (0, 1))
    assert abs(ours - ref) < 1e-6


def test_smooth_edge_suppression():
    X = np.zeros((H, W, 3))
    X[:, W // 2:] = 1.0
    flat = np.full((H, W, 3), 0.5)
    edge = flat.copy()
    edge[:, W // 2:] = 1.0
    edge[:, : W // 2] = 0.0
    zero = [np.zeros((H, W, 3))] * 2
    on_flat = loss_smooth([X, X], zero, [flat, flat]).value
    on_edge = loss_smooth([X, X], zero, [edge, edge]).value
    assert on_edge < on_flat
    assert abs(on_edge / on_flat - np.exp(-1.0)) < 1e-12


def test_smooth_gradient_fd(rng):
    pts = [rng.normal(size=(H, W, 3)) for _ in range(2)]
    fl = [rng.normal(size=(H, W, 3)) for _ in range(2)]
    imgs = [rng.uniform(0, 1, (H, W, 3)) for _ in range(2)]
    t = loss_smooth(pts, fl, imgs)
    h = 1e-7
    for u, ch, idx in [(0, "point", (2, 3, 1)), (1, "flow", (0, 0, 2)), (1, "point", (5, 5, 0))]:
        maps = pts if ch == "point" else fl
        e = np.zeros((H, W, 3))
        e[idx] = h
        plus = [m.copy() for m in maps]
        minus = [m.copy() for m in maps]
        plus[u] += e
        minus[u] -= e
        args_p = (plus, fl) if ch == "point" else (pts, plus)
        args_m = (minus, fl) if ch == "point" else (pts, minus)
        fd = (loss_smooth(*args_p, imgs).value - loss_smooth(*args_m, imgs).value) / (2 * h)
        assert abs(fd - t.upstream[u][ch][idx]) < 1e-6


def test_total_with_zero_weights_is_photometric():
    scene, _, targets = small_scene()
    w = LossWeights(0.0, 0.0, 0.0, 0.0)
    res = loss_total(scene, targets, Supervision.empty(), w)
    assert res.total == res.components["photo"]


def test_component_gradients_sum_to_total():
    scene, sup, targets = small_scene(1)
    res = loss_total(scene, targets, sup, LossWeights(), per_component=True)
    summed = sum_gradients(res.component_grads.values())
    assert res.grads.max_abs_diff(summed) < 1e-9
    assert abs(res.total - sum(
        w * res.components[k] for k, w in
        [("motion", 1), ("point", 1), ("pose", 1), ("photo", 1), ("smooth", 0.1)])) < 1e-12


def _signature(scene):
    return tuple(forward(scene.cloud, frame_request(scene, u))[1].signature() for u in (0, 1))


def _perturb(scene, fam, idx, d):
    if fam in ("q", "tau"):
        q, tau = scene.pose.q.copy(), scene.pose.tau.copy()
        (q if fam == "q" else tau)[idx] += d
        return scene.replace(pose=RelativePose(q, tau))
    arr = getattr(scene.cloud.params, fam).copy()
    arr[idx] += d
    return scene.replace(cloud=scene.cloud.with_params(scene.cloud.params.replace(**{fam: arr})))


def test_total_gradient_matches_finite_differences():
    scene, sup, targets = small_scene(2, size=5)
    w = LossWeights()
    res = loss_total(scene, targets, sup, w)
    base = _signature(scene)
    rng = np.random.default_rng(0)
    h = 1e-5
    for fam in FAMILIES:
        ref = scene.pose.q if fam == "q" else scene.pose.tau if fam == "tau" else getattr(scene.cloud.params, fam)
        idxs = list(np.ndindex(*ref.shape))
        picks = [idxs[i] for i in rng.choice(len(idxs), min(12, len(idxs)), replace=False)]
        a, f = [], []
        for idx in picks:
            sp, sm = _perturb(scene, fam, idx, h), _perturb(scene, fam, idx, -h)
            if _signature(sp) != base or _signature(sm) != base:
                continue
            fd = (loss_total(sp, targets, sup, w).total - loss_total(sm, targets, sup, w).total) / (2 * h)
            a.append(res.grads.get(fam)[idx])
            f.append(fd)
        assert len(a) > 0, fam
        rel = relative_errors(np.array(a), np.array(f))
        assert rel.max() < 1e-3, (fam, rel.max())


mask_seeds = st.integers(0, 10_000)


@given(mask_seeds)
def test_invalid_pixels_never_matter(seed):
    scene, sup, targets = small_scene(0)
    rng = np.random.default_rng(seed)
    point = sup.point.copy()
    flow = sup.flow.copy()
    point[~sup.point_mask] = rng.normal(size=(int((~sup.point_mask).sum()), 3)) * 100
    flow[~sup.flow_mask] = rng.normal(size=(int((~sup.flow_mask).sum()), 3)) * 100
    sup2 = dataclasses.replace(sup, point=point, flow=flow)
    outs = renders(scene)
    for fn, ch in ((loss_point, "point"), (loss_motion, "flow")):
        maps = [getattr(o, ch) for o in outs]
        assert fn(scene.cloud, maps, sup).value == fn(scene.cloud, maps, sup2).value


def test_losses_nonnegative_and_order_invariant():
    scene, sup, targets = small_scene(3)
    res = loss_total(scene, targets, sup, LossWeights())
    assert all(v >= 0 for v in res.components.values())
    # reverse storage order within each frame
    n = len(scene.cloud) // 2
    perm = np.concatenate([np.arange(n)[::-1], n + np.arange(n)[::-1]])
    c = scene.cloud
    shuffled = dataclasses.replace(c, params=c.params.take(perm), source_frame=c.source_frame[perm],
                                   source_pixel=c.source_pixel[perm])
    res2 = loss_total(scene.replace(cloud=shuffled), targets, sup, LossWeights())
    for k in res.components:
        assert abs(res.components[k] - res2.components[k]) < 1e-9, k
