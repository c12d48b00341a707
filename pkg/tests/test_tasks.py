import numpy as np
import pytest
from hypothesis import given, strategies as st

from splat4d.fit import SyntheticSpec, init_scene, make_synthetic_scene
from splat4d.geometry import RelativePose, quat_from_axis_angle
from splat4d.grad import random_scene
from splat4d.model import CameraIntrinsics, Scene
from splat4d.raster import forward, frame_request, rasterize
from splat4d.tasks import (
    derive_depth,
    derive_optical_flow,
    interpolate_4d,
    interpolation_view,
    opacity_map,
    segment_moving,
)

import oracles
from helpers import cloud_from, plane_scene, request

OPAQUE = 40.0  # logistic(40) == 1.0 in float64


def single_point(v=(0.0, 0.0, 0.0)):
    K = CameraIntrinsics(5.0, 5.0, 2.0, 2.0, 5, 5)
    cloud = cloud_from([[0.0, 0.0, 2.0]], v=v, s=np.log(0.5 * 2 / 5), o=OPAQUE)
    return Scene(cloud, RelativePose.identity(), K)


def test_depth_single_gaussian():
    scene = single_point()
    out = rasterize(scene.cloud, request(scene.intrinsics))
    depth, valid = derive_depth(out)
    assert depth[2, 2] == 2.0 and valid[2, 2]
    assert out.alpha[0, 0] == 0.0
    assert depth[0, 0] == 0.0 and not valid[0, 0]


@pytest.mark.parametrize("seed", range(5))
def test_depth_matches_zdepth_in_any_view(seed):
    cloud, req, _ = random_scene(seed, 12, 16, 1)
    view = RelativePose(quat_from_axis_angle([0.2, 1, 0], 0.1), [0.1, -0.05, 0.2])
    for v in (RelativePose.identity(), view):
        out = rasterize(cloud, request(req.intrinsics, v, 0.5))
        depth, valid = derive_depth(out, v, alpha_threshold=0.0)
        assert np.max(np.abs(depth - np.where(valid, out.zdepth, 0.0))) < 1e-5


def test_flow_zero_for_static_identity():
    flow = derive_optical_flow(plane_scene())
    assert flow.valid.any()
    assert np.all(flow.flow == 0.0)


def test_flow_parallax_of_translated_camera():
    scene = plane_scene(z=2.0, opacity=0.99)
    t = np.array([0.1, -0.04, 0.0])
    scene = scene.replace(pose=RelativePose([1, 0, 0, 0], t))
    flow = derive_optical_flow(scene)
    K = scene.intrinsics
    # fronto-parallel plane, camera shifted in its own plane: uniform f t / z
    expect = np.array([K.fx * t[0] / 2.0, K.fy * t[1] / 2.0])
    assert flow.valid.all()
    assert np.max(np.abs(flow.flow - expect)) < 1e-9


def test_flow_parallax_matches_two_view_projection():
    # tilted camera motion: compare against projecting the composited points by hand
    scene = plane_scene(z=2.0, opacity=0.99)
    pose = RelativePose(quat_from_axis_angle([0, 1, 0], 0.05), [0.1, 0.0, 0.05])
    scene = scene.replace(pose=pose)
    flow = derive_optical_flow(scene)
    out = rasterize(scene.cloud, request(scene.intrinsics))
    K = scene.intrinsics
    for r, c in [(0, 0), (5, 7), (11, 11), (3, 9)]:
        X = out.point[r, c] / out.alpha[r, c]
        w = oracles.quat_matrix(pose.q) @ X + pose.tau
        u1, v1 = K.fx * w[0] / w[2] + K.cx, K.fy * w[1] / w[2] + K.cy
        u0, v0 = K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy
        assert np.allclose(flow.flow[r, c], [u1 - u0, v1 - v0], atol=1e-9)


def test_flow_single_moving_point():
    scene = single_point(v=(0.1, 0.0, 0.0))
    flow = derive_optical_flow(scene)
    # pi((0.1, 0, 2)) - pi((0, 0, 2)) = (5 * 0.1 / 2, 0)
    assert flow.valid[2, 2]
    assert np.allclose(flow.flow[2, 2], [0.25, 0.0], atol=1e-12)


def test_flow_behind_second_camera_invalid():
    scene = single_point()
    scene = scene.replace(pose=RelativePose([1, 0, 0, 0], [0, 0, -3.0]))
    assert not derive_optical_flow(scene).valid.any()


def test_segment_static_is_empty():
    out = rasterize(plane_scene().cloud, request(plane_scene().intrinsics))
    for th in (1e-9, 0.05, 1.0):
        assert not segment_moving(out, th).any()


@pytest.fixture(scope="module")
def sphere_scene():
    return make_synthetic_scene(SyntheticSpec(size=32, focal=32.0), seed=3)


def test_segment_sphere_footprint(sphere_scene):
    syn = sphere_scene
    speed = float(np.linalg.norm(syn.spec.sphere_velocity))
    out = rasterize(syn.gt_scene.cloud, frame_request(syn.gt_scene, 0))
    mask = segment_moving(out, threshold=speed / 2)
    # composited speed is speed * sphere weight, so the mask is the half-covered footprint
    footprint = (syn.sphere_coverage[0] > 0.5) & (out.alpha > 0.5)
    assert footprint.sum() > 20
    assert np.array_equal(mask, footprint)


def test_segment_zero_threshold(sphere_scene):
    out = rasterize(sphere_scene.gt_scene.cloud, frame_request(sphere_scene.gt_scene, 0))
    expect = (np.linalg.norm(out.flow, axis=-1) > 0) & (out.alpha > 0.5)
    assert np.array_equal(segment_moving(out, 0.0), expect)


@given(st.floats(0.0, 0.3), st.floats(0.0, 0.3))
def test_segment_monotone(a, b):
    lo, hi = sorted((a, b))
    cloud, req, _ = random_scene(4, 15, 12, 1)
    out = rasterize(cloud, req)
    m_lo, m_hi = segment_moving(out, lo, 0.1), segment_moving(out, hi, 0.1)
    assert not np.any(m_hi & ~m_lo)


@pytest.mark.parametrize("seed", range(3))
def test_interpolation_endpoints_bit_exact(seed):
    rng = np.random.default_rng(seed)
    cloud, req, _ = random_scene(seed, 15, 16, 1)
    pose = RelativePose(quat_from_axis_angle(rng.normal(size=3), 0.1), rng.normal(scale=0.1, size=3))
    scene = Scene(cloud, pose, req.intrinsics)
    for u, view in ((0, RelativePose.identity()), (1, pose)):
        a = interpolate_4d(scene, float(u), view)
        b, _ = forward(cloud, frame_request(scene, u))
        for ch in ("color", "point", "flow", "alpha", "zdepth"):
            assert np.array_equal(getattr(a, ch), getattr(b, ch)), (u, ch)


def test_interpolation_view_endpoints():
    pose = RelativePose(quat_from_axis_angle([1, 2, 0], 0.4), [0.3, 0.1, -0.2])
    scene = Scene(plane_scene().cloud, pose, plane_scene().intrinsics)
    a, b = interpolation_view(scene, 0.0), interpolation_view(scene, 1.0)
    assert np.allclose(a.q, [1, 0, 0, 0], atol=1e-9) and np.allclose(a.tau, 0, atol=1e-9)
    assert np.allclose(b.q, pose.q, atol=1e-9) and np.allclose(b.tau, pose.tau, atol=1e-9)


def test_midpoint_linearity_for_rigid_motion():
    # the second camera follows the moving plane, so the in-between camera
    # sees fixed footprints and X(dt) = X(0) + A dt v
    v = np.array([0.05, -0.02, 0.1])
    scene = plane_scene(size=12, z=2.0, opacity=0.999, v=v)
    scene = scene.replace(pose=RelativePose([1, 0, 0, 0], -v))
    outs = [interpolate_4d(scene, dt) for dt in (0.0, 0.5, 1.0)]
    ok = (outs[0].alpha > 0.99) & (outs[1].alpha > 0.99) & (outs[2].alpha > 0.99)
    assert ok.sum() > 50
    mid = 0.5 * (outs[0].point + outs[2].point)
    assert np.max(np.abs(outs[1].point - mid)[ok]) < 1e-4
    assert np.max(np.abs(outs[2].point - outs[0].point - outs[0].alpha[..., None] * v)[ok]) < 1e-4


def test_opacity_at_init_and_range(rng):
    K = CameraIntrinsics(8.0, 8.0, 3.5, 3.5, 8, 8)
    img = rng.uniform(0, 1, (8, 8, 3))
    scene = init_scene(img, img, K)
    exp = opacity_map(scene)
    assert np.all(exp.maps == 0.5) and np.all(exp.opacity == 0.5)
    assert len(exp.opacity) == len(exp.source_frame) == 128
    cloud, req, _ = random_scene(0, 10, 8, 1)
    o = opacity_map(Scene(cloud, RelativePose.identity(), req.intrinsics)).opacity
    assert np.all((o >= 0) & (o <= 1))


def test_opacity_drops_after_photometric_fit(photometric_fit):
    _, fitted, _ = photometric_fit
    exp = opacity_map(fitted)
    assert np.all((exp.opacity >= 0) & (exp.opacity <= 1))
    print("mean opacity after photometric fit:", exp.opacity.mean())
    assert exp.opacity.mean() < 0.9
