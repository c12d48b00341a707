"""Scene builders shared by several test modules."""

import numpy as np

from splat4d.geometry import RelativePose
from splat4d.grad import random_scene
from splat4d.model import CameraIntrinsics, GaussianCloud, Scene, make_raw_params
from splat4d.raster import RenderRequest
from splat4d.sh import rgb_to_dc


def cloud_from(mu, v=None, s=None, o=None, h=None, r=None, sh_degree=0, frames=None):
    mu = np.atleast_2d(np.asarray(mu, float))
    n = len(mu)
    p = make_raw_params(n, sh_degree)
    changes = {"mu": mu}
    if v is not None:
        changes["v"] = np.broadcast_to(np.asarray(v, float), (n, 3)).copy()
    if s is not None:
        changes["s"] = np.broadcast_to(np.asarray(s, float), (n, 3)).copy()
    if o is not None:
        changes["o"] = np.broadcast_to(np.asarray(o, float), (n,)).copy()
    if h is not None:
        changes["h"] = np.asarray(h, float).reshape(p.h.shape)
    if r is not None:
        changes["r"] = np.broadcast_to(np.asarray(r, float), (n, 4)).copy()
    p = p.replace(**changes)
    frames = np.zeros(n, int) if frames is None else frames
    return GaussianCloud(p, frames, np.zeros((n, 2), int), canonicalized=True)


def dc(rgb):
    return rgb_to_dc(np.asarray(rgb, float))


def oracle_case(seed):
    """Random scene for the compositing oracle: varied size, SH degree, background."""
    rng = np.random.default_rng(10_000 + seed)
    n = int(rng.integers(3, 25))
    deg = int(rng.integers(0, 3))
    cloud, req, _ = random_scene(seed, n, 16, deg)
    bg = tuple(rng.uniform(0, 1, 3)) if seed % 3 == 0 else (0.0, 0.0, 0.0)
    return cloud, req, bg


def plane_scene(size=12, z=2.0, f=12.0, margin=3, opacity=0.9, v=(0.0, 0.0, 0.0)):
    """Fronto-parallel grid of Gaussians, one per pixel plus a margin."""
    K = CameraIntrinsics(f, f, (size - 1) / 2, (size - 1) / 2, size, size)
    rows, cols = np.meshgrid(np.arange(-margin, size + margin), np.arange(-margin, size + margin), indexing="ij")
    mu = K.backproject(rows.ravel(), cols.ravel(), np.full(rows.size, z))
    logit = np.log(opacity) - np.log1p(-opacity)
    cloud = cloud_from(mu, v=v, s=np.log(0.5 * z / f), o=logit)
    return Scene(cloud, RelativePose.identity(), K)


def request(K, view=None, dt=0.0):
    return RenderRequest(K, view or RelativePose.identity(), dt)
