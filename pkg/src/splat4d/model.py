"""Scene representation: dynamic Gaussians, their activations, and the cloud.

The optimizer works on :class:`RawGaussianParams` (an unconstrained chart);
:func:`activate` maps it to constrained :class:`DynamicGaussian` values.
All per-Gaussian arrays are stored row-wise, one row per Gaussian.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import sh
from .errors import ContractError, InvalidParameterError, StateError
from .geometry import RelativePose, quat_to_rotation

SCALE_MIN = 1e-4
SCALE_MAX = 1e2


class Frame(IntEnum):
    T = 0
    T1 = 1


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point must lie inside the image")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def backproject(self, rows, cols, depth) -> np.ndarray:
        """Camera-frame points on the rays through pixel centers at ``depth``."""
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        return np.stack(
            [(cols - self.cx) / self.fx * depth, (rows - self.cy) / self.fy * depth, depth + 0 * rows],
            axis=-1,
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pinhole projection to ``(u, v)`` = (column, row) pixel coordinates."""
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)


@dataclass(frozen=True)
class RawGaussianParams:
    """Unconstrained optimization variables, one row per Gaussian.

    ``r`` is an un-normalized quaternion, ``s`` a log-scale and ``o`` a logit.
    ``h`` has shape ``(N, k, 3)``.
    """

    mu: np.ndarray
    v: np.ndarray
    r: np.ndarray
    s: np.ndarray
    h: np.ndarray
    o: np.ndarray

    def __post_init__(self):
        n = len(self.mu)
        shapes = {"mu": (n, 3), "v": (n, 3), "r": (n, 4), "s": (n, 3), "o": (n,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        h = np.asarray(self.h, dtype=np.float64)
        if h.ndim != 3 or h.shape[0] != n or h.shape[2] != 3:
            raise ContractError(f"h has shape {h.shape}, expected ({n}, k, 3)")
        if h.shape[1] not in (1, 4, 9):
            raise ContractError(f"h has {h.shape[1]} coefficients; expected 1, 4 or 9")
        object.__setattr__(self, "h", h)

    def __len__(self):
        return len(self.mu)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.h.shape[1]))) - 1

    def replace(self, **changes) -> "RawGaussianParams":
        return dataclasses.replace(self, **changes)

    def take(self, index) -> "RawGaussianParams":
        return RawGaussianParams(*(getattr(self, f.name)[index] for f in dataclasses.fields(self)))


@dataclass(frozen=True)
class DynamicGaussian:
    """Activated Gaussian parameters (batched, one row per Gaussian)."""

    mu: np.ndarray
    v: np.ndarray
    r: np.ndarray
    s: np.ndarray
    h: np.ndarray
    o: np.ndarray
    s_clamped: np.ndarray

    def __len__(self):
        return len(self.mu)

    def rotations(self) -> np.ndarray:
        return quat_to_rotation(self.r)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.r, self.s)


def logistic(x):
    # split form keeps exp() from overflowing for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def activate(raw: RawGaussianParams) -> DynamicGaussian:
    """Map raw parameters to constrained ones.

    opacity = logistic(o), scale = clamp(exp(s), SCALE_MIN, SCALE_MAX),
    rotation = r / |r|; center, motion and SH coefficients pass through.
    """
    for f in dataclasses.fields(raw):
        if not np.all(np.isfinite(getattr(raw, f.name))):
            raise InvalidParameterError(f"raw parameter '{f.name}' has non-finite values")
    norms = np.linalg.norm(raw.r, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise InvalidParameterError("raw rotation quaternion is (near) zero")
    s_exp = np.exp(raw.s)
    s = np.clip(s_exp, SCALE_MIN, SCALE_MAX)
    return DynamicGaussian(
        mu=raw.mu,
        v=raw.v,
        r=raw.r / norms,
        s=s,
        h=raw.h,
        o=logistic(raw.o),
        s_clamped=(s_exp < SCALE_MIN) | (s_exp > SCALE_MAX),
    )


def build_covariance(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``R diag(s)^2 R^T`` for unit quaternion(s) ``r`` and scale(s) ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise InvalidParameterError("scales must be strictly positive")
    rot = quat_to_rotation(r)
    m = rot * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass(frozen=True)
class GaussianCloud:
    """Per-pixel Gaussians of both frames plus their source tags.

    ``source_frame`` holds :class:`Frame` values, ``source_pixel`` (row, col).
    """

    params: RawGaussianParams
    source_frame: np.ndarray
    source_pixel: np.ndarray
    canonicalized: bool = False

    def __post_init__(self):
        n = len(self.params)
        frame = np.asarray(self.source_frame, dtype=np.int8).reshape(n)
        pixel = np.asarray(self.source_pixel, dtype=np.int64).reshape(n, 2)
        if not np.all((frame == Frame.T) | (frame == Frame.T1)):
            raise ContractError("source_frame must contain only 0 (t) or 1 (t+1)")
        object.__setattr__(self, "source_frame", frame)
        object.__setattr__(self, "source_pixel", pixel)

    def __len__(self):
        return len(self.params)

    @property
    def sh_degree(self) -> int:
        return self.params.sh_degree

    def counts(self) -> tuple[int, int]:
        return int(np.sum(self.source_frame == Frame.T)), int(np.sum(self.source_frame == Frame.T1))

    def frame_indices(self, frame: Frame) -> np.ndarray:
        return np.flatnonzero(self.source_frame == frame)

    def with_params(self, params: RawGaussianParams) -> "GaussianCloud":
        return dataclasses.replace(self, params=params)

    def activated(self) -> DynamicGaussian:
        return activate(self.params)


def canonicalize_second_frame(cloud: GaussianCloud) -> GaussianCloud:
    """Move second-frame Gaussians to time t: ``mu += v`` then ``v = -v``."""
    if cloud.canonicalized:
        raise StateError("cloud is already canonicalized")
    sel = cloud.source_frame == Frame.T1
    mu = cloud.params.mu.copy()
    v = cloud.params.v.copy()
    mu[sel] = mu[sel] + v[sel]
    v[sel] = -v[sel]
    return dataclasses.replace(cloud, params=cloud.params.replace(mu=mu, v=v), canonicalized=True)


@dataclass(frozen=True)
class Scene:
    """A Gaussian cloud with its relative pose and camera intrinsics."""

    cloud: GaussianCloud
    pose: RelativePose
    intrinsics: CameraIntrinsics

    def replace(self, **changes) -> "Scene":
        return dataclasses.replace(self, **changes)


def make_raw_params(n: int, sh_degree: int = 1) -> RawGaussianParams:
    """Neutral raw parameters: identity rotation, unit scale, o = 0.5."""
    if not 0 <= sh_degree <= sh.MAX_DEGREE:
        raise ContractError(f"sh_degree must be in [0, {sh.MAX_DEGREE}]")
    r = np.zeros((n, 4))
    r[:, 0] = 1.0
    return RawGaussianParams(
        mu=np.zeros((n, 3)),
        v=np.zeros((n, 3)),
        r=r,
        s=np.zeros((n, 3)),
        h=np.zeros((n, sh.num_coeffs(sh_degree), 3)),
        o=np.zeros(n),
    )
