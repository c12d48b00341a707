"""File formats: 8-bit images, PFM float maps, scene containers, intrinsics, trajectories.

The scene container layout is described in ``docs/scene_format.md``.
"""

from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError
from .geometry import RelativePose
from .model import CameraIntrinsics, Frame, GaussianCloud, RawGaussianParams, Scene
from . import sh

# ---------------------------------------------------------------------------
# 8-bit images


def load_image(path) -> np.ndarray:
    """RGB image as ``(H, W, 3)`` floats ``byte / 255``."""
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                im = im.convert("RGB")
            if im.mode != "RGB":
                raise FormatError(f"expected an 8-bit RGB image, got mode {im.mode}", path)
            data = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return data.astype(np.float64) / 255.0


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Quantize ``[0, 1]`` floats to 8 bits, rounding half to even."""
    image = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(np.nan_to_num(image), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    data = to_bytes(image)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=-1)
    if data.ndim != 3 or data.shape[-1] != 3:
        raise FormatError(f"image must be H x W x 3, got {data.shape}", path)
    ext = os.path.splitext(str(path))[1].lower()
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(ext)
    if fmt is None:
        raise FormatError(f"unsupported image extension {ext!r} (use .png or .ppm)", path)
    Image.fromarray(data, "RGB").save(path, format=fmt)


# ---------------------------------------------------------------------------
# PFM float maps


def _read_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("truncated header", path, pos)
    return buf[pos:end].strip(), end + 1


def save_float_map(data: np.ndarray, path) -> None:
    """Write a 1- or 3-channel map as little-endian 32-bit PFM (rows bottom-up)."""
    arr = np.asarray(data)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[-1] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"float maps must be H x W or H x W x 3, got {arr.shape}", path)
    h, w = arr.shape[:2]
    body = np.ascontiguousarray(arr[::-1].astype("<f4"))
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(body.tobytes())


def load_float_map(path) -> np.ndarray:
    """Inverse of :func:`save_float_map`; returns float32 ``(H, W)`` or ``(H, W, 3)``."""
    with open(path, "rb") as f:
        buf = f.read()
    tag, pos = _read_token(buf, 0, path)
    if tag not in (b"PF", b"Pf"):
        raise FormatError(f"bad PFM magic {tag[:8]!r}", path, 0)
    dims_at = pos
    dims, pos = _read_token(buf, pos, path)
    try:
        w, h = (int(x) for x in dims.split())
    except ValueError:
        raise FormatError(f"bad PFM dimensions {dims[:32]!r}", path, dims_at) from None
    if w <= 0 or h <= 0:
        raise FormatError(f"non-positive PFM dimensions {w} x {h}", path, dims_at)
    scale_at = pos
    scale_tok, pos = _read_token(buf, pos, path)
    try:
        scale = float(scale_tok)
    except ValueError:
        raise FormatError(f"bad PFM scale {scale_tok[:32]!r}", path, scale_at) from None
    if scale == 0.0:
        raise FormatError("PFM scale must be non-zero", path, scale_at)
    channels = 3 if tag == b"PF" else 1
    n = w * h * channels
    if len(buf) - pos != 4 * n:
        raise FormatError(f"expected {4 * n} data bytes, found {len(buf) - pos}", path, pos)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.ascontiguousarray(arr.reshape(shape)[::-1])


# ---------------------------------------------------------------------------
# scene container

SCENE_MAGIC = b"SPLAT4D\x00"
SCENE_VERSION = 1
_HEADER = struct.Struct("<8sIIQQIII4d4d3dI")
_TAGS = 3  # frame, row, col


def record_floats(sh_degree: int) -> int:
    return 3 + 3 + 4 + 3 + 3 * sh.num_coeffs(sh_degree) + 1 + _TAGS


def quantize_params(params: RawGaussianParams) -> RawGaussianParams:
    """Round raw parameters to the container's 32-bit precision."""
    q = {k: getattr(params, k).astype(np.float32).astype(np.float64) for k in ("mu", "v", "r", "s", "h", "o")}
    return params.replace(**q)


def quantize_scene(scene: Scene) -> Scene:
    return scene.replace(cloud=scene.cloud.with_params(quantize_params(scene.cloud.params)))


def save_scene(scene: Scene, path) -> None:
    cloud, K, pose = scene.cloud, scene.intrinsics, scene.pose
    p = cloud.params
    deg = p.sh_degree
    n_t, n_t1 = cloud.counts()
    header = _HEADER.pack(
        SCENE_MAGIC, SCENE_VERSION, deg, n_t, n_t1, int(cloud.canonicalized),
        K.width, K.height, K.fx, K.fy, K.cx, K.cy, *pose.q, *pose.tau, record_floats(deg),
    )
    n = len(cloud)
    rec = np.concatenate([
        p.mu, p.v, p.r, p.s, p.h.reshape(n, -1), p.o[:, None],
        cloud.source_frame[:, None].astype(np.float64), cloud.source_pixel.astype(np.float64),
    ], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.tobytes())


def load_scene(path) -> Scene:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than the scene header", path, len(buf))
    (magic, version, deg, n_t, n_t1, flags, width, height, fx, fy, cx, cy,
     qw, qx, qy, qz, tx, ty, tz, stride) = _HEADER.unpack_from(buf, 0)
    if magic != SCENE_MAGIC:
        raise FormatError(f"bad scene magic {magic!r}", path, 0)
    if version != SCENE_VERSION:
        raise FormatError(f"unsupported scene version {version}", path, 8)
    if deg > sh.MAX_DEGREE:
        raise FormatError(f"SH degree {deg} out of range", path, 12)
    if stride != record_floats(deg):
        raise FormatError(f"record size {stride} does not match SH degree {deg}", path, _HEADER.size - 4)
    n = n_t + n_t1
    body = len(buf) - _HEADER.size
    if body != 4 * stride * n:
        raise FormatError(f"expected {4 * stride * n} record bytes, found {body}", path, _HEADER.size)
    rec = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(n, stride).astype(np.float64)
    k = sh.num_coeffs(deg)
    cols = np.cumsum([0, 3, 3, 4, 3, 3 * k, 1, _TAGS])
    mu, v, r, s, h, o, tags = (rec[:, a:b] for a, b in zip(cols[:-1], cols[1:]))
    if np.any(tags != np.round(tags)):
        raise FormatError("source tags must be whole numbers", path, _HEADER.size)
    frames = tags[:, 0].astype(np.int8)
    if int(np.sum(frames == Frame.T)) != n_t or int(np.sum(frames == Frame.T1)) != n_t1:
        raise FormatError("per-frame counts disagree with source tags", path, 16)
    params = RawGaussianParams(mu=mu.copy(), v=v.copy(), r=r.copy(), s=s.copy(),
                               h=h.reshape(n, k, 3).copy(), o=o[:, 0].copy())
    cloud = GaussianCloud(params, frames, tags[:, 1:].astype(np.int64), canonicalized=bool(flags & 1))
    K = CameraIntrinsics(fx, fy, cx, cy, int(width), int(height))
    return Scene(cloud, RelativePose((qw, qx, qy, qz), (tx, ty, tz)), K)


# ---------------------------------------------------------------------------
# small text formats


def save_intrinsics(K: CameraIntrinsics, path) -> None:
    with open(path, "w") as f:
        f.write(f"{K.fx!r} {K.fy!r}\n{K.cx!r} {K.cy!r}\n{K.width} {K.height}\n# fx fy / cx cy / width height\n")


def load_intrinsics(path) -> CameraIntrinsics:
    with open(path) as f:
        lines = f.read().splitlines()
    if len(lines) < 3:
        raise FormatError("intrinsics file needs three value lines", path)
    try:
        fx, fy = (float(x) for x in lines[0].split())
        cx, cy = (float(x) for x in lines[1].split())
        w, h = (int(x) for x in lines[2].split())
    except ValueError as exc:
        raise FormatError(f"bad intrinsics values: {exc}", path) from None
    return CameraIntrinsics(fx, fy, cx, cy, w, h)


def save_trajectory(poses, path, timestamps=None) -> None:
    """One pose per line: ``timestamp tx ty tz qw qx qy qz``."""
    timestamps = range(len(poses)) if timestamps is None else timestamps
    with open(path, "w") as f:
        for t, p in zip(timestamps, poses):
            vals = [float(t), *p.tau, *p.q]
            f.write(" ".join(repr(float(x)) for x in vals) + "\n")


def load_trajectory(path) -> tuple[np.ndarray, list[RelativePose]]:
    stamps, poses = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"line {lineno}: expected 8 values, got {len(parts)}", path)
            try:
                t, tx, ty, tz, qw, qx, qy, qz = (float(x) for x in parts)
            except ValueError:
                raise FormatError(f"line {lineno}: non-numeric value", path) from None
            stamps.append(t)
            poses.append(RelativePose((qw, qx, qy, qz), (tx, ty, tz)))
    return np.array(stamps), poses
