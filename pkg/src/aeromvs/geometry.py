"""Camera model, projection, plane-induced homographies, depth/normal relations.

Conventions used throughout the package:
  - Pixel centers sit at integer coordinates; x is the column, y the row.
  - Extrinsics map world points into the camera frame, which looks along +z,
    so depth is the camera-frame z coordinate.
  - Normals are unit vectors in the reference camera frame oriented toward
    the camera (z component < 0).
  - Resolution scaling by s maps a pixel coordinate u to (u - 0.5)*s + 0.5
    applied to the principal point, with focal lengths scaled by s.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import kernels as K
from .autodiff import Tensor
from .errors import NumericalError

_ORTHO_TOL = 1e-6


@dataclass
class DepthMap:
    """Depth values (1, H, W) in meters with a per-pixel validity mask."""

    values: np.ndarray
    valid: np.ndarray

    @staticmethod
    def from_array(values):
        values = np.asarray(values)
        if values.ndim == 2:
            values = values[None]
        valid = np.isfinite(values[0]) & (values[0] > 0)
        return DepthMap(values=values, valid=valid)


@dataclass
class NormalMap:
    """Unit normals (3, H, W) in the camera frame with a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    @staticmethod
    def from_array(values):
        values = np.asarray(values)
        norms = np.linalg.norm(values, axis=0)
        valid = np.isfinite(norms) & (np.abs(norms - 1.0) < 1e-4) & (values[2] < 0)
        return NormalMap(values=values, valid=valid)


@dataclass
class Camera:
    """Pinhole camera: intrinsics, world-to-camera pose, extents, depth range.

    The depth range fields mirror the dataset convention (minimum, per-step
    interval, step count, maximum); they describe the scene-level search
    space, not a constraint on stored depth maps.
    """

    k: np.ndarray  # 3x3 intrinsics
    t: np.ndarray  # 4x4 world-to-camera
    height: int
    width: int
    depth_min: float
    depth_max: float
    depth_interval: float = 0.0
    depth_num: int = 0

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.k.shape != (3, 3) or self.t.shape != (4, 4):
            raise ValueError(f"bad camera matrix shapes {self.k.shape}, {self.t.shape}")
        r = self.t[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation block is not a proper rotation")
        if self.k[0, 0] <= 0 or self.k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.k[0, 2] < self.width and 0 <= self.k[1, 2] < self.height):
            raise ValueError("principal point outside image extents")
        if not (0 < self.depth_min < self.depth_max):
            raise ValueError(f"bad depth range ({self.depth_min}, {self.depth_max})")

    @property
    def fx(self):
        return self.k[0, 0]

    @property
    def fy(self):
        return self.k[1, 1]

    @property
    def cx(self):
        return self.k[0, 2]

    @property
    def cy(self):
        return self.k[1, 2]

    @property
    def rotation(self):
        return self.t[:3, :3]

    @property
    def translation(self):
        return self.t[:3, 3]


def scale_camera(cam, factor):
    """Camera for the same view at ``factor`` times the resolution.

    Focal lengths scale by the factor; the principal point gets the
    pixel-center correction (c - 0.5)*factor + 0.5.
    """
    k = cam.k.copy()
    k[0, 0] *= factor
    k[1, 1] *= factor
    k[0, 2] = (k[0, 2] - 0.5) * factor + 0.5
    k[1, 2] = (k[1, 2] - 0.5) * factor + 0.5
    return replace(cam, k=k, height=int(round(cam.height * factor)), width=int(round(cam.width * factor)))


def relative_motion(ref, src):
    """(R, t) with X_src = R @ X_ref + t for points in the two camera frames."""
    m = src.t @ np.linalg.inv(ref.t)
    return m[:3, :3], m[:3, 3]


def unproject(cam, pixels, depth):
    """Camera-frame 3D points for pixels (2, ...) at the given z-depths."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("unproject requires positive depth")
    x = (pixels[0] - cam.cx) / cam.fx * depth
    y = (pixels[1] - cam.cy) / cam.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)])


def project(cam, points):
    """Pixel coordinates (2, ...) and depths for camera-frame points (3, ...)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[2]
    u = cam.fx * points[0] / z + cam.cx
    v = cam.fy * points[1] / z + cam.cy
    return np.stack([u, v]), z


def pixel_dirs(cam, xs, ys):
    """Unnormalized viewing directions (x, y, 1) per pixel coordinate."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    return np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)])


def plane_homography(ref, src, normal, distance):
    """Homography induced by the plane {X : normal . X = distance} (ref frame).

    Maps homogeneous reference pixels to source pixels for points on the
    plane. The normal need not be unit length; distance is measured in the
    same scale.
    """
    if distance == 0:
        raise ValueError("plane through the camera center is degenerate")
    r, t = relative_motion(ref, src)
    n = np.asarray(normal, dtype=np.float64)
    h = src.k @ (r + np.outer(t, n) / distance) @ np.linalg.inv(ref.k)
    if abs(np.linalg.det(h)) <= 1e-12:
        raise NumericalError("degenerate plane-induced homography")
    return h


def plane_sweep_homography(ref, src, depth):
    """Homography for the fronto-parallel plane at z = depth in the ref frame."""
    if depth <= 0:
        raise ValueError("plane sweep depth must be positive")
    return plane_homography(ref, src, np.array([0.0, 0.0, 1.0]), depth)


def apply_homography(h, pixels):
    """Apply a 3x3 homography to pixel coordinates (2, ...)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    p = np.concatenate([pixels, np.ones((1,) + pixels.shape[1:])])
    q = np.einsum("ij,j...->i...", h, p)
    return q[:2] / q[2]


# ---- depth-to-normal ----------------------------------------------------------


def depth_to_normal(depth, cam, window=3, valid=None):
    """Per-pixel surface normals from a depth map by windowed plane fitting.

    Args:
        depth: Tensor or ndarray (1, H, W) of z-depths; gradients flow when a
            Tensor is given.
        cam: camera whose intrinsics match the depth grid.
        window: odd fit window extent (default 3).
        valid: optional (H, W) bool mask of usable depth values.

    Returns:
        (normals, mask): normals is a Tensor (3, H, W) of unit vectors with
        negative z; mask is an (H, W) bool ndarray, false on the border frame,
        where the window touches invalid depth, and for degenerate or grazing
        fits. Masked pixels hold the placeholder (0, 0, -1).

    Each window is fit with least squares as z = a*x + b*y + c over the
    unprojected points; the plane normal is (a, b, -1) normalized, which
    points toward the camera by construction. Centering the moments removes c
    and leaves a well-conditioned 2x2 solve.
    """
    if not isinstance(depth, Tensor):
        depth = Tensor(np.asarray(depth))
    _, h, w = depth.shape
    half = window // 2
    dt = depth.dtype

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ax = Tensor(((xs - cam.cx) / cam.fx).astype(dt)[None])
    ay = Tensor(((ys - cam.cy) / cam.fy).astype(dt)[None])

    z = depth
    x = z * ax
    y = z * ay
    stack = ad.concat([x, y, z, x * x, y * y, x * y, x * z, y * z], axis=0)
    ones = Tensor(np.ones((8, 1, window, window), dtype=dt))
    sums = K.conv2d(stack, ones, groups=8)  # valid windows only: (8, h-2*half, w-2*half)
    n = float(window * window)
    mx, my, mz, mxx, myy, mxy, mxz, myz = [sums[i : i + 1] / n for i in range(8)]
    cxx = mxx - mx * mx
    cyy = myy - my * my
    cxy = mxy - mx * my
    cxz = mxz - mx * mz
    cyz = myz - my * mz

    det = cxx * cyy - cxy * cxy
    det_floor = 1e-30 if dt == np.float64 else 1e-18
    good_det = np.abs(det.data) > det_floor
    det_safe = ad.where(good_det, det, ad.Tensor(np.full(det.shape, det_floor, dtype=dt)))
    a = (cxz * cyy - cyz * cxy) / det_safe
    b = (cxx * cyz - cxy * cxz) / det_safe
    norm = (a * a + b * b + 1.0).sqrt()
    nx = a / norm
    ny = b / norm
    nz = -1.0 / norm

    # Grazing fits have |nz| tiny; they are masked rather than propagated.
    grazing = nz.data > -1e-3
    mask_inner = good_det[0] & ~grazing[0]
    if valid is not None:
        ok = np.asarray(valid, dtype=bool)
        win_ok = np.lib.stride_tricks.sliding_window_view(ok, (window, window)).all(axis=(2, 3))
        mask_inner = mask_inner & win_ok

    pad = ((0, 0), (half, half), (half, half))
    inner = ad.concat([nx, ny, nz], axis=0)
    inner = ad.where(np.broadcast_to(mask_inner, inner.shape), inner, Tensor(np.zeros(inner.shape, dtype=dt)))
    full = ad.pad_zero(inner, pad)
    mask = np.zeros((h, w), dtype=bool)
    mask[half : h - half, half : w - half] = mask_inner

    placeholder = np.zeros((3, h, w), dtype=dt)
    placeholder[2] = -1.0
    normals = ad.where(np.broadcast_to(mask, (3, h, w)), full, Tensor(placeholder))
    return normals, mask


# ---- depth ratio --------------------------------------------------------------


def depth_ratio(normal, cam, pixel_i, pixel_j):
    """Ratio d_i/d_j for two pixels on a common plane with the given normal.

    Returns (ratio, valid); valid is false for grazing geometry (either
    viewing direction nearly orthogonal to the normal) or a non-positive
    ratio, in which case the caller should fall back to ratio 1.
    """
    n = np.asarray(normal, dtype=np.float64)
    vi = pixel_dirs(cam, *pixel_i)
    vj = pixel_dirs(cam, *pixel_j)
    num = float(n @ vj)
    den = float(n @ vi)
    ni = abs(den) / np.linalg.norm(vi)
    nj = abs(num) / np.linalg.norm(vj)
    if ni <= 1e-6 or nj <= 1e-6:
        return 1.0, False
    ratio = num / den
    if ratio <= 0:
        return 1.0, False
    return ratio, True


def depth_ratio_field(normals, cam, xs_i, ys_i, xs_j, ys_j):
    """Vectorized depth_ratio: d_i/d_j per element with a validity mask.

    normals is (3, ...) in the camera frame; the coordinate arrays share one
    broadcastable shape. Invalid entries (grazing or non-positive) come back
    as ratio 1 with mask false.
    """
    n = np.asarray(normals, dtype=np.float64)
    vi = pixel_dirs(cam, xs_i, ys_i)
    vj = pixel_dirs(cam, xs_j, ys_j)
    den = (n * vi).sum(axis=0)
    num = (n * vj).sum(axis=0)
    ni = np.abs(den) / np.linalg.norm(vi, axis=0)
    nj = np.abs(num) / np.linalg.norm(vj, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / den
    valid = (ni > 1e-6) & (nj > 1e-6) & (ratio > 0)
    return np.where(valid, ratio, 1.0), valid
