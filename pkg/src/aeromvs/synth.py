"""Synthetic nadir scenes with exact ground truth and a brute-force matcher.

A scene is a textured ground plane plus axis-aligned boxes, imaged by a rig
of one reference and several source cameras looking straight down from
altitude. Everything is ray cast in float64, so depth ground truth is exact
and a (spec, seed) pair reproduces the scene bit for bit. Monocular-style
priors are synthesized from the ground truth and calibrated to target error
levels. The brute-force matcher is the reference the learned pipeline is
checked against: dense sweep, 5x5 ZNCC per source view, no shared code with
the pipeline's warping or cost stack.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import dataio
from .autodiff import Tensor
from .cost import fuse_views, fusion_weights, identity_features, per_view_cost, warp_source
from .errors import DataError
from .geometry import Camera, depth_to_normal, project, relative_motion, scale_camera, unproject
from .params import ParamStore
from .range_predictor import (
    DepthCandidateVolume,
    build_candidate_volume,
    dpm_weights,
    predict_range,
    scale_monocular_depth,
)

_NADIR_R = np.diag([1.0, -1.0, -1.0])  # camera +z down, +x east, +y south

# texture amplitude budget: keeps bilinear interpolation error of the
# rendered images below 1e-3 so sub-pixel warps stay trustworthy
_INTERP_ERR_BUDGET = 8e-4

_RIG_PATTERNS = {
    "sym": [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)],
    "line": [(1, 0), (2, 0), (3, 0), (4, 0), (5, 0), (6, 0), (7, 0), (8, 0)],
}


@dataclass
class SceneSpec:
    """Plain key-value description of a synthetic rig and scene."""

    altitude: float = 500.0
    baseline_ratio: float = 0.05
    plane_count: int = 3  # ground plane plus plane_count - 1 boxes
    texture_freq_cap: float = 0.0  # cycles per meter; 0 picks one from the GSD
    texture_components: int = 6
    texture_axis: str = "iso"  # "iso" or "x" (vary along x only)
    height: int = 96
    width: int = 128
    focal: float = 600.0
    view_count: int = 3
    rig: str = "sym"
    depth_num: int = 192
    margin_ratio: float = 0.01  # sweep margin around the GT range, per side
    box_height_min: float = 0.03  # box heights as a fraction of altitude
    box_height_max: float = 0.08
    prior_depth_mae: float = 7.7
    prior_normal_mae_deg: float = 14.2


def parse_scene_spec(text):
    """Parse "key value" (or "key = value") lines; '#' starts a comment."""
    spec = SceneSpec()
    types = {f.name: type(getattr(spec, f.name)) for f in fields(spec)}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace("=", " ").split()
        if len(parts) != 2:
            raise DataError(f"scene spec line {ln}: expected 'key value', got {raw!r}")
        key, value = parts
        if key not in types:
            raise DataError(f"scene spec line {ln}: unknown key {key!r}")
        try:
            setattr(spec, key, types[key](value) if types[key] is not str else value)
        except ValueError:
            raise DataError(f"scene spec line {ln}: bad value for {key}: {value!r}") from None
    return spec


def format_scene_spec(spec):
    return "\n".join(f"{f.name} {getattr(spec, f.name)}" for f in fields(spec)) + "\n"


def _check_spec(spec):
    if spec.plane_count < 1:
        raise DataError("scene needs at least one plane")
    if spec.baseline_ratio <= 0 or spec.baseline_ratio >= 1.0:
        raise DataError("baseline must be positive and below the altitude")
    if spec.altitude <= 0:
        raise DataError("altitude must be positive")
    if spec.rig not in _RIG_PATTERNS:
        raise DataError(f"unknown rig {spec.rig!r}")
    if spec.view_count < 2 or spec.view_count - 1 > len(_RIG_PATTERNS[spec.rig]):
        raise DataError(f"view_count {spec.view_count} outside the supported rig sizes")
    if spec.texture_axis not in ("iso", "x"):
        raise DataError(f"unknown texture_axis {spec.texture_axis!r}")


@dataclass
class Box:
    x0: float
    x1: float
    y0: float
    y1: float
    height: float


@dataclass
class Texture:
    """Band-limited sum of 3-D sinusoids, shared frequencies across channels."""

    freqs: np.ndarray  # (n, 3) cycles per meter
    phases: np.ndarray  # (n, 3) per channel
    amps: np.ndarray  # (n, 3) per channel
    base: float = 0.5

    def shade(self, points):
        """points (3, ...) world meters -> (3, ...) colors in [0, 1]."""
        pts = points.reshape(3, -1)
        arg = 2.0 * np.pi * (self.freqs @ pts)  # (n, N)
        waves = np.sin(arg[:, None, :] + self.phases[:, :, None])  # (n, 3, N)
        color = self.base + np.einsum("nc,ncp->cp", self.amps, waves)
        return np.clip(color, 0.0, 1.0).reshape((3,) + points.shape[1:])


@dataclass
class SyntheticScene:
    spec: SceneSpec
    cameras: list
    images: list  # (3, H, W) float64 in [0, 1] per view
    gt_depth: list  # (1, H, W) float64 per view
    gt_normal: list  # (3, H, W) camera-frame unit normals per view
    prior_depth: list  # (1, H, W) relative maps in [0, 1] per view
    prior_normal: list  # (3, H, W) perturbed unit normals per view
    visibility: np.ndarray  # (V, V, H, W) bool; [i, j] = view i's pixels unoccluded in view j
    boxes: list
    texture: Texture
    depth_range: tuple  # (min, interval, num, max)

    def unoccluded(self, ref=0, sources=None, how="all"):
        """Mask of ref pixels unoccluded in the sources ("all" or "any")."""
        if sources is None:
            sources = [v for v in range(len(self.cameras)) if v != ref]
        stack = self.visibility[ref][list(sources)]
        return stack.all(axis=0) if how == "all" else stack.any(axis=0)

    def matchable(self, ref=0, sources=None, how="any", window=5):
        """Ref pixels whose whole patch is visible in a source.

        Erodes the visibility masks by the matching window, so a True pixel
        has full patch support: matchers can be held to account there.
        """
        if sources is None:
            sources = [v for v in range(len(self.cameras)) if v != ref]
        h, w = self.visibility.shape[2:]
        r = window // 2
        masks = []
        for j in sources:
            pad = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
            pad[r : r + h, r : r + w] = self.visibility[ref, j]
            win = np.lib.stride_tricks.sliding_window_view(pad, (window, window))
            masks.append(win.all(axis=(2, 3)))
        stack = np.stack(masks)
        return stack.all(axis=0) if how == "all" else stack.any(axis=0)


# ---- ray casting --------------------------------------------------------------


def _cast(origin, dirs, boxes):
    """First hit of rays origin + t * dirs against ground plane and boxes.

    Returns (t, normal_world (3, N), hit_index) with index 0 the ground and
    i + 1 the i-th box. dirs need not be normalized; t is in units of dirs.
    """
    n = dirs.shape[1]
    t_all = np.full((1 + len(boxes), n), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -origin[2] / dirs[2]
    t_all[0] = np.where((dirs[2] < 0) & (tg > 0), tg, np.inf)
    axis_hit = np.zeros((len(boxes), n), dtype=int)
    for b, box in enumerate(boxes):
        lo = np.array([box.x0, box.y0, 0.0])
        hi = np.array([box.x1, box.y1, box.height])
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[:, None] - origin[:, None]) / dirs
            tb = (hi[:, None] - origin[:, None]) / dirs
        tmin = np.nan_to_num(np.minimum(ta, tb), nan=np.inf)
        tmax = np.nan_to_num(np.maximum(ta, tb), nan=-np.inf)
        near = tmin.max(axis=0)
        far = tmax.min(axis=0)
        hit = (near <= far) & (near > 1e-12)
        t_all[1 + b] = np.where(hit, near, np.inf)
        axis_hit[b] = tmin.argmax(axis=0)
    idx = t_all.argmin(axis=0)
    t = t_all[idx, np.arange(n)]
    normal = np.zeros((3, n))
    normal[2] = 1.0
    for b in range(len(boxes)):
        sel = idx == 1 + b
        if not sel.any():
            continue
        ax = axis_hit[b, sel]
        normal[:, sel] = 0.0
        normal[ax, np.flatnonzero(sel)] = -np.sign(dirs[ax, sel])
    return t, normal, idx


def _view_rays(k, height, width):
    ys, xs = np.mgrid[0:height, 0:width]
    pix = np.stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    dirs_cam = np.linalg.inv(k) @ np.vstack([pix, np.ones(pix.shape[1])])
    dirs_cam /= dirs_cam[2]  # z = 1 so the ray parameter is z-depth
    return _NADIR_R.T @ dirs_cam


# ---- scene assembly -----------------------------------------------------------


def _make_texture(rng, spec, gsd):
    n = spec.texture_components
    if n == 0:
        return Texture(freqs=np.zeros((0, 3)), phases=np.zeros((0, 3)), amps=np.zeros((0, 3)))
    cap = spec.texture_freq_cap
    if cap <= 0:
        cap = 0.8 / (4.0 * gsd)  # below Nyquist of the half-resolution grid
    # First component carries the cap frequency so the dominant wavelength is
    # set by the spec rather than by the draw; the rest fill in below it.
    mags = cap * np.concatenate([[1.0], rng.uniform(0.08, 1.0, size=n - 1)])
    if spec.texture_axis == "x":
        freqs = np.zeros((n, 3))
        freqs[:, 0] = mags
    else:
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        freqs = np.stack([mags * np.cos(theta), mags * np.sin(theta), np.zeros(n)], axis=1)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n, 3))
    amps = rng.uniform(0.5, 1.0, size=(n, 3)) / (1.0 + (mags[:, None] / (0.15 * cap)) ** 2)
    # spend the whole interpolation-error budget, then keep colors in range
    err = float(np.sum(amps.mean(axis=1) * (np.pi * mags * gsd) ** 2 / 2.0))
    amps *= _INTERP_ERR_BUDGET / err
    total = float(amps.sum(axis=0).max())
    if total > 0.45:
        amps *= 0.45 / total
    return Texture(freqs=freqs, phases=phases, amps=amps)


def _place_boxes(rng, spec, centers):
    count = spec.plane_count - 1
    if count == 0:
        return []
    gsd = spec.altitude / spec.focal
    hx = gsd * (spec.width - 1) / 2.0
    hy = gsd * (spec.height - 1) / 2.0
    # keep boxes inside the footprint common to every view
    lo_x, hi_x = centers[:, 0].max() - hx, centers[:, 0].min() + hx
    lo_y, hi_y = centers[:, 1].max() - hy, centers[:, 1].min() + hy
    if not (lo_x < hi_x and lo_y < hi_y):
        raise DataError("views share no footprint; shrink the baseline")
    shrink = 0.1
    lo_x, hi_x = lo_x + shrink * (hi_x - lo_x), hi_x - shrink * (hi_x - lo_x)
    lo_y, hi_y = lo_y + shrink * (hi_y - lo_y), hi_y - shrink * (hi_y - lo_y)
    span = min(hi_x - lo_x, hi_y - lo_y)
    boxes = []
    for _ in range(count):
        for _attempt in range(60):
            w = rng.uniform(0.10, 0.24) * span
            h = rng.uniform(0.10, 0.24) * span
            cx = rng.uniform(lo_x + w / 2, hi_x - w / 2)
            cy = rng.uniform(lo_y + h / 2, hi_y - h / 2)
            height = rng.uniform(spec.box_height_min, spec.box_height_max) * spec.altitude
            box = Box(cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2, height)
            clear = all(
                box.x1 < o.x0 or o.x1 < box.x0 or box.y1 < o.y0 or o.y1 < box.y0 for o in boxes
            )
            if clear:
                break
        boxes.append(box)  # overlap after 60 tries is tolerated; first hit wins
    return boxes


def _smooth_field(rng, height, width, components=3):
    """Zero-mean low-frequency field over pixel coords, unit mean |value|."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width))
    for _ in range(components):
        fx, fy = rng.uniform(0.5, 1.6, size=2) / max(height, width)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += rng.uniform(0.5, 1.0) * np.sin(2.0 * np.pi * (fx * xs + fy * ys) + phase)
    out -= out.mean()
    return out / np.abs(out).mean()


def _search_amplitude(err_fn, target):
    """alpha with err_fn(alpha) ~= target; err_fn need not be monotone."""
    grid = target * np.exp2(np.linspace(-6.0, 8.0, 57))
    errs = np.array([err_fn(a) for a in grid])
    above = np.flatnonzero(errs >= target)
    if above.size == 0:
        return float(grid[int(errs.argmax())])  # target unreachable; best effort
    hi = float(grid[above[0]])
    lo = 0.0 if above[0] == 0 else float(grid[above[0] - 1])
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if err_fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _make_depth_prior(rng, gt, bounds):
    """Relative map whose scaled version misses GT by the target MAE."""
    dmin, dmax, target = bounds
    bias = _smooth_field(rng, gt.shape[0], gt.shape[1])

    def rel_for(alpha):
        metric = gt + alpha * bias
        lo, hi = metric.min(), metric.max()
        return (metric - lo) / max(hi - lo, 1e-12)

    def err(alpha):
        scaled = scale_monocular_depth(rel_for(alpha), dmin, dmax)
        return float(np.abs(scaled - gt).mean())

    if err(0.0) >= target:
        raise DataError("prior depth target below the range-stretch floor; widen the target")
    return rel_for(_search_amplitude(err, target))


def _make_normal_prior(rng, normal, target_deg):
    """Tilt normals by smooth tangent fields to a target mean angular error."""
    h, w = normal.shape[1:]
    fa = _smooth_field(rng, h, w)
    fb = _smooth_field(rng, h, w)
    # tangent frame per pixel; seed axis switched away from near-parallel normals
    seed = np.zeros_like(normal)
    use_y = np.abs(normal[0]) > 0.9
    seed[0] = np.where(use_y, 0.0, 1.0)
    seed[1] = np.where(use_y, 1.0, 0.0)
    t1 = np.cross(normal, seed, axis=0)
    t1 /= np.linalg.norm(t1, axis=0, keepdims=True)
    t2 = np.cross(normal, t1, axis=0)

    def perturbed(alpha):
        n = normal + alpha * (fa * t1 + fb * t2)
        n /= np.linalg.norm(n, axis=0, keepdims=True)
        return n

    def err(alpha):
        dots = np.clip((perturbed(alpha) * normal).sum(axis=0), -1.0, 1.0)
        return float(np.degrees(np.arccos(dots)).mean())

    n = perturbed(_search_amplitude(err, target_deg))
    n[2] = np.minimum(n[2], -1e-3)  # keep every prior normal facing the camera
    return n / np.linalg.norm(n, axis=0, keepdims=True)


def generate_scene(spec, seed=0):
    """Render a deterministic scene: images, exact GT, priors, visibility."""
    _check_spec(spec)
    rng = np.random.default_rng(seed)
    rng_tex, rng_box, rng_prior = rng.spawn(3)

    h, w = spec.height, spec.width
    k = np.array([[spec.focal, 0.0, (w - 1) / 2.0], [0.0, spec.focal, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    baseline = spec.baseline_ratio * spec.altitude
    offsets = [(0.0, 0.0)] + [
        (px * baseline, py * baseline) for px, py in _RIG_PATTERNS[spec.rig][: spec.view_count - 1]
    ]
    centers = np.array([[ox, oy, spec.altitude] for ox, oy in offsets])

    texture = _make_texture(rng_tex, spec, spec.altitude / spec.focal)
    boxes = _place_boxes(rng_box, spec, centers)
    dirs = _view_rays(k, h, w)

    images, depths, normals, hit_points = [], [], [], []
    for center in centers:
        depth, n_world, _ = _cast(center, dirs, boxes)
        points = center[:, None] + depth * dirs
        images.append(texture.shade(points).reshape(3, h, w))
        depths.append(depth.reshape(1, h, w).copy())
        normals.append((_NADIR_R @ n_world).reshape(3, h, w))
        hit_points.append(points)

    gt_lo = min(float(d.min()) for d in depths)
    gt_hi = max(float(d.max()) for d in depths)
    margin = spec.margin_ratio * spec.altitude
    lo_bound = gt_lo - margin
    hi_bound = gt_hi + margin
    interval = (hi_bound - lo_bound) / (spec.depth_num - 1)
    if lo_bound <= 0:
        raise DataError("depth sweep extends behind the camera; lower margin_ratio")
    depth_range = (lo_bound, interval, spec.depth_num, hi_bound)

    cameras = [
        Camera(
            k=k,
            t=_pose(center),
            height=h,
            width=w,
            depth_min=lo_bound,
            depth_max=hi_bound,
            depth_interval=interval,
            depth_num=spec.depth_num,
        )
        for center in centers
    ]

    view_count = len(centers)
    visibility = np.zeros((view_count, view_count, h, w), dtype=bool)
    for i in range(view_count):
        visibility[i, i] = True
        for j in range(view_count):
            if i == j:
                continue
            seg = hit_points[i] - centers[j][:, None]
            dist = np.linalg.norm(seg, axis=0)
            t_hit, _, _ = _cast(centers[j], seg, boxes)
            clear = np.abs(t_hit - 1.0) * dist < 1e-6
            in_j = _NADIR_R @ seg  # camera frame of view j
            uv, z = project(cameras[j], in_j)
            inside = (z > 0) & (uv[0] >= 0) & (uv[0] <= w - 1) & (uv[1] >= 0) & (uv[1] <= h - 1)
            visibility[i, j] = (clear & inside).reshape(h, w)

    prior_depth, prior_normal = [], []
    for v in range(view_count):
        rng_d, rng_n = rng_prior.spawn(2)
        prior_depth.append(
            _make_depth_prior(rng_d, depths[v][0], (lo_bound, hi_bound, spec.prior_depth_mae))[None]
        )
        prior_normal.append(_make_normal_prior(rng_n, normals[v], spec.prior_normal_mae_deg))

    return SyntheticScene(
        spec=spec,
        cameras=cameras,
        images=images,
        gt_depth=depths,
        gt_normal=normals,
        prior_depth=prior_depth,
        prior_normal=prior_normal,
        visibility=visibility,
        boxes=boxes,
        texture=texture,
        depth_range=depth_range,
    )


def _pose(center):
    t = np.eye(4)
    t[:3, :3] = _NADIR_R
    t[:3, 3] = -_NADIR_R @ center
    return t


def to_dataset(scene, root, name):
    """Export in the dataset layout; pair scores are overlap fractions."""
    views = list(zip(scene.images, scene.cameras))
    count = len(views)
    entries = []
    for i in range(count):
        scored = []
        for j in range(count):
            if i != j:
                scored.append((j, float(scene.visibility[i, j].mean())))
        scored.sort(key=lambda sj: (-sj[1], sj[0]))
        entries.append((i, scored))
    priors = [(scene.prior_depth[v][0], scene.prior_normal[v]) for v in range(count)]
    gts = [scene.gt_depth[v][0] for v in range(count)]
    dataio.write_scene(root, name, views, entries, gt_depths=gts, priors=priors)


# ---- brute-force plane sweep --------------------------------------------------


@dataclass
class OracleResult:
    depth: np.ndarray  # (H, W) argmax depth, NaN where never observed
    index: np.ndarray  # (H, W) argmax sweep index
    score: np.ndarray  # (H, W) best mean ZNCC
    low_confidence: np.ndarray  # (H, W) peak-to-mean ratio < 1.05
    observed: np.ndarray  # (H, W) matched in >= 1 source at >= 1 depth
    sweep: np.ndarray  # (steps,) swept depths
    curves: np.ndarray | None = None  # (steps, H, W) when stored


def _box25(x):
    """Sum over centered 5x5 windows, zero beyond the border."""
    h, w = x.shape
    padded = np.zeros((h + 5, w + 5))
    padded[3 : 3 + h, 3 : 3 + w] = x
    c = padded.cumsum(axis=0).cumsum(axis=1)
    return c[5:, 5:] - c[:-5, 5:] - c[5:, :-5] + c[:-5, :-5]


def _bilinear_gray(img, x, y):
    h, w = img.shape
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(int), w - 2)
    y0 = np.minimum(np.floor(yc).astype(int), h - 2)
    fx = xc - x0
    fy = yc - y0
    val = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x0 + 1] * fx * (1 - fy)
        + img[y0 + 1, x0] * (1 - fx) * fy
        + img[y0 + 1, x0 + 1] * fx * fy
    )
    return np.where(valid, val, 0.0), valid


def brute_force_depth(scene, pixels=None, sweep=None, ref=0, store_curves=False):
    """Dense-sweep ZNCC matcher, the reference for every learned component.

    sweep is (dmin, dmax, steps) with steps >= 100; default covers the
    scene's declared sweep. pixels, when given as (x, y) pairs, must each be
    observed in at least one source at some depth or DataError is raised.
    """
    if sweep is None:
        lo, interval, num, _ = scene.depth_range
        sweep = (lo, lo + interval * (num - 1), max(100, num))
    dmin, dmax, steps = sweep
    if steps < 100:
        raise ValueError(f"sweep needs >= 100 steps, got {steps}")
    depths = np.linspace(dmin, dmax, int(steps))

    ref_cam = scene.cameras[ref]
    h, w = ref_cam.height, ref_cam.width
    sources = [v for v in range(len(scene.cameras)) if v != ref]
    motions = {s: relative_motion(ref_cam, scene.cameras[s]) for s in sources}
    gray = [img.mean(axis=0) for img in scene.images]
    ref_gray = gray[ref]

    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel(), ys.ravel()]).astype(np.float64)

    box_r = _box25(ref_gray)
    box_rr = _box25(ref_gray * ref_gray)

    best_score = np.full((h, w), -np.inf)
    best_idx = np.zeros((h, w), dtype=int)
    sum_shift = np.zeros((h, w))
    count_obs = np.zeros((h, w), dtype=int)
    observed = np.zeros((h, w), dtype=bool)
    curves = np.full((len(depths), h, w), np.nan, dtype=np.float32) if store_curves else None

    for di, d in enumerate(depths):
        score_sum = np.zeros((h, w))
        score_cnt = np.zeros((h, w))
        points = unproject(ref_cam, pix, d)
        for s in sources:
            rot, tr = motions[s]
            uv, z = project(scene.cameras[s], rot @ points + tr[:, None])
            val, inside = _bilinear_gray(gray[s], uv[0], uv[1])
            val = val.reshape(h, w)
            ok = (inside & (z > 1e-9)).reshape(h, w).astype(np.float64)
            n_ok = _box25(ok)
            window = n_ok == 25.0
            box_s = _box25(val)
            mr = box_r / 25.0
            ms = box_s / 25.0
            cov = _box25(ref_gray * val) / 25.0 - mr * ms
            var_r = np.maximum(box_rr / 25.0 - mr * mr, 0.0)
            var_s = np.maximum(_box25(val * val) / 25.0 - ms * ms, 0.0)
            ncc = cov / np.maximum(np.sqrt(var_r * var_s), 1e-12)
            ncc = np.clip(ncc, -1.0, 1.0)
            score_sum += np.where(window, ncc, 0.0)
            score_cnt += window
        have = score_cnt > 0
        score = np.where(have, score_sum / np.maximum(score_cnt, 1.0), -np.inf)
        if curves is not None:
            curves[di] = np.where(have, score, np.nan)
        take = have & (score > best_score)
        best_score[take] = score[take]
        best_idx[take] = di
        sum_shift += np.where(have, score + 1.0, 0.0)
        count_obs += have
        observed |= have

    if pixels is not None:
        for x, y in pixels:
            if not observed[int(y), int(x)]:
                raise DataError(f"pixel ({x}, {y}) unobserved in every source")

    mean_shift = sum_shift / np.maximum(count_obs, 1)
    peak_ratio = np.where(mean_shift > 0, (best_score + 1.0) / np.maximum(mean_shift, 1e-12), np.inf)
    low_confidence = observed & (peak_ratio < 1.05)
    depth_map = np.where(observed, depths[best_idx], np.nan)
    return OracleResult(
        depth=depth_map,
        index=best_idx,
        score=np.where(observed, best_score, np.nan),
        low_confidence=low_confidence,
        observed=observed,
        sweep=depths,
        curves=curves,
    )


@dataclass
class ScoreProfile:
    """Matching-score curve over one pixel's depth candidates."""

    samples: np.ndarray  # (D,) candidate depths at the profiled pixel
    scores: np.ndarray  # (D,) fused channel-mean score, NaN where no view matches
    gt_depth: float
    pixel: tuple  # (x, y) on the full-resolution reference grid
    source: str


RANGE_SOURCES = ("predefined", "x2", "x3", "drp")


def stage_candidates(scene, source="predefined", num_samples=48, store=None, ref=0):
    """Half-grid candidate volume for one range source.

    predefined spans the scene's declared interval; x2 and x3 stretch the
    candidate spacing by that factor with depth_min left anchored, the wider
    sweeps of the ablation comparisons. drp centers on the scaled monocular
    depth with the attention-predicted per-pixel radius (fresh weights unless
    a store is passed), the half-span as its range scale.
    """
    if source not in RANGE_SOURCES:
        raise ValueError(f"range source must be one of {RANGE_SOURCES}, got {source!r}")
    lo, _, _, hi = scene.depth_range
    cam = scene.cameras[ref]
    if source == "drp":
        center = scale_monocular_depth(scene.prior_depth[ref][0], lo, hi)[None]
        normal_d, _ = depth_to_normal(center, cam)
        weights = dpm_weights(store if store is not None else ParamStore(seed=0), "dpm")
        radius = predict_range(normal_d, scene.prior_normal[ref], weights, 0.5 * (hi - lo))
        return build_candidate_volume(center, radius, num_samples, (lo, hi))
    factor = {"predefined": 1.0, "x2": 2.0, "x3": 3.0}[source]
    h2, w2 = cam.height // 2, cam.width // 2
    step = factor * (hi - lo) / (num_samples - 1)
    axis = lo + step * np.arange(num_samples)
    samples = np.broadcast_to(axis.reshape(-1, 1, 1), (num_samples, h2, w2)).copy()
    span = 0.5 * step * (num_samples - 1)
    return DepthCandidateVolume(
        samples=Tensor(samples),
        center=Tensor(np.full((1, h2, w2), lo + span)),
        radius=Tensor(np.full((1, h2, w2), span)),
    )


def matching_scores(scene, source="predefined", num_samples=48, store=None, ref=0, window=63):
    """Fused channel-mean matching score over the half grid.

    Identity features and uniform view averaging, so the curves diagnose the
    geometry rather than any particular weight draw. The standardization
    window is wide by default: a window much larger than the texture scale
    keeps the per-pixel gain flat, so the curve shape reflects alignment
    rather than normalizer wiggle. Returns (scores ndarray (D, H/2, W/2)
    with NaN where no source matches, candidate volume).
    """
    feats = [identity_features(img, window=window) for img in scene.images]
    cams = [scale_camera(c, 0.5) for c in scene.cameras]
    cands = stage_candidates(scene, source, num_samples, store, ref)
    fw = fusion_weights(ParamStore(seed=0), "fuse", in_channels=feats[ref].values.shape[0])
    fw.w3.data[:] = 0.0
    fw.b3.data[:] = 0.0
    vols = []
    masks = []
    for s in range(len(cams)):
        if s == ref:
            continue
        warped, valid = warp_source(feats[s], cams[ref], cams[s], cands)
        vols.append(per_view_cost(feats[ref], warped))
        masks.append(valid)
    fused, _ = fuse_views(vols, masks, fw)
    scores = fused.values.data.mean(axis=0)
    return np.where(fused.valid, scores, np.nan), cands


def score_profile(scene, pixel, source="predefined", num_samples=48, store=None, ref=0, window=63):
    """Score curve of one reference pixel under the chosen range source.

    pixel is (x, y) on the full-resolution reference grid; the curve is read
    from the nearest half-grid column.
    """
    x, y = pixel
    cam = scene.cameras[ref]
    if not (0 <= x < cam.width and 0 <= y < cam.height):
        raise ValueError(f"pixel {pixel} outside {cam.width}x{cam.height}")
    scores, cands = matching_scores(scene, source, num_samples, store, ref, window)
    xh = min(int(round(0.5 * x + 0.25)), scores.shape[2] - 1)
    yh = min(int(round(0.5 * y + 0.25)), scores.shape[1] - 1)
    return ScoreProfile(
        samples=cands.samples.data[:, yh, xh].copy(),
        scores=scores[:, yh, xh].copy(),
        gt_depth=float(scene.gt_depth[ref][0, int(y), int(x)]),
        pixel=(int(x), int(y)),
        source=source,
    )
