"""Shared helpers for the test suite: cameras, geometry probes, scene specs."""

import numpy as np

from aeromvs import cost, synth
from aeromvs.geometry import (
    Camera,
    apply_homography,
    plane_sweep_homography,
    project,
    relative_motion,
    scale_camera,
    unproject,
)
from aeromvs.params import ParamStore
from aeromvs.range_predictor import build_candidate_volume


def nudge_biases(store, seed=99):
    """Move zero-initialized biases off the ReLU kink before finite differences."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for name, p in store.items():
        if name.endswith("_b") or name.endswith("bias"):
            p.data[:] = 0.05 * rng.standard_normal(p.shape)


def plane_spec(**kw):
    """Single textured ground plane; focal*baseline gives an integer pixel
    shift at the true depth, so the oracle can hit candidates exactly."""
    base = dict(plane_count=1, height=40, width=64, focal=300.0, view_count=3)
    base.update(kw)
    return synth.SceneSpec(**base)


def box_spec(**kw):
    """Ground plane plus boxes with default aerial geometry."""
    base = dict(plane_count=3, height=64, width=96, focal=400.0, view_count=3)
    base.update(kw)
    return synth.SceneSpec(**base)


def contrast_spec(**kw):
    """Low-altitude rig with tall boxes and rich texture: enough displacement
    per candidate interval that matching is discriminative, for
    oracle-equivalence runs."""
    base = dict(
        altitude=150.0,
        baseline_ratio=0.2,
        plane_count=3,
        focal=150.0,
        height=96,
        width=128,
        view_count=4,
        texture_components=12,
        box_height_min=0.25,
        box_height_max=0.45,
    )
    base.update(kw)
    return synth.SceneSpec(**base)


def aerial_spec(**kw):
    """Survey-style rig: narrow baselines, long focal, shallow scene relief.

    Texture is a single cosine along x whose wavelength makes the 5-shift
    patch sum cancel the position-phase term, so score curves reduce to the
    alignment bowl.
    """
    gsd = 500.0 / 700.0
    base = dict(
        altitude=500.0,
        baseline_ratio=0.05,
        focal=700.0,
        view_count=5,
        height=176,
        width=176,
        box_height_min=0.01,
        box_height_max=0.02,
        margin_ratio=0.04,
        prior_depth_mae=25.0,
        texture_axis="x",
        texture_components=1,
        texture_freq_cap=1.0 / (20.0 * gsd),
    )
    base.update(kw)
    return synth.SceneSpec(**base)


def close_spec(**kw):
    """Wide-baseline rig at the same altitude: matching saturates across the
    predefined sweep, so narrowing the range buys nothing."""
    base = dict(
        altitude=500.0,
        baseline_ratio=0.5,
        focal=120.0,
        view_count=5,
        height=176,
        width=176,
        prior_depth_mae=15.0,
        texture_axis="x",
        texture_components=1,
    )
    base.update(kw)
    return synth.SceneSpec(**base)


def profile_ratio_grid(scene, lo=22, hi=66, step=2, window=63):
    """Var(predefined curve)/Var(doubled curve) over fully covered pixels.

    Pixels where any view loses patch support at either range are skipped;
    near the frame border the warped patches run off the source image and
    the zero padding contaminates the curve."""
    pre, _ = synth.matching_scores(scene, "predefined", window=window)
    wide, _ = synth.matching_scores(scene, "x2", window=window)
    out = []
    for y in range(lo, hi, step):
        for x in range(lo, hi, step):
            a, b = pre[:, y, x], wide[:, y, x]
            if np.isfinite(a).all() and np.isfinite(b).all() and b.var() > 0:
                out.append(a.var() / b.var())
    return np.asarray(out)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, height=40, width=56, depth_min=2.0, depth_max=60.0):
    t = np.eye(4)
    t[:3, :3] = random_rotation(rng)
    t[:3, 3] = rng.normal(scale=2.0, size=3)
    k = np.array(
        [
            [rng.uniform(60.0, 140.0), 0.0, width / 2 + rng.uniform(-2, 2)],
            [0.0, rng.uniform(60.0, 140.0), height / 2 + rng.uniform(-2, 2)],
            [0.0, 0.0, 1.0],
        ]
    )
    return Camera(k=k, t=t, height=height, width=width, depth_min=depth_min, depth_max=depth_max)


def homography_projection_errors(rng, n_triples, pixels_per_triple=10):
    """Worst |H.p - direct projection| in px over random (cam pair, depth) triples.

    The direct route unprojects each reference pixel to the hypothesis depth,
    moves the point into the source frame, and projects; the homography must
    agree wherever the point lands with sensible source-frame depth.
    """
    worst = 0.0
    for _ in range(n_triples):
        ref = random_camera(rng)
        src = random_camera(rng)
        depth = rng.uniform(ref.depth_min, ref.depth_max)
        h = plane_sweep_homography(ref, src, depth)
        px = np.stack([rng.uniform(0, ref.width - 1, pixels_per_triple), rng.uniform(0, ref.height - 1, pixels_per_triple)])
        pts = unproject(ref, px, np.full(pixels_per_triple, depth))
        r, t = relative_motion(ref, src)
        pts_src = r @ pts + t[:, None]
        keep = np.abs(pts_src[2]) > 0.1
        if not keep.any():
            continue
        direct, _ = project(src, pts_src[:, keep])
        via_h = apply_homography(h, px[:, keep])
        worst = max(worst, float(np.abs(direct - via_h).max()))
    return worst


def angular_error_deg(a, b):
    """Angle in degrees between unit-vector fields (3, ...)."""
    dot = np.clip((np.asarray(a) * np.asarray(b)).sum(axis=0), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


def plane_depth_map(cam, normal, point):
    """Exact z-depth of the plane through ``point`` with ``normal`` per pixel."""
    n = np.asarray(normal, dtype=np.float64)
    rho = float(n @ np.asarray(point, dtype=np.float64))
    ys, xs = np.meshgrid(np.arange(cam.height, dtype=np.float64), np.arange(cam.width, dtype=np.float64), indexing="ij")
    dirs = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)])
    denom = (n[:, None, None] * dirs).sum(axis=0)
    return rho / denom


def equivalence_denominator(scene, oracle, interval, erode=1, uni=13):
    """Half-grid pixels where agreement with the oracle can be demanded.

    Requires full-patch visibility in every source over the whole aggregation
    neighborhood, ground truth uniform at the compared supports, an observed
    oracle value, and clearance from the half-grid border.
    """
    h2 = scene.cameras[0].height // 2
    w2 = scene.cameras[0].width // 2
    ys, xs = np.mgrid[0:h2, 0:w2]
    fy, fx = 2 * ys, 2 * xs
    m = scene.matchable(how="all")[fy, fx]
    pad = np.zeros((h2 + 2 * erode, w2 + 2 * erode), bool)
    pad[erode:-erode, erode:-erode] = m
    m = np.lib.stride_tricks.sliding_window_view(pad, (2 * erode + 1, 2 * erode + 1)).all(axis=(2, 3))
    gt = scene.gt_depth[0][0]
    r = uni // 2
    uniform = np.zeros(gt.shape, bool)
    win = np.lib.stride_tricks.sliding_window_view(gt, (uni, uni))
    uniform[r:-r, r:-r] = (win.max(axis=(2, 3)) - win.min(axis=(2, 3))) < 0.5 * interval
    sel = m & uniform[fy, fx] & np.isfinite(oracle.depth[fy, fx])
    sel[:2] = sel[-2:] = False
    sel[:, :2] = sel[:, -2:] = False
    return sel, (fy, fx)


def identity_fused_volume(scene, num=48):
    feats = [cost.identity_features(img) for img in scene.images]
    cams = [scale_camera(c, 0.5) for c in scene.cameras]
    h2, w2 = cams[0].height, cams[0].width
    lo, _, _, hi = scene.depth_range
    center = np.full((1, h2, w2), 0.5 * (lo + hi))
    radius = np.full((1, h2, w2), 0.5 * (hi - lo))
    cands = build_candidate_volume(center, radius, num, (lo, hi))
    store = ParamStore(seed=5)
    fw = cost.fusion_weights(store, "fuse", in_channels=feats[0].values.shape[0])
    fw.w3.data[:] = 0.0
    fw.b3.data[:] = 0.0
    vols = []
    masks = []
    for s in range(1, len(cams)):
        warped, valid = cost.warp_source(feats[s], cams[0], cams[s], cands)
        vols.append(cost.per_view_cost(feats[0], warped))
        masks.append(valid)
    fused, _ = cost.fuse_views(vols, masks, fw)
    return fused, cands
