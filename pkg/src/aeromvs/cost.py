"""Image features, per-pixel warping over depth candidates, view fusion.

One shared trunk produces matching features for every view at half the input
resolution, with a 1x1 head per cascade stage. Source features are warped to
the reference view by projecting each pixel's own depth candidates, so the
candidate grid may vary per pixel; the per-view correlation volumes are then
averaged under learned per-view visibility weights. An identity feature mode
(standardized grayscale patch channels) exists so the geometric plumbing can
be compared against the brute-force photometric oracle without any learned
filters in the way.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels as K
from .autodiff import Tensor
from .geometry import relative_motion
from .range_predictor import DepthCandidateVolume


@dataclass
class FeatureMap:
    """Per-view matching features (M, H, W) on the half-resolution grid."""

    values: Tensor
    stage: int


@dataclass
class CostVolume:
    """Fused matching cost (M, D, H, W); entries valid in no view are zero."""

    values: Tensor
    valid: np.ndarray


@dataclass
class VisibilityWeights:
    """Per-source sigmoid score maps (1, D, H, W), each value in (0, 1)."""

    values: list


@dataclass
class FeatureWeights:
    """Shared extractor trunk plus one 1x1 head per stage."""

    stem: Tensor
    stem_b: Tensor
    res: list
    heads: dict
    head_bs: dict


def feature_weights(store, prefix="feat", base=16, stage_channels=(16, 16, 8)):
    """Create (or fetch) the extractor parameters under ``prefix``.

    stage_channels gives the head width per stage, stages numbered from 1.
    """

    def par(name, shape, **kw):
        return store.get(f"{prefix}.{name}", shape, **kw)

    res = []
    for i in (1, 2):
        res.append(
            (
                par(f"res{i}_a", (base, base, 3, 3)),
                par(f"res{i}_a_b", (base,), init="zeros"),
                par(f"res{i}_b", (base, base, 3, 3)),
                par(f"res{i}_b_b", (base,), init="zeros"),
            )
        )
    heads = {}
    head_bs = {}
    for stage, m in enumerate(stage_channels, start=1):
        heads[stage] = par(f"head{stage}", (m, base, 1, 1))
        head_bs[stage] = par(f"head{stage}_b", (m,), init="zeros")
    return FeatureWeights(
        stem=par("stem", (base, 3, 3, 3)),
        stem_b=par("stem_b", (base,), init="zeros"),
        res=res,
        heads=heads,
        head_bs=head_bs,
    )


def extract_features(image, weights, stage):
    """Matching features (M, ceil(H/2), ceil(W/2)) for one view and stage.

    Stride-2 stem, two residual blocks, then the stage's 1x1 head. Every view
    runs through the same weights, so identical images give identical maps.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"image must be (3, H, W), got {x.shape}")
    if stage not in weights.heads:
        raise ValueError(f"no head for stage {stage}")
    x = K.conv2d(x, weights.stem, weights.stem_b, stride=2, padding=1).relu()
    for wa, ba, wb, bb in weights.res:
        y = K.conv2d(x, wa, ba, padding=1).relu()
        y = K.conv2d(y, wb, bb, padding=1)
        x = (x + y).relu()
    out = K.conv2d(x, weights.heads[stage], weights.head_bs[stage])
    return FeatureMap(values=out, stage=stage)


def identity_features(image, stage=1, window=5, patch=5):
    """Locally standardized grayscale unfolded into patch channels, M = patch².

    The half-resolution grayscale is standardized against its window x window
    neighborhood, (I - mu) / sigma, then each channel takes one row-major
    patch shift of the result. A channelwise product against a warped source
    therefore sums to a patch correlation of standardized intensities: the
    same quantity the brute-force matcher scores, one sample per channel. Raw
    intensities cannot play this role, their products reward brightness
    rather than alignment and low-frequency shading drags the depth argmax to
    the sweep ends.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"image must be (3, H, W), got {x.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch must be odd and >= 1, got {patch}")
    half = K.downsample_half(x.mean(axis=0, keepdims=True)).data[0]

    def box(img):
        h, w = img.shape
        r = window // 2
        pad = np.zeros((h + window, w + window), dtype=img.dtype)
        pad[r + 1 : r + 1 + h, r + 1 : r + 1 + w] = img
        c = pad.cumsum(axis=0).cumsum(axis=1)
        return c[window:, window:] - c[:-window, window:] - c[window:, :-window] + c[:-window, :-window]

    counts = box(np.ones_like(half))
    mu = box(half) / counts
    var = np.maximum(box(half * half) / counts - mu * mu, 0.0)
    std = np.sqrt(var + 1e-12)
    f = (half - mu) / std

    h2, w2 = f.shape
    r = patch // 2
    pad = np.zeros((h2 + 2 * r, w2 + 2 * r), dtype=f.dtype)
    pad[r : r + h2, r : r + w2] = f
    chans = [pad[dy : dy + h2, dx : dx + w2] for dy in range(patch) for dx in range(patch)]
    return FeatureMap(values=Tensor(np.stack(chans)), stage=stage)


# ---- warping -------------------------------------------------------------------


def _warp_coords(ref_cam, src_cam, samples):
    """Source-pixel coordinates (2, D, H, W) of each candidate, plus a
    positive-source-depth mask.

    Differentiable in the candidate depths: with the viewing ray direction
    rotated into the source frame, the source point is an affine function of
    depth and projection is a ratio of two such.
    """
    d, h, w = samples.shape
    rot, tr = relative_motion(ref_cam, src_cam)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dirs = np.stack([(xs - ref_cam.cx) / ref_cam.fx, (ys - ref_cam.cy) / ref_cam.fy, np.ones_like(xs)])
    a = np.einsum("ij,jhw->ihw", rot, dirs)
    dt = samples.dtype
    px = samples * Tensor(a[0].astype(dt)) + float(tr[0])
    py = samples * Tensor(a[1].astype(dt)) + float(tr[1])
    pz = samples * Tensor(a[2].astype(dt)) + float(tr[2])
    in_front = pz.data > 1e-6
    z_safe = pz.clamp(lo=1e-6)
    u = (px / z_safe) * float(src_cam.fx) + float(src_cam.cx)
    v = (py / z_safe) * float(src_cam.fy) + float(src_cam.cy)
    coords = ad.concat([u.reshape((1, d, h, w)), v.reshape((1, d, h, w))], axis=0)
    return coords, in_front


def warp_source(src_feat, ref_cam, src_cam, candidates):
    """Source features sampled at every candidate's correspondence.

    Args:
        src_feat: FeatureMap or Tensor (M, H, W) on the source grid.
        ref_cam, src_cam: cameras already scaled to the feature grid.
        candidates: DepthCandidateVolume or Tensor (D, H, W) of depths.

    Returns:
        (warped Tensor (M, D, H, W), valid ndarray (D, H, W)); invalid where
        a candidate lands outside the source image or behind its camera.
    """
    feat = src_feat.values if isinstance(src_feat, FeatureMap) else src_feat
    samples = candidates.samples if isinstance(candidates, DepthCandidateVolume) else candidates
    d, h, w = samples.shape
    if (ref_cam.height, ref_cam.width) != (h, w):
        raise ValueError(f"reference camera extent {(ref_cam.height, ref_cam.width)} does not match candidates {(h, w)}")
    if (src_cam.height, src_cam.width) != feat.shape[1:]:
        raise ValueError(f"source camera extent {(src_cam.height, src_cam.width)} does not match features {feat.shape}")
    coords, in_front = _warp_coords(ref_cam, src_cam, samples)
    warped, inside = K.bilinear_sample(feat, coords, border="zero")
    return warped, inside & in_front


def per_view_cost(ref_feat, warped):
    """Channelwise correlation ref ⊙ warped, reference broadcast over depth."""
    ref = ref_feat.values if isinstance(ref_feat, FeatureMap) else ref_feat
    m, h, w = ref.shape
    if warped.shape[0] != m or warped.shape[2:] != (h, w):
        raise ValueError(f"feature/volume shapes differ: {ref.shape} vs {warped.shape}")
    return ref.reshape((m, 1, h, w)) * warped


# ---- visibility-weighted fusion ------------------------------------------------


@dataclass
class FusionWeights:
    """Three-layer 1x1 view-weight network shared by all source views."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor


def fusion_weights(store, prefix, in_channels, hidden=8):
    """Create (or fetch) the view-weight parameters under ``prefix``."""

    def par(name, shape, **kw):
        return store.get(f"{prefix}.{name}", shape, **kw)

    return FusionWeights(
        w1=par("w1", (in_channels, hidden), fan_in=in_channels),
        b1=par("b1", (hidden,), init="zeros"),
        w2=par("w2", (hidden, hidden), fan_in=hidden),
        b2=par("b2", (hidden,), init="zeros"),
        w3=par("w3", (hidden, 1), fan_in=hidden),
        b3=par("b3", (1,), init="zeros"),
    )


def view_weight(cost, weights):
    """Sigmoid visibility scores (1, D, H, W) from one view's cost volume."""
    m, d, h, w = cost.shape
    tok = cost.reshape((m, d * h * w)).transpose((1, 0))
    z = (ad.matmul(tok, weights.w1) + weights.b1).relu()
    z = (ad.matmul(z, weights.w2) + weights.b2).relu()
    z = ad.matmul(z, weights.w3) + weights.b3
    return z.transpose((1, 0)).reshape((1, d, h, w)).sigmoid()


def fuse_views(per_view_costs, masks, weights):
    """Visibility-weighted average of per-view costs into one volume.

    Each view's per-pixel weight is the depth-max of its sigmoid score map
    (sigmoid and max commute, so scoring then pooling gives the same weight).
    Views are accumulated in a content-derived canonical order, which makes
    the result exactly invariant to the caller's view ordering.

    Returns (CostVolume, VisibilityWeights); score maps follow the caller's
    order. Pixels valid in no view come back masked with zero cost rather
    than raising.
    """
    if len(per_view_costs) == 0:
        raise ValueError("need at least one source view")
    if len(per_view_costs) != len(masks):
        raise ValueError(f"{len(per_view_costs)} cost volumes but {len(masks)} masks")
    order = sorted(
        range(len(per_view_costs)),
        key=lambda i: hashlib.sha256(per_view_costs[i].data.tobytes() + masks[i].tobytes()).digest(),
    )
    scores = [None] * len(per_view_costs)
    num = None
    den = None
    for i in order:
        cost = per_view_costs[i]
        score = view_weight(cost, weights)
        scores[i] = score
        wpix = score.max(axis=1, keepdims=True)
        maskf = Tensor(masks[i].astype(cost.dtype)[None])
        term = cost * maskf * wpix
        dterm = maskf * wpix
        num = term if num is None else num + term
        den = dterm if den is None else den + dterm
    valid = np.zeros(masks[0].shape, dtype=bool)
    for msk in masks:
        valid |= msk
    validf = Tensor(valid.astype(num.dtype)[None])
    fused = num / ad.maximum(den, 1e-20) * validf
    return CostVolume(values=fused, valid=valid), VisibilityWeights(values=scores)
