"""Normal-guided cost aggregation, regularization, and depth refinement.

Aggregation gathers each pixel's 3x3 neighborhood costs at plane-aligned
depths: the center pixel's normal says how depth changes toward each neighbor,
and the neighbor's cost is read off its own candidate axis at that depth. Tap
positions can deform by learned per-pixel offsets and a feature similarity
weight demotes neighbors that look different. The gathered tap blocks are
folded back with a (K, 1, 1) convolution whose multiply count matches a dense
KxKxK convolution, the pairs run inside a small two-level U-Net, and a softmax
turns the result into a per-pixel distribution over candidates. Regression
takes its expectation; refinement upsamples by two and adds a residual
predicted from the depth and the normal map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels as K
from .autodiff import Tensor
from .cost import CostVolume, FeatureMap
from .geometry import NormalMap, scale_camera
from .range_predictor import DepthCandidateVolume


@dataclass
class OffsetField:
    """Per-tap neighbor displacements (2*K*K, H, W); x before y per tap."""

    values: Tensor
    taps: int = 3


@dataclass
class ProbabilityVolume:
    """Per-pixel distribution (D, H, W) over depth candidates."""

    values: Tensor


@dataclass
class OffsetWeights:
    w: Tensor
    b: Tensor


@dataclass
class AggregateWeights:
    """Fold-back kernel (out, K*K*in, K, 1, 1) for the tap blocks."""

    w: Tensor


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _cost_values(cost):
    return cost.values if isinstance(cost, CostVolume) else _as_tensor(cost)


def _sample_values(candidates):
    if isinstance(candidates, DepthCandidateVolume):
        return candidates.samples
    return _as_tensor(candidates)


def _normal_values(normals):
    if isinstance(normals, NormalMap):
        return _as_tensor(normals.values)
    return _as_tensor(normals)


def _feature_values(features):
    if features is None:
        return None
    if isinstance(features, FeatureMap):
        return features.values
    return _as_tensor(features)


def _tap_grid(k):
    r = k // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _edge_pad(x, pad=1):
    """Replicate-pad (C, H, W) by ``pad`` pixels on each image edge.

    Integer-coordinate clamped sampling, so values copy exactly and constant
    inputs stay constant through a following unpadded convolution.
    """
    c, h, w = x.shape
    ys, xs = np.meshgrid(
        np.arange(-pad, h + pad, dtype=x.dtype),
        np.arange(-pad, w + pad, dtype=x.dtype),
        indexing="ij",
    )
    out, _ = K.bilinear_sample(x, Tensor(np.stack([xs, ys])), border="clamp")
    return out


def offset_weights(store, prefix="offsets", taps=3):
    """Zero-initialized 3x3 conv mapping a normal map to tap displacements."""
    n = 2 * taps * taps
    return OffsetWeights(
        w=store.get(f"{prefix}_w", (n, 3, 3, 3), init="zeros"),
        b=store.get(f"{prefix}_b", (n,), init="zeros"),
    )


def predict_offsets(normals, weights, limit=3.0):
    """Per-pixel tap displacements from one conv over the normal map.

    Channel 2t holds the x displacement of tap t and channel 2t+1 the y, taps
    row-major over the K x K grid. Displacements clamp to +-limit pixels; the
    zero initialization keeps every tap on the regular grid. Edge-replicated
    padding, so a constant normal map gives spatially constant offsets.
    """
    n = _normal_values(normals)
    if n.ndim != 3 or n.shape[0] != 3:
        raise ValueError(f"normal map must be (3, H, W), got {n.shape}")
    taps = int(round(np.sqrt(weights.w.shape[0] / 2)))
    out = K.conv2d(_edge_pad(n), weights.w, weights.b)
    return OffsetField(values=out.clamp(-limit, limit), taps=taps)


def feature_similarity(features, coords, tau=1.0):
    """Gaussian similarity between each pixel's features and a sampled point.

    coords is (2, H, W) continuous coordinates; the comparison features are
    bilinearly sampled there (edge-clamped). Returns (H, W) values in (0, 1],
    exactly 1 where the sample reproduces the pixel's own features, decaying
    with the mean squared channel difference at scale tau.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    f = _feature_values(features)
    m = f.shape[0]
    sampled, _ = K.bilinear_sample(f, coords, border="clamp")
    diff = sampled - f
    d2 = (diff * diff).sum(axis=0)
    return (-d2 / (2.0 * tau * tau * m)).exp()


def nca_propagate(cost, candidates, normals, offsets, features, cam, mode="ratio_scaled", tau=1.0):
    """Gather plane-aligned neighbor costs into K^2 tap blocks.

    For reference pixel i with normal N(i), tap j sits at the regular grid
    displacement plus its learned offset. Candidate depth d at i maps to the
    neighbor as d_j = d / r with r = (N(i) . v_j) / (N(i) . v_i), the depth
    ratio between two points of one plane seen along pixel directions v_i and
    v_j, and the neighbor's cost is read at d_j by linear interpolation along
    its own candidate axis, clamped at the ends. Feature similarity enters per
    mode: "ratio_scaled" multiplies the ratio itself (so dissimilar neighbors
    are probed at shifted depths), "cost_weighted" multiplies the looked-up
    cost. Grazing or sign-flipped ratios fall back to d_j = d. Neighbors
    outside the image contribute zero cost, matching zero padding.

    Returns a Tensor (K^2*M, D, H, W) with tap-major channel blocks.
    """
    if mode not in ("ratio_scaled", "cost_weighted"):
        raise ValueError(f"unknown propagation mode {mode!r}")
    vol = _cost_values(cost)
    samples = _sample_values(candidates)
    n = _normal_values(normals)
    off = offsets.values if isinstance(offsets, OffsetField) else offsets
    k = offsets.taps if isinstance(offsets, OffsetField) else 3
    feats = _feature_values(features)

    m, d, h, w = vol.shape
    if d < 2:
        raise ValueError(f"need at least 2 depth candidates, got {d}")
    if samples.shape != (d, h, w):
        raise ValueError(f"candidates {samples.shape} do not match cost depth grid {(d, h, w)}")
    if n.shape != (3, h, w):
        raise ValueError(f"normal map {n.shape} does not match cost grid {(h, w)}")
    if off.shape != (2 * k * k, h, w):
        raise ValueError(f"offset field {off.shape} does not match {k}x{k} taps on {(h, w)}")
    if (cam.height, cam.width) != (h, w):
        raise ValueError(f"camera extent {(cam.height, cam.width)} does not match cost grid {(h, w)}")

    ys, xs = np.meshgrid(np.arange(h, dtype=vol.dtype), np.arange(w, dtype=vol.dtype), indexing="ij")
    vix = (xs - cam.cx) / cam.fx
    viy = (ys - cam.cy) / cam.fy
    vi_norm = np.sqrt(vix * vix + viy * viy + 1.0)
    den = n[0:1] * vix[None] + n[1:2] * viy[None] + n[2:3]

    flat = vol.reshape(m * d, h, w)
    axis_ends = ad.concat([samples[0:1], samples[d - 1 : d]], axis=0)

    blocks = []
    for t, (dy, dx) in enumerate(_tap_grid(k)):
        xj = Tensor(xs[None]) + float(dx) + off[2 * t : 2 * t + 1]
        yj = Tensor(ys[None]) + float(dy) + off[2 * t + 1 : 2 * t + 2]
        coords = ad.concat([xj, yj], axis=0)
        omega = None if feats is None else feature_similarity(feats, coords, tau)

        vjx = (xj - cam.cx) / cam.fx
        vjy = (yj - cam.cy) / cam.fy
        num = n[0:1] * vjx + n[1:2] * vjy + n[2:3]
        vj_norm = np.sqrt(vjx.data**2 + vjy.data**2 + 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = (
                (np.abs(den.data) / vi_norm[None] > 1e-6)
                & (np.abs(num.data) / vj_norm > 1e-6)
                & (num.data / den.data > 0)
            )
        ratio = num / ad.where(ok, den, np.ones_like(den.data))
        if mode == "ratio_scaled" and omega is not None:
            ratio = ratio * omega.reshape(1, h, w)
        ratio = ad.where(ok, ratio, np.ones_like(den.data))
        depths = samples / ratio

        ends, _ = K.bilinear_sample(axis_ends, coords, border="clamp")
        step = (ends[1:2] - ends[0:1]) / float(d - 1)
        pos = (depths - ends[0:1]) / step

        sampled, _ = K.bilinear_sample(flat, coords, border="zero")
        block = K.sample_depth_axis(sampled.reshape(m, d, h, w), pos)
        if mode == "cost_weighted" and omega is not None:
            block = block * omega.reshape(1, 1, h, w)
        blocks.append(block)
    return ad.concat(blocks, axis=0)


def gca_propagate(cost, candidates, normals, cam, mode="ratio_scaled"):
    """Plane-aligned gather over the fixed grid, no offsets or weighting."""
    vol = _cost_values(cost)
    _, _, h, w = vol.shape
    off = OffsetField(values=Tensor(np.zeros((18, h, w), dtype=vol.dtype)), taps=3)
    return nca_propagate(vol, candidates, normals, off, None, cam, mode=mode)


def aggregate(intermediate, weights):
    """Fold tap blocks back to per-channel costs with a depth-extent kernel.

    A (K, 1, 1) convolution reads all K^2*M tap channels per output, so its
    multiply-accumulate count equals a dense KxKxK convolution mapping M to M
    channels. Depth padding keeps the candidate extent.
    """
    w = weights.w if isinstance(weights, AggregateWeights) else weights
    out_c, in_c, kd, kh, kw = w.shape
    if kh != 1 or kw != 1:
        raise ValueError(f"aggregation kernel must be (K, 1, 1), got {(kd, kh, kw)}")
    if in_c % (kd * kd) != 0:
        raise ValueError(f"{in_c} input channels not divisible by {kd * kd} taps")
    if intermediate.shape[0] != in_c:
        raise ValueError(f"expected {in_c} tap channels, got {intermediate.shape[0]}")
    return K.conv3d(intermediate, w, padding=(kd // 2, 0, 0))


def tap_mean_weights(channels, k=3, taps="all", dtype=np.float64):
    """Hand-set fold-back kernel: identity channels, delta depth, tap average.

    taps "all" averages every tap, a plain spatial mean over the grid;
    "center" picks the center tap alone, which undoes propagation exactly.
    """
    kk = k * k
    chosen = list(range(kk)) if taps == "all" else [kk // 2]
    w = np.zeros((channels, kk * channels, k, 1, 1), dtype=dtype)
    for t in chosen:
        for c in range(channels):
            w[c, t * channels + c, k // 2, 0, 0] = 1.0 / len(chosen)
    return AggregateWeights(w=Tensor(w))


@dataclass
class NCAContext:
    """Geometry the propagation steps read alongside a cost volume."""

    normals: np.ndarray
    candidates: DepthCandidateVolume
    cam: object
    features: FeatureMap = None
    mode: str = "ratio_scaled"
    tau: float = 1.0


@dataclass
class RegularizerWeights:
    offsets: OffsetWeights
    enc1: AggregateWeights
    enc2: AggregateWeights
    enc3: AggregateWeights
    dec: AggregateWeights
    head_w: Tensor
    head_b: Tensor


def regularizer_weights(store, prefix="reg", in_channels=16, channels=(8, 16), taps=3):
    """U-Net weight set: one shared offset conv plus a fold-back per layer."""
    c1, c2 = channels
    kk = taps * taps
    return RegularizerWeights(
        offsets=offset_weights(store, f"{prefix}_off", taps),
        enc1=AggregateWeights(w=store.get(f"{prefix}_enc1_w", (c1, kk * in_channels, taps, 1, 1))),
        enc2=AggregateWeights(w=store.get(f"{prefix}_enc2_w", (c2, kk * c1, taps, 1, 1))),
        enc3=AggregateWeights(w=store.get(f"{prefix}_enc3_w", (c2, kk * c2, taps, 1, 1))),
        dec=AggregateWeights(w=store.get(f"{prefix}_dec_w", (c1, kk * (c1 + c2), taps, 1, 1))),
        head_w=store.get(f"{prefix}_head_w", (1, c1, 1, 1, 1)),
        head_b=store.get(f"{prefix}_head_b", (1,), init="zeros"),
    )


def regularize(cost, ctx, weights):
    """Two-level U-Net of propagate/aggregate pairs ending in a softmax over D.

    Every convolution in the net is a propagation pair at its level's
    resolution; pooling by two in depth and both image axes separates the
    levels, with normals, candidates, and similarity features pooled
    alongside and the camera rescaled to match. Zero weights leave the logits
    constant, so the output is the uniform distribution over candidates.
    """
    vol = _cost_values(cost)
    m, d, h, w = vol.shape
    if d < 4 or d % 2 or h % 2 or w % 2:
        raise ValueError(f"need even extents and at least 4 depths for two levels, got {vol.shape}")
    n1 = _normal_values(ctx.normals)
    s1 = _sample_values(ctx.candidates)
    f1 = _feature_values(ctx.features)
    cam1 = ctx.cam

    n2 = K.avg_pool2d(n1)
    s2 = K.avg_pool3d(s1.reshape(1, d, h, w)).reshape(d // 2, h // 2, w // 2)
    f2 = None if f1 is None else K.avg_pool2d(f1)
    cam2 = scale_camera(cam1, 0.5)
    off1 = predict_offsets(n1, weights.offsets)
    off2 = predict_offsets(n2, weights.offsets)

    def pair(x, fold, sam, nrm, off, feat, cam):
        inter = nca_propagate(x, sam, nrm, off, feat, cam, mode=ctx.mode, tau=ctx.tau)
        return aggregate(inter, fold)

    e1 = pair(vol, weights.enc1, s1, n1, off1, f1, cam1).softplus()
    e2 = pair(K.avg_pool3d(e1), weights.enc2, s2, n2, off2, f2, cam2).softplus()
    e3 = pair(e2, weights.enc3, s2, n2, off2, f2, cam2).softplus()
    dec = pair(ad.concat([e1, K.upsample_nearest3d(e3)], axis=0), weights.dec, s1, n1, off1, f1, cam1).softplus()
    logits = K.conv3d(dec, weights.head_w, weights.head_b)
    return ProbabilityVolume(values=K.softmax(logits, axis=1).reshape(d, h, w))


def regress_depth(prob, candidates):
    """Expected depth under the per-pixel candidate distribution, (1, H, W)."""
    p = prob.values if isinstance(prob, ProbabilityVolume) else _as_tensor(prob)
    s = _sample_values(candidates)
    if p.shape != s.shape:
        raise ValueError(f"probability volume {p.shape} does not match candidates {s.shape}")
    return (p * s).sum(axis=0, keepdims=True)


@dataclass
class RefineWeights:
    d1: Tensor
    d1_b: Tensor
    d2: Tensor
    d2_b: Tensor
    n1: Tensor
    n1_b: Tensor
    n2: Tensor
    n2_b: Tensor
    j1: Tensor
    j1_b: Tensor
    j2: Tensor
    j2_b: Tensor


def refine_weights(store, prefix="ndr", hidden=8):
    """Two 3x3 convs per input branch, two on the joint; final layer zeroed."""
    par = store.get
    return RefineWeights(
        d1=par(f"{prefix}_d1_w", (hidden, 1, 3, 3)),
        d1_b=par(f"{prefix}_d1_b", (hidden,), init="zeros"),
        d2=par(f"{prefix}_d2_w", (hidden, hidden, 3, 3)),
        d2_b=par(f"{prefix}_d2_b", (hidden,), init="zeros"),
        n1=par(f"{prefix}_n1_w", (hidden, 3, 3, 3)),
        n1_b=par(f"{prefix}_n1_b", (hidden,), init="zeros"),
        n2=par(f"{prefix}_n2_w", (hidden, hidden, 3, 3)),
        n2_b=par(f"{prefix}_n2_b", (hidden,), init="zeros"),
        j1=par(f"{prefix}_j1_w", (hidden, 2 * hidden, 3, 3)),
        j1_b=par(f"{prefix}_j1_b", (hidden,), init="zeros"),
        j2=par(f"{prefix}_j2_w", (1, hidden, 3, 3), init="zeros"),
        j2_b=par(f"{prefix}_j2_b", (1,), init="zeros"),
    )


def _edge_conv(x, w, b):
    return K.conv2d(_edge_pad(x), w, b)


def ndr_refine(depth, normals, weights, bounds, margin=0.0):
    """Upsample depth by two and add a residual guided by the normal map.

    depth is (1, h, w) at half resolution, normals (3, 2h, 2w). Both are
    scaled to [0, 1] before the convolutions (depth by the scene bounds,
    normals from their [-1, 1] range) and the residual acts in scaled depth
    units, so the zero-initialized final layer starts as an exact bilinear
    upsample. Convolutions pad by edge replication; output clamps to the
    bounds widened by margin.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (hi > lo):
        raise ValueError(f"bad depth bounds ({lo}, {hi})")
    x = _as_tensor(depth)
    n = _normal_values(normals)
    up = K.upsample_double(x)
    scale = hi - lo
    a = _edge_conv((up - lo) / scale, weights.d1, weights.d1_b).relu()
    a = _edge_conv(a, weights.d2, weights.d2_b).relu()
    b = _edge_conv((n + 1.0) * 0.5, weights.n1, weights.n1_b).relu()
    b = _edge_conv(b, weights.n2, weights.n2_b).relu()
    j = _edge_conv(ad.concat([a, b], axis=0), weights.j1, weights.j1_b).relu()
    res = _edge_conv(j, weights.j2, weights.j2_b)
    return (up + res * scale).clamp(lo - margin, hi + margin)
