"""Per-pixel depth search ranges from monocular cues.

Two normal maps drive the prediction: one integrated from the current depth
estimate, one from the monocular prior. A shared three-layer extractor brings
both to half resolution, a cross-attention discrepancy module runs twice with
the feature roles exchanged, and the summed response passes through a softplus
head scaled to scene units. Depth candidates are then laid out uniformly
inside the predicted radius around the current depth, shifted back whole into
the scene bounds when they overflow and shrunk only when wider than the whole
scene range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels as K
from .autodiff import Tensor
from .errors import NumericalError
from .geometry import NormalMap


def scale_monocular_depth(relative, depth_min, depth_max):
    """Affine-map a relative depth map onto the scene interval.

    The map's own [min, max] lands exactly on [depth_min, depth_max]; a
    constant map has no range to stretch and goes to the midpoint.
    """
    rel = np.asarray(relative, dtype=np.float64)
    if rel.size == 0 or not np.all(np.isfinite(rel)):
        raise NumericalError("relative depth map is empty or non-finite")
    if not 0 < depth_min < depth_max:
        raise ValueError(f"bad depth interval [{depth_min}, {depth_max}]")
    lo = float(rel.min())
    span = float(rel.max()) - lo
    if span == 0.0:
        return np.full(rel.shape, 0.5 * (depth_min + depth_max))
    return depth_min + (rel - lo) * ((depth_max - depth_min) / span)


@dataclass
class RangeMap:
    """Per-pixel search radius (1, H, W) in meters on the half-resolution grid."""

    values: Tensor


@dataclass
class DepthCandidateVolume:
    """Uniform per-pixel depth candidates (D, H, W) with their generators.

    samples increases strictly along the leading axis at uniform per-pixel
    spacing; center and radius are the inputs the volume was built from, after
    any center resampling.
    """

    samples: Tensor
    center: Tensor
    radius: Tensor

    @property
    def spacing(self):
        """Per-pixel candidate spacing (1, H, W) as an ndarray."""
        d = self.samples.shape[0]
        return (self.samples.data[-1:] - self.samples.data[:1]) / (d - 1)


@dataclass
class DpmWeights:
    """One stage's range-prediction parameters.

    The extractor filters appear once because both normal branches share
    them. Every bias starts at zero, so an untrained stage responds with the
    neutral constant softplus(0) radius.
    """

    mfe_stem: Tensor
    mfe_stem_b: Tensor
    mfe_depth: Tensor
    mfe_depth_b: Tensor
    mfe_point: Tensor
    mfe_point_b: Tensor
    attn_q: Tensor
    attn_k: Tensor
    attn_v: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    head_w: Tensor
    head_b: Tensor
    range_bias: Tensor
    window: int | str = 8

    @property
    def channels(self):
        return self.mfe_stem.shape[0]


def dpm_weights(store, prefix, channels=16, window=8):
    """Create (or fetch) one stage's parameters under ``prefix`` in the store.

    window restricts attention to non-overlapping window x window tiles; the
    string "global" attends over the whole map, which is only sensible for
    tiny inputs because the logits grow quadratically with pixel count.
    """
    c = channels

    def par(name, shape, **kw):
        return store.get(f"{prefix}.{name}", shape, **kw)

    return DpmWeights(
        mfe_stem=par("mfe_stem", (c, 3, 3, 3)),
        mfe_stem_b=par("mfe_stem_b", (c,), init="zeros"),
        mfe_depth=par("mfe_depth", (c, 1, 3, 3)),
        mfe_depth_b=par("mfe_depth_b", (c,), init="zeros"),
        mfe_point=par("mfe_point", (c, c, 1, 1)),
        mfe_point_b=par("mfe_point_b", (c,), init="zeros"),
        attn_q=par("attn_q", (c, c)),
        attn_k=par("attn_k", (c, c)),
        attn_v=par("attn_v", (c, c)),
        ln_gain=par("ln_gain", (c,), init="ones"),
        ln_bias=par("ln_bias", (c,), init="zeros"),
        mlp_w1=par("mlp_w1", (c, c)),
        mlp_b1=par("mlp_b1", (c,), init="zeros"),
        mlp_w2=par("mlp_w2", (c, c)),
        mlp_b2=par("mlp_b2", (c,), init="zeros"),
        head_w=par("head_w", (c, 1), fan_in=c),
        head_b=par("head_b", (1,), init="zeros"),
        range_bias=par("range_bias", (1,), init="zeros"),
        window=window,
    )


def _as_feature_input(normal_map):
    if isinstance(normal_map, NormalMap):
        return Tensor(normal_map.values)
    if isinstance(normal_map, Tensor):
        return normal_map
    return Tensor(np.asarray(normal_map))


def mfe_extract(normal_map, weights):
    """Half-resolution features (C, ceil(H/2), ceil(W/2)) from a normal map.

    Three layers: regular 3x3 stride-2, depthwise 3x3, pointwise 1x1, with
    ReLU between them. Both normal branches run through this one weight set.
    """
    x = _as_feature_input(normal_map)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"normal map must be (3, H, W), got {x.shape}")
    x = K.conv2d(x, weights.mfe_stem, weights.mfe_stem_b, stride=2, padding=1).relu()
    x = K.conv2d(x, weights.mfe_depth, weights.mfe_depth_b, padding=1, groups=weights.channels).relu()
    return K.conv2d(x, weights.mfe_point, weights.mfe_point_b)


def _segments(extent, p):
    """(start, stop, block) spans tiling ``extent`` with blocks of at most p."""
    full = (extent // p) * p
    segs = []
    if full:
        segs.append((0, full, p))
    if extent > full:
        segs.append((full, extent, extent - full))
    return segs


def _block_attention(qs, ks, vs, ph, pw, scale):
    """Attention-pooled values over non-overlapping (ph, pw) tiles.

    Inputs are (bh, bw, C) spatial slabs whose extents the tile evenly
    divides; each tile's pixels attend only to each other.
    """
    bh, bw, c = qs.shape
    nr, nc = bh // ph, bw // pw
    s = ph * pw

    def blocks(t):
        return t.reshape((nr, ph, nc, pw, c)).transpose((0, 2, 1, 3, 4)).reshape((nr * nc, s, c))

    qb, kb, vb = blocks(qs), blocks(ks), blocks(vs)
    attn = K.softmax(ad.matmul(qb, kb.transpose((0, 2, 1))) * scale, axis=2)
    pooled = ad.matmul(attn, vb)
    return pooled.reshape((nr, nc, ph, pw, c)).transpose((0, 2, 1, 3, 4)).reshape((bh, bw, c))


def _attention_difference(f_q, f_kv, weights):
    """Discrepancy tokens (H, W, C): value features minus their attention pool."""
    c, h, w = f_q.shape
    tok_q = f_q.reshape((c, h * w)).transpose((1, 0))
    tok_kv = f_kv.reshape((c, h * w)).transpose((1, 0))
    q = ad.matmul(tok_q, weights.attn_q).reshape((h, w, c))
    k = ad.matmul(tok_kv, weights.attn_k).reshape((h, w, c))
    v = ad.matmul(tok_kv, weights.attn_v).reshape((h, w, c))
    scale = 1.0 / np.sqrt(c)
    if weights.window == "global":
        pooled = _block_attention(q, k, v, h, w, scale)
    else:
        p = int(weights.window)
        bands = []
        for r0, r1, ph in _segments(h, p):
            row = []
            for c0, c1, pw in _segments(w, p):
                sl = (slice(r0, r1), slice(c0, c1))
                row.append(_block_attention(q[sl], k[sl], v[sl], ph, pw, scale))
            bands.append(row[0] if len(row) == 1 else ad.concat(row, axis=1))
        pooled = bands[0] if len(bands) == 1 else ad.concat(bands, axis=0)
    return v - pooled


def dpm_forward(f_q, f_kv, weights):
    """Single-channel discrepancy response (1, H, W) between two feature maps.

    Per pixel the C-channel vectors act as tokens: queries come from f_q, keys
    and values from f_kv. Whatever the attention pool explains is subtracted
    from the value features, and the remainder passes through layer norm, an
    MLP with residual, and a linear head.
    """
    if f_q.shape != f_kv.shape:
        raise ValueError(f"feature shapes differ: {f_q.shape} vs {f_kv.shape}")
    c, h, w = f_q.shape
    dif = _attention_difference(f_q, f_kv, weights).reshape((h * w, c))
    normed = K.layer_norm(dif, 1, weights.ln_gain, weights.ln_bias)
    hidden = (ad.matmul(normed, weights.mlp_w1) + weights.mlp_b1).relu()
    mlp = ad.matmul(hidden, weights.mlp_w2) + weights.mlp_b2
    out = ad.matmul(dif + mlp, weights.head_w) + weights.head_b
    return out.transpose((1, 0)).reshape((1, h, w))


def predict_range(n_d, n_m, weights, range_scale):
    """Predicted search radius from depth-derived and monocular normals.

    range_scale converts the unitless head response to meters; the
    conventional choice is half the scene depth span. Both attention passes
    share one weight set, so the result is symmetric in the normal arguments.
    """
    if range_scale <= 0:
        raise ValueError(f"range scale must be positive, got {range_scale}")
    f_d = mfe_extract(n_d, weights)
    f_m = mfe_extract(n_m, weights)
    raw = dpm_forward(f_m, f_d, weights) + dpm_forward(f_d, f_m, weights) + weights.range_bias
    values = raw.softplus() * float(range_scale)
    if not np.all(values.data > 0):
        raise NumericalError("predicted range collapsed to zero")
    return RangeMap(values=values)


def build_candidate_volume(center, radius, num_samples, scene_bounds):
    """Uniform per-pixel depth candidates around ``center``.

    Args:
        center: Tensor or ndarray (1, H, W) of depths; resampled by a factor
            of two when its grid differs from the radius grid.
        radius: RangeMap or Tensor (1, H, W) of search radii, meters.
        num_samples: candidate count D >= 2.
        scene_bounds: (dmin, dmax) scene depth interval with dmin > 0.

    Returns:
        DepthCandidateVolume with samples (D, H, W). Per pixel the candidates
        span [center - r, center + r] at uniform spacing; a span overflowing
        the scene bounds is shifted back inside whole, and shrunk only when
        wider than the bounds themselves.
    """
    dmin, dmax = scene_bounds
    if not 0 < dmin < dmax:
        raise ValueError(f"bad scene bounds ({dmin}, {dmax})")
    if num_samples < 2:
        raise ValueError(f"need at least two candidates, got {num_samples}")
    r = radius.values if isinstance(radius, RangeMap) else radius
    if not isinstance(r, Tensor):
        r = Tensor(np.asarray(r))
    if not np.all(r.data > 0):
        raise ValueError("search radius must be positive everywhere")
    if not isinstance(center, Tensor):
        center = Tensor(np.asarray(center))
    if center.shape != r.shape:
        ch, cw = center.shape[1:]
        rh, rw = r.shape[1:]
        if (ch, cw) == (2 * rh, 2 * rw):
            center = K.downsample_half(center)
        elif (rh, rw) == (2 * ch, 2 * cw):
            center = K.upsample_double(center)
        else:
            raise ValueError(f"center grid {center.shape} does not match radius grid {r.shape}")

    r_eff = r.clamp(hi=0.5 * (dmax - dmin))
    lo = center - r_eff
    hi = center + r_eff
    # At most one of the two overflow terms is nonzero once the width fits.
    shift = (dmin - lo).relu() - (hi - dmax).relu()
    base = lo + shift
    spacing = r_eff * (2.0 / (num_samples - 1))
    steps = Tensor(np.arange(num_samples, dtype=center.dtype).reshape(num_samples, 1, 1))
    samples = base + spacing * steps
    return DepthCandidateVolume(samples=samples, center=center, radius=r)
