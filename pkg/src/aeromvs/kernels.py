"""Structured differentiable kernels: convolutions, sampling, normalization.

Layouts are unbatched: feature maps are (C, H, W), volumes are (C, D, H, W).
Convolution forward passes use stride-tricks windows plus einsum; backward
passes accumulate input gradients with a small loop over kernel taps, each
iteration a strided vectorized add, so nothing here scales with image size in
python. Sampling kernels scatter their map gradients through bincount on
flattened indices.

Sampling coordinate convention: x is the column index, y the row index, both
in pixel units with integer pixel centers.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor

# ---- 2-D convolution ----------------------------------------------------------


def conv2d(x, w, bias=None, stride=1, padding=0, groups=1):
    """Cross-correlation of (Ci,H,W) with (Co,Ci/groups,kh,kw) weights.

    Args:
        x: input Tensor (Ci, H, W).
        w: weight Tensor (Co, Ci/groups, kh, kw). groups=Ci with Co=Ci gives a
            depthwise convolution.
        bias: optional Tensor (Co,).
        stride: int or (sh, sw).
        padding: int or (ph, pw), zero-fill.
        groups: channel groups; Ci and Co must both be divisible by it.

    Returns:
        Tensor (Co, Ho, Wo) with Ho = (H + 2*ph - kh)//sh + 1.
    """
    ci, h, wdt = x.shape
    co, cig, kh, kw = w.shape
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if ci % groups or co % groups or cig != ci // groups:
        raise ValueError(f"bad group structure: Ci={ci} Co={co} groups={groups} w={w.shape}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wdt + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"empty conv2d output for input {x.shape} kernel {(kh, kw)}")

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    wing = win.reshape(groups, cig, ho, wo, kh, kw)
    wg = w.data.reshape(groups, co // groups, cig, kh, kw)
    out = np.einsum("gihwkl,goikl->gohw", wing, wg, optimize=True).reshape(co, ho, wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gg = g.reshape(groups, co // groups, ho, wo)
        if w.requires_grad:
            w._accum(np.einsum("gihwkl,gohw->goikl", wing, gg, optimize=True).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(1, 2)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            dxpg = dxp.reshape(groups, cig, *xp.shape[1:])
            for i in range(kh):
                for j in range(kw):
                    dxpg[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += np.einsum(
                        "gohw,goi->gihw", gg, wg[:, :, :, i, j], optimize=True
                    )
            x._accum(dxp[:, ph : ph + h, pw : pw + wdt])

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


# ---- 3-D convolution ----------------------------------------------------------


def conv3d(x, w, bias=None, stride=1, padding=0):
    """Cross-correlation of (Ci,D,H,W) with (Co,Ci,kd,kh,kw) weights.

    stride/padding are ints or (d, h, w) triples; padding zero-fills.
    """
    ci, d, h, wdt = x.shape
    co, ciw, kd, kh, kw = w.shape
    if ciw != ci:
        raise ValueError(f"channel mismatch: input {ci} vs weight {ciw}")
    sd, sh, sw = (stride,) * 3 if isinstance(stride, int) else stride
    pd, ph, pw = (padding,) * 3 if isinstance(padding, int) else padding
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wdt + 2 * pw - kw) // sw + 1
    if do <= 0 or ho <= 0 or wo <= 0:
        raise ValueError(f"empty conv3d output for input {x.shape} kernel {(kd, kh, kw)}")

    xp = np.pad(x.data, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::sd, ::sh, ::sw]
    out = np.einsum("cdhwxyz,ocxyz->odhw", win, w.data, optimize=True)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[:, None, None, None]

    def backward(g):
        if w.requires_grad:
            w._accum(np.einsum("cdhwxyz,odhw->ocxyz", win, g, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(1, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        dxp[:, a : a + sd * do : sd, b : b + sh * ho : sh, c : c + sw * wo : sw] += np.einsum(
                            "odhw,oc->cdhw", g, w.data[:, :, a, b, c], optimize=True
                        )
            x._accum(dxp[:, pd : pd + d, ph : ph + h, pw : pw + wdt])

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._from_op(out, parents, backward, "conv3d")


def conv3d_mac_count(in_channels, out_channels, kernel, out_extent):
    """Multiply-accumulate count of a dense 3-D convolution layer."""
    kd, kh, kw = kernel
    do, ho, wo = out_extent
    return out_channels * do * ho * wo * in_channels * kd * kh * kw


# ---- bilinear sampling --------------------------------------------------------


def bilinear_sample(feat, coords, border="zero"):
    """Sample (C,H,W) features at per-pixel continuous coordinates.

    Args:
        feat: Tensor (C, H, W).
        coords: Tensor (2, ...) with coords[0]=x (column), coords[1]=y (row).
        border: "zero" treats outside values as 0; "clamp" clamps coordinates
            to the image extent.

    Returns:
        (sampled Tensor (C, ...), valid ndarray bool (...)). A sample is valid
        when every corner with nonzero interpolation weight lies inside the
        source extent, which reduces to x in [0, W-1] and y in [0, H-1].

    Gradients flow to both the feature map and the coordinates.
    """
    c, h, w = feat.shape
    x = coords.data[0]
    y = coords.data[1]
    valid = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)

    if border == "clamp":
        xs = np.clip(x, 0.0, w - 1.0)
        ys = np.clip(y, 0.0, h - 1.0)
    elif border == "zero":
        xs, ys = x, y
    else:
        raise ValueError(f"unknown border mode {border!r}")

    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)

    samp_shape = x.shape
    n = x.size
    fxf = fx.reshape(n)
    fyf = fy.reshape(n)

    corner_vals = []
    corner_idx = []
    corner_w = []
    for dy in (0, 1):
        for dx in (0, 1):
            ii = y0i + dy
            jj = x0i + dx
            inside = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
            iic = np.clip(ii, 0, h - 1).reshape(n)
            jjc = np.clip(jj, 0, w - 1).reshape(n)
            wgt = (fyf if dy else 1.0 - fyf) * (fxf if dx else 1.0 - fxf)
            if border == "zero":
                wgt = wgt * inside.reshape(n)
            flat = iic * w + jjc
            vals = feat.data.reshape(c, h * w)[:, flat]  # (C, n)
            corner_vals.append(vals)
            corner_idx.append(flat)
            corner_w.append(wgt.astype(feat.dtype))

    out = np.zeros((c, n), dtype=feat.dtype)
    for vals, wgt in zip(corner_vals, corner_w):
        out += vals * wgt[None, :]
    out = out.reshape((c,) + samp_shape)

    def backward(g):
        gf = g.reshape(c, n)
        if feat.requires_grad:
            # One bincount over all four corners at once.
            idx_all = np.concatenate([np.arange(c)[:, None] * (h * w) + idx[None, :] for idx in corner_idx], axis=1)
            val_all = np.concatenate([gf * wgt[None, :] for wgt in corner_w], axis=1)
            feat._accum(np.bincount(idx_all.ravel(), val_all.ravel(), minlength=c * h * w).reshape(c, h, w).astype(feat.dtype))
        if coords.requires_grad:
            v00, v01, v10, v11 = corner_vals
            if border == "zero":
                # Outside corners contribute zero to the forward value, so the
                # coordinate derivative must see them as zero too.
                masks = []
                for dy in (0, 1):
                    for dx in (0, 1):
                        ii = y0i + dy
                        jj = x0i + dx
                        masks.append(((ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)).reshape(n))
                m00, m01, m10, m11 = masks
                v00 = v00 * m00
                v01 = v01 * m01
                v10 = v10 * m10
                v11 = v11 * m11
            ddx = (1.0 - fyf)[None, :] * (v01 - v00) + fyf[None, :] * (v11 - v10)
            ddy = (1.0 - fxf)[None, :] * (v10 - v00) + fxf[None, :] * (v11 - v01)
            gx = (gf * ddx).sum(axis=0)
            gy = (gf * ddy).sum(axis=0)
            if border == "clamp":
                gx = gx * ((x >= 0.0) & (x <= w - 1.0)).reshape(n)
                gy = gy * ((y >= 0.0) & (y <= h - 1.0)).reshape(n)
            gc = np.zeros_like(coords.data)
            gc[0] = gx.reshape(samp_shape)
            gc[1] = gy.reshape(samp_shape)
            coords._accum(gc)

    return Tensor._from_op(out, (feat, coords), backward, "bilinear_sample"), valid


# ---- linear sampling along the depth axis -------------------------------------


def sample_depth_axis(vol, pos):
    """Linear interpolation of (C,D,H,W) along D at per-pixel positions.

    ``pos`` is a Tensor (Dp, H, W) of fractional depth indices; positions are
    clamped to [0, D-1]. Gradients flow to both the volume and the positions
    (zero where the position was clamped).
    """
    c, d, h, w = vol.shape
    dp = pos.shape[0]
    pc = np.clip(pos.data, 0.0, d - 1.0)
    i0 = np.minimum(np.floor(pc), max(d - 2, 0)).astype(np.int64)
    i1 = np.minimum(i0 + 1, d - 1)
    f = (pc - i0).astype(vol.dtype)

    n = pc.size  # Dp*H*W
    hw = h * w
    pix = np.tile(np.arange(hw, dtype=np.int64).reshape(1, h, w), (dp, 1, 1)).reshape(n)
    flat0 = i0.reshape(n) * hw + pix
    flat1 = i1.reshape(n) * hw + pix
    v0 = vol.data.reshape(c, d * hw)[:, flat0]
    v1 = vol.data.reshape(c, d * hw)[:, flat1]
    ff = f.reshape(n)
    out = (v0 * (1.0 - ff)[None, :] + v1 * ff[None, :]).reshape(c, dp, h, w)

    def backward(g):
        gf = g.reshape(c, n)
        if vol.requires_grad:
            idx0 = np.arange(c)[:, None] * (d * hw) + flat0[None, :]
            idx1 = np.arange(c)[:, None] * (d * hw) + flat1[None, :]
            idx_all = np.concatenate([idx0, idx1], axis=1).ravel()
            val_all = np.concatenate([gf * (1.0 - ff)[None, :], gf * ff[None, :]], axis=1).ravel()
            vol._accum(np.bincount(idx_all, val_all, minlength=c * d * hw).reshape(c, d, h, w).astype(vol.dtype))
        if pos.requires_grad:
            inside = ((pos.data >= 0.0) & (pos.data <= d - 1.0)).reshape(n)
            gp = ((gf * (v1 - v0)).sum(axis=0) * inside).reshape(dp, h, w)
            pos._accum(gp.astype(pos.dtype))

    return Tensor._from_op(out, (vol, pos), backward, "sample_depth_axis")


# ---- normalization ------------------------------------------------------------


def softmax(x, axis):
    """Numerically stable softmax along one axis."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        x._accum(out * (g - inner))

    return Tensor._from_op(out, (x,), backward, "softmax")


def layer_norm(x, axis, gain, bias, eps=1e-5):
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    gain and bias are 1-D Tensors with the length of the normalized axis.
    Variance is the biased estimate; eps is fixed at 1e-5 by default.
    """
    nax = axis % x.ndim
    nlen = x.shape[nax]
    bshape = [1] * x.ndim
    bshape[nax] = nlen
    gb = gain.data.reshape(bshape)
    bb = bias.data.reshape(bshape)

    mu = x.data.mean(axis=nax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=nax, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = xhat * gb + bb

    def backward(g):
        if gain.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != nax)
            gain._accum((g * xhat).sum(axis=red))
        if bias.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != nax)
            bias._accum(g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gb
            # Standard layer-norm backward with biased variance.
            t1 = dxhat.mean(axis=nax, keepdims=True)
            t2 = (dxhat * xhat).mean(axis=nax, keepdims=True)
            x._accum(ivar * (dxhat - t1 - xhat * t2))

    return Tensor._from_op(out, (x, gain, bias), backward, "layer_norm")


# ---- pooling and resampling ---------------------------------------------------


def avg_pool2d(x):
    """2x average pooling of (C, H, W); H and W must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2d needs even extents, got {x.shape}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        x._accum(np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25)

    return Tensor._from_op(out, (x,), backward, "avg_pool2d")


def avg_pool3d(x):
    """2x average pooling of (C, D, H, W); D, H, W must be even."""
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"avg_pool3d needs even extents, got {x.shape}")
    out = x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(2, 4, 6))

    def backward(g):
        up = np.repeat(np.repeat(np.repeat(g, 2, axis=1), 2, axis=2), 2, axis=3)
        x._accum(up * 0.125)

    return Tensor._from_op(out, (x,), backward, "avg_pool3d")


def upsample_nearest3d(x):
    """2x nearest-neighbor upsampling of (C, D, H, W)."""
    out = np.repeat(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2), 2, axis=3)
    c, d, h, w = x.shape

    def backward(g):
        x._accum(g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)))

    return Tensor._from_op(out, (x,), backward, "upsample_nearest3d")


# Half/full resolution resampling shares one coordinate convention with the
# camera model: a full-resolution coordinate u_f maps to u_h = (u_f + 0.5) / 2
# on the half grid (see geometry.scale_camera). Both directions clamp at the
# border and are differentiable w.r.t. the resampled map.


def _resize_coords(out_h, out_w, scale, offset, dtype):
    ys, xs = np.meshgrid(np.arange(out_h, dtype=dtype), np.arange(out_w, dtype=dtype), indexing="ij")
    return Tensor(np.stack([xs * scale + offset, ys * scale + offset]).astype(dtype))


def downsample_half(x):
    """Resample (C, H, W) to (C, H/2, W/2) on the half-resolution grid."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample_half needs even extents, got {x.shape}")
    coords = _resize_coords(h // 2, w // 2, 2.0, -0.5, x.dtype)
    out, _ = bilinear_sample(x, coords, border="clamp")
    return out


def upsample_double(x):
    """Resample (C, h, w) to (C, 2h, 2w), inverse grid of downsample_half."""
    c, h, w = x.shape
    coords = _resize_coords(2 * h, 2 * w, 0.5, 0.25, x.dtype)
    out, _ = bilinear_sample(x, coords, border="clamp")
    return out
