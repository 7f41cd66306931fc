"""Plane-aligned propagation, fold-back aggregation, U-Net regularization."""

import numpy as np
import pytest

from aeromvs import kernels as K, nca, synth
from aeromvs.autodiff import Tensor
from aeromvs.geometry import Camera, depth_ratio_field, pixel_dirs, scale_camera
from aeromvs.params import ParamStore, grad_check
from support import contrast_spec, equivalence_denominator, identity_fused_volume, nudge_biases


def _cam(h, w, f=50.0):
    k = np.array([[f, 0.0, (w - 1) / 2.0], [0.0, f, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    return Camera(k=k, t=np.eye(4), height=h, width=w, depth_min=1.0, depth_max=100.0)


def _fronto(h, w):
    n = np.zeros((3, h, w))
    n[2] = -1.0
    return n


def _zero_offsets(h, w, dtype=np.float64):
    return nca.OffsetField(values=Tensor(np.zeros((18, h, w), dtype=dtype)), taps=3)


def _shared_axis(d, h, w, base=10.0, step=0.5):
    # Power-of-two step keeps the fractional candidate index exact.
    vals = base + step * np.arange(d, dtype=np.float64)
    return Tensor(np.broadcast_to(vals.reshape(d, 1, 1), (d, h, w)).copy())


# ---- offsets and similarity ----------------------------------------------------


def test_predict_offsets_zero_init_regular_grid():
    store = ParamStore(seed=1)
    weights = nca.offset_weights(store)
    rng = np.random.Generator(np.random.PCG64(0))
    n = rng.standard_normal((3, 10, 12))
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    field = nca.predict_offsets(n, weights)
    assert field.taps == 3
    assert field.values.shape == (18, 10, 12)
    assert np.array_equal(field.values.data, np.zeros((18, 10, 12)))


def test_predict_offsets_constant_normals_constant_offsets():
    store = ParamStore(seed=2)
    weights = nca.offset_weights(store)
    rng = np.random.Generator(np.random.PCG64(3))
    weights.w.data[:] = 0.3 * rng.standard_normal(weights.w.shape)
    n = np.broadcast_to(np.array([0.36, 0.48, -0.8]).reshape(3, 1, 1), (3, 9, 11)).copy()
    field = nca.predict_offsets(n, weights)
    flat = field.values.data.reshape(18, -1)
    assert np.all(flat == flat[:, :1])
    assert np.abs(field.values.data).max() <= 3.0
    with pytest.raises(ValueError):
        nca.predict_offsets(np.zeros((2, 9, 11)), weights)


def test_predict_offsets_gradients():
    store = ParamStore(seed=4)
    weights = nca.offset_weights(store)
    rng = np.random.Generator(np.random.PCG64(5))
    weights.w.data[:] = 0.2 * rng.standard_normal(weights.w.shape)
    weights.b.data[:] = 0.05 * rng.standard_normal(weights.b.shape)
    n = rng.standard_normal((3, 6, 7))
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    probe = rng.standard_normal((18, 6, 7))

    def loss():
        w = nca.offset_weights(store)
        return (nca.predict_offsets(n, w).values * probe).sum()

    report = grad_check(loss, store, max_elements_per_param=5, rtol=1e-4)
    assert report["max_rel_err"] < 1e-4


def test_feature_similarity_basics():
    h, w = 8, 10
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ramp = Tensor(xs[None].copy())
    own = Tensor(np.stack([xs, ys]))
    omega = nca.feature_similarity(ramp, own)
    assert np.array_equal(omega.data, np.ones((h, w)))

    def shifted(s, tau=1.0):
        coords = Tensor(np.stack([np.clip(xs + s, 0, w - 1.0), ys]))
        return nca.feature_similarity(ramp, coords, tau).data[:, : w - 2]

    # ramp features make the sampled distance equal the shift
    assert np.allclose(shifted(0.5), np.exp(-0.125))
    assert np.all(shifted(0.5) > shifted(1.0))
    assert np.all(shifted(1.0, tau=2.0) > shifted(1.0, tau=1.0))
    with pytest.raises(ValueError):
        nca.feature_similarity(ramp, own, tau=0.0)


# ---- propagation ---------------------------------------------------------------


def test_propagate_pure_gather_on_shared_axis():
    h, w, m, d = 12, 14, 2, 8
    cam = _cam(h, w)
    rng = np.random.Generator(np.random.PCG64(7))
    vol = Tensor(rng.standard_normal((m, d, h, w)))
    samples = _shared_axis(d, h, w, base=4.0, step=0.5)
    inter = nca.nca_propagate(vol, samples, _fronto(h, w), _zero_offsets(h, w), None, cam)
    assert inter.shape == (9 * m, d, h, w)
    for t, (dy, dx) in enumerate([(r, c) for r in (-1, 0, 1) for c in (-1, 0, 1)]):
        want = np.zeros_like(vol.data)
        ys0, ys1 = max(dy, 0), h + min(dy, 0)
        xs0, xs1 = max(dx, 0), w + min(dx, 0)
        want[:, :, ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx] = vol.data[:, :, ys0:ys1, xs0:xs1]
        assert np.array_equal(inter.data[t * m : (t + 1) * m], want)


def test_propagate_aligns_to_the_analytic_plane():
    h, w, d = 24, 32, 61
    cam = _cam(h, w)
    n = np.array([0.3, -0.2, -1.0])
    n /= np.linalg.norm(n)
    samples = _shared_axis(d, h, w, base=10.0, step=0.5)
    # candidate values double as the cost, so the lookup returns the aligned depth
    vol = samples.reshape(1, d, h, w)
    normals = np.broadcast_to(n.reshape(3, 1, 1), (3, h, w)).copy()
    inter = nca.nca_propagate(vol, samples, normals, _zero_offsets(h, w), None, cam)

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    axis_vals = samples.data[:, 0, 0]
    checked = 0
    for t, (dy, dx) in enumerate([(r, c) for r in (-1, 0, 1) for c in (-1, 0, 1)]):
        num = (n.reshape(3, 1, 1) * pixel_dirs(cam, xs + dx, ys + dy)).sum(axis=0)
        den = (n.reshape(3, 1, 1) * pixel_dirs(cam, xs, ys)).sum(axis=0)
        expected = axis_vals.reshape(d, 1, 1) * (den / num)[None]
        gate = (expected > 10.5) & (expected < 39.5)
        gate[:, 0, :] = gate[:, -1, :] = gate[:, :, 0] = gate[:, :, -1] = False
        got = inter.data[t]
        assert np.abs(got[gate] - expected[gate]).max() < 1e-6
        checked += int(gate.sum())
    assert checked > 100000


def test_propagate_ratio_matches_the_field_oracle():
    h, w, d = 10, 13, 21
    cam = _cam(h, w, f=30.0)
    rng = np.random.Generator(np.random.PCG64(11))
    normals = rng.standard_normal((3, h, w))
    normals[2] = -np.abs(normals[2]) - 0.5
    normals /= np.linalg.norm(normals, axis=0, keepdims=True)
    samples = _shared_axis(d, h, w, base=8.0, step=0.5)
    vol = samples.reshape(1, d, h, w)
    inter = nca.nca_propagate(vol, samples, normals, _zero_offsets(h, w), None, cam)

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    axis_vals = samples.data[:, 0, 0]
    for t, (dy, dx) in enumerate([(r, c) for r in (-1, 0, 1) for c in (-1, 0, 1)]):
        ratio, _ = depth_ratio_field(normals, cam, xs, ys, xs + dx, ys + dy)
        expected = axis_vals.reshape(d, 1, 1) / ratio[None]
        gate = (expected > 8.5) & (expected < 17.5)
        gate[:, 0, :] = gate[:, -1, :] = gate[:, :, 0] = gate[:, :, -1] = False
        assert np.abs(inter.data[t][gate] - expected[gate]).max() < 1e-9


def test_propagate_modes_place_similarity_differently():
    h, w, d = 10, 12, 16
    cam = _cam(h, w)
    rng = np.random.Generator(np.random.PCG64(13))
    feats = Tensor(rng.standard_normal((4, h, w)))
    samples = _shared_axis(d, h, w, base=10.0, step=0.5)
    vol = samples.reshape(1, d, h, w)
    normals = _fronto(h, w)
    off = _zero_offsets(h, w)
    cw = nca.nca_propagate(vol, samples, normals, off, feats, cam, mode="cost_weighted")
    rs = nca.nca_propagate(vol, samples, normals, off, feats, cam, mode="ratio_scaled")

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    axis_vals = samples.data[:, 0, 0].reshape(d, 1, 1)
    interior = np.zeros((h, w), bool)
    interior[1:-1, 1:-1] = True
    differ = 0.0
    for t, (dy, dx) in enumerate([(r, c) for r in (-1, 0, 1) for c in (-1, 0, 1)]):
        coords = Tensor(np.stack([xs + dx, ys + dy]))
        omega = nca.feature_similarity(feats, coords).data
        want_cw = axis_vals * omega[None]
        want_rs = np.clip(axis_vals / omega[None], 10.0, 10.0 + 0.5 * (d - 1))
        gate = np.broadcast_to(interior[None], (d, h, w))
        assert np.allclose(cw.data[t][gate], want_cw[gate], atol=1e-9)
        assert np.allclose(rs.data[t][gate], want_rs[gate], atol=1e-9)
        differ = max(differ, np.abs(cw.data[t][gate] - rs.data[t][gate]).max())
    assert differ > 1.0


def test_propagate_rejects_bad_input():
    h, w, m, d = 6, 8, 1, 4
    cam = _cam(h, w)
    vol = Tensor(np.zeros((m, d, h, w)))
    samples = _shared_axis(d, h, w)
    good = dict(normals=_fronto(h, w), offsets=_zero_offsets(h, w))
    with pytest.raises(ValueError):
        nca.nca_propagate(vol, samples, good["normals"], good["offsets"], None, cam, mode="fancy")
    with pytest.raises(ValueError):
        nca.nca_propagate(vol, _shared_axis(d, h, w + 1), good["normals"], good["offsets"], None, cam)
    with pytest.raises(ValueError):
        nca.nca_propagate(vol, samples, _fronto(h, w + 1), good["offsets"], None, cam)
    with pytest.raises(ValueError):
        nca.nca_propagate(vol, samples, good["normals"], _zero_offsets(h, w + 1), None, cam)
    with pytest.raises(ValueError):
        nca.nca_propagate(vol, samples, good["normals"], good["offsets"], None, _cam(h, w + 2))
    with pytest.raises(ValueError):
        nca.nca_propagate(Tensor(np.zeros((m, 1, h, w))), _shared_axis(1, h, w), good["normals"], good["offsets"], None, cam)


def test_gca_equals_nca_with_neutral_inputs():
    h, w, m, d = 10, 12, 3, 6
    cam = _cam(h, w)
    rng = np.random.Generator(np.random.PCG64(17))
    vol = Tensor(rng.standard_normal((m, d, h, w)))
    normals = rng.standard_normal((3, h, w))
    normals[2] = -np.abs(normals[2]) - 0.5
    normals /= np.linalg.norm(normals, axis=0, keepdims=True)
    samples = _shared_axis(d, h, w, base=6.0, step=0.5)
    identical = Tensor(np.broadcast_to(np.arange(1.0, 5.0).reshape(4, 1, 1), (4, h, w)).copy())
    for mode in ("ratio_scaled", "cost_weighted"):
        via_gca = nca.gca_propagate(vol, samples, normals, cam, mode=mode)
        via_nca = nca.nca_propagate(vol, samples, normals, _zero_offsets(h, w), identical, cam, mode=mode)
        assert np.array_equal(via_gca.data, via_nca.data)


# ---- aggregation ---------------------------------------------------------------


def test_aggregate_center_tap_delta_returns_volume():
    h, w, m, d = 8, 9, 3, 6
    cam = _cam(h, w)
    rng = np.random.Generator(np.random.PCG64(19))
    vol = Tensor(rng.standard_normal((m, d, h, w)))
    inter = nca.nca_propagate(vol, _shared_axis(d, h, w, 4.0, 0.5), _fronto(h, w), _zero_offsets(h, w), None, cam)
    out = nca.aggregate(inter, nca.tap_mean_weights(m, taps="center"))
    assert np.array_equal(out.data, vol.data)


def test_aggregate_zero_weights_and_shape_errors():
    inter = Tensor(np.ones((18, 4, 5, 6)))
    zero = nca.AggregateWeights(w=Tensor(np.zeros((2, 18, 3, 1, 1))))
    assert np.array_equal(nca.aggregate(inter, zero).data, np.zeros((2, 4, 5, 6)))
    with pytest.raises(ValueError):
        nca.aggregate(inter, nca.AggregateWeights(w=Tensor(np.zeros((2, 18, 3, 3, 1)))))
    with pytest.raises(ValueError):
        nca.aggregate(inter, nca.AggregateWeights(w=Tensor(np.zeros((2, 12, 3, 1, 1)))))
    with pytest.raises(ValueError):
        nca.aggregate(Tensor(np.ones((9, 4, 5, 6))), zero)


def test_aggregate_equals_rearranged_conv3d():
    # With neutral geometry the pair must reproduce a dense KxKxK convolution
    # whose spatial taps were unrolled into the channel blocks.
    h, w, m, mo, d = 6, 7, 3, 4, 8
    cam = _cam(h, w)
    rng = np.random.Generator(np.random.PCG64(23))
    vol = Tensor(rng.standard_normal((m, d, h, w)))
    inter = nca.nca_propagate(vol, _shared_axis(d, h, w, 4.0, 0.5), _fronto(h, w), _zero_offsets(h, w), None, cam)
    dense = rng.standard_normal((mo, m, 3, 3, 3))
    folded = np.zeros((mo, 9 * m, 3, 1, 1))
    for t, (dy, dx) in enumerate([(r, c) for r in (-1, 0, 1) for c in (-1, 0, 1)]):
        folded[:, t * m : (t + 1) * m, :, 0, 0] = dense[:, :, :, 1 + dy, 1 + dx].transpose(0, 1, 2)
    via_pair = nca.aggregate(inter, nca.AggregateWeights(w=Tensor(folded)))
    via_dense = K.conv3d(vol, Tensor(dense), padding=(1, 1, 1))
    assert np.allclose(via_pair.data, via_dense.data, rtol=1e-10, atol=1e-12)


def test_aggregate_mac_parity_with_dense_conv3d():
    for m, extent in ((4, (8, 6, 7)), (16, (48, 24, 32))):
        pair = K.conv3d_mac_count(9 * m, m, (3, 1, 1), extent)
        dense = K.conv3d_mac_count(m, m, (3, 3, 3), extent)
        assert pair == dense
        assert nca.tap_mean_weights(m).w.size == m * m * 27


# ---- regularization and regression ---------------------------------------------


def _small_ctx(h, w, d, with_features=False, seed=29, mode="ratio_scaled"):
    cam = _cam(h, w, f=10.0)
    rng = np.random.Generator(np.random.PCG64(seed))
    feats = Tensor(rng.standard_normal((3, h, w))) if with_features else None
    return nca.NCAContext(
        normals=_fronto(h, w),
        candidates=_shared_axis(d, h, w, base=5.0, step=0.25),
        cam=cam,
        features=feats,
        mode=mode,
    )


def test_regularize_sums_to_one_and_uniform_on_zero():
    h, w, m, d = 8, 10, 2, 8
    rng = np.random.Generator(np.random.PCG64(31))
    vol = Tensor(rng.standard_normal((m, d, h, w)))
    ctx = _small_ctx(h, w, d, with_features=True)

    store = ParamStore(seed=6)
    prob = nca.regularize(vol, ctx, nca.regularizer_weights(store, in_channels=m))
    assert prob.values.shape == (d, h, w)
    assert np.abs(prob.values.data.sum(axis=0) - 1.0).max() < 1e-6
    assert prob.values.data.min() >= 0.0

    zero = ParamStore(seed=7)
    weights = nca.regularizer_weights(zero, in_channels=m)
    for _, p in zero.items():
        p.data[:] = 0.0
    uniform = nca.regularize(vol, ctx, weights)
    assert np.array_equal(uniform.values.data, np.full((d, h, w), 1.0 / d))


def test_regularize_rejects_bad_extents():
    store = ParamStore(seed=8)
    weights = nca.regularizer_weights(store, in_channels=1)
    for shape in ((1, 2, 8, 8), (1, 5, 8, 8), (1, 4, 7, 8), (1, 4, 8, 7)):
        ctx = _small_ctx(shape[2], shape[3], shape[1])
        with pytest.raises(ValueError):
            nca.regularize(Tensor(np.zeros(shape)), ctx, weights)


def test_regularize_gradients():
    # cost_weighted keeps lookup positions pinned to the candidate knots, so
    # central differences never straddle the piecewise-linear seams of the
    # depth interpolation.  The moving-position path is checked separately in
    # test_propagate_position_gradients.
    h, w, m, d = 8, 8, 2, 4
    rng = np.random.Generator(np.random.PCG64(37))
    vol = Tensor(rng.standard_normal((m, d, h, w)))
    ctx = _small_ctx(h, w, d, with_features=True, mode="cost_weighted")
    probe = rng.standard_normal((d, h, w))
    store = ParamStore(seed=9)
    nca.regularizer_weights(store, in_channels=m)
    nudge_biases(store)

    def loss():
        weights = nca.regularizer_weights(store, in_channels=m)
        return (nca.regularize(vol, ctx, weights).values * probe).sum()

    report = grad_check(loss, store, max_elements_per_param=3, rtol=1e-4)
    assert report["max_rel_err"] < 1e-4


def test_propagate_position_gradients():
    # Ratio scaling makes the depth lookup position depend on the offsets and
    # features.  The position field is piecewise linear in the parameters, so
    # the seed is chosen to keep every lookup away from an interpolation knot.
    h, w, d = 6, 6, 6
    cam = _cam(h, w, f=10.0)
    n = np.array([0.25, -0.15, -1.0])
    n /= np.linalg.norm(n)
    normals = np.broadcast_to(n.reshape(3, 1, 1), (3, h, w)).copy()
    samples = Tensor(
        np.broadcast_to((5.0 + 0.5 * np.arange(d)).reshape(d, 1, 1), (d, h, w)).copy()
    )
    rng = np.random.Generator(np.random.PCG64(0))
    vol = Tensor(rng.standard_normal((2, d, h, w)))
    feats = Tensor(rng.standard_normal((3, h, w)))
    probe = rng.standard_normal((18, d, h, w))
    store = ParamStore(seed=100)
    weights = nca.offset_weights(store)
    weights.w.data[:] = 0.2 * rng.standard_normal(weights.w.shape)
    weights.b.data[:] = 0.1 * rng.standard_normal(weights.b.shape)

    def loss():
        weights = nca.offset_weights(store)
        off = nca.predict_offsets(normals, weights)
        inter = nca.nca_propagate(vol, samples, normals, off, feats, cam, mode="ratio_scaled")
        return (inter * probe).sum()

    report = grad_check(loss, store, max_elements_per_param=6, rtol=1e-4)
    assert report["max_rel_err"] < 1e-4


def test_regress_depth_examples():
    flat = nca.regress_depth(
        Tensor(np.array([0.25, 0.5, 0.25]).reshape(3, 1, 1)),
        Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)),
    )
    assert flat.shape == (1, 1, 1)
    assert flat.data[0, 0, 0] == 2.0

    uniform = nca.regress_depth(
        Tensor(np.full((5, 1, 1), 0.2)),
        Tensor(np.arange(8.0, 13.0).reshape(5, 1, 1)),
    )
    assert np.allclose(uniform.data, 10.0, rtol=0, atol=1e-12)

    h, w, d = 4, 5, 6
    rng = np.random.Generator(np.random.PCG64(41))
    cands = np.sort(rng.uniform(2.0, 30.0, (d, h, w)), axis=0)
    hot = np.zeros((d, h, w))
    pick = rng.integers(0, d, (h, w))
    hot[pick, np.arange(h)[:, None], np.arange(w)[None, :]] = 1.0
    exact = nca.regress_depth(Tensor(hot), Tensor(cands))
    assert np.array_equal(exact.data[0], np.take_along_axis(cands, pick[None], axis=0)[0])

    p = rng.uniform(0.1, 1.0, (d, h, w))
    p /= p.sum(axis=0, keepdims=True)
    mid = nca.regress_depth(Tensor(p), Tensor(cands))
    assert np.all(mid.data[0] >= cands.min(axis=0)) and np.all(mid.data[0] <= cands.max(axis=0))
    with pytest.raises(ValueError):
        nca.regress_depth(Tensor(p), Tensor(cands[:-1]))


# ---- refinement ----------------------------------------------------------------


def test_ndr_zero_init_is_bilinear_upsample():
    store = ParamStore(seed=10)
    weights = nca.refine_weights(store)
    rng = np.random.Generator(np.random.PCG64(43))
    depth = Tensor(rng.uniform(12.0, 28.0, (1, 6, 8)))
    normals = rng.standard_normal((3, 12, 16))
    normals[2] = -np.abs(normals[2]) - 0.5
    normals /= np.linalg.norm(normals, axis=0, keepdims=True)
    out = nca.ndr_refine(depth, normals, weights, (10.0, 30.0), margin=0.5)
    assert np.array_equal(out.data, K.upsample_double(depth).data)


def test_ndr_constant_inputs_constant_output():
    store = ParamStore(seed=11)
    weights = nca.refine_weights(store)
    rng = np.random.Generator(np.random.PCG64(47))
    weights.j2.data[:] = 0.1 * rng.standard_normal(weights.j2.shape)
    depth = Tensor(np.full((1, 5, 6), 17.0))
    normals = np.broadcast_to(np.array([0.6, 0.0, -0.8]).reshape(3, 1, 1), (3, 10, 12)).copy()
    out = nca.ndr_refine(depth, normals, weights, (10.0, 30.0))
    assert np.ptp(out.data) == 0.0


def test_ndr_bounds_and_normal_response():
    store = ParamStore(seed=12)
    weights = nca.refine_weights(store)
    rng = np.random.Generator(np.random.PCG64(53))
    weights.j2.data[:] = rng.standard_normal(weights.j2.shape)
    weights.j2_b.data[:] = 0.2
    depth = Tensor(rng.uniform(10.5, 29.5, (1, 6, 8)))
    tilt = rng.standard_normal((3, 12, 16))
    tilt[2] = -np.abs(tilt[2]) - 0.5
    tilt /= np.linalg.norm(tilt, axis=0, keepdims=True)
    margin = 0.25
    out = nca.ndr_refine(depth, tilt, weights, (10.0, 30.0), margin=margin)
    assert out.data.min() >= 10.0 - margin and out.data.max() <= 30.0 + margin
    assert np.abs(out.data - K.upsample_double(depth).data).max() > 1e-3
    flipped = nca.ndr_refine(depth, _fronto(12, 16), weights, (10.0, 30.0), margin=margin)
    assert not np.array_equal(out.data, flipped.data)
    with pytest.raises(ValueError):
        nca.ndr_refine(depth, tilt, weights, (30.0, 10.0))


def test_ndr_gradients():
    rng = np.random.Generator(np.random.PCG64(59))
    depth = Tensor(rng.uniform(5.2, 9.8, (1, 4, 5)))
    normals = rng.standard_normal((3, 8, 10))
    normals[2] = -np.abs(normals[2]) - 0.5
    normals /= np.linalg.norm(normals, axis=0, keepdims=True)
    probe = rng.standard_normal((1, 8, 10))
    store = ParamStore(seed=13)
    nca.refine_weights(store)
    nudge_biases(store)

    def loss():
        weights = nca.refine_weights(store)
        out = nca.ndr_refine(depth, normals, weights, (5.0, 10.0), margin=1.0)
        return (out * probe).sum()

    report = grad_check(loss, store, max_elements_per_param=4, rtol=1e-4)
    assert report["max_rel_err"] < 1e-4


# ---- oracle agreement through the neutral path ---------------------------------


def test_probability_argmax_matches_oracle():
    scene = synth.generate_scene(contrast_spec(), seed=21)
    lo, _, _, hi = scene.depth_range
    num = 48
    interval = (hi - lo) / (num - 1)
    fused, cands = identity_fused_volume(scene, num)
    cam = scale_camera(scene.cameras[0], 0.5)
    h2, w2 = cam.height, cam.width

    mean_cost = Tensor(fused.values.data.mean(axis=0, keepdims=True))
    mask_vol = Tensor(fused.valid.astype(np.float64)[None])
    normals = _fronto(h2, w2)
    off = _zero_offsets(h2, w2)
    uniform = nca.tap_mean_weights(1)
    agg = nca.aggregate(nca.nca_propagate(mean_cost, cands, normals, off, None, cam), uniform)
    cnt = nca.aggregate(nca.nca_propagate(mask_vol, cands, normals, off, None, cam), uniform)
    usable = (cnt.data[0] > 0) & fused.valid
    logits = np.where(usable, agg.data[0] / np.maximum(cnt.data[0], 1e-20), -1e9)

    prob = nca.ProbabilityVolume(values=K.softmax(Tensor(logits), axis=0))
    assert np.abs(prob.values.data.sum(axis=0) - 1.0).max() < 1e-6
    est = lo + prob.values.data.argmax(axis=0) * interval

    oracle = synth.brute_force_depth(scene)
    sel, (fy, fx) = equivalence_denominator(scene, oracle, interval)
    assert sel.sum() > 150
    agree = (np.abs(est - oracle.depth[fy, fx])[sel] <= interval + 1e-9).mean()
    assert agree >= 0.95
