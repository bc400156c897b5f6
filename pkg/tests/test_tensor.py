import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from oracles import rel_err
from sdnet import tensor as T
from sdnet.tensor import ConvDescriptor, ShapeError


def test_conv2d_ones_center_and_corner():
    y = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1)
    assert y[0, 0, 1, 1] == 9.0
    assert y[0, 0, 0, 0] == 4.0


def test_conv2d_delta_is_identity(rng):
    x = rng.normal(size=(2, 3, 7, 5))
    w = np.zeros((3, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(x, w, padding=1, groups=3), x)


def test_conv2d_grouped_vs_scalar_oracle(rng):
    x = rng.normal(size=(2, 8, 17, 13))
    w = rng.normal(size=(8, 2, 3, 3))
    b = rng.normal(size=8)
    got = T.conv2d(x, w, b, padding=1, groups=4)
    assert np.abs(got - oracles.conv2d(x, w, b, pad=1, groups=4)).max() <= 1e-6


def test_naive_matches_scalar_oracle(rng):
    x = rng.normal(size=(1, 4, 9, 8))
    w = rng.normal(size=(6, 2, 3, 2))
    got = T.conv2d_naive(x, w, None, stride=2, padding=1, dilation=2, groups=2)
    assert np.abs(got - oracles.conv2d(x, w, stride=2, pad=1, dil=2, groups=2)).max() <= 1e-12


@st.composite
def conv_cases(draw):
    groups = draw(st.sampled_from([1, 2, 3]))
    cin = groups * draw(st.integers(1, 2))
    cout = groups * draw(st.integers(1, 2))
    k = draw(st.sampled_from([1, 2, 3, 5]))
    stride = draw(st.integers(1, 3))
    dil = draw(st.integers(1, 2))
    pad = draw(st.integers(0, 2))
    h = draw(st.integers(dil * (k - 1) + 1, 11))
    w = draw(st.integers(dil * (k - 1) + 1, 11))
    seed = draw(st.integers(0, 2 ** 31))
    return groups, cin, cout, k, stride, dil, pad, h, w, seed


@settings(max_examples=100, deadline=None)
@given(conv_cases())
def test_conv2d_matches_naive_randomized(case):
    groups, cin, cout, k, stride, dil, pad, h, w, seed = case
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, cin, h, w))
    wt = r.normal(size=(cout, cin // groups, k, k))
    b = r.normal(size=cout)
    desc = ConvDescriptor(stride=stride, padding=pad, dilation=dil, groups=groups)
    assert np.abs(T.conv2d(x, wt, b, desc) - T.conv2d_naive(x, wt, b, desc)).max() <= 1e-6


def test_conv2d_replicate_padding_matches_explicit_pad(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    got = T.conv2d(x, w, padding=1, pad_mode="replicate")
    want = T.conv2d(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge"), w)
    np.testing.assert_allclose(got, want, atol=1e-12)
    np.testing.assert_allclose(T.conv2d_naive(x, w, padding=1, pad_mode="replicate"), want, atol=1e-12)


def test_conv2d_linearity(rng):
    x, y = rng.normal(size=(2, 1, 3, 9, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    lhs = T.conv2d(2.5 * x - 0.7 * y, w, padding=1)
    rhs = 2.5 * T.conv2d(x, w, padding=1) - 0.7 * T.conv2d(y, w, padding=1)
    assert rel_err(lhs, rhs) <= 1e-5


def test_conv2d_errors_name_the_axis(rng):
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d(rng.normal(size=(1, 3, 5, 5)), rng.normal(size=(2, 2, 3, 3)))
    with pytest.raises(ShapeError, match="group"):
        T.conv2d(rng.normal(size=(1, 4, 5, 5)), rng.normal(size=(3, 2, 3, 3)), groups=2)
    with pytest.raises(ShapeError):
        ConvDescriptor(stride=0)
    with pytest.raises(ShapeError):
        ConvDescriptor(dilation=(1, 0))


def test_conv2d_f32_within_tolerance_of_f64(rng):
    x = rng.normal(size=(1, 4, 10, 10))
    w = rng.normal(size=(4, 4, 3, 3))
    got = T.conv2d(x.astype(np.float32), w.astype(np.float32), padding=1)
    assert got.dtype == np.float32
    assert rel_err(got, T.conv2d_naive(x, w, padding=1)) <= 1e-5


# --------------------------------------------------------------------------- plane conv


def test_plane_conv_static_clip_temporal_difference_is_zero(rng):
    frame = rng.normal(size=(1, 2, 1, 5, 6))
    clip = np.repeat(frame, 8, axis=2)
    w = np.zeros((2, 1, 3, 1, 3))
    w[:, 0, 0, 0, 1] = -1.0
    w[:, 0, 2, 0, 1] = 1.0
    y = T.conv_plane3d(clip, w, None, T.default_plane_desc((1, 0, 1), groups=2), "wt")
    assert np.abs(y).max() == 0.0


@pytest.mark.parametrize("plane", ["wt", "ht"])
def test_plane_conv_kt1_is_per_frame_2d(rng, plane):
    clip = rng.normal(size=(2, 3, 4, 5, 6))
    if plane == "wt":
        w = rng.normal(size=(2, 3, 1, 1, 3))
        pad = (0, 0, 1)
    else:
        w = rng.normal(size=(2, 3, 1, 3, 1))
        pad = (0, 1, 0)
    y = T.conv_plane3d(clip, w, None, T.default_plane_desc(pad), plane)
    for t in range(4):
        frame = T.conv2d(clip[:, :, t], w[:, :, 0], padding=pad[1:])
        np.testing.assert_allclose(y[:, :, t], frame, atol=1e-12)


@pytest.mark.parametrize("plane", ["wt", "ht"])
def test_plane_conv_matches_3d_loop(rng, plane):
    clip = rng.normal(size=(1, 2, 8, 6, 6))
    shape = (3, 2, 3, 1, 3) if plane == "wt" else (3, 2, 3, 3, 1)
    pad = (1, 0, 1) if plane == "wt" else (1, 1, 0)
    w = rng.normal(size=shape)
    b = rng.normal(size=3)
    y = T.conv_plane3d(clip, w, b, T.default_plane_desc(pad), plane)
    want = oracles.conv3d(clip, w, pad) + b.reshape(1, -1, 1, 1, 1)
    assert np.abs(y - want).max() <= 1e-6
    assert np.abs(T.conv3d_naive(clip, w, b, T.default_plane_desc(pad)) - want).max() <= 1e-6


def test_plane_conv_rejects_wrong_extents(rng):
    clip = rng.normal(size=(1, 1, 4, 4, 4))
    with pytest.raises(ShapeError, match="WT"):
        T.conv_plane3d(clip, rng.normal(size=(1, 1, 3, 3, 1)), None, T.default_plane_desc(), "wt")
    with pytest.raises(ShapeError, match="plane"):
        T.conv_plane3d(clip, rng.normal(size=(1, 1, 3, 1, 3)), None, T.default_plane_desc(), "hw")


def test_wt_plane_is_equivariant_to_h_permutation(rng):
    clip = rng.normal(size=(1, 2, 5, 6, 7))
    w = rng.normal(size=(2, 2, 3, 1, 3))
    desc = T.default_plane_desc((1, 0, 1))
    perm = rng.permutation(6)
    y = T.conv_plane3d(clip, w, None, desc, "wt")
    yp = T.conv_plane3d(clip[:, :, :, perm], w, None, desc, "wt")
    np.testing.assert_allclose(yp, y[:, :, :, perm], atol=1e-12)


# --------------------------------------------------------------------------- padding


def test_pad_replicate_and_zero():
    np.testing.assert_array_equal(T.pad(np.array([1.0, 2, 3]), [2], "replicate"), [1, 1, 1, 2, 3, 3, 3])
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.pad(x, [0, 0], "zero"), x)
    c = np.full((3, 4), 2.5)
    np.testing.assert_array_equal(T.pad(c, [(1, 2), (3, 0)], "replicate"), np.full((6, 7), 2.5))


def test_pad_inner_region_is_bit_identical(rng):
    x = rng.normal(size=(2, 3, 4))
    y = T.pad(x, [(1, 2), (0, 3)], ("replicate", "zero"))
    np.testing.assert_array_equal(y[:, 1:4, 0:4], x)
    with pytest.raises(ShapeError):
        T.pad(x, [(-1, 0)])


def test_pad_backward_is_adjoint(rng):
    x = rng.normal(size=(2, 5, 4))
    amounts, modes = [(2, 1), (1, 3)], ("replicate", "zero")
    y = T.pad(x, amounts, modes)
    g = rng.normal(size=y.shape)
    assert np.isclose((y * g).sum(), (x * T.pad_backward(g, amounts, modes)).sum())


# --------------------------------------------------------------------------- resampling


def test_bilinear_constant_and_single_pixel():
    np.testing.assert_allclose(T.bilinear_upsample(np.full((1, 1, 3, 4), 5.0), 7, 9), 5.0)
    np.testing.assert_array_equal(T.bilinear_upsample(np.full((1, 1, 1, 1), 2.0), 4, 3), np.full((1, 1, 4, 3), 2.0))


@pytest.mark.parametrize("src,dst", [((4, 4), (8, 8)), ((5, 3), (11, 7)), ((8, 6), (3, 4))])
def test_bilinear_matches_scalar_oracle(rng, src, dst):
    x = rng.normal(size=src)
    got = T.bilinear_upsample(x[None, None], *dst)[0, 0]
    np.testing.assert_allclose(got, oracles.bilinear(x, *dst), atol=1e-12)


def test_bilinear_ramp_round_trip_interior():
    # half-pixel sampling clamps at the border, so the round trip is exact away from it
    ramp = np.add.outer(np.arange(4.0), 2 * np.arange(4.0))[None, None]
    back = T.avg_pool2d(T.bilinear_upsample(ramp, 8, 8), 2)
    np.testing.assert_allclose(back[..., 1:3, 1:3], ramp[..., 1:3, 1:3], atol=1e-6)
    up = T.bilinear_upsample(ramp, 8, 8)[0, 0]
    inner = up[1:7, 1:7]
    # still linear: constant second differences along both axes
    assert np.abs(np.diff(inner, 2, axis=0)).max() <= 1e-12
    assert np.abs(np.diff(inner, 2, axis=1)).max() <= 1e-12


def test_bilinear_backward_is_adjoint(rng):
    x = rng.normal(size=(1, 2, 3, 5))
    g = rng.normal(size=(1, 2, 7, 4))
    lhs = (T.bilinear_upsample(x, 7, 4) * g).sum()
    rhs = (x * T.bilinear_upsample_backward(g, 3, 5)).sum()
    assert np.isclose(lhs, rhs)


def test_bilinear_agrees_with_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.normal(size=(1, 2, 5, 7))
    want = torch.nn.functional.interpolate(torch.from_numpy(x), size=(12, 9), mode="bilinear",
                                           align_corners=False).numpy()
    np.testing.assert_allclose(T.bilinear_upsample(x, 12, 9), want, atol=1e-12)


# --------------------------------------------------------------------------- pointwise


def test_pointwise_ops():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert T.sigmoid(np.array([0.0]))[0] == 0.5
    s = T.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0
    a, b = np.ones((1, 2, 3, 3)), np.zeros((1, 3, 3, 3))
    cat = T.concat_channels([a, b])
    assert cat.shape == (1, 5, 3, 3)
    assert cat[:, :2].min() == 1 and cat[:, 2:].max() == 0
    with pytest.raises(ShapeError):
        T.add(a, b)
    with pytest.raises(ShapeError):
        T.concat_channels([a, np.zeros((1, 1, 4, 3))])
