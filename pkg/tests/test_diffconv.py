import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from sdnet import tensor as T
from sdnet.diffconv import (PdcKind, kernel_extent, pair_table, pdc_direct, pdc_direct_backward,
                            pdc_to_standard_kernel, pdc_to_standard_kernel_adjoint)
from sdnet.tensor import ConvDescriptor, ShapeError

KINDS = ["cpdc", "apdc", "rpdc"]


def test_cpdc_table():
    t = pair_table("cpdc")
    assert len(t) == 9
    first = t.entries[0]
    assert (first.a, first.b, first.weight_index) == ((-1, -1), (0, 0), 0)
    assert all(e.b == (0, 0) for e in t)


def test_apdc_table_is_one_clockwise_cycle():
    t = pair_table("apdc")
    assert len(t) == 8
    starts = [e.a for e in t]
    ends = [e.b for e in t]
    assert ends == starts[1:] + starts[:1]
    assert len(set(starts)) == 8 and (0, 0) not in starts
    # clockwise on screen coordinates (row down, col right): top-left -> top -> top-right
    assert starts[:3] == [(-1, -1), (-1, 0), (-1, 1)]
    assert 4 not in {e.weight_index for e in t}


def test_rpdc_table():
    t = pair_table("rpdc")
    assert t.target == 5 and len(t) == 8
    entry = next(e for e in t if e.b == (0, 1))
    assert entry.a == (0, 2)
    assert entry.weight_index == 5


@pytest.mark.parametrize("kind", KINDS)
def test_table_invariants(kind):
    t = pair_table(kind)
    half = t.target // 2
    k = np.zeros((t.target, t.target))
    for e in t:
        assert e.weight_index < 9
        for off in (e.a, e.b):
            assert max(abs(off[0]), abs(off[1])) <= half
        k[e.a[0] + half, e.a[1] + half] += 1
        k[e.b[0] + half, e.b[1] + half] -= 1
    assert k.sum() == 0


def test_table_errors():
    with pytest.raises(ValueError):
        pair_table("conv")
    with pytest.raises(ShapeError):
        pair_table("cpdc", grid=5)
    with pytest.raises(ValueError):
        pdc_to_standard_kernel(np.ones((3, 3)), PdcKind.STANDARD)


def test_cpdc_ones_kernel():
    k = pdc_to_standard_kernel(np.ones((3, 3)), "cpdc")
    want = np.ones((3, 3))
    want[1, 1] = -8
    np.testing.assert_array_equal(k, want)


def test_cpdc_center_delta_gives_zero_kernel():
    w = np.zeros((3, 3))
    w[1, 1] = 1.0
    np.testing.assert_array_equal(pdc_to_standard_kernel(w, "cpdc"), np.zeros((3, 3)))


def test_rpdc_ones_kernel():
    k = pdc_to_standard_kernel(np.ones((3, 3)), "rpdc")
    want = np.zeros((5, 5))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if (dy, dx) != (0, 0):
                want[2 + 2 * dy, 2 + 2 * dx] = 1
                want[2 + dy, 2 + dx] = -1
    np.testing.assert_array_equal(k, want)
    assert k[2, 2] == 0 and kernel_extent("rpdc") == 5


@pytest.mark.parametrize("kind", KINDS)
def test_transformed_kernels_are_high_pass(rng, kind):
    w = rng.normal(size=(6, 4, 3, 3))
    k = pdc_to_standard_kernel(w, kind)
    assert np.abs(k.sum(axis=(-1, -2))).max() <= 1e-12
    k32 = pdc_to_standard_kernel(w.astype(np.float32), kind)
    assert np.abs(k32.sum(axis=(-1, -2))).max() <= 1e-6
    assert np.abs(w.sum(axis=(-1, -2))).min() > 1e-6  # a plain kernel generically passes DC


@pytest.mark.parametrize("kind", KINDS)
def test_transform_adjoint(rng, kind):
    w = rng.normal(size=(2, 3, 3, 3))
    g = rng.normal(size=(2, 3) + (kernel_extent(kind),) * 2)
    assert np.isclose((pdc_to_standard_kernel(w, kind) * g).sum(), (w * pdc_to_standard_kernel_adjoint(g, kind)).sum())


@pytest.mark.parametrize("kind", KINDS)
def test_constant_input_gives_bias(rng, kind):
    x = np.full((2, 3, 9, 9), 7.0)
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    pad = 0  # padding would break constancy at the border
    y = pdc_direct(x, w, b, kind, padding=pad)
    assert np.abs(y - b.reshape(1, -1, 1, 1)).max() <= 1e-7


def test_cpdc_ones_on_ramp_interior_is_zero():
    x = np.tile(np.arange(9.0), (9, 1))[None, None]
    y = pdc_direct(x, np.ones((1, 1, 3, 3)), None, "cpdc")
    assert np.abs(y).max() == 0.0


@pytest.mark.parametrize("kind", KINDS)
def test_direct_matches_literal_pair_sum(rng, kind):
    x = rng.normal(size=(1, 4, 9, 8))
    w = rng.normal(size=(4, 2, 3, 3))
    got = pdc_direct(x, w, None, kind, stride=2, padding=2, dilation=1, groups=2)
    want = oracles.pdc(x, w, kind, stride=2, pad=2, dil=1, groups=2)
    assert np.abs(got - want).max() <= 1e-12
    got = pdc_direct(x, w, None, kind, padding=2 * (kernel_extent(kind) // 2), dilation=2, groups=2)
    want = oracles.pdc(x, w, kind, pad=2 * (kernel_extent(kind) // 2), dil=2, groups=2)
    assert np.abs(got - want).max() <= 1e-12


@st.composite
def pdc_cases(draw):
    kind = draw(st.sampled_from(KINDS))
    groups = draw(st.sampled_from([1, 2, 4]))
    cin = groups * draw(st.integers(1, 2))
    cout = groups * draw(st.integers(1, 2))
    stride = draw(st.integers(1, 2))
    dil = draw(st.integers(1, 2))
    pad = draw(st.integers(0, 4))
    k = kernel_extent(kind)
    h = draw(st.integers(max(dil * (k - 1) + 1 - 2 * pad, 1), 12))
    w = draw(st.integers(max(dil * (k - 1) + 1 - 2 * pad, 1), 12))
    return kind, groups, cin, cout, stride, dil, pad, h, w, draw(st.integers(0, 2 ** 31))


@settings(max_examples=200, deadline=None)
@given(pdc_cases())
def test_direct_equals_transformed_conv(case):
    kind, groups, cin, cout, stride, dil, pad, h, w, seed = case
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, cin, h, w))
    wt = r.normal(size=(cout, cin // groups, 3, 3))
    b = r.normal(size=cout)
    desc = ConvDescriptor(stride=stride, padding=pad, dilation=dil, groups=groups)
    direct = pdc_direct(x, wt, b, kind, desc)
    via_conv = T.conv2d(x, pdc_to_standard_kernel(wt, kind), b, desc)
    assert np.abs(direct - via_conv).max() <= 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_direct_backward_is_adjoint(rng, kind):
    x = rng.normal(size=(1, 4, 8, 7))
    w = rng.normal(size=(2, 2, 3, 3))
    desc = ConvDescriptor(stride=2, padding=2, groups=2)
    y = pdc_direct(x, w, None, kind, desc)
    g = rng.normal(size=y.shape)
    gx, gw, gb = pdc_direct_backward(x, w, kind, g, desc)
    # the map is bilinear: <g, y> = <gx, x> = <gw, w>
    assert np.isclose((g * y).sum(), (gx * x).sum())
    assert np.isclose((g * y).sum(), (gw * w).sum())
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))
