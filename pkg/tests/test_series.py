import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gross.btd import BlockTermDecomposition, DecomposeOptions, reconstruct
from gross.nn import conv2d_grouped
from gross.series import (
    ConvMeta,
    GroSSLayer,
    SeriesError,
    assemble,
    bottleneck_from_btd,
    build_series,
    decompose_at,
    dense_equivalent,
    power_of_two_sizes,
    psi_adjoint,
    psi_expand,
    snap,
    snapped,
    validate_sizes,
)
from conftest import rel_err

OPTS = DecomposeOptions(tol=1e-7, max_steps=300, starts=2, probe_steps=10)


def random_btd(rng, t, u, v, w, R, tp, up):
    return BlockTermDecomposition(
        rng.standard_normal((R, tp, up, v, w)), rng.standard_normal((R, t, tp)),
        rng.standard_normal((R, u, up)), (t, u, v, w),
    )


# --- psi -------------------------------------------------------------------

def test_psi_identity_when_sizes_match(rng):
    w = rng.standard_normal((2, 8, 3, 3))
    assert psi_expand(w, 2, 2) is w


def test_psi_depthwise_block_structure():
    a, b, c, d = (np.full((1, 1), k) for k in (1.0, 2.0, 3.0, 4.0))
    w = np.concatenate([a, b, c, d], axis=1)[:, :, None, None].reshape(1, 4, 1, 1)
    out = psi_expand(w, 1, 2)
    assert out.shape == (2, 4, 1, 1)
    np.testing.assert_array_equal(out[:, 0:2, 0, 0], [[1, 0], [0, 2]])
    np.testing.assert_array_equal(out[:, 2:4, 0, 0], [[3, 0], [0, 4]])


@pytest.mark.parametrize("g,h", [(1, 2), (2, 4), (1, 4), (1, 8), (4, 8)])
@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_psi_computes_identical_function(g, h, stride, padding):
    rng = np.random.default_rng(g * 100 + h * 10 + stride + padding)
    c_in, c_out = 8, 16
    w = rng.standard_normal((g, c_out, 3, 3))
    x = rng.standard_normal((2, c_in, 7, 7))
    y_g = conv2d_grouped(x, w, c_in // g, stride, padding)
    y_h = conv2d_grouped(x, psi_expand(w, g, h, c_in), c_in // h, stride, padding)
    assert rel_err(y_h, y_g) < 1e-12


def test_psi_composition_exact(rng):
    w = rng.standard_normal((1, 16, 3, 3))
    np.testing.assert_array_equal(psi_expand(psi_expand(w, 1, 2), 2, 8), psi_expand(w, 1, 8))


@settings(max_examples=30, deadline=None)
@given(
    a=st.floats(-4, 4, allow_nan=False),
    b=st.floats(-4, 4, allow_nan=False),
    seed=st.integers(0, 2**16),
    gh=st.sampled_from([(1, 2), (2, 4), (1, 4), (2, 8)]),
)
def test_psi_linearity_exact(a, b, seed, gh):
    g, h = gh
    rng = np.random.default_rng(seed)
    w1, w2 = rng.standard_normal((2, g, 8, 1, 1))
    lhs = psi_expand(a * w1 + b * w2, g, h)
    rhs = a * psi_expand(w1, g, h) + b * psi_expand(w2, g, h)
    np.testing.assert_array_equal(lhs, rhs)


@pytest.mark.parametrize("g,h,c_in", [(1, 2, 8), (2, 8, 8), (1, 4, 4), (2, 4, 16)])
def test_psi_adjoint_inner_product(g, h, c_in, rng):
    c_out = 16
    w = rng.standard_normal((g, c_out, 3, 3))
    z = rng.standard_normal((h, c_out, 3, 3))
    lhs = np.sum(psi_expand(w, g, h, c_in) * z)
    rhs = np.sum(w * psi_adjoint(z, g, h, c_in))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_psi_rejects_bad_sizes(rng):
    w = rng.standard_normal((2, 8, 3, 3))
    with pytest.raises(SeriesError):
        psi_expand(w, 2, 3)
    with pytest.raises(SeriesError):
        psi_expand(w, 4, 8)
    with pytest.raises(SeriesError):
        psi_expand(w, 2, 16)
    with pytest.raises(SeriesError):
        psi_adjoint(w, 1, 4)


# --- bottleneck layout -----------------------------------------------------

def test_bottleneck_layout_example(rng):
    meta = ConvMeta(32, 32, (3, 3), stride=1, padding=1, width_in=32, width_out=32)
    assert meta.groups(16) == 2
    bn = bottleneck_from_btd(random_btd(rng, 32, 32, 3, 3, 2, 16, 16), meta, np.arange(32.0))
    assert bn.P.shape == (32, 32, 1, 1)
    assert bn.R.shape == (16, 32, 3, 3) and bn.groups == 2
    assert bn.Q.shape == (32, 32, 1, 1)
    np.testing.assert_array_equal(bn.bias, np.arange(32.0))


def test_bottleneck_stride_goes_to_grouped_conv(rng):
    meta = ConvMeta(8, 8, (3, 3), stride=2, padding=1, width_in=8)
    bn = bottleneck_from_btd(random_btd(rng, 8, 8, 3, 3, 4, 2, 2), meta)
    assert (bn.stride, bn.padding) == (2, 1)
    y = bn.forward(rng.standard_normal((1, 8, 9, 9)))
    assert y.shape == (1, 8, 5, 5)


@pytest.mark.parametrize("case", range(12))
def test_bottleneck_equals_dense_conv(case):
    rng = np.random.default_rng(case)
    stride, padding = [(1, 1), (2, 1), (1, 0), (2, 0)][case % 4]
    t, u, width = 6, 10, 8
    R = [1, 2, 4, 8][case % 4]
    meta = ConvMeta(t, u, (3, 3), stride, padding, has_bias=case % 2 == 0, width_in=width, width_out=width)
    d = random_btd(rng, t, u, 3, 3, R, width // R, width // R)
    bias = rng.standard_normal(u) if meta.has_bias else None
    bn = bottleneck_from_btd(d, meta, bias)
    x = rng.standard_normal((2, t, 9, 9))
    ref = conv2d_grouped(x, reconstruct(d), 1, stride, padding, bias)
    assert rel_err(bn.forward(x), ref) < 1e-10
    np.testing.assert_allclose(dense_equivalent(bn, meta), reconstruct(d), rtol=1e-12, atol=1e-12)


def test_bottleneck_width_mismatch(rng):
    meta = ConvMeta(8, 8, (3, 3), width_in=8)
    with pytest.raises(SeriesError):
        bottleneck_from_btd(random_btd(rng, 8, 8, 3, 3, 2, 2, 2), meta)


# --- group-size sets --------------------------------------------------------

def test_power_of_two_sizes():
    assert power_of_two_sizes(ConvMeta(64, 64, width_in=64)) == (1, 2, 4, 8, 16, 32, 64)
    assert power_of_two_sizes(ConvMeta(32, 32, width_in=32)) == (1, 2, 4, 8, 16, 32)
    # unequal widths: 16 -> 8 admits only sizes giving at most 8 groups
    assert power_of_two_sizes(ConvMeta(16, 8, width_in=16, width_out=8)) == (2, 4, 8, 16)


def test_validate_sizes():
    meta = ConvMeta(16, 16, width_in=16)
    assert validate_sizes(meta, [1, 4, 16]) == (1, 4, 16)
    for bad in ([], [3], [4, 2], [2, 4, 6], [4, 4]):
        with pytest.raises(SeriesError):
            validate_sizes(meta, bad)


def test_meta_validation():
    with pytest.raises(SeriesError):
        ConvMeta(0, 4)
    with pytest.raises(SeriesError):
        ConvMeta(4, 4, stride=0)
    m = ConvMeta(8, 4, width_in=8, width_out=4)
    assert (m.rank(4).t_prime, m.rank(4).u_prime) == (4, 2) and m.groups(4) == 2


# --- series ------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_layer():
    meta = ConvMeta(8, 7, (3, 3), stride=1, padding=1, width_in=8, width_out=4)
    rng = np.random.default_rng(11)
    weight = rng.standard_normal(meta.weight_shape)
    bias = rng.standard_normal(7)
    return weight, meta, build_series(weight, meta, (2, 4, 8), OPTS, bias), bias


def test_snap_grid_is_exact():
    q = 2.0 ** -40
    x = snap(np.array([0.1, -0.3, 1.7]), q)
    assert np.all(x / q == np.round(x / q))
    np.testing.assert_array_equal(snap(x, q), x)


def test_telescoping_is_bit_exact(small_layer):
    weight, meta, layer, bias = small_layer
    for s in layer.sizes:
        d, _ = decompose_at(weight, meta, s, OPTS)
        direct = snapped(bottleneck_from_btd(d, meta, bias), layer.quanta)
        got = assemble(layer, s)
        for k in "PRQ":
            assert getattr(got, k).tobytes() == getattr(direct, k).tobytes(), (s, k)
        assert got.groups == meta.groups(s)


def test_snapping_barely_moves_the_bottleneck(small_layer):
    weight, meta, layer, bias = small_layer
    d, _ = decompose_at(weight, meta, 4, OPTS)
    raw = bottleneck_from_btd(d, meta, bias)
    got = assemble(layer, 4)
    for k in "PRQ":
        assert rel_err(getattr(got, k), getattr(raw, k)) < 1e-14


def test_assemble_base_and_errors(small_layer):
    _, _, layer, _ = small_layer
    base = assemble(layer, 2)
    assert base.R is layer.R_parts[0] and base.P is layer.P_parts[0]
    with pytest.raises(SeriesError):
        assemble(layer, 1)
    assert layer.errors[-1] < layer.errors[0]


def test_assemble_then_expand_is_linear(small_layer):
    _, meta, layer, _ = small_layer
    # assemble at s_i then expand to s_N == first i terms summed at s_N
    for i, s in enumerate(layer.sizes):
        lhs = psi_expand(assemble(layer, s).R, s, 8, meta.width_in)
        rhs = psi_expand(layer.R_parts[0], layer.sizes[0], 8, meta.width_in)
        for j in range(1, i + 1):
            rhs = rhs + psi_expand(layer.R_parts[j], layer.sizes[j], 8, meta.width_in)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-15)


def test_full_size_bottleneck_reproduces_weight(small_layer):
    weight, meta, layer, bias = small_layer
    bn = assemble(layer, 8)
    x = np.random.default_rng(0).standard_normal((2, 8, 6, 6))
    ref = conv2d_grouped(x, dense_equivalent(bn, meta), 1, 1, 1, bias)
    assert rel_err(bn.forward(x), ref) < 1e-12
    # one term of rank (8, 4) is a rank-4 approximation along the output side
    assert 0 < layer.errors[-1] < layer.errors[0] < 1


def test_single_size_series(rng):
    meta = ConvMeta(4, 4, (3, 3), width_in=4)
    w = rng.standard_normal(meta.weight_shape)
    layer = build_series(w, meta, (2,), OPTS)
    assert layer.deltas == []
    assert assemble(layer, 2).R is layer.R_parts[0]


def test_series_shape_checks(rng):
    meta = ConvMeta(4, 4, (3, 3), width_in=4)
    with pytest.raises(SeriesError):
        build_series(rng.standard_normal((4, 4, 1, 1)), meta, (2,), OPTS)
    with pytest.raises(SeriesError):
        GroSSLayer(meta, (1, 2), [np.zeros((4, 4, 1, 1))], [np.zeros((1, 4, 3, 3))], [np.zeros((4, 4, 1, 1))])
