import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evspseg.gradcheck import check_layer, random_grid
from evspseg.sparse_ops import (
    Downsample,
    KernelSpec,
    LayerParams,
    Linear,
    ShapeError,
    SubmanifoldConv,
    TokenSelfAttention,
    Upsample,
    conv_backward,
    strided_downsample,
    submanifold_conv,
    token_self_attention,
    upsample_to,
)
from evspseg.voxel import Geometry, SparseGrid


def grid_at(coords, features, dims=(6, 6, 6)):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    geom, inv = Geometry.from_coords(coords, dims, (1, 1, 1))
    feats = np.zeros((len(geom), np.shape(features)[1]))
    feats[inv] = features
    return SparseGrid(geom, feats)


def dense_conv_oracle(grid, weight, dilation):
    """Zero-padded dense cross-correlation, read back at the active sites."""
    g, co, ci, kx, ky, kt = weight.shape
    pad = dilation * (max(kx, ky, kt) // 2)
    dense = np.zeros(tuple(d + 2 * pad for d in grid.dims) + (g * ci,))
    c = grid.coords + pad
    dense[c[:, 0], c[:, 1], c[:, 2]] = grid.features
    out = np.zeros((len(grid), g * co))
    for row, (x, y, t) in enumerate(c):
        for a, b, k in itertools.product(range(kx), range(ky), range(kt)):
            v = dense[x + (a - kx // 2) * dilation, y + (b - ky // 2) * dilation,
                      t + (k - kt // 2) * dilation]
            for gi in range(g):
                out[row, gi * co:(gi + 1) * co] += weight[gi, :, :, a, b, k] @ v[gi * ci:(gi + 1) * ci]
    return out


def identity_kernel(c):
    w = np.zeros((1, c, c, 3, 3, 3))
    w[0, :, :, 1, 1, 1] = np.eye(c)
    return LayerParams("w", w)


def test_identity_kernel(rng):
    g = random_grid(rng, 25, 3)
    out = submanifold_conv(g, KernelSpec(3, 3), identity_kernel(3))
    np.testing.assert_array_equal(out.features, g.features)


def test_isolated_voxel_sees_only_itself():
    g = grid_at([(2, 2, 2)], [[1.7]])
    w = LayerParams("w", np.ones((1, 1, 1, 3, 3, 3)))
    out = submanifold_conv(g, KernelSpec(1, 1), w)
    np.testing.assert_array_equal(out.features, [[1.7]])


@pytest.mark.parametrize("n_active, groups, dilation", [(20, 1, 1), (216, 1, 1), (60, 2, 2), (216, 3, 1)])
def test_matches_dense_convolution(rng, n_active, groups, dilation):
    spec = KernelSpec(6, 6, dilation=dilation, groups=groups)
    g = random_grid(rng, n_active, 6)
    w = LayerParams("w", rng.normal(size=spec.weight_shape))
    out = submanifold_conv(g, spec, w)
    np.testing.assert_allclose(out.features, dense_conv_oracle(g, w.values, dilation), atol=1e-6, rtol=0)
    assert out.key_set() == g.key_set()


def test_grouped_conv_equals_slice_convs(rng):
    spec = KernelSpec(6, 4, groups=2)
    g = random_grid(rng, 50, 6)
    w = rng.normal(size=spec.weight_shape)
    out = submanifold_conv(g, spec, LayerParams("w", w))
    parts = []
    for i in range(2):
        sub = g.with_features(g.features[:, 3 * i:3 * i + 3])
        parts.append(submanifold_conv(sub, KernelSpec(3, 2), LayerParams("w", w[i:i + 1])).features)
    np.testing.assert_allclose(out.features, np.concatenate(parts, axis=1), atol=1e-12)


def test_shape_mismatch(rng):
    g = random_grid(rng, 10, 3)
    with pytest.raises(ShapeError):
        submanifold_conv(g, KernelSpec(4, 4), LayerParams("w", np.zeros(KernelSpec(4, 4).weight_shape)))


def test_backward_zero_and_identity(rng):
    g = random_grid(rng, 30, 3)
    spec = KernelSpec(3, 3)
    p = identity_kernel(3)
    dx = conv_backward(g, spec, p, np.zeros((len(g), 3)))
    np.testing.assert_array_equal(dx, 0)
    np.testing.assert_array_equal(p.grads, 0)
    c = rng.normal(size=(len(g), 3))
    np.testing.assert_array_equal(conv_backward(g, spec, identity_kernel(3), c), c)


def test_backward_is_adjoint(rng):
    """<conv(x), c> == <x, conv_backward(c)> for every grid and kernel."""
    spec = KernelSpec(4, 5, dilation=2)
    g = random_grid(rng, 60, 4)
    w = LayerParams("w", rng.normal(size=spec.weight_shape))
    c = rng.normal(size=(len(g), 5))
    lhs = (submanifold_conv(g, spec, w).features * c).sum()
    rhs = (g.features * conv_backward(g, spec, w, c)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("spec", [KernelSpec(3, 4), KernelSpec(4, 4, dilation=3, groups=2)])
def test_conv_finite_differences(rng, spec):
    errs = check_layer(SubmanifoldConv("c", spec, rng), random_grid(rng, 40, spec.in_channels), rng)
    assert max(errs.values()) < 1e-5


# --- down / up ----------------------------------------------------------------

def identity_linear(c):
    return (np.eye(c), np.zeros(c))


def test_downsample_floor_division():
    g = grid_at([(5, 7, 3), (4, 6, 2)], [[1.0], [3.0]], dims=(8, 8, 8))
    out = strided_downsample(g, (2, 2, 2), identity_linear(1))
    assert out.key_set() == {(2, 3, 1)}
    np.testing.assert_array_equal(out.features, [[3.0]])
    assert out.dims == (4, 4, 4)


def test_downsample_ceil_dims(rng):
    g = random_grid(rng, 10, 2, dims=(7, 5, 9))
    assert strided_downsample(g, (2, 2, 4), identity_linear(2)).dims == (4, 3, 3)


def test_unit_stride_is_identity(rng):
    g = random_grid(rng, 30, 3)
    out = strided_downsample(g, (1, 1, 1), identity_linear(3))
    np.testing.assert_array_equal(out.coords, g.coords)
    np.testing.assert_array_equal(out.features, g.features)


def test_single_child_pool(rng):
    g = grid_at([(3, 3, 3)], [[1.0, -2.0]])
    w, b = rng.normal(size=(2, 3)), rng.normal(size=3)
    out = strided_downsample(g, (2, 2, 2), (w, b))
    np.testing.assert_allclose(out.features[0], np.array([1.0, -2.0]) @ w + b)


def test_downsample_matches_parent_lookup_oracle(rng):
    g = random_grid(rng, 80, 3, dims=(9, 7, 11))
    out = strided_downsample(g, (2, 3, 4), identity_linear(3))
    groups = {}
    for c, f in zip(g.coords.tolist(), g.features):
        groups.setdefault((c[0] // 2, c[1] // 3, c[2] // 4), []).append(f)
    assert out.key_set() == set(groups)
    for key, feat in out.to_dict().items():
        np.testing.assert_array_equal(feat, np.max(groups[key], axis=0))


def test_upsample_broadcast_and_inverse(rng):
    g = grid_at([(0, 0, 0), (1, 1, 1), (4, 4, 4)], np.zeros((3, 2)))
    parent = strided_downsample(g, (2, 2, 2), identity_linear(2))
    parent = parent.with_features(np.array([[1.0, 2.0], [3.0, 4.0]]))
    back = upsample_to(parent, g, identity_linear(2))
    assert back.key_set() == g.key_set()
    np.testing.assert_array_equal(back.features, [[1, 2], [1, 2], [3, 4]])


def test_upsample_matches_map_inversion(rng):
    g = random_grid(rng, 70, 2, dims=(8, 8, 8))
    parent = strided_downsample(g, (2, 2, 4), identity_linear(2))
    parent = parent.with_features(rng.normal(size=parent.features.shape))
    back = upsample_to(parent, g, identity_linear(2))
    pmap = parent.to_dict()
    for c, f in zip(g.coords.tolist(), back.features):
        np.testing.assert_array_equal(f, pmap[(c[0] // 2, c[1] // 2, c[2] // 4)])


def test_down_up_finite_differences(rng):
    g = random_grid(rng, 40, 3)
    down = Downsample("d", (2, 2, 2), 3, 4, rng)
    assert max(check_layer(down, g, rng).values()) < 1e-5
    up = Upsample("u", 4, 3, rng)
    parent = down.forward(g)
    parent = parent.with_features(rng.normal(size=parent.features.shape))
    errs = check_layer(up, parent, rng, call=lambda p: up.forward(p, g))
    assert max(errs.values()) < 1e-5


# --- attention ----------------------------------------------------------------

def direct_attention(x, wq, wk, wv, wo):
    out = np.empty_like(x)
    for i in range(len(x)):
        scores = np.array([(x[i] @ wq) @ (x[j] @ wk) for j in range(len(x))]) / np.sqrt(x.shape[1])
        a = np.exp(scores - scores.max())
        a /= a.sum()
        out[i] = x[i] + sum(a[j] * (x[j] @ wv) for j in range(len(x))) @ wo
    return out


def attn_params(rng, c):
    return {k: rng.normal(size=(c, c)) for k in ("wq", "wk", "wv", "wo")}


def test_attention_direct_formula(rng):
    p = attn_params(rng, 5)
    x = rng.normal(size=(3, 5))
    np.testing.assert_allclose(token_self_attention(x, p), direct_attention(x, **p), atol=1e-6, rtol=0)


def test_attention_single_token(rng):
    p = attn_params(rng, 4)
    x = rng.normal(size=(1, 4))
    np.testing.assert_allclose(token_self_attention(x, p), x + x @ p["wv"] @ p["wo"], atol=1e-12)


def test_attention_empty():
    p = {k: np.eye(3) for k in ("wq", "wk", "wv", "wo")}
    assert token_self_attention(np.zeros((0, 3)), p).shape == (0, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10**6))
def test_attention_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    p = attn_params(rng, 3)
    x = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    np.testing.assert_allclose(token_self_attention(x[perm], p), token_self_attention(x, p)[perm],
                               atol=1e-10)


def test_attention_chunking_is_exact(rng, monkeypatch):
    from evspseg import sparse_ops
    layer = TokenSelfAttention("a", 3, rng)
    x = rng.normal(size=(37, 3))
    full = layer.forward_array(x)
    g = rng.normal(size=x.shape)
    dx_full = layer.backward_array(g)
    monkeypatch.setattr(sparse_ops, "_ATTN_CHUNK_ELEMS", 37 * 5)
    assert len(layer._chunks(37)) == 8
    np.testing.assert_allclose(layer.forward_array(x), full, atol=1e-13)
    np.testing.assert_allclose(layer.backward_array(g), dx_full, atol=1e-12)


def test_linear_finite_differences(rng):
    assert max(check_layer(Linear("l", 3, 2, rng), random_grid(rng, 20, 3), rng).values()) < 1e-5
