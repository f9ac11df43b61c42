"""Differentiable primitives over sparse grids.

Every layer follows the same protocol: ``forward(grid)`` returns a new grid
and caches what the backward pass needs, ``backward(grad)`` takes the
cotangent of the output features, accumulates (``+=``) parameter gradients
into ``LayerParams.grads`` and returns the cotangent of the input features.
Only the fixed op set used by the segmentation network is supported.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from evspseg.voxel import Geometry, SparseGrid


class ShapeError(ValueError):
    """Parameter or channel shapes disagree with a layer's contract."""


class LayerParams:
    """Named parameter block with a gradient accumulator of the same shape."""

    def __init__(self, name, values):
        self.name = name
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grads = np.zeros_like(self.values)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self.grads[...] = 0.0

    def __repr__(self):
        return f"LayerParams({self.name!r}, shape={self.shape})"


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class; subclasses list their own params and child layers."""

    def own_params(self):
        return []

    def children(self):
        return []

    def parameters(self):
        out = list(self.own_params())
        for child in self.children():
            out.extend(child.parameters())
        return out


# --- submanifold convolution ------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    in_channels: int
    out_channels: int
    kernel_size: tuple = (3, 3, 3)
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if any(k % 2 == 0 or k < 1 for k in self.kernel_size):
            raise ShapeError(f"kernel sizes must be odd, got {self.kernel_size}")
        if self.dilation < 1:
            raise ShapeError("dilation must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(f"groups={self.groups} must divide {self.in_channels} and {self.out_channels}")

    @property
    def weight_shape(self):
        g = self.groups
        return (g, self.out_channels // g, self.in_channels // g, *self.kernel_size)

    @property
    def fan_in(self):
        return self.in_channels // self.groups * int(np.prod(self.kernel_size))

    def taps(self):
        """Yield ``((a, b, c), offset)`` for every kernel tap, offsets scaled by dilation."""
        half = [(k - 1) // 2 for k in self.kernel_size]
        for a, b, c in itertools.product(*(range(k) for k in self.kernel_size)):
            off = ((a - half[0]) * self.dilation, (b - half[1]) * self.dilation,
                   (c - half[2]) * self.dilation)
            yield (a, b, c), off


def _check_conv(grid, spec, params):
    if grid.channels != spec.in_channels:
        raise ShapeError(f"grid has {grid.channels} channels, kernel expects {spec.in_channels}")
    if params.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {params.shape} != {spec.weight_shape}")


def submanifold_conv(grid, spec, params):
    """Convolution evaluated only at active sites; inactive neighbours contribute zero."""
    _check_conv(grid, spec, params)
    x = grid.features
    n = len(x)
    g = spec.groups
    ci, co = spec.in_channels // g, spec.out_channels // g
    out = np.zeros((n, spec.out_channels))
    w = params.values
    for (a, b, c), off in spec.taps():
        out_rows, in_rows = grid.geometry.neighbor_pairs(off)
        if not len(out_rows):
            continue
        wk = w[:, :, :, a, b, c]
        xs = x[in_rows]
        if g == 1:
            out[out_rows] += xs @ wk[0].T
        else:
            xs = xs.reshape(-1, g, ci).transpose(1, 0, 2)
            out[out_rows] += np.matmul(xs, wk.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(-1, g * co)
    return grid.with_features(out)


def conv_backward(grid_in, spec, params, cotangent_out):
    """Input cotangent of :func:`submanifold_conv`; weight gradient accumulates into ``params.grads``."""
    _check_conv(grid_in, spec, params)
    x = grid_in.features
    dy = np.asarray(cotangent_out, dtype=np.float64)
    g = spec.groups
    ci, co = spec.in_channels // g, spec.out_channels // g
    dx = np.zeros_like(x)
    w = params.values
    for (a, b, c), off in spec.taps():
        out_rows, in_rows = grid_in.geometry.neighbor_pairs(off)
        if not len(out_rows):
            continue
        wk = w[:, :, :, a, b, c]
        dys = dy[out_rows]
        xs = x[in_rows]
        if g == 1:
            dx[in_rows] += dys @ wk[0]
            params.grads[0, :, :, a, b, c] += dys.T @ xs
        else:
            dys = dys.reshape(-1, g, co).transpose(1, 0, 2)
            xs = xs.reshape(-1, g, ci).transpose(1, 0, 2)
            dx[in_rows] += np.matmul(dys, wk).transpose(1, 0, 2).reshape(-1, g * ci)
            params.grads[:, :, :, a, b, c] += np.matmul(dys.transpose(0, 2, 1), xs)
    return dx


class SubmanifoldConv(Layer):
    def __init__(self, name, spec, rng):
        self.spec = spec
        self.weight = LayerParams(f"{name}.weight", uniform_init(rng, spec.weight_shape, spec.fan_in))
        self._grid = None

    def own_params(self):
        return [self.weight]

    def forward(self, grid):
        self._grid = grid
        return submanifold_conv(grid, self.spec, self.weight)

    def backward(self, grad):
        return conv_backward(self._grid, self.spec, self.weight, grad)


# --- pointwise layers ----------------------------------------------------------

class Linear(Layer):
    """Per-voxel affine map ``x @ W + b``."""

    def __init__(self, name, cin, cout, rng, bias=True, zero=False):
        shape = (cin, cout)
        w = np.zeros(shape) if zero else uniform_init(rng, shape, cin)
        self.weight = LayerParams(f"{name}.weight", w)
        self.bias = LayerParams(f"{name}.bias", np.zeros(cout)) if bias else None
        self._x = None

    def own_params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def apply(self, x):
        y = x @ self.weight.values
        if self.bias is not None:
            y = y + self.bias.values
        return y

    def forward_array(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear expects {self.weight.shape[0]} channels, got {x.shape[-1]}")
        self._x = x
        return self.apply(x)

    def backward_array(self, dy):
        self.weight.grads += self._x.T @ dy
        if self.bias is not None:
            self.bias.grads += dy.sum(axis=0)
        return dy @ self.weight.values.T

    def forward(self, grid):
        return grid.with_features(self.forward_array(grid.features))

    def backward(self, grad):
        return self.backward_array(grad)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, grid):
        self._mask = grid.features > 0
        return grid.with_features(np.where(self._mask, grid.features, 0.0))

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --- segment reductions ---------------------------------------------------------

def membership_matrix(seg, nseg, weights=None):
    """CSR matrix ``M`` with ``M[seg[i], i] = weights[i]`` (1 by default)."""
    n = len(seg)
    data = np.ones(n) if weights is None else weights
    return sp.csr_matrix((data, (seg, np.arange(n))), shape=(nseg, n))


def _downsample_geometry(geom, stride):
    key = ("down", stride)
    hit = geom.cache.get(key)
    if hit is None:
        stride_a = np.array(stride, dtype=np.int64)
        dims = tuple(-(-d // s) for d, s in zip(geom.dims, stride))
        vsize = tuple(v * s for v, s in zip(geom.voxel_size, stride))
        parent, inverse = Geometry.from_coords(geom.coords // stride_a, dims, vsize, geom.t_base)
        order = np.argsort(inverse, kind="stable")
        starts = np.flatnonzero(np.r_[True, np.diff(inverse[order]) != 0]) if len(order) else order
        hit = (parent, inverse, order, starts)
        geom.cache[key] = hit
    return hit


def strided_downsample_geometry(grid, stride):
    """Parent geometry and child→parent row map for ``stride``."""
    parent, inverse, _, _ = _downsample_geometry(grid.geometry, tuple(int(s) for s in stride))
    return parent, inverse


class Downsample(Layer):
    """Max-pool children into ``floor(key / stride)`` parents, then a linear map."""

    def __init__(self, name, stride, cin, cout, rng):
        if any(int(s) < 1 for s in stride):
            raise ShapeError(f"stride must be >= 1, got {stride}")
        self.stride = tuple(int(s) for s in stride)
        self.linear = Linear(name, cin, cout, rng)
        self._ctx = None

    def children(self):
        return [self.linear]

    def forward(self, grid):
        parent, inverse, order, starts = _downsample_geometry(grid.geometry, self.stride)
        x = grid.features
        if not len(x):
            self._ctx = (x.shape, order, None)
            return SparseGrid(parent, self.linear.forward_array(np.zeros((0, x.shape[1]))))
        xs = x[order]
        pooled = np.maximum.reduceat(xs, starts, axis=0)
        seg_sorted = inverse[order]
        cand = np.where(xs == pooled[seg_sorted], np.arange(len(xs))[:, None], len(xs))
        first = np.minimum.reduceat(cand, starts, axis=0)
        self._ctx = (x.shape, order, first)
        return SparseGrid(parent, self.linear.forward_array(pooled))

    def backward(self, grad):
        shape, order, first = self._ctx
        dpooled = self.linear.backward_array(grad)
        dx = np.zeros(shape)
        if first is None:
            return dx
        dxs = np.zeros(shape)
        dxs[first, np.arange(shape[1])[None, :]] = dpooled
        dx[order] = dxs
        return dx


def strided_downsample(grid, stride, params):
    """Functional form: ``params`` is a :class:`Linear` (or ``(W, b)`` pair)."""
    layer = Downsample("down", stride, grid.channels, grid.channels, np.random.default_rng(0))
    _load_linear(layer.linear, params)
    return layer.forward(grid)


def _parent_rows(parent_geom, child_geom):
    stride = tuple(p // c for p, c in zip(parent_geom.voxel_size, child_geom.voxel_size))
    hit = child_geom.cache.get(("down", stride))
    if hit is not None and hit[0] is parent_geom:
        return hit[1]
    key = ("up", id(parent_geom))
    cached = child_geom.cache.get(key)
    if cached is not None and cached[0] is parent_geom:
        return cached[1]
    rows = parent_geom.lookup(child_geom.coords // np.array(stride, dtype=np.int64))
    if (rows < 0).any():
        raise RuntimeError("child voxel without parent; template does not match parent grid")
    child_geom.cache[key] = (parent_geom, rows)
    return rows


class Upsample(Layer):
    """Each child voxel receives a linear map of its parent's feature."""

    def __init__(self, name, cin, cout, rng):
        self.linear = Linear(name, cin, cout, rng)
        self._ctx = None

    def children(self):
        return [self.linear]

    def forward(self, parent_grid, child_template):
        rows = _parent_rows(parent_grid.geometry, child_template.geometry)
        y = self.linear.forward_array(parent_grid.features)
        self._ctx = (rows, len(parent_grid))
        return SparseGrid(child_template.geometry, y[rows])

    def backward(self, grad):
        rows, npar = self._ctx
        dy = membership_matrix(rows, npar) @ grad if len(rows) else np.zeros((npar, grad.shape[1]))
        return self.linear.backward_array(np.asarray(dy))


def upsample_to(parent_grid, child_template, params):
    layer = Upsample("up", parent_grid.channels, parent_grid.channels, np.random.default_rng(0))
    _load_linear(layer.linear, params)
    return layer.forward(parent_grid, child_template)


def _load_linear(linear, params):
    if isinstance(params, Linear):
        linear.weight, linear.bias = params.weight, params.bias
    else:
        w, b = params
        linear.weight = LayerParams(linear.weight.name, w)
        linear.bias = LayerParams(linear.bias.name, b)


# --- attention ---------------------------------------------------------------------

_ATTN_CHUNK_ELEMS = 1 << 22


class TokenSelfAttention(Layer):
    """Single-head scaled dot-product self-attention with output projection and residual.

    ``y = x + softmax(q kᵀ / √C) v Wo`` with ``q = x Wq``, ``k = x Wk``, ``v = x Wv``.
    Large token sets are processed in query chunks to bound memory.
    """

    def __init__(self, name, channels, rng):
        c = channels
        self.channels = c
        self.wq = LayerParams(f"{name}.wq", uniform_init(rng, (c, c), c))
        self.wk = LayerParams(f"{name}.wk", uniform_init(rng, (c, c), c))
        self.wv = LayerParams(f"{name}.wv", uniform_init(rng, (c, c), c))
        self.wo = LayerParams(f"{name}.wo", uniform_init(rng, (c, c), c))
        self._ctx = None

    def own_params(self):
        return [self.wq, self.wk, self.wv, self.wo]

    def _chunks(self, t):
        step = max(1, _ATTN_CHUNK_ELEMS // max(t, 1))
        return [slice(i, min(i + step, t)) for i in range(0, t, step)]

    @staticmethod
    def _softmax_rows(s):
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    def forward_array(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or (len(x) and x.shape[1] != self.channels):
            raise ShapeError(f"tokens must be (T, {self.channels})")
        t = len(x)
        if t == 0:
            self._ctx = None
            return x.copy()
        scale = 1.0 / np.sqrt(self.channels)
        q, k, v = x @ self.wq.values, x @ self.wk.values, x @ self.wv.values
        o = np.empty_like(x)
        for sl in self._chunks(t):
            a = self._softmax_rows((q[sl] @ k.T) * scale)
            o[sl] = a @ v
        self._ctx = (x, q, k, v, o)
        return x + o @ self.wo.values

    def backward_array(self, dy):
        if self._ctx is None:
            return np.zeros_like(dy)
        x, q, k, v, o = self._ctx
        scale = 1.0 / np.sqrt(self.channels)
        self.wo.grads += o.T @ dy
        do = dy @ self.wo.values.T
        dq = np.empty_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        for sl in self._chunks(len(x)):
            a = self._softmax_rows((q[sl] @ k.T) * scale)
            dv += a.T @ do[sl]
            da = do[sl] @ v.T
            ds = a * (da - (da * a).sum(axis=1, keepdims=True))
            dq[sl] = (ds @ k) * scale
            dk += (ds.T @ q[sl]) * scale
        self.wq.grads += x.T @ dq
        self.wk.grads += x.T @ dk
        self.wv.grads += x.T @ dv
        return dy + dq @ self.wq.values.T + dk @ self.wk.values.T + dv @ self.wv.values.T


def token_self_attention(tokens, params):
    """Functional attention over ``(T, C)`` tokens with ``params = {'wq','wk','wv','wo'}`` matrices."""
    tokens = np.asarray(tokens, dtype=np.float64)
    c = tokens.shape[1] if tokens.ndim == 2 and tokens.shape[1] else len(params["wq"])
    layer = TokenSelfAttention("attn", c, np.random.default_rng(0))
    for name in ("wq", "wk", "wv", "wo"):
        getattr(layer, name).values = np.asarray(params[name], dtype=np.float64)
    return layer.forward_array(tokens.reshape(-1, c))
