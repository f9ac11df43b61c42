"""Central finite-difference checks for the hand-written backward passes.

Relative error of an analytic gradient ``a`` against a numeric one ``n`` is
``max|a - n| / max(max|a|, max|n|, floor)``; the floor keeps blocks whose true
gradient is (near) zero from dividing round-off by zero.
"""

from __future__ import annotations

import numpy as np

from evspseg import losses
from evspseg.sparse_ops import (
    Downsample,
    KernelSpec,
    Layer,
    Linear,
    ReLU,
    SubmanifoldConv,
    TokenSelfAttention,
    Upsample,
)
from evspseg.voxel import Geometry, SparseGrid

H = 1e-4
FLOOR = 1e-6
TOLERANCE = 1e-5


def rel_error(analytic, numeric, floor=FLOOR):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if not a.size:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def numeric_grad(f, x, h=H, index=None, signature=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    With ``signature`` (a callable returning the current kink state after
    ``f()``), entries whose perturbation changes that state come back as NaN.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(len(idx) if index is not None else flat.size)
    base = None
    if signature is not None:
        f()
        base = signature()
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        smooth = base is None or signature() == base
        flat[i] = old - h
        fm = f()
        smooth = smooth and (base is None or signature() == base)
        flat[i] = old
        out[j] = (fp - fm) / (2 * h) if smooth else np.nan
    return out


def rel_error_smooth(analytic, numeric, floor=FLOOR):
    """:func:`rel_error` restricted to entries where ``numeric`` is defined."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    return rel_error(a[keep], n[keep], floor)


def random_grid(rng, n_active=30, channels=4, dims=(6, 6, 6), voxel_size=(1, 1, 1000)):
    total = int(np.prod(dims))
    flat = np.sort(rng.choice(total, size=min(n_active, total), replace=False))
    nx, ny, nt = dims
    coords = np.column_stack([flat // (ny * nt), (flat // nt) % ny, flat % nt])
    geom = Geometry(coords, dims, voxel_size)
    return SparseGrid(geom, rng.normal(size=(len(coords), channels)))


def check_layer(layer, grid, rng, h=H, call=None):
    """Max relative error of the input cotangent and of every parameter gradient.

    The objective is ``sum(R * output)`` for a fixed random ``R``.
    """
    call = call or (lambda g: layer.forward(g))
    x = grid.features.copy()
    out = call(grid.with_features(x))
    proj = rng.normal(size=out.features.shape)

    def objective():
        return float((call(grid.with_features(x)).features * proj).sum())

    for p in layer.parameters():
        p.zero_grad()
    call(grid.with_features(x))
    dx = layer.backward(proj)
    sig = lambda: kink_signature(layer)
    errors = {"input": rel_error_smooth(dx, numeric_grad(objective, x, h, signature=sig))}
    analytic = {p.name: p.grads.copy() for p in layer.parameters()}
    for p in layer.parameters():
        errors[p.name] = rel_error_smooth(analytic[p.name],
                                          numeric_grad(objective, p.values, h, signature=sig))
    return errors


def iter_layers(obj, seen=None):
    seen = seen if seen is not None else set()
    if id(obj) in seen:
        return
    seen.add(id(obj))
    if isinstance(obj, Layer):
        yield obj
        for v in vars(obj).values():
            items = v if isinstance(v, (list, tuple)) else [v]
            for it in items:
                if isinstance(it, Layer):
                    yield from iter_layers(it, seen)


def kink_signature(model):
    """Bytes identifying which side of every ReLU / max-pool decision each unit is on."""
    parts = []
    for layer in iter_layers(model):
        if isinstance(layer, ReLU) and layer._mask is not None:
            parts.append(np.packbits(layer._mask).tobytes())
        elif isinstance(layer, Downsample) and layer._ctx is not None and layer._ctx[2] is not None:
            parts.append(layer._ctx[2].tobytes())
        elif type(layer).__name__ == "SparseSE" and layer._ctx is not None:
            parts.append(np.packbits(layer._ctx[1] > 0).tobytes())
    return b"".join(parts)


def model_gradcheck(model, grid, targets, loss="stc", stc=losses.STCConfig(), samples=3,
                    rng=None, h=H):
    """Per-parameter-block max relative error on ``samples`` random entries each.

    Entries whose +/-h perturbation flips a ReLU or max-pool decision are
    resampled, since finite differences are not valid across a kink.
    """
    rng = rng or np.random.default_rng(0)
    model.zero_grad()
    z = model.forward_logits(grid)
    base_sig = kink_signature(model)
    fixed = None
    if loss == "stc" and stc.detach_weights:
        fixed = losses.stc_weights(grid, losses.sigmoid(z), stc)

    def objective():
        return losses.objective(grid, model.forward_logits(grid), targets, loss, stc, fixed)[0]

    _, dz = losses.objective(grid, z, targets, loss, stc, fixed)
    model.backward(dz)
    errors = {}
    for p in model.parameters():
        analytic = p.grads.reshape(-1).copy()
        flat = p.values.reshape(-1)
        picked, numeric = [], []
        for i in rng.permutation(flat.size):
            if len(picked) == min(samples, flat.size):
                break
            old = flat[i]
            ok = True
            vals = []
            for step in (h, -h):
                flat[i] = old + step
                vals.append(objective())
                ok &= kink_signature(model) == base_sig
            flat[i] = old
            if ok:
                picked.append(i)
                numeric.append((vals[0] - vals[1]) / (2 * h))
        errors[p.name] = rel_error(analytic[picked], numeric) if picked else 0.0
    model.zero_grad()
    return errors


def op_suite(rng=None):
    """Relative errors for each parameterized primitive on small random instances."""
    from evspseg.segnet import GDSCAConfig, GDSCBlock, PatchAttention, SparseSE

    rng = rng or np.random.default_rng(1234)
    results = {}

    def record(tag, errs):
        results[tag] = max(errs.values())

    g4 = random_grid(rng, 40, 4)
    record("conv", check_layer(SubmanifoldConv("c", KernelSpec(4, 6, dilation=1), rng), g4, rng))
    record("conv_grouped_dilated",
           check_layer(SubmanifoldConv("c", KernelSpec(4, 4, dilation=2, groups=2), rng), g4, rng))
    record("linear", check_layer(Linear("l", 4, 3, rng), g4, rng))

    down = Downsample("d", (2, 2, 2), 4, 5, rng)
    record("downsample", check_layer(down, g4, rng))

    up = Upsample("u", 5, 4, rng)
    parent = down.forward(g4)
    parent = parent.with_features(rng.normal(size=parent.features.shape))
    record("upsample", check_layer(up, parent, rng, call=lambda g: up.forward(g, g4)))

    attn = TokenSelfAttention("a", 4, rng)
    tok = SparseGrid(Geometry(np.column_stack([np.arange(7), np.zeros(7), np.zeros(7)]), (7, 1, 1),
                              (1, 1, 1)), rng.normal(size=(7, 4)))
    attn_layer = _ArrayLayer(attn)
    record("attention", check_layer(attn_layer, tok, rng))

    g8 = random_grid(rng, 45, 8)
    record("sp_se", check_layer(SparseSE("se", 8, 2, rng), g8, rng))
    record("patch_attention", check_layer(PatchAttention("pa", 8, (3, 3, 3), rng), g8, rng))
    record("gdsc_block", check_layer(GDSCBlock("g", GDSCAConfig(8, 2, (1, 2), patch_size=(3, 3, 3)), rng),
                                     g8, rng))

    g1 = random_grid(rng, 40, 1)
    p = rng.uniform(0.05, 0.95, len(g1))
    y = (rng.uniform(size=len(g1)) < 0.4).astype(np.uint8)
    for tag, cfg in (("stc_loss", losses.STCConfig()),
                     ("stc_loss_full_grad", losses.STCConfig(detach_weights=False)),
                     ("stc_loss_with_center", losses.STCConfig(exclude_center=False, detach_weights=False))):
        w_fixed = losses.stc_weights(g1, p, cfg)
        _, grad = losses.stc_objective_conf(g1, p, y, cfg)
        if cfg.detach_weights:
            f = lambda: losses.stc_loss(p, y, w_fixed, cfg.gamma)
        else:
            f = lambda cfg=cfg: losses.stc_objective_conf(g1, p, y, cfg)[0]
        results[tag] = rel_error(grad, numeric_grad(f, p))
    z = rng.normal(size=len(g1))
    for tag in ("bce", "stc"):
        _, dz = losses.objective(g1, z, y, tag)
        if tag == "stc":
            w_fixed = losses.stc_weights(g1, losses.sigmoid(z), losses.STCConfig())
            f = lambda: losses.stc_loss(losses.sigmoid(z), y, w_fixed, 2.0)
        else:
            f = lambda: losses.bce_loss(losses.sigmoid(z), y)
        results[f"{tag}_logits"] = rel_error(dz, numeric_grad(f, z))
    return results


class _ArrayLayer(Layer):
    """Adapts an array-level layer (forward_array/backward_array) to the grid protocol."""

    def __init__(self, inner):
        self.inner = inner

    def children(self):
        return [self.inner]

    def forward(self, grid):
        return grid.with_features(self.inner.forward_array(grid.features))

    def backward(self, grad):
        return self.inner.backward_array(grad)
