"""U-shaped sparse segmentation network built from GDSCA modules.

A GDSCA module runs a grouped dilated sparse convolution (channel groups, one
dilation rate each), fuses the groups with a sparse squeeze-and-excitation
block, then lets spatiotemporal patches exchange information through
self-attention. The network stacks these in a symmetric encoder/decoder and
emits one confidence per active voxel of the input grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from evspseg import config as cfgio
from evspseg.sparse_ops import (
    Downsample,
    KernelSpec,
    Layer,
    Linear,
    ReLU,
    ShapeError,
    SubmanifoldConv,
    TokenSelfAttention,
    Upsample,
    _downsample_geometry,
    membership_matrix,
    sigmoid,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EVUAVCK1"
CHECKPOINT_VERSION = 1

TABLE4_BRANCHES = (1, 2, 3, 4, 5)
TABLE5_DILATIONS = ((1, 2, 3, 4), (1, 2, 3, 5), (1, 3, 5, 7), (1, 3, 5, 9))


@dataclass(frozen=True)
class GDSCAConfig:
    channels: int
    branches: int = 4
    dilation_rates: Tuple[int, ...] = (1, 2, 3, 4)
    se_reduction: int = 4
    patch_size: Tuple[int, ...] = (8, 8, 64)
    use_gdsc: bool = True
    use_pa: bool = True

    def __post_init__(self):
        if len(self.dilation_rates) != self.branches:
            raise ShapeError(f"{self.branches} branches but dilation rates {self.dilation_rates}")
        if self.channels % self.branches:
            raise ShapeError(f"{self.channels} channels not divisible into {self.branches} branches")
        if any(d < 1 for d in self.dilation_rates) or self.se_reduction < 1:
            raise ShapeError("dilation rates and SE reduction must be positive")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ShapeError(f"bad patch size {self.patch_size}")


@dataclass(frozen=True)
class ModelConfig:
    encoder_stages: int = 3
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    stride: Tuple[int, ...] = (2, 2, 4)
    branches: int = 4
    dilation_rates: Tuple[int, ...] = (1, 2, 3, 4)
    se_reduction: int = 4
    patch_size: Tuple[int, ...] = (8, 8, 64)
    use_gdsc: bool = True
    use_pa: bool = True
    in_channels: int = 2
    init_seed: int = 0

    def __post_init__(self):
        if len(self.stage_channels) != self.encoder_stages:
            raise ShapeError(
                f"{self.encoder_stages} stages but {len(self.stage_channels)} channel widths")
        if len(self.stride) != 3 or min(self.stride) < 1:
            raise ShapeError(f"bad stride {self.stride}")
        for i in range(self.encoder_stages):
            self.gdsca(i)

    def stage_patch(self, stage):
        """Patch size at ``stage``: ``patch_size`` at the deepest stage, same physical extent above."""
        depth = self.encoder_stages - 1 - stage
        return tuple(p * s ** depth for p, s in zip(self.patch_size, self.stride))

    def gdsca(self, stage):
        channels = self.stage_channels[stage]
        patch = self.stage_patch(stage)
        if not self.use_gdsc:
            return GDSCAConfig(channels, 1, (1,), self.se_reduction, patch, False, self.use_pa)
        return GDSCAConfig(channels, self.branches, tuple(self.dilation_rates), self.se_reduction,
                           patch, True, self.use_pa)

    @classmethod
    def with_branches(cls, branches, base=None, **kw):
        """Config with ``branches`` groups; widths rounded up to multiples of it, rates 1..B."""
        base = base or cls()
        widths = tuple(-(-c // branches) * branches for c in base.stage_channels)
        return cls(**{**cfgio_fields(base), "branches": branches,
                      "dilation_rates": tuple(range(1, branches + 1)),
                      "stage_channels": widths, **kw})


def cfgio_fields(cfg):
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


# --- blocks -------------------------------------------------------------------

class GDSCBlock(Layer):
    """Split channels into B groups; group b gets a 3x3x3 conv with dilation ``rates[b]``."""

    def __init__(self, name, cfg, rng):
        self.cfg = cfg
        width = cfg.channels // cfg.branches
        self.convs = [SubmanifoldConv(f"{name}.branch{b}", KernelSpec(width, width, dilation=d), rng)
                      for b, d in enumerate(cfg.dilation_rates)]
        self.relus = [ReLU() for _ in self.convs]

    def children(self):
        return self.convs

    def forward(self, grid):
        if grid.channels != self.cfg.channels:
            raise ShapeError(f"GDSC block expects {self.cfg.channels} channels, got {grid.channels}")
        w = self.cfg.channels // self.cfg.branches
        outs = []
        for b, (conv, relu) in enumerate(zip(self.convs, self.relus)):
            part = grid.with_features(np.ascontiguousarray(grid.features[:, b * w:(b + 1) * w]))
            outs.append(relu.forward(conv.forward(part)).features)
        return grid.with_features(np.concatenate(outs, axis=1))

    def backward(self, grad):
        w = self.cfg.channels // self.cfg.branches
        parts = [conv.backward(relu.backward(grad[:, b * w:(b + 1) * w]))
                 for b, (conv, relu) in enumerate(zip(self.convs, self.relus))]
        return np.concatenate(parts, axis=1)


class SparseSE(Layer):
    """Channel reweighting from the mean feature over active voxels only."""

    def __init__(self, name, channels, reduction, rng):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(f"{name}.fc1", channels, hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", hidden, channels, rng)
        self._ctx = None

    def children(self):
        return [self.fc1, self.fc2]

    def forward(self, grid):
        x = grid.features
        if not len(x):
            self._ctx = None
            return grid
        s = x.mean(axis=0, keepdims=True)
        h_pre = self.fc1.forward_array(s)
        h = np.maximum(h_pre, 0.0)
        e = sigmoid(self.fc2.forward_array(h))
        self._ctx = (x, h_pre, e)
        return grid.with_features(x * e)

    def backward(self, grad):
        if self._ctx is None:
            return grad
        x, h_pre, e = self._ctx
        dx = grad * e
        de = (grad * x).sum(axis=0, keepdims=True)
        dh = self.fc2.backward_array(de * e * (1.0 - e))
        ds = self.fc1.backward_array(np.where(h_pre > 0, dh, 0.0))
        return dx + ds / len(x)


class PatchAttention(Layer):
    """Mean-pool active voxels per patch, attend across patches, add the result back."""

    def __init__(self, name, channels, patch_size, rng):
        self.patch_size = tuple(int(p) for p in patch_size)
        self.attn = TokenSelfAttention(f"{name}.attn", channels, rng)
        self._ctx = None

    def children(self):
        return [self.attn]

    def patches(self, grid):
        """Patch row of every active voxel and the number of patches."""
        _, inverse, _, _ = _downsample_geometry(grid.geometry, self.patch_size)
        return inverse, (int(inverse.max()) + 1 if len(inverse) else 0)

    def forward(self, grid):
        x = grid.features
        if not len(x):
            self._ctx = None
            return grid
        patch, npatch = self.patches(grid)
        counts = np.bincount(patch, minlength=npatch).astype(np.float64)
        member = membership_matrix(patch, npatch)
        mean = membership_matrix(patch, npatch, 1.0 / counts[patch])
        tokens = np.asarray(mean @ x)
        attended = self.attn.forward_array(tokens)
        self._ctx = (member, mean)
        return grid.with_features(x + attended[patch])

    def backward(self, grad):
        if self._ctx is None:
            return grad
        member, mean = self._ctx
        dtok = self.attn.backward_array(np.asarray(member @ grad))
        return grad + np.asarray(mean.T @ dtok)


class GDSCA(Layer):
    """gdsc -> sp_se -> patch attention (the latter two optional per config)."""

    def __init__(self, name, cfg, rng):
        self.cfg = cfg
        self.gdsc = GDSCBlock(f"{name}.gdsc", cfg, rng)
        self.se = SparseSE(f"{name}.se", cfg.channels, cfg.se_reduction, rng) if cfg.use_gdsc else None
        self.pa = PatchAttention(f"{name}.pa", cfg.channels, cfg.patch_size, rng) if cfg.use_pa else None

    def children(self):
        return [m for m in (self.gdsc, self.se, self.pa) if m is not None]

    def forward(self, grid):
        for m in self.children():
            grid = m.forward(grid)
        return grid

    def backward(self, grad):
        for m in reversed(self.children()):
            grad = m.backward(grad)
        return grad


# --- network ---------------------------------------------------------------------

class SegNet(Layer):
    def __init__(self, cfg=None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        ch = cfg.stage_channels
        s = cfg.encoder_stages
        self.stem = SubmanifoldConv("stem", KernelSpec(cfg.in_channels, ch[0]), rng)
        self.stem_relu = ReLU()
        self.enc = [GDSCA(f"enc{i}", cfg.gdsca(i), rng) for i in range(s)]
        self.down = [Downsample(f"down{i}", cfg.stride, ch[i], ch[i + 1], rng) for i in range(s - 1)]
        self.down_relu = [ReLU() for _ in range(s - 1)]
        self.up = [Upsample(f"up{i}", ch[i + 1], ch[i], rng) for i in range(s - 1)]
        self.up_relu = [ReLU() for _ in range(s - 1)]
        self.dec = [GDSCA(f"dec{i}", cfg.gdsca(i), rng) for i in range(s - 1)]
        self.head = Linear("head", ch[0], 1, rng, zero=True)
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def children(self):
        return [self.stem, *self.enc, *self.down, *self.up, *self.dec, self.head]

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward_logits(self, grid):
        if grid.channels != self.cfg.in_channels:
            raise ShapeError(f"network expects {self.cfg.in_channels} input channels, got {grid.channels}")
        x = self.stem_relu.forward(self.stem.forward(grid))
        skips = []
        for i, enc in enumerate(self.enc):
            x = enc.forward(x)
            if i < len(self.down):
                skips.append(x)
                x = self.down_relu[i].forward(self.down[i].forward(x))
        for i in reversed(range(len(self.dec))):
            up = self.up_relu[i].forward(self.up[i].forward(x, skips[i]))
            x = self.dec[i].forward(up.with_features(up.features + skips[i].features))
        assert x.geometry is grid.geometry, "active set changed"
        return self.head.forward_array(x.features)[:, 0]

    def forward(self, grid):
        """Per-active-voxel confidence, aligned with ``grid`` rows."""
        return sigmoid(self.forward_logits(grid))

    def backward(self, dlogits):
        """Back-propagate ``dL/dlogit`` (one value per voxel); returns input-feature cotangent."""
        g = self.head.backward_array(np.asarray(dlogits, dtype=np.float64).reshape(-1, 1))
        skip_grads = []
        for i in range(len(self.dec)):
            g = self.dec[i].backward(g)
            skip_grads.append(g)
            g = self.up[i].backward(self.up_relu[i].backward(g))
        for i in reversed(range(len(self.enc))):
            g = self.enc[i].backward(g)
            if i > 0:
                g = self.down[i - 1].backward(self.down_relu[i - 1].backward(g)) + skip_grads[i - 1]
        return self.stem.backward(self.stem_relu.backward(g))


def forward(grid, model):
    """Confidences of ``model`` (a :class:`SegNet`) for every active voxel of ``grid``."""
    return model.forward(grid)
def build_model(cfg=None, verbose=False):
    model = SegNet(cfg)
    if verbose:
        print(f"model parameters: {model.param_count()}")
    log.info("built model with %d parameters", model.param_count())
    return model


def gdsc_block(grid, cfg, rng=None):
    """Apply a freshly initialized GDSC block (functional convenience)."""
    return GDSCBlock("gdsc", cfg, rng or np.random.default_rng(0)).forward(grid)


def sp_se(grid, layer):
    return layer.forward(grid)


def patch_attention(grid, layer):
    return layer.forward(grid)


# --- checkpoints -------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path):
    """Binary parameter dump plus the model config as ``<path>.config`` key=value text."""
    params = model.parameters()
    chunks = [CHECKPOINT_MAGIC, np.array([CHECKPOINT_VERSION, len(params)], dtype="<u4").tobytes()]
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(np.array([len(name)], dtype="<u4").tobytes())
        chunks.append(name)
        chunks.append(np.array([p.values.ndim, *p.values.shape], dtype="<u4").tobytes())
        chunks.append(p.values.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    cfgio.write_kv(cfgio.to_kv(model.cfg), config_path(path))


def config_path(path):
    path = Path(path)
    return path.with_name(path.name + ".config")


def read_checkpoint(path):
    """``{name: array}`` in file order."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:8]!r}")
    pos = 8
    version, count = np.frombuffer(raw, "<u4", 2, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    try:
        for _ in range(int(count)):
            (nlen,) = np.frombuffer(raw, "<u4", 1, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += int(nlen)
            (ndim,) = np.frombuffer(raw, "<u4", 1, pos)
            pos += 4
            dims = tuple(int(d) for d in np.frombuffer(raw, "<u4", int(ndim), pos))
            pos += 4 * int(ndim)
            n = int(np.prod(dims)) if dims else 1
            out[name] = np.frombuffer(raw, "<f8", n, pos).reshape(dims).astype(np.float64)
            pos += 8 * n
    except ValueError as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes in checkpoint")
    return out


def load_checkpoint(path, cfg=None):
    if cfg is None:
        cfg = cfgio.from_kv(ModelConfig, cfgio.read_kv(config_path(path)))
    model = SegNet(cfg)
    load_state(model, read_checkpoint(path))
    return model


def state_dict(model):
    return {p.name: p.values.copy() for p in model.parameters()}


def load_state(model, state):
    params = {p.name: p for p in model.parameters()}
    if set(params) != set(state):
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        raise CheckpointError(f"parameter mismatch; missing {missing[:3]}, unexpected {extra[:3]}")
    for name, values in state.items():
        if params[name].shape != values.shape:
            raise CheckpointError(f"{name}: shape {values.shape} != {params[name].shape}")
        params[name].values[...] = values
