"""Sparse spatiotemporal voxel grids built from event streams.

A grid keeps its active voxels as an ``(N, 3)`` integer coordinate array sorted
by a linearized key, so every per-voxel quantity (features, labels,
confidences) is a plain array aligned with the grid rows. ``Geometry.lookup``
resolves coordinates to rows by binary search over the sorted keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

DEFAULT_VOXEL_SIZE = (1, 1, 1000)


@dataclass(eq=False)
class Geometry:
    """Active-voxel set of a grid; shared by every feature map on it."""

    coords: np.ndarray
    dims: tuple
    voxel_size: tuple
    t_base: int = 0
    keys: np.ndarray = field(init=False)
    cache: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.dims = tuple(int(d) for d in self.dims)
        self.voxel_size = tuple(int(v) for v in self.voxel_size)
        self.keys = self.linear(self.coords)
        if len(self.keys) > 1 and not np.all(np.diff(self.keys) > 0):
            raise ValueError("geometry coordinates must be unique and key-sorted")

    @classmethod
    def from_coords(cls, coords, dims, voxel_size, t_base=0):
        """Build from arbitrary (possibly duplicated) coordinates; returns (geometry, inverse)."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        nx, ny, nt = dims
        if len(coords) and ((coords < 0).any() or (coords >= np.array(dims)).any()):
            raise ValueError("coordinates outside grid dims")
        keys = (coords[:, 0] * ny + coords[:, 1]) * nt + coords[:, 2]
        ukeys, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        return cls(coords[first], dims, voxel_size, t_base), inverse.reshape(-1)

    def __len__(self):
        return len(self.coords)

    def linear(self, coords):
        _, ny, nt = self.dims
        return (coords[:, 0] * ny + coords[:, 1]) * nt + coords[:, 2]

    def lookup(self, coords):
        """Row index of each coordinate, or -1 where the voxel is inactive/out of range."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        inside = np.all((coords >= 0) & (coords < np.array(self.dims)), axis=1)
        rows = np.full(len(coords), -1, dtype=np.int64)
        if not len(self.keys) or not inside.any():
            return rows
        q = self.linear(coords[inside])
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == q
        sub = np.full(len(q), -1, dtype=np.int64)
        sub[hit] = pos_c[hit]
        rows[inside] = sub
        return rows

    def neighbor_pairs(self, offset):
        """(out_rows, in_rows) with ``coords[in] == coords[out] + offset``; memoized."""
        offset = tuple(int(o) for o in offset)
        hit = self.cache.get(offset)
        if hit is None:
            mirror = self.cache.get(tuple(-o for o in offset))
            hit = (mirror[1], mirror[0]) if mirror is not None else self._pairs(offset)
            self.cache[offset] = hit
        return hit

    def _pairs(self, offset):
        # an in-bounds shift moves the linear key by a constant
        n = len(self.keys)
        inside = None
        for axis, o in enumerate(offset):
            if o:
                v = self.coords[:, axis] + o
                ok = (v >= 0) & (v < self.dims[axis])
                inside = ok if inside is None else inside & ok
        src = np.arange(n) if inside is None else np.flatnonzero(inside)
        if not n or not len(src):
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        _, ny, nt = self.dims
        q = self.keys[src] + (offset[0] * ny + offset[1]) * nt + offset[2]
        pos = np.minimum(np.searchsorted(self.keys, q), n - 1)
        found = self.keys[pos] == q
        return src[found], pos[found]


@dataclass(eq=False)
class SparseGrid:
    """Feature map over a set of active voxels.

    ``features`` has one row per active voxel, aligned with
    ``geometry.coords``. ``provenance[i]`` is the row of the voxel holding
    source event ``i`` (present only for grids built by :func:`voxelize`).
    """

    geometry: Geometry
    features: np.ndarray
    provenance: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.geometry):
            raise ValueError(
                f"features shape {self.features.shape} does not match {len(self.geometry)} voxels")

    def __len__(self):
        return len(self.geometry)

    @property
    def coords(self):
        return self.geometry.coords

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def voxel_size(self):
        return self.geometry.voxel_size

    @property
    def t_base(self):
        return self.geometry.t_base

    @property
    def channels(self):
        return self.features.shape[1]

    def with_features(self, features):
        return replace(self, features=features)

    def key_set(self):
        return {tuple(c) for c in self.coords.tolist()}

    def to_dict(self):
        """``{(ix, iy, it): feature vector}`` view of the active voxels."""
        return {tuple(c): f for c, f in zip(self.coords.tolist(), self.features)}

    def members(self, row):
        """Indices of the source events in voxel ``row``."""
        if self.provenance is None:
            raise ValueError("grid carries no provenance")
        return np.flatnonzero(self.provenance == row)


def event_coords(stream, voxel_size, t_base):
    vx, vy, vt = voxel_size
    return np.column_stack([stream.x // vx, stream.y // vy, (stream.t - t_base) // vt])


def voxelize(stream, voxel_size=DEFAULT_VOXEL_SIZE, dims=None, t_base=None):
    """Bin events into voxels; features are ``[event count, polarity sum]``."""
    voxel_size = tuple(int(v) for v in voxel_size)
    if min(voxel_size) <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel_size}")
    if t_base is None:
        if not len(stream):
            if dims is None:
                raise ValueError("empty stream needs explicit dims")
            t_base = 0
        else:
            t_base = int(stream.t[0])
    vx, vy, vt = voxel_size
    if dims is None:
        nt = int((stream.t[-1] - t_base) // vt) + 1
        dims = (-(-stream.width // vx), -(-stream.height // vy), nt)
    coords = event_coords(stream, voxel_size, t_base)
    geom, inverse = Geometry.from_coords(coords, dims, voxel_size, t_base)
    n = len(geom)
    feats = np.empty((n, 2), dtype=np.float64)
    feats[:, 0] = np.bincount(inverse, minlength=n)
    feats[:, 1] = np.bincount(inverse, weights=stream.pol.astype(np.float64), minlength=n)
    return SparseGrid(geom, feats, inverse)


def lift_labels(grid, stream):
    """Voxel label is 1 iff at least one member event is labelled 1 (row-aligned uint8)."""
    if stream.labels is None:
        raise ValueError("stream has no labels")
    prov = _provenance(grid, stream)
    inside = prov >= 0
    hits = np.bincount(prov[inside], weights=stream.labels[inside].astype(np.float64),
                       minlength=len(grid))
    return (hits > 0).astype(np.uint8)


def scatter_predictions(grid, voxel_conf, stream):
    """Broadcast voxel confidences to member events; uncovered events get 0.

    ``voxel_conf`` is either an array aligned with grid rows or a mapping from
    voxel key to confidence (missing keys count as inactive).
    """
    prov = _provenance(grid, stream)
    if isinstance(voxel_conf, dict):
        conf = np.zeros(len(grid))
        if voxel_conf:
            keys = np.array(list(voxel_conf.keys()), dtype=np.int64)
            rows = grid.geometry.lookup(keys)
            if (rows < 0).any():
                raise ValueError("confidence given for inactive voxel")
            conf[rows] = list(voxel_conf.values())
            present = np.zeros(len(grid), dtype=bool)
            present[rows] = True
        else:
            present = np.zeros(len(grid), dtype=bool)
    else:
        conf = np.asarray(voxel_conf, dtype=np.float64).reshape(-1)
        if len(conf) != len(grid):
            raise ValueError(f"{len(conf)} confidences for {len(grid)} voxels")
        present = np.ones(len(grid), dtype=bool)
    out = np.zeros(len(stream))
    ok = prov >= 0
    ok[ok] = present[prov[ok]]
    out[ok] = conf[prov[ok]]
    return out


def _provenance(grid, stream):
    if grid.provenance is not None and len(grid.provenance) == len(stream):
        return grid.provenance
    return grid.geometry.lookup(event_coords(stream, grid.voxel_size, grid.t_base))
