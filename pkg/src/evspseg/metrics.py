"""Event-level segmentation and detection metrics.

IoU and ACC compare per-event binary predictions with per-event labels; ACC
is recall over target events. Pd and Fa work on 1 px x 1 px x 1 ms voxels:
ground-truth instances are connected components of target voxels inside each
matching window, a prediction cluster detects an instance when their
centroids are within ``match_radius`` pixels, and Fa is the fraction of the
whole W x H x T volume covered by predicted voxels outside the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from evspseg.voxel import Geometry, event_coords

METRIC_VOXEL = (1, 1, 1000)

# one representative of each +/- pair of the 26-neighbourhood
_HALF_26 = [(dx, dy, dt) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dt in (-1, 0, 1)
            if (dx, dy, dt) > (0, 0, 0)]


def segmentation_metrics(pred_events, gt_events):
    """(IoU, ACC) over events; both are 1 when there are no positives on either side."""
    pred = np.asarray(pred_events).astype(bool)
    gt = np.asarray(gt_events).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"{pred.shape} predictions for {gt.shape} labels")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return _ratio(tp, tp + fp + fn), _ratio(tp, tp + fn)


def _ratio(num, den):
    return num / den if den else 1.0


def components(geom, same_slice=None):
    """26-connected component id per voxel of ``geom``.

    ``same_slice`` (one id per voxel) restricts edges to voxels sharing an id.
    """
    n = len(geom)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rows, cols = [], []
    for off in _HALF_26:
        a, b = geom.neighbor_pairs(off)
        if same_slice is not None and len(a):
            keep = same_slice[a] == same_slice[b]
            a, b = a[keep], b[keep]
        rows.append(a)
        cols.append(b)
    r, c = np.concatenate(rows), np.concatenate(cols)
    adj = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    _, lab = connected_components(adj, directed=False)
    return lab.astype(np.int64)


@dataclass
class DetectionReport:
    iou: float
    acc: float
    pd: float
    fa: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    detected: int = 0
    instances: int = 0
    false_voxels: int = 0
    volume: int = 0
    per_sequence: list = field(default_factory=list)

    @property
    def fa_e4(self):
        """Fa in units of 1e-4."""
        return self.fa * 1e4

    def rows(self):
        return [("iou", self.iou), ("acc", self.acc), ("pd", self.pd), ("fa", self.fa),
                ("fa_e4", self.fa_e4)]

    def format(self):
        return "".join(f"{k}\t{v:.6g}\n" for k, v in self.rows())


def _slice_centroids(coords, cluster, slice_id):
    """Mean (x, y) of each (cluster, slice) group, plus the group's slice id."""
    key = cluster * (int(slice_id.max()) + 1) + slice_id
    uniq, inv = np.unique(key, return_inverse=True)
    cnt = np.bincount(inv).astype(np.float64)
    cx = np.bincount(inv, weights=coords[:, 0].astype(np.float64)) / cnt
    cy = np.bincount(inv, weights=coords[:, 1].astype(np.float64)) / cnt
    first = np.zeros(len(uniq), dtype=np.int64)
    first[inv[::-1]] = np.arange(len(inv))[::-1]
    return cx, cy, slice_id[first]


def detection_metrics(pred_events, gt, match_radius=5.0, match_window_ms=50,
                      voxel_size=METRIC_VOXEL, duration_us=None):
    """(Pd, Fa) plus counts; see the module docstring for the matching rule."""
    pred = np.asarray(pred_events).astype(bool)
    if gt.labels is None:
        raise ValueError("ground-truth stream has no labels")
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} events")
    vx, vy, vt = voxel_size
    t_base = int(gt.t[0]) if len(gt) else 0
    span = duration_us if duration_us is not None else (gt.duration if len(gt) else 0)
    nt = int(span // vt) + 1
    dims = (-(-gt.width // vx), -(-gt.height // vy), max(nt, 1))
    volume = dims[0] * dims[1] * dims[2]
    coords = event_coords(gt, voxel_size, t_base)
    if len(coords):
        coords[:, 2] = np.minimum(coords[:, 2], dims[2] - 1)
    window = max(1, int(round(match_window_ms * 1000 / vt)))

    gt_geom, _ = Geometry.from_coords(coords[gt.labels == 1], dims, voxel_size, t_base)
    pr_geom, _ = Geometry.from_coords(coords[pred], dims, voxel_size, t_base)

    false_voxels = int(np.count_nonzero(gt_geom.lookup(pr_geom.coords) < 0)) if len(pr_geom) else 0

    if not len(gt_geom):
        return 1.0, false_voxels / volume, dict(detected=0, instances=0,
                                                false_voxels=false_voxels, volume=volume)
    gt_slice = gt_geom.coords[:, 2] // window
    inst = components(gt_geom, same_slice=gt_slice)
    icx, icy, islice = _slice_centroids(gt_geom.coords, inst, gt_slice)
    instances = len(icx)
    detected = 0
    if len(pr_geom):
        pr_slice = pr_geom.coords[:, 2] // window
        clus = components(pr_geom)
        pcx, pcy, pslice = _slice_centroids(pr_geom.coords, clus, pr_slice)
        order = np.argsort(pslice, kind="stable")
        pcx, pcy, pslice = pcx[order], pcy[order], pslice[order]
        lo = np.searchsorted(pslice, islice, side="left")
        hi = np.searchsorted(pslice, islice, side="right")
        for i in range(instances):
            if hi[i] > lo[i]:
                d2 = (pcx[lo[i]:hi[i]] - icx[i]) ** 2 + (pcy[lo[i]:hi[i]] - icy[i]) ** 2
                if d2.min() <= match_radius ** 2:
                    detected += 1
    return detected / instances, false_voxels / volume, dict(
        detected=detected, instances=instances, false_voxels=false_voxels, volume=volume)


def evaluate(pred_events, gt, threshold=None, **kw):
    """Full report for one sequence; ``pred_events`` may be confidences when ``threshold`` is given."""
    pred = np.asarray(pred_events)
    if threshold is not None:
        pred = pred >= threshold
    pred = pred.astype(bool)
    g = gt.labels.astype(bool)
    iou, acc = segmentation_metrics(pred, g)
    pd, fa, counts = detection_metrics(pred, gt, **kw)
    return DetectionReport(
        iou, acc, pd, fa,
        tp=int(np.count_nonzero(pred & g)), fp=int(np.count_nonzero(pred & ~g)),
        fn=int(np.count_nonzero(~pred & g)), **counts)


def combine(reports):
    """Pool counts over sequences; the inputs become ``per_sequence``."""
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    det = sum(r.detected for r in reports)
    inst = sum(r.instances for r in reports)
    fv = sum(r.false_voxels for r in reports)
    vol = sum(r.volume for r in reports)
    return DetectionReport(_ratio(tp, tp + fp + fn), _ratio(tp, tp + fn), _ratio(det, inst),
                           fv / vol if vol else 0.0, tp, fp, fn, det, inst, fv, vol,
                           per_sequence=list(reports))
