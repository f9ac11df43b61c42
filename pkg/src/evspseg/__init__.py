"""Sparse spatiotemporal segmentation of small moving objects in event streams."""

from evspseg.events import EventStream, load_events, save_events, slice_window
from evspseg.voxel import SparseGrid, voxelize, lift_labels, scatter_predictions

__version__ = "0.1.0"

__all__ = [
    "EventStream",
    "load_events",
    "save_events",
    "slice_window",
    "SparseGrid",
    "voxelize",
    "lift_labels",
    "scatter_predictions",
]
