"""Box-based event-by-event annotation.

Events are accumulated into frames of ``delta_t``; a 2D box drawn on frame
``f`` is extruded to the time slab ``[f*delta_t, (f+1)*delta_t)`` and every
event inside any such box becomes a target event. All intervals are
half-open (min inclusive, max exclusive) on x, y and t.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_DELTA_T = 50_000


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class FrameBox:
    frame_index: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def validate(self, width, height):
        if self.frame_index < 0:
            raise BoxError(f"negative frame index in {self}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise BoxError(f"empty box {self}")
        if self.x_min < 0 or self.y_min < 0 or self.x_max > width or self.y_max > height:
            raise BoxError(f"box {self} outside sensor {width}x{height}")

    def extrude(self, delta_t):
        t0 = self.frame_index * delta_t
        return SpaceTimeBox(self.x_min, self.y_min, self.x_max, self.y_max, t0, t0 + delta_t)


@dataclass(frozen=True)
class SpaceTimeBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    t_start: int
    t_end: int

    def contains(self, stream):
        return ((stream.x >= self.x_min) & (stream.x < self.x_max)
                & (stream.y >= self.y_min) & (stream.y < self.y_max)
                & (stream.t >= self.t_start) & (stream.t < self.t_end))


def accumulate_frames(stream, delta_t=DEFAULT_DELTA_T):
    """``[(frame_index, counts[height, width])]`` for frames 0 .. last event's frame."""
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    if not len(stream):
        return []
    frame = stream.t // delta_t
    nframes = int(frame[-1]) + 1
    flat = (frame * stream.height + stream.y) * stream.width + stream.x
    counts = np.bincount(flat, minlength=nframes * stream.height * stream.width)
    cube = counts.reshape(nframes, stream.height, stream.width)
    return [(f, cube[f]) for f in range(nframes)]


def boxes_to_event_labels(stream, boxes, delta_t=DEFAULT_DELTA_T):
    """1 for events inside any extruded box, else 0."""
    labels = np.zeros(len(stream), dtype=np.uint8)
    for box in boxes:
        box.validate(stream.width, stream.height)
        st = box.extrude(delta_t)
        lo = np.searchsorted(stream.t, st.t_start, side="left")
        hi = np.searchsorted(stream.t, st.t_end, side="left")
        if hi > lo:
            sub = stream.take(slice(lo, hi))
            labels[lo:hi] |= st.contains(sub).astype(np.uint8)
    return labels


def tight_boxes(stream, delta_t=DEFAULT_DELTA_T, pad=0):
    """Per-frame bounding box of the labelled target events, optionally padded by ``pad`` px."""
    if stream.labels is None:
        raise ValueError("stream has no labels")
    tgt = stream.labels == 1
    frames = stream.t[tgt] // delta_t
    xs, ys = stream.x[tgt], stream.y[tgt]
    boxes = []
    for f in np.unique(frames):
        sel = frames == f
        boxes.append(FrameBox(
            int(f),
            max(0, int(xs[sel].min()) - pad), max(0, int(ys[sel].min()) - pad),
            min(stream.width, int(xs[sel].max()) + 1 + pad),
            min(stream.height, int(ys[sel].max()) + 1 + pad)))
    return boxes


# --- files ------------------------------------------------------------------

def save_boxes(boxes, path, delta_t=DEFAULT_DELTA_T):
    lines = [f"delta_t_us {int(delta_t)}"]
    lines += [f"{b.frame_index} {b.x_min} {b.y_min} {b.x_max} {b.y_max}" for b in boxes]
    Path(path).write_text("\n".join(lines) + "\n")


def load_boxes(path):
    """``(boxes, delta_t)`` from a box file."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise BoxError("empty box file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "delta_t_us":
        raise BoxError("line 1: expected 'delta_t_us <value>'")
    try:
        delta_t = int(head[1])
    except ValueError:
        raise BoxError("line 1: delta_t_us must be an integer") from None
    boxes = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise BoxError(f"line {lineno}: expected 5 integers")
        try:
            boxes.append(FrameBox(*(int(p) for p in parts)))
        except ValueError:
            raise BoxError(f"line {lineno}: non-integer field") from None
    return boxes, delta_t


def write_pgm(image, path):
    """Binary PGM (P5), counts scaled to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max() if img.size else 0
    data = np.zeros(img.shape, dtype=np.uint8) if peak <= 0 else \
        np.round(255.0 * img / peak).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
