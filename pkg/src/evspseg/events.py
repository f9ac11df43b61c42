"""Event and stream types, event/label file I/O and time-window slicing.

Timestamps are integer microseconds throughout. Polarity is stored as -1/+1;
text files that encode negative polarity as 0 are normalized on load.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

log = logging.getLogger(__name__)

EVENT_MAGIC = b"EVUAVEV1"
LABEL_MAGIC = b"EVUAVLB1"

RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
_HEADER_DTYPE = np.dtype([("w", "<u2"), ("h", "<u2")])


class EventFormatError(ValueError):
    """A file does not follow the expected event/label layout."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EventValidationError(ValueError):
    """Event fields violate the sensor geometry or polarity rules."""


class Event(NamedTuple):
    t: int
    x: int
    y: int
    pol: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events of one sensor with optional per-event labels.

    Stored column-wise. ``labels[i] == 1`` marks event ``i`` as a target event.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    pol: np.ndarray
    width: int
    height: int
    labels: Optional[np.ndarray] = None
    sort_warnings: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "t", np.ascontiguousarray(self.t, dtype=np.int64))
        object.__setattr__(self, "x", np.ascontiguousarray(self.x, dtype=np.int64))
        object.__setattr__(self, "y", np.ascontiguousarray(self.y, dtype=np.int64))
        object.__setattr__(self, "pol", np.ascontiguousarray(self.pol, dtype=np.int8))
        if self.labels is not None:
            object.__setattr__(self, "labels", np.ascontiguousarray(self.labels, dtype=np.uint8))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.pol) == n):
            raise EventValidationError("event columns have different lengths")
        if self.labels is not None and len(self.labels) != n:
            raise EventValidationError(f"{len(self.labels)} labels for {n} events")
        for arr in (self.t, self.x, self.y, self.pol):
            arr.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)

    @classmethod
    def from_arrays(cls, t, x, y, pol, width, height, labels=None):
        """Validate, stable-sort by time and build a stream.

        Unsorted input is tolerated; the number of descents in ``t`` is kept
        in ``sort_warnings``.
        """
        t = np.asarray(t, dtype=np.int64)
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        pol = np.asarray(pol, dtype=np.int64)
        width, height = int(width), int(height)
        if width <= 0 or height <= 0:
            raise EventValidationError(f"invalid sensor size {width}x{height}")
        pol = np.where(pol == 0, -1, pol)
        _validate(t, x, y, pol, width, height)
        descents = int(np.count_nonzero(np.diff(t) < 0)) if len(t) > 1 else 0
        if descents:
            log.warning("events not sorted by time (%d descents); sorting", descents)
            order = np.argsort(t, kind="stable")
            t, x, y, pol = t[order], x[order], y[order], pol[order]
            if labels is not None:
                labels = np.asarray(labels)[order]
        return cls(t, x, y, pol, width, height, labels, descents)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.pol[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def duration(self):
        """Span from first to last event in µs (0 for fewer than two events)."""
        return int(self.t[-1] - self.t[0]) if len(self.t) else 0

    def with_labels(self, labels):
        return EventStream(self.t, self.x, self.y, self.pol, self.width, self.height,
                           None if labels is None else np.asarray(labels), self.sort_warnings)

    def take(self, index):
        """Sub-stream of the events at ``index`` (boolean mask or sorted indices)."""
        labels = None if self.labels is None else self.labels[index]
        return EventStream(self.t[index], self.x[index], self.y[index], self.pol[index],
                           self.width, self.height, labels)

    def equals(self, other):
        same = (self.width == other.width and self.height == other.height
                and all(np.array_equal(a, b) for a, b in
                        ((self.t, other.t), (self.x, other.x), (self.y, other.y), (self.pol, other.pol))))
        if not same:
            return False
        if self.labels is None or other.labels is None:
            return self.labels is None and other.labels is None
        return np.array_equal(self.labels, other.labels)


def _validate(t, x, y, pol, width, height):
    if len(t) == 0:
        return
    if t.min() < 0:
        raise EventValidationError("negative timestamp")
    bad = (x < 0) | (x >= width) | (y < 0) | (y >= height)
    if bad.any():
        i = int(np.argmax(bad))
        raise EventValidationError(
            f"event {i} at ({x[i]}, {y[i]}) outside sensor {width}x{height}")
    badp = (pol != 1) & (pol != -1)
    if badp.any():
        i = int(np.argmax(badp))
        raise EventValidationError(f"event {i} has polarity {pol[i]}")


def concat(streams):
    """Merge streams of one sensor into a single time-sorted stream."""
    if not streams:
        raise ValueError("nothing to concatenate")
    w, h = streams[0].width, streams[0].height
    labelled = all(s.labels is not None for s in streams)
    cols = [np.concatenate([getattr(s, c) for s in streams]) for c in ("t", "x", "y", "pol")]
    labels = np.concatenate([s.labels for s in streams]) if labelled else None
    order = np.argsort(cols[0], kind="stable")
    return EventStream(*(c[order] for c in cols), w, h, None if labels is None else labels[order])


def slice_window(stream, t0, t1):
    """Events with ``t0 <= t < t1``; timestamps keep their absolute values."""
    if t0 >= t1:
        raise ValueError(f"empty window [{t0}, {t1})")
    lo = np.searchsorted(stream.t, t0, side="left")
    hi = np.searchsorted(stream.t, t1, side="left")
    return stream.take(slice(lo, hi))


# --- file I/O -------------------------------------------------------------

def _infer_format(path):
    return "binary" if Path(path).suffix.lower() in (".bin", ".evb", ".ev") else "text"


def load_events(path, format=None, labels_path=None):
    """Read an event file (``text`` or ``binary``) and optional label file."""
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt == "text":
        t, x, y, p, w, h = _read_text(path)
    elif fmt == "binary":
        t, x, y, p, w, h = _read_binary(path)
    else:
        raise ValueError(f"unknown event format {fmt!r}")
    labels = None
    if labels_path is not None:
        labels = load_labels(labels_path)
        if len(labels) != len(t):
            raise EventFormatError(f"label file has {len(labels)} entries for {len(t)} events")
    return EventStream.from_arrays(t, x, y, p, w, h, labels)


def _read_text(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise EventFormatError("missing header", line=1)
    head = lines[0].split()
    if len(head) != 2:
        raise EventFormatError("header must be '<width> <height>'", line=1)
    try:
        w, h = int(head[0]), int(head[1])
    except ValueError:
        raise EventFormatError("non-integer sensor size", line=1) from None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise EventFormatError(f"expected 4 fields, got {len(parts)}", line=lineno)
        try:
            rows.append([int(v) for v in parts])
        except ValueError:
            raise EventFormatError(f"non-integer field in {line!r}", line=lineno) from None
        p = rows[-1][3]
        if p not in (-1, 0, 1):
            raise EventFormatError(f"polarity {p} not in {{-1, 0, 1}}", line=lineno)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], w, h


def _read_binary(path):
    raw = Path(path).read_bytes()
    if raw[:8] != EVENT_MAGIC:
        raise EventFormatError(f"bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise EventFormatError("truncated header")
    head = np.frombuffer(raw, dtype=_HEADER_DTYPE, count=1, offset=8)[0]
    body = raw[12:]
    if len(body) % RECORD_DTYPE.itemsize:
        raise EventFormatError(
            f"record {len(body) // RECORD_DTYPE.itemsize} truncated "
            f"({len(body) % RECORD_DTYPE.itemsize} trailing bytes)")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    return (rec["t"].astype(np.int64), rec["x"].astype(np.int64), rec["y"].astype(np.int64),
            rec["p"].astype(np.int64), int(head["w"]), int(head["h"]))


def save_events(stream, path, format=None, labels_path=None):
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt == "text":
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(f"{stream.width} {stream.height}\n")
            if len(stream):
                np.savetxt(fh, np.column_stack([stream.t, stream.x, stream.y, stream.pol]), fmt="%d")
    elif fmt == "binary":
        if stream.width > 0xFFFF or stream.height > 0xFFFF:
            raise EventValidationError("sensor too large for binary format")
        rec = np.empty(len(stream), dtype=RECORD_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.pol
        head = np.array([(stream.width, stream.height)], dtype=_HEADER_DTYPE)
        path.write_bytes(EVENT_MAGIC + head.tobytes() + rec.tobytes())
    else:
        raise ValueError(f"unknown event format {fmt!r}")
    if labels_path is not None:
        if stream.labels is None:
            raise ValueError("stream has no labels to save")
        save_labels(stream.labels, labels_path)


def save_labels(labels, path):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(LABEL_MAGIC + np.array([len(labels)], dtype="<u8").tobytes() + labels.tobytes())


def load_labels(path):
    raw = Path(path).read_bytes()
    if raw[:8] != LABEL_MAGIC:
        raise EventFormatError(f"bad label magic {raw[:8]!r}")
    if len(raw) < 16:
        raise EventFormatError("truncated label header")
    count = int(np.frombuffer(raw, dtype="<u8", count=1, offset=8)[0])
    if len(raw) - 16 != count:
        raise EventFormatError(f"label file declares {count} entries, holds {len(raw) - 16}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=16).copy()
    if labels.size and labels.max() > 1:
        raise EventFormatError("labels must be 0 or 1")
    return labels
