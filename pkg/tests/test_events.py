import numpy as np
import pytest

from conftest import make_stream
from evspseg.events import (
    EventFormatError,
    EventStream,
    EventValidationError,
    load_events,
    load_labels,
    save_events,
    slice_window,
)


def write(path, text):
    path.write_text(text)
    return path


def test_text_file_fields(tmp_path):
    s = load_events(write(tmp_path / "a.txt", "346 260\n0 10 20 1\n500 10 20 -1\n"))
    assert len(s) == 2
    assert s.width == 346 and s.height == 260
    np.testing.assert_array_equal(s.t, [0, 500])
    np.testing.assert_array_equal(s.pol, [1, -1])
    assert s[1] == (500, 10, 20, -1)


def test_empty_body(tmp_path):
    s = load_events(write(tmp_path / "e.txt", "346 260\n"))
    assert len(s) == 0
    assert s.duration == 0


def test_unsorted_input_is_reordered(tmp_path):
    s = load_events(write(tmp_path / "u.txt", "10 10\n700 1 1 1\n300 2 2 0\n"))
    np.testing.assert_array_equal(s.t, [300, 700])
    np.testing.assert_array_equal(s.x, [2, 1])
    assert s.sort_warnings == 1


def test_zero_polarity_maps_to_negative():
    s = make_stream([(0, 0, 0, 0)])
    assert s.pol[0] == -1


@pytest.mark.parametrize("body, line", [("0 1 1\n", 2), ("0 1 1 1\nx 1 1 1\n", 3), ("0 1 1 2\n", 2)])
def test_malformed_line_reports_line_number(tmp_path, body, line):
    with pytest.raises(EventFormatError) as info:
        load_events(write(tmp_path / "bad.txt", "10 10\n" + body))
    assert info.value.line == line


def test_out_of_bounds_coordinate():
    with pytest.raises(EventValidationError):
        make_stream([(0, 10, 0, 1)], width=10, height=10)


def test_truncated_binary(tmp_path, rng):
    s = make_stream([(i, 1, 2, 1) for i in range(5)])
    path = tmp_path / "s.bin"
    save_events(s, path)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(EventFormatError):
        load_events(path)


@pytest.mark.parametrize("suffix", [".bin", ".txt"])
def test_round_trip_with_labels(tmp_path, rng, suffix):
    n = 200
    t = np.sort(rng.integers(0, 10**7, n))
    s = EventStream.from_arrays(t, rng.integers(0, 346, n), rng.integers(0, 260, n),
                                rng.choice([-1, 1], n), 346, 260, labels=rng.integers(0, 2, n))
    path = tmp_path / f"s{suffix}"
    save_events(s, path, labels_path=tmp_path / "s.lbl")
    back = load_events(path, labels_path=tmp_path / "s.lbl")
    assert back.equals(s)
    np.testing.assert_array_equal(load_labels(tmp_path / "s.lbl"), s.labels)


def test_slice_window_half_open():
    s = make_stream([(100, 0, 0, 1), (900, 0, 0, 1), (1100, 0, 0, 1)])
    np.testing.assert_array_equal(slice_window(s, 0, 1000).t, [100, 900])
    np.testing.assert_array_equal(slice_window(s, 100, 1100).t, [100, 900])


def test_slice_window_edge_cases():
    empty = make_stream([])
    assert len(slice_window(empty, 0, 1)) == 0
    s = make_stream([(5, 0, 0, 1), (7, 1, 1, -1)])
    assert slice_window(s, 0, 100).equals(s)
    with pytest.raises(ValueError):
        slice_window(s, 10, 10)


def test_slice_window_matches_linear_scan(rng):
    t = np.sort(rng.integers(0, 5000, 300))
    s = EventStream.from_arrays(t, np.zeros(300), np.zeros(300), np.ones(300), 4, 4)
    for _ in range(20):
        t0, t1 = np.sort(rng.integers(-100, 5100, 2))
        if t0 == t1:
            continue
        expected = [v for v in t if t0 <= v < t1]
        np.testing.assert_array_equal(slice_window(s, t0, t1).t, expected)
