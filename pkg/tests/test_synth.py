import numpy as np
import pytest

from evspseg.events import EventStream
from evspseg.synth import SceneError, SceneSpec, TrajectorySpec, curve_stats, generate, nn_distances

SMALL = SceneSpec(width=80, height=60, duration=1_000_000, seed=3)


def test_seeded_determinism():
    a, b = generate(SMALL), generate(SMALL)
    assert a.equals(b)
    assert not a.equals(generate(SceneSpec(**{**SMALL.__dict__, "seed": 4})))


def test_single_source_all_targets():
    s = generate(SceneSpec(width=80, height=60, duration=500_000, noise_rate=0, background="none"))
    assert len(s) > 0
    assert np.all(s.labels == 1)


def test_stream_is_valid():
    s = generate(SMALL)
    assert np.all(np.diff(s.t) >= 0)
    assert s.x.min() >= 0 and s.x.max() < 80 and s.y.min() >= 0 and s.y.max() < 60
    assert set(np.unique(s.pol)) <= {-1, 1}


def test_target_count_is_poisson():
    rate, dur = 0.002, 1_000_000
    lam = rate * dur
    counts = [int(generate(SceneSpec(width=80, height=60, duration=dur, target_event_rate=rate,
                                     noise_rate=0, background="none", seed=s)).labels.sum())
              for s in range(20)]
    assert all(abs(c - lam) < 5 * np.sqrt(lam) for c in counts)
    assert abs(np.mean(counts) - lam) < 5 * np.sqrt(lam / 20)


def test_target_follows_trajectory():
    traj = TrajectorySpec(x0=40, y0=30, vx=10, amp_x=5, freq=1.0, radius=2)
    s = generate(SceneSpec(width=80, height=60, duration=1_000_000, noise_rate=0, background="none"),
                 targets=[traj])
    cx, cy = traj.position(s.t)
    assert np.all(np.hypot(s.x - cx, s.y - cy) <= 2 + np.sqrt(0.5) + 1e-9)


@pytest.mark.parametrize("bad", [dict(width=0), dict(height=0), dict(noise_rate=-1), dict(background="fog")])
def test_degenerate_spec(bad):
    with pytest.raises(SceneError):
        generate(SceneSpec(**{**SMALL.__dict__, **bad}))


def test_noise_only_stats():
    s = generate(SceneSpec(width=40, height=30, duration=500_000, n_targets=0, noise_rate=2.0))
    st = curve_stats(s)
    assert st.target_mean_nn is None
    assert np.isfinite(st.noise_mean_nn)


def test_dense_target_closer_than_noise():
    s = generate(SceneSpec(width=80, height=60, duration=1_000_000, noise_rate=0.5,
                           background="none", seed=2))
    st = curve_stats(s)
    assert st.target_mean_nn < st.noise_mean_nn


def test_nn_distance_oracle(rng):
    n = 40
    s = EventStream.from_arrays(np.sort(rng.integers(0, 20_000, n)), rng.integers(0, 20, n),
                                rng.integers(0, 20, n), np.ones(n), 20, 20)
    pts = np.column_stack([s.x, s.y, s.t / 1000.0])
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    np.testing.assert_allclose(nn_distances(s), d.min(axis=1), rtol=1e-12)


def test_single_event_has_no_distance():
    s = EventStream.from_arrays([5], [1], [1], [1], 4, 4, labels=[1])
    assert nn_distances(s) is None
    st = curve_stats(s)
    assert st.target_mean_nn is None and st.noise_mean_nn is None
