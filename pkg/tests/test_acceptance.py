"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line.

The long training criteria are marked ``slow``; ``pytest -m "not slow"``
skips them.
"""

import filecmp
import time

import numpy as np
import pytest

from conftest import record
from evspseg import experiments
from evspseg.annotate import boxes_to_event_labels, tight_boxes
from evspseg.cli import main
from evspseg.events import load_labels, save_events
from evspseg.gradcheck import TOLERANCE, op_suite, random_grid
from evspseg.losses import STCConfig, bce_terms, stc_loss, stc_terms, stc_weights
from evspseg.metrics import segmentation_metrics
from evspseg.segnet import ModelConfig, SegNet, save_checkpoint
from evspseg.sparse_ops import KernelSpec, LayerParams, submanifold_conv, token_self_attention
from evspseg.synth import SceneSpec, generate
from evspseg.train import TrainConfig, predict, train
from test_annotate import background_inside
from test_losses import brute_weights
from test_sparse_ops import dense_conv_oracle, direct_attention

# loss comparison suite: noise_rate chosen so the BCE baseline lands in [0.4, 0.7]
SUITE = dict(seeds=(0, 1, 2), n_train=20, n_test=5, epochs=30, noise_rate=1.8,
             target_event_rate=0.0003)


def test_gradient_suite():
    start = time.perf_counter()
    errors = op_suite(np.random.default_rng(7))
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < TOLERANCE and elapsed < 60
    record("gradient suite", ok,
           f"{len(errors)} ops, max rel error {errors[worst]:.2e} ({worst}), {elapsed:.1f} s")
    assert ok, errors


def test_oracle_suite():
    rng = np.random.default_rng(11)
    diffs = {}
    spec = KernelSpec(4, 6)
    full = random_grid(rng, 216, 4)
    w = rng.normal(size=spec.weight_shape)
    diffs["dense conv"] = np.abs(submanifold_conv(full, spec, LayerParams("w", w)).features
                                 - dense_conv_oracle(full, w, 1)).max()

    gspec = KernelSpec(6, 4, groups=2, dilation=2)
    g = random_grid(rng, 80, 6)
    gw = rng.normal(size=gspec.weight_shape)
    joint = submanifold_conv(g, gspec, LayerParams("w", gw)).features
    parts = [submanifold_conv(g.with_features(g.features[:, 3 * i:3 * i + 3]),
                              KernelSpec(3, 2, dilation=2), LayerParams("w", gw[i:i + 1])).features
             for i in range(2)]
    diffs["grouped conv"] = np.abs(joint - np.concatenate(parts, axis=1)).max()

    stc_exact = True
    for n in (10, 25, 50, 100):
        sg = random_grid(rng, n, 1, dims=(6, 6, 9))
        p = rng.uniform(size=n)
        stc_exact &= np.array_equal(stc_weights(sg, p), brute_weights(sg.coords, p, 3, 5))

    prm = {k: rng.normal(size=(5, 5)) for k in ("wq", "wk", "wv", "wo")}
    x = rng.normal(size=(3, 5))
    diffs["attention"] = np.abs(token_self_attention(x, prm) - direct_attention(x, **prm)).max()

    ok = diffs["dense conv"] < 1e-6 and diffs["grouped conv"] < 1e-12 and diffs["attention"] < 1e-6 \
        and stc_exact
    record("oracle suite", ok, ", ".join(f"{k} {v:.1e}" for k, v in diffs.items())
           + f", stc weights exact={stc_exact}")
    assert ok


def test_loss_identities():
    rng = np.random.default_rng(5)
    p, y, w = rng.uniform(size=1000), rng.integers(0, 2, 1000), rng.uniform(size=1000)
    gamma0 = np.array_equal(stc_terms(p, y, w, 0.0), bce_terms(p, y))
    q = rng.uniform(1e-3, 1 - 1e-3, 1000)
    v = rng.uniform(1e-3, 1 - 1e-3, 1000)
    sym = np.abs(stc_terms(q, np.ones(1000), v, 2.0) - stc_terms(1 - q, np.zeros(1000), 1 - v, 2.0)).max()
    h1 = abs(stc_loss(0.5, 0, 0.5, 2.0) - 0.17329)
    h2 = abs(stc_loss(0.9, 1, 0.95257, 2.0) - 0.09561)
    ok = gamma0 and sym < 1e-12 and h1 < 1e-4 and h2 < 1e-4
    record("loss identities", ok,
           f"gamma=0 exact={gamma0}, symmetry {sym:.1e}, hand values off by {h1:.1e} / {h2:.1e}")
    assert ok


@pytest.mark.slow
def test_overfit():
    stream = generate(SceneSpec(seed=1))
    start = time.perf_counter()
    res = train([stream], ModelConfig(), TrainConfig(epochs=30))
    iou = segmentation_metrics(predict(res.model, stream) >= 0.5, stream.labels == 1)[0]
    elapsed = time.perf_counter() - start
    dropped = res.log[-1][1] < res.log[0][1]
    ok = iou >= 0.8 and dropped and elapsed < 600
    record("overfit", ok, f"IoU {iou:.4f} after 30 epochs on {len(stream)} events, "
           f"loss {res.log[0][1]:.4f} -> {res.log[-1][1]:.4f}, {elapsed:.0f} s")
    assert ok


@pytest.mark.slow
def test_stc_beats_bce():
    start = time.perf_counter()
    rows = experiments.compare_losses(**SUITE)
    elapsed = time.perf_counter() - start
    s = experiments.summarize_losses(rows)
    bce, stc = s["bce"], s["stc"]
    in_band = 0.4 <= bce["iou"] <= 0.7
    ok = in_band and stc["iou"] > bce["iou"] and stc["fa"] < bce["fa"] and elapsed < 3600
    record("stc vs bce", ok,
           f"IoU stc {stc['iou']:.4f} vs bce {bce['iou']:.4f} (bce in [0.4, 0.7]: {in_band}), "
           f"Fa stc {stc['fa']:.3e} vs bce {bce['fa']:.3e}, {elapsed / 60:.1f} min")
    assert ok, rows


@pytest.mark.slow
def test_ablation_harness(tmp_path, capsys):
    code = main(["ablate", "--out", str(tmp_path), "--n-train", "2", "--n-test", "1",
                 "--epochs", "2", "--threads", "1"])
    capsys.readouterr()
    lines = (tmp_path / "ablation.tsv").read_text().splitlines()
    names = [line.split("\t")[0] for line in lines[1:]]
    expected = [n for n, _, _ in experiments.ablation_grid("all")]
    finite = all(np.isfinite(float(v)) for line in lines[1:] for v in line.split("\t")[7:])
    want_b = [f"branches:{b}" for b in range(1, 6)]
    want_d = [f"dilations:{d}" for d in ("1-2-3-4", "1-2-3-5", "1-3-5-7", "1-3-5-9")]
    ok = code == 0 and names == expected and finite and set(want_b + want_d) <= set(names)
    record("ablation harness", ok, f"{len(names)} configurations trained and evaluated")
    assert ok


def test_annotation_round_trip():
    recovered, exact = [], []
    for seed in range(5):
        s = generate(SceneSpec(width=128, height=96, duration=2_000_000, noise_rate=1.0, seed=seed))
        boxes = tight_boxes(s, 50_000)
        lab = boxes_to_event_labels(s, boxes, 50_000)
        tgt = s.labels == 1
        recovered.append(lab[tgt].mean())
        exact.append(int(lab[~tgt].sum()) == background_inside(s, boxes, 50_000))
    ok = min(recovered) == 1.0 and all(exact)
    record("annotation round-trip", ok,
           f"target recall {min(recovered):.4f} over 5 scenes, excess equals background in boxes: {all(exact)}")
    assert ok


def _run_twice(tmp_path, capsys, name, args):
    outs = []
    for rep in ("a", "b"):
        out = tmp_path / f"{name}_{rep}"
        code = main([*[a.replace("{out}", str(out)) for a in args], "--threads", "1"])
        outs.append((code, capsys.readouterr().out, out))
    (ca, sa, da), (cb, sb, db) = outs
    same_files = True
    if da.exists():
        cmp = filecmp.dircmp(da, db)
        files = sorted(p.name for p in da.iterdir())
        same_files = (sorted(p.name for p in db.iterdir()) == files
                      and filecmp.cmpfiles(da, db, files, shallow=False)[0] == files
                      and not cmp.diff_files)
    return ca == cb == 0 and sa == sb and same_files


@pytest.mark.slow
def test_determinism(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--count", "2", "--seed", "4", "width=64", "height=48",
                 "duration=600000", "--threads", "1"]) == 0
    ev, lbl = str(data / "scene_000.bin"), str(data / "scene_000.lbl")
    tiny = ["stage_channels=4,8,8", "branches=2", "dilation_rates=1,2", "se_reduction=2",
            "patch_size=4,4,16"]
    ckpt = tmp_path / "ckpt"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--seed", "3", "epochs=2",
                 "window_us=300000", *tiny]) == 0
    capsys.readouterr()
    runs = {
        "synth": ["synth", "--out", "{out}", "--seed", "9", "--count", "2", "width=64", "height=48",
                  "duration=300000"],
        "annotate": ["annotate", "--events", ev, "--labels", lbl, "--tight", "--export-frames",
                     "--out", "{out}"],
        "voxelize": ["voxelize", "--events", ev, "--out", "{out}"],
        "train": ["train", "--data", str(data), "--out", "{out}", "--seed", "3", "epochs=2",
                  "window_us=300000", *tiny],
        "infer": ["infer", "--checkpoint", str(ckpt / "model.ckpt"), "--events", ev,
                  "--window-us", "300000", "--out", "{out}"],
        "eval": ["eval", "--events", ev, "--labels", lbl, "--pred", lbl, "--out", "{out}"],
        "gradcheck": ["gradcheck", "--voxels", "20", "--samples", "1", "--out", "{out}", *tiny],
        "ablate": ["ablate", "--grid", "components", "--n-train", "1", "--n-test", "1", "--epochs", "1",
                   "--out", "{out}", "stage_channels=4,8,8"],
    }
    results = {name: _run_twice(tmp_path, capsys, name, args) for name, args in runs.items()}
    ok = all(results.values())
    record("determinism", ok, ", ".join(f"{k}={'same' if v else 'DIFF'}" for k, v in results.items()))
    assert ok, results


@pytest.mark.slow
def test_throughput(tmp_path, capsys):
    stream = generate(SceneSpec(noise_rate=0.11, seed=7))
    save_events(stream, tmp_path / "s.bin")
    model = SegNet()
    model.head.weight.values[...] = np.random.default_rng(0).normal(size=model.head.weight.shape)
    save_checkpoint(model, tmp_path / "m.ckpt")
    start = time.perf_counter()
    code = main(["infer", "--checkpoint", str(tmp_path / "m.ckpt"), "--events", str(tmp_path / "s.bin"),
                 "--out", str(tmp_path / "inf"), "--threads", "1", "--no-plots"])
    elapsed = time.perf_counter() - start
    err = capsys.readouterr().err
    rate = dict(line.split("\t") for line in err.splitlines() if "\t" in line).get("events_per_second")
    n_pred = len(load_labels(tmp_path / "inf" / "pred.lbl"))
    ok = code == 0 and elapsed < 10 and rate is not None and n_pred == len(stream) \
        and 0.8e5 <= len(stream) <= 1.2e5
    record("throughput", ok, f"{len(stream)} events over {stream.duration / 1e6:.1f} s in {elapsed:.2f} s "
           f"wall, events_per_second {rate}")
    print(f"events_per_second\t{rate}")
    assert ok
