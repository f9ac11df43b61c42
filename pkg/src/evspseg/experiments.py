"""Synthetic experiment suites: the ablation grid and the loss comparison.

Each suite generates its own scenes from a seed, trains every configuration
on the same training split and scores the pooled test split.
"""

from __future__ import annotations

from dataclasses import asdict

from evspseg.metrics import combine, evaluate
from evspseg.segnet import TABLE5_DILATIONS, ModelConfig
from evspseg.synth import SceneSpec, generate
from evspseg.train import TrainConfig, predict, train


def ablation_grid(which="all"):
    """``[(name, model overrides, loss)]`` for the component, branch and dilation tables."""
    rows = []
    if which in ("all", "components"):
        for gdsc, pa, stc in ((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 1, 1)):
            name = "+".join(n for n, on in (("gdsc", gdsc), ("pa", pa), ("stc", stc)) if on) or "baseline"
            rows.append((f"components:{name}", dict(use_gdsc=bool(gdsc), use_pa=bool(pa)),
                         "stc" if stc else "bce"))
    if which in ("all", "branches"):
        for b in range(1, 6):
            rows.append((f"branches:{b}", dict(branches=b), "stc"))
    if which in ("all", "dilations"):
        for rates in TABLE5_DILATIONS:
            rows.append((f"dilations:{'-'.join(map(str, rates))}", dict(dilation_rates=rates), "stc"))
    return rows


def ablation_scene(seed, noise_rate=0.6):
    return SceneSpec(width=64, height=48, duration=1_000_000, n_targets=1, target_radius=2.0,
                     target_event_rate=0.002, target_speed=15.0, target_amplitude=8.0,
                     target_frequency=0.5, background="drifting_edges", n_edges=2,
                     edge_length=20.0, edge_speed=4.0, edge_event_rate=20.0,
                     noise_rate=noise_rate, seed=seed)


def run_ablation(which="all", n_train=3, n_test=2, epochs=3, seed=0, base=None, noise_rate=0.6,
                 progress=None):
    base = base or ModelConfig(stage_channels=(8, 16, 32))
    data = [generate(ablation_scene(seed * 1000 + i, noise_rate)) for i in range(n_train + n_test)]
    train_set, test_set = data[:n_train], data[n_train:]
    rows = []
    for name, overrides, loss in ablation_grid(which):
        if "branches" in overrides:
            mcfg = ModelConfig.with_branches(overrides["branches"], base, init_seed=seed)
        else:
            mcfg = ModelConfig(**{**asdict(base), **overrides, "init_seed": seed})
        tcfg = TrainConfig(epochs=epochs, loss=loss, seed=seed)
        result = train(train_set, mcfg, tcfg)
        reports = [evaluate(predict(result.model, s), s, threshold=0.5) for s in test_set]
        rep = combine(reports)
        row = dict(config=name, gdsc=int(mcfg.use_gdsc), pa=int(mcfg.use_pa), loss=loss,
                   branches=mcfg.branches if mcfg.use_gdsc else 1,
                   dilations="-".join(map(str, mcfg.dilation_rates)) if mcfg.use_gdsc else "1",
                   params=result.model.param_count(), iou=rep.iou, acc=rep.acc, pd=rep.pd,
                   fa_e4=rep.fa_e4)
        rows.append(row)
        if progress:
            progress(row)
    return rows


ABLATION_COLUMNS = ("config", "gdsc", "pa", "loss", "branches", "dilations", "params",
                    "iou", "acc", "pd", "fa_e4")


def format_ablation(rows):
    lines = ["\t".join(ABLATION_COLUMNS)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c])
                               for c in ABLATION_COLUMNS))
    return "\n".join(lines) + "\n"


def loss_scene(seed, noise_rate=0.6, target_event_rate=0.0005):
    """Small, sparse-target scene used by the loss comparison."""
    return SceneSpec(**{**asdict(ablation_scene(seed, noise_rate)),
                        "target_event_rate": target_event_rate})


def compare_losses(seeds=(0, 1, 2), n_train=20, n_test=5, epochs=30, noise_rate=0.6,
                   target_event_rate=0.0005, model=None, losses=("bce", "stc"), progress=None):
    """Train each loss on the same suite per seed; rows hold pooled test metrics.

    Seed ``s`` fixes the scenes, the initialization and the shuffling, so the
    losses differ in nothing but the objective.
    """
    model = model or ModelConfig()
    rows = []
    for seed in seeds:
        data = [generate(loss_scene(seed * 1000 + i, noise_rate, target_event_rate))
                for i in range(n_train + n_test)]
        train_set, test_set = data[:n_train], data[n_train:]
        for loss in losses:
            mcfg = ModelConfig(**{**asdict(model), "init_seed": seed})
            result = train(train_set, mcfg, TrainConfig(epochs=epochs, loss=loss, seed=seed))
            rep = combine([evaluate(predict(result.model, s), s, threshold=0.5) for s in test_set])
            row = dict(seed=seed, loss=loss, iou=rep.iou, acc=rep.acc, pd=rep.pd, fa=rep.fa,
                       best_epoch=result.best_epoch)
            rows.append(row)
            if progress:
                progress(row)
    return rows


def summarize_losses(rows):
    """Mean IoU and Fa per loss over seeds."""
    out = {}
    for loss in dict.fromkeys(r["loss"] for r in rows):
        sel = [r for r in rows if r["loss"] == loss]
        out[loss] = dict(iou=sum(r["iou"] for r in sel) / len(sel),
                         fa=sum(r["fa"] for r in sel) / len(sel), runs=len(sel))
    return out
