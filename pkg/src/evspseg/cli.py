"""Command-line entry point: ``evspseg <subcommand> ...``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
Configs are flat ``key=value`` files; trailing ``key=value`` arguments
override them. Every run writes ``effective_config.txt`` into its output
directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from evspseg import annotate as ann
from evspseg import config as cfgio
from evspseg import plotting
from evspseg.experiments import ABLATION_COLUMNS, format_ablation, run_ablation
from evspseg.events import EventFormatError, EventValidationError, load_events, load_labels, save_events, save_labels
from evspseg.metrics import combine, evaluate
from evspseg.segnet import ModelConfig, build_model, load_checkpoint, save_checkpoint
from evspseg.synth import SceneError, SceneSpec, generate
from evspseg.train import TrainConfig, TrainingError, predict, train
from evspseg.voxel import voxelize

log = logging.getLogger("evspseg")

SUBCOMMANDS = ("synth", "annotate", "voxelize", "train", "infer", "eval", "gradcheck", "ablate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --- helpers -----------------------------------------------------------------

def _threads(args):
    n = args.threads or os.environ.get("EVUAV_THREADS")
    if n:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(n))
    return int(n) if n else None


def _split_overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise cfgio.ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_values(args):
    values = cfgio.read_kv(args.config) if getattr(args, "config", None) else {}
    values.update(_split_overrides(getattr(args, "overrides", None)))
    return values


def _partition(values, *classes):
    """Assign each key to the first dataclass that declares it; unknown keys are errors."""
    buckets = [dict() for _ in classes]
    for k, v in values.items():
        for bucket, cls in zip(buckets, classes):
            if k in cls.__dataclass_fields__:
                bucket[k] = v
                break
        else:
            raise cfgio.ConfigError(f"unknown config key {k!r}")
    return buckets


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_effective(out, command, seed, *objs, extra=None):
    rows = {"command": command}
    if seed is not None:
        rows["seed"] = str(seed)
    for obj in objs:
        prefix = type(obj).__name__
        for k, v in cfgio.to_kv(obj).items():
            rows[f"{prefix}.{k}"] = v
    for k, v in (extra or {}).items():
        rows[k] = cfgio.format_value(v)
    cfgio.write_kv(rows, out / "effective_config.txt")


def _load_stream(events, labels=None, fmt=None):
    return load_events(events, fmt, labels_path=labels)


def _dataset(paths):
    """Event files (with sibling ``.lbl`` label files) or directories of them."""
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix in (".bin", ".txt") and
                                q.with_suffix(".lbl").exists()))
        else:
            files.append(p)
    if not files:
        raise cfgio.ConfigError(f"no labelled event files in {paths}")
    return [(f.stem, _load_stream(f, f.with_suffix(".lbl"))) for f in files]


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args):
    values = _load_values(args)
    spec = cfgio.from_kv(SceneSpec, values)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    spec.validate()
    out = _outdir(args.out)
    ext = ".bin" if args.format == "binary" else ".txt"
    for i in range(args.count):
        s = replace(spec, seed=spec.seed + i)
        stream = generate(s)
        name = f"scene_{i:03d}"
        save_events(stream, out / f"{name}{ext}", args.format, labels_path=out / f"{name}.lbl")
        print(f"{name}\tevents={len(stream)}\ttargets={int(stream.labels.sum())}")
        if args.plots:
            plotting.event_scatter(stream, stream.labels, out / f"{name}.png", title=name)
    _dump_effective(out, "synth", spec.seed, spec, extra={"count": args.count, "format": args.format})
    return 0


def cmd_annotate(args):
    stream = _load_stream(args.events, args.labels)
    out = _outdir(args.out)
    delta_t = args.delta_t
    if args.boxes:
        boxes, delta_t = ann.load_boxes(args.boxes)
    elif args.tight:
        boxes = ann.tight_boxes(stream, delta_t, pad=args.pad)
        ann.save_boxes(boxes, out / "boxes.txt", delta_t)
    else:
        boxes = None
    if boxes is not None:
        labels = ann.boxes_to_event_labels(stream, boxes, delta_t)
        save_labels(labels, out / "labels.lbl")
        print(f"boxes\t{len(boxes)}\nlabelled_events\t{int(labels.sum())}\nevents\t{len(stream)}")
    if args.export_frames:
        frames = ann.accumulate_frames(stream, delta_t)
        by_frame = {}
        for b in boxes or []:
            by_frame.setdefault(b.frame_index, []).append((b.x_min, b.y_min, b.x_max, b.y_max))
        for f, img in frames:
            ann.write_pgm(img, out / f"frame_{f:05d}.pgm")
        if args.plots and frames:
            f, img = max(frames, key=lambda fr: len(by_frame.get(fr[0], [])))
            plotting.frame_image(img, out / f"frame_{f:05d}.png", by_frame.get(f, []))
        print(f"frames\t{len(frames)}")
    _dump_effective(out, "annotate", None, extra={"delta_t_us": delta_t, "events": args.events,
                                                 "boxes": args.boxes or ("tight" if args.tight else "")})
    return 0


def cmd_voxelize(args):
    stream = _load_stream(args.events)
    grid = voxelize(stream, tuple(args.voxel_size))
    out = _outdir(args.out)
    table = np.column_stack([grid.coords, grid.features.astype(np.int64)])
    with open(out / "voxels.tsv", "w") as fh:
        fh.write("ix\tiy\tit\tcount\tpolarity_sum\n")
        np.savetxt(fh, table, fmt="%d", delimiter="\t")
    print(f"events\t{len(stream)}\nactive_voxels\t{len(grid)}\n"
          f"dims\t{grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]}\nt_base\t{grid.t_base}")
    _dump_effective(out, "voxelize", None, extra={"voxel_size": tuple(args.voxel_size),
                                                 "events": args.events})
    return 0


def _configs(args):
    values = _load_values(args)
    if getattr(args, "model_config", None):
        values = {**cfgio.read_kv(args.model_config), **values}
    tvals, mvals = _partition(values, TrainConfig, ModelConfig)
    tcfg = cfgio.from_kv(TrainConfig, tvals)
    mcfg = cfgio.from_kv(ModelConfig, mvals)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
        mcfg = replace(mcfg, init_seed=args.seed)
    return tcfg, mcfg


def cmd_train(args):
    tcfg, mcfg = _configs(args)
    data = _dataset(args.data)
    val = _dataset(args.val) if args.val else None
    out = _outdir(args.out)
    print(f"model parameters\t{build_model(mcfg).param_count()}")
    result = train([s for _, s in data], mcfg, tcfg,
                   val_dataset=[s for _, s in val] if val else None, names=[n for n, _ in data])
    (out / "train_log.tsv").write_text("epoch\tloss\tlr\tval_iou\n" + result.format_log())
    save_checkpoint(result.model, out / "model.ckpt")
    print(result.format_log(), end="")
    print(f"best_epoch\t{result.best_epoch}\nbest_val_iou\t{result.best_val_iou:.6g}")
    if args.plots:
        plotting.training_curves(result.log, out / "training_curves.png")
    _dump_effective(out, "train", tcfg.seed, tcfg, mcfg,
                    extra={"data": ",".join(n for n, _ in data)})
    return 0


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    stream = _load_stream(args.events)
    out = _outdir(args.out)
    start = time.perf_counter()
    conf = predict(model, stream, args.window_us)
    elapsed = time.perf_counter() - start
    pred = (conf >= args.threshold).astype(np.uint8)
    save_labels(pred, out / "pred.lbl")
    np.savetxt(out / "confidence.txt", conf, fmt="%.9f")
    if args.plots:
        plotting.event_scatter(stream, pred, out / "prediction.png", title="predicted targets")
    print(f"events\t{len(stream)}\npredicted_positive\t{int(pred.sum())}")
    rate = len(stream) / elapsed if elapsed > 0 else float("inf")
    print(f"seconds\t{elapsed:.3f}\nevents_per_second\t{rate:.0f}", file=sys.stderr)
    _dump_effective(out, "infer", None, extra={"checkpoint": args.checkpoint, "events": args.events,
                                              "threshold": args.threshold, "window_us": args.window_us})
    return 0


def cmd_eval(args):
    stream = _load_stream(args.events, args.labels)
    pred = load_labels(args.pred)
    if len(pred) != len(stream):
        raise cfgio.ConfigError(f"{len(pred)} predictions for {len(stream)} events")
    report = combine([evaluate(pred, stream, match_radius=args.match_radius,
                               match_window_ms=args.match_window)])
    text = report.format()
    print(text, end="")
    if args.out:
        out = _outdir(args.out)
        (out / "report.tsv").write_text("metric\tvalue\n" + text)
        if args.plots:
            plotting.metric_bars(["sequence"], [dict(iou=report.iou, acc=report.acc, pd=report.pd)],
                                 out / "report.png")
        _dump_effective(out, "eval", None, extra={"match_radius": args.match_radius,
                                                 "match_window_ms": args.match_window})
    return 0


def cmd_gradcheck(args):
    from evspseg import gradcheck
    from evspseg.losses import STCConfig

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    values = _load_values(args)
    mcfg = cfgio.from_kv(ModelConfig, values)
    model = build_model(mcfg)
    for p in model.head.parameters():
        p.values[...] = rng.uniform(-0.5, 0.5, p.shape)
    grid = gradcheck.random_grid(rng, args.voxels, mcfg.in_channels, dims=(8, 8, 8))
    targets = (rng.uniform(size=len(grid)) < 0.3).astype(np.uint8)
    errors = {}
    if not args.model_only:
        errors.update({f"op:{k}": v for k, v in gradcheck.op_suite(rng).items()})
    errors.update(gradcheck.model_gradcheck(model, grid, targets, "stc", STCConfig(),
                                            samples=args.samples, rng=rng))
    worst = 0.0
    for name, err in errors.items():
        print(f"{name}\t{err:.3e}")
        worst = max(worst, err)
    ok = worst < gradcheck.TOLERANCE
    print(f"max_rel_error\t{worst:.3e}\nstatus\t{'pass' if ok else 'FAIL'}")
    if args.out:
        out = _outdir(args.out)
        (out / "gradcheck.tsv").write_text("layer\tmax_rel_error\n" +
                                           "".join(f"{k}\t{v:.3e}\n" for k, v in errors.items()))
        _dump_effective(out, "gradcheck", args.seed, mcfg, extra={"voxels": args.voxels})
    return 0 if ok else 2


def cmd_ablate(args):
    seed = args.seed if args.seed is not None else 0
    values = _load_values(args)
    base = cfgio.from_kv(ModelConfig, values, base=ModelConfig(stage_channels=(8, 16, 32)))
    out = _outdir(args.out)
    print("\t".join(ABLATION_COLUMNS))
    rows = run_ablation(args.grid, args.n_train, args.n_test, args.epochs, seed, base,
                        args.noise_rate,
                        progress=lambda r: print(format_ablation([r]).splitlines()[1], flush=True))
    (out / "ablation.tsv").write_text(format_ablation(rows))
    if args.plots:
        plotting.metric_bars([r["config"] for r in rows], rows, out / "ablation.png",
                             title="ablation (synthetic)")
    _dump_effective(out, "ablate", seed, base,
                    extra={"grid": args.grid, "n_train": args.n_train, "n_test": args.n_test,
                           "epochs": args.epochs, "noise_rate": args.noise_rate})
    return 0


# --- parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="evspseg", description="Sparse segmentation of small moving targets in event streams.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS thread limit (also EVUAV_THREADS); 1 gives bitwise reproducible runs")
    common.add_argument("--no-plots", dest="plots", action="store_false", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate labelled synthetic scenes")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--format", choices=("binary", "text"), default="binary")
    s.add_argument("overrides", nargs="*", metavar="key=value")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("annotate", parents=[common], help="label events from per-frame boxes")
    a.add_argument("--events", required=True)
    a.add_argument("--labels", help="existing label file (needed for --tight)")
    a.add_argument("--boxes", help="box file to apply")
    a.add_argument("--tight", action="store_true", help="derive tight per-frame boxes from --labels")
    a.add_argument("--pad", type=int, default=0)
    a.add_argument("--delta-t", type=int, default=ann.DEFAULT_DELTA_T)
    a.add_argument("--export-frames", action="store_true", help="write accumulated frames as PGM")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_annotate)

    v = sub.add_parser("voxelize", parents=[common], help="dump the active voxels of an event file")
    v.add_argument("--events", required=True)
    v.add_argument("--voxel-size", type=int, nargs=3, default=(1, 1, 1000), metavar=("VX", "VY", "VT"))
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_voxelize)

    t = sub.add_parser("train", parents=[common], help="train the segmentation network")
    t.add_argument("--data", nargs="+", required=True)
    t.add_argument("--val", nargs="+")
    t.add_argument("--config")
    t.add_argument("--model-config")
    t.add_argument("--out", required=True)
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="per-event predictions from a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--events", required=True)
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--window-us", type=int, default=8_000_000)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="IoU, ACC, Pd and Fa of a prediction file")
    e.add_argument("--events", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--match-radius", type=float, default=5.0)
    e.add_argument("--match-window", type=float, default=50.0, help="ms")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--config")
    g.add_argument("--voxels", type=int, default=40)
    g.add_argument("--samples", type=int, default=3, help="entries checked per parameter block")
    g.add_argument("--model-only", action="store_true")
    g.add_argument("--out")
    g.add_argument("overrides", nargs="*", metavar="key=value")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("ablate", parents=[common], help="component / branch / dilation ablations")
    b.add_argument("--grid", choices=("all", "components", "branches", "dilations"), default="all")
    b.add_argument("--n-train", type=int, default=3)
    b.add_argument("--n-test", type=int, default=2)
    b.add_argument("--epochs", type=int, default=3)
    b.add_argument("--noise-rate", type=float, default=0.6)
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.add_argument("overrides", nargs="*", metavar="key=value")
    b.set_defaults(func=cmd_ablate)
    return p


VALIDATION_ERRORS = (UsageError, cfgio.ConfigError, EventFormatError, EventValidationError,
                     SceneError, ann.BoxError, FileNotFoundError, ValueError)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _threads(args)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
