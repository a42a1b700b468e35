"""Command-line entry point.

Every subcommand writes a ``<output>.run.json`` sidecar recording the exact
arguments, seed, and module configs that produced the artifact. Exit codes:
0 ok, 2 usage error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, activation, gait, sigproc, stream
from .dataset import (
    PipelineConfig,
    Recording,
    WindowConfig,
    load_manifest,
    load_manifest_recordings,
    load_recording,
    prepare_split,
    save_manifest,
    save_recording_binary,
    save_windows,
    synth_corpus,
)
from .model import (
    AblationFlags,
    EncoderConfig,
    ModelBundle,
    NumericDivergenceError,
    TABLE_ORDER,
    TrainConfig,
    evaluate,
    finetune,
    loso_test_keys,
    run_ablation,
    train_main,
    train_timing,
    write_ablation_csv,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("GAITLOOM_SEED", "0"))


def _write_run_config(out_path, args, extra: dict | None = None) -> None:
    doc = {
        "tool": "gaitloom",
        "version": __version__,
        "command": args.command,
        "args": {k: v for k, v in vars(args).items() if k not in ("func",)},
        "seed": _resolve_seed(args),
    }
    if extra:
        doc["configs"] = extra
    Path(str(out_path) + ".run.json").write_text(json.dumps(doc, indent=2, default=str))


def _pipeline_config(args) -> PipelineConfig:
    pre = sigproc.PreprocessConfig(hp_hz=getattr(args, "hp_hz", None))
    det = activation.DetectorParams(
        l=getattr(args, "l", 6),
        epsilon_rule=getattr(args, "eps_rule", "mean"),
    )
    win = WindowConfig(stride=getattr(args, "stride", 60))
    return PipelineConfig(preprocess=pre, detector=det, window=win)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=getattr(args, "batch", 64),
        accum_steps=getattr(args, "accum", 1),
        max_epochs=getattr(args, "epochs", 60),
        alpha=getattr(args, "alpha", 1.0),
        seed=_resolve_seed(args),
        val_fraction=getattr(args, "val_fraction", 0.1),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    rec = load_recording(args.infile)
    cfg = sigproc.PreprocessConfig(hp_hz=args.hp_hz)
    if args.fit_stats:
        stats = sigproc.compute_stats(sigproc.filter_emg(rec.emg, cfg))
        Path(args.stats).write_text(json.dumps(stats.to_dict(), indent=2))
    else:
        stats = sigproc.ChannelStats.from_dict(json.loads(Path(args.stats).read_text()))
    out = sigproc.preprocess(rec.emg, cfg, stats)
    save_recording_binary(args.outfile, Recording(
        emg=out, angle=rec.angle, fs=rec.fs, subject_id=rec.subject_id,
        trial_id=rec.trial_id, speed=rec.speed))
    _write_run_config(args.outfile, args, {"preprocess": cfg.to_dict()})
    return EXIT_OK


def cmd_segment(args) -> int:
    rec = load_recording(args.infile)
    peaks, _ = gait.detect_extrema(rec.angle, args.min_prominence,
                                   int(args.min_distance_s * rec.fs))
    cycles = gait.segment_cycles(rec.angle, peaks)
    gait.save_cycles_csv(args.outfile, cycles)
    _write_run_config(args.outfile, args)
    print(f"{len(cycles)} cycles -> {args.outfile}")
    return EXIT_OK


def cmd_masks(args) -> int:
    rec = load_recording(args.infile)
    cycles = gait.load_cycles_csv(args.cycles)
    params = activation.DetectorParams(l=args.l, epsilon_rule=args.eps_rule)
    env = sigproc.filter_emg(rec.emg, sigproc.PreprocessConfig(hp_hz=args.hp_hz))
    binary = activation.enforce_min_duration(
        activation.detect_activation(env, params, fs=rec.fs),
        params.min_duration_ms, fs=rec.fs)
    mask = activation.principal_mask(activation.per_cycle_masks(binary, cycles))
    activation.save_mask_csv(args.outfile, mask)
    _write_run_config(args.outfile, args)
    print(f"principal mask over {mask.n_cycles} cycles -> {args.outfile}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = _resolve_seed(args)
    corpus = synth_corpus(args.subjects, args.trials, args.duration, seed,
                          noisy=not args.clean, spurious_rate=args.spurious_rate)
    entries = []
    for rec, _truth in corpus:
        name = f"{rec.subject_id}_t{rec.trial_id}.glrc"
        save_recording_binary(out_dir / name, rec)
        entries.append({"path": name, "subject": rec.subject_id,
                        "trial": rec.trial_id, "speed": rec.speed, "fs": rec.fs})
    manifest = out_dir / "manifest.json"
    save_manifest(manifest, entries, extra={"seed": seed})
    _write_run_config(manifest, args)
    print(f"{len(entries)} recordings -> {manifest}")
    return EXIT_OK


def cmd_dataset_build(args) -> int:
    recs = load_manifest_recordings(args.manifest)
    pcfg = _pipeline_config(args)
    split = prepare_split(recs, test_keys=set(), cfg=pcfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shard = out_dir / "windows.glws"
    save_windows(shard, split.train)
    Path(out_dir / "stats.json").write_text(json.dumps(split.stats.to_dict(), indent=2))
    for subject, mask in split.masks.items():
        activation.save_mask_csv(out_dir / f"mask_{subject}.csv", mask)
    _write_run_config(shard, args)
    print(f"{len(split.train)} windows ({split.dropped} dropped) -> {shard}")
    return EXIT_OK


def cmd_dataset_split(args) -> int:
    doc = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    test_trials = sorted(e["trial"] for e in doc["recordings"] if e["subject"] == args.target)
    if not test_trials:
        raise ValueError(f"unknown subject {args.target!r}")
    promoted = set(test_trials[: args.n_target_trials])
    train, test = [], []
    for e in doc["recordings"]:
        if e["subject"] != args.target or e["trial"] in promoted:
            train.append(e)
        else:
            test.append(e)
    save_manifest(base / args.train_out, train)
    save_manifest(base / args.test_out, test)
    _write_run_config(base / args.train_out, args)
    print(f"train {len(train)} / test {len(test)} recordings")
    return EXIT_OK


def _split_from_args(args):
    recs = load_manifest_recordings(args.manifest)
    pcfg = _pipeline_config(args)
    if getattr(args, "holdout", None):
        keys = loso_test_keys(recs, args.holdout, args.n_target_trials)
    else:
        keys = set()
    return prepare_split(recs, keys, pcfg), pcfg


def cmd_train_timing(args) -> int:
    split, pcfg = _split_from_args(args)
    tc = _train_config(args)
    model = train_timing(split.train, EncoderConfig(), tc)
    _save_timing(args.outfile, model)
    _write_run_config(args.outfile, args, {"train": vars(tc)})
    print(f"timing model -> {args.outfile}")
    return EXIT_OK


def _save_timing(path, model) -> None:
    from .autodiff import save_checkpoint
    save_checkpoint(path, {f"timing.{k}": v for k, v in model.state_dict().items()})
    Path(str(path) + ".json").write_text(json.dumps(
        {"config": model.cfg.to_dict(), "kind": "timing"}, indent=2))


def _load_timing(path):
    from .autodiff import load_checkpoint
    from .model import TimingModel
    meta = json.loads(Path(str(path) + ".json").read_text())
    cfg = EncoderConfig.from_dict(meta["config"])
    model = TimingModel(cfg, np.random.default_rng(0))
    tensors, _ = load_checkpoint(path)
    model.load_state_dict({k[7:]: v for k, v in tensors.items() if k.startswith("timing.")})
    return model


def cmd_train(args) -> int:
    split, pcfg = _split_from_args(args)
    tc = _train_config(args)
    flags = AblationFlags.from_marks(args.flags)
    timing = _load_timing(args.timing_model) if args.timing_model else None
    if flags.mask_filter and timing is None:
        timing = train_timing(split.train, EncoderConfig(), tc)
    main = train_main(split.train, split.masks, flags, EncoderConfig(), tc, timing=timing)
    bundle = ModelBundle(main=main, timing=timing, flags=flags, cfg=EncoderConfig())
    bundle.save(args.outfile)
    _write_run_config(args.outfile, args, {"train": vars(tc), "flags": flags.to_dict()})
    print(f"model ({flags.marks()}) -> {args.outfile}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    bundle = ModelBundle.load(args.model)
    rec = load_recording(args.infile, subject_id=args.subject or "online")
    pcfg = _pipeline_config(args)
    split = prepare_split([rec], test_keys=set(), cfg=pcfg)
    tc = _train_config(args)
    finetune(bundle, split.train, split.masks, tc)
    bundle.save(args.outfile)
    _write_run_config(args.outfile, args)
    print(f"fine-tuned model -> {args.outfile}")
    return EXIT_OK


def cmd_eval(args) -> int:
    split, pcfg = _split_from_args(args)
    bundle = ModelBundle.load(args.model)
    samples = split.test if split.test else split.train
    report = evaluate(bundle, samples, split.masks)
    out = Path(args.outfile)
    if args.report == "json":
        out.write_text(json.dumps(report, indent=2))
    else:
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["group", "rmse", "nrmse", "r2"])
            w.writerow(["overall", *(f"{report['overall'][k]:.6f}" for k in ("rmse", "nrmse", "r2"))])
            for g, m in report["groups"].items():
                w.writerow([g, *(f"{m[k]:.6f}" for k in ("rmse", "nrmse", "r2"))])
    _write_run_config(out, args)
    print(f"rmse={report['overall']['rmse']:.3f} deg over {report['n']} windows -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    recs = load_manifest_recordings(args.manifest)
    pcfg = _pipeline_config(args)
    tc = _train_config(args)
    if args.combos == "all":
        combos = TABLE_ORDER
    else:
        combos = [AblationFlags(False, False, False), AblationFlags(True, False, False),
                  AblationFlags(False, False, True), AblationFlags(True, True, True)]
    seeds = [_resolve_seed(args) + i for i in range(args.seeds)]
    rows = run_ablation(recs, combos, seeds, pcfg, tc, n_target_trials=args.n_target_trials)
    write_ablation_csv(args.outfile, rows)
    _write_run_config(args.outfile, args)
    for r in rows:
        print(f"{r.flags.marks()}: median rmse {r.median:.3f}")
    return EXIT_OK


def cmd_stream(args) -> int:
    bundle = ModelBundle.load(args.model)
    stats = sigproc.ChannelStats.from_dict(json.loads(Path(args.stats).read_text()))
    mask = activation.load_mask_csv(args.mask) if args.mask else None
    engine = stream.StreamEngine(bundle, stats, mask,
                                 pconfig=sigproc.PreprocessConfig(hp_hz=args.hp_hz))
    if args.replay:
        rec = load_recording(args.replay)
        rate = None if args.rate in (None, 0) else args.rate
        preds = stream.run_replay(engine, rec, rate=rate)
    else:
        print(f"listening on port {args.listen}", file=sys.stderr)
        preds = stream.serve(engine, port=args.listen)
    Path(args.report).write_text(stream.predictions_to_json(preds, engine))
    _write_run_config(args.report, args)
    s = engine.latency_summary()
    print(f"{len(preds)} predictions, latency p50={s['p50_ms']:.2f}ms "
          f"p95={s['p95_ms']:.2f}ms max={s['max_ms']:.2f}ms -> {args.report}")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    rec = load_recording(args.infile)
    peaks, _ = gait.detect_extrema(rec.angle)
    cycles = gait.segment_cycles(rec.angle, peaks)
    grid = np.linspace(0.0, 1.0, 100, endpoint=False)
    curves = []
    for c in cycles:
        span = rec.angle[c.start_idx : c.end_idx]
        curves.append(np.interp(grid * len(span), np.arange(len(span)), span))
    arr = np.stack(curves)
    out = Path(args.outfile)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["phase", "angle_mean", "angle_sd"])
        for p, m, s in zip(grid, arr.mean(axis=0), arr.std(axis=0)):
            w.writerow([f"{p:.3f}", f"{m:.6f}", f"{s:.6f}"])
    _write_run_config(out, args)
    print(f"per-gait average curve over {len(cycles)} strides -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaitloom", description=__doc__)
    p.add_argument("--version", action="version", version=f"gaitloom {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add_seed(sp):
        sp.add_argument("--seed", type=int, default=None,
                        help="rng seed (default: $GAITLOOM_SEED or 0)")

    sp = sub.add_parser("preprocess", help="rectify + filter + normalize a recording")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.add_argument("--stats", required=True, help="channel stats JSON (read, or written with --fit-stats)")
    sp.add_argument("--fit-stats", action="store_true", help="compute stats from this recording")
    sp.add_argument("--hp-hz", type=float, default=None, help="optional raw-signal high-pass")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("segment", help="detect gait cycles from the angle series")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.add_argument("--min-prominence", type=float, default=10.0)
    sp.add_argument("--min-distance-s", type=float, default=0.5)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("masks", help="principal activation mask from a recording")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--cycles", required=True)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.add_argument("--eps-rule", choices=["q1", "mean", "q3"], default="mean")
    sp.add_argument("--l", type=int, default=6, help="window length in 5 ms units")
    sp.add_argument("--hp-hz", type=float, default=None)
    sp.set_defaults(func=cmd_masks)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--subjects", type=int, default=6)
    sp.add_argument("--trials", type=int, default=2)
    sp.add_argument("--duration", type=float, default=24.0, help="seconds per trial")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--clean", action="store_true", help="noiseless mode")
    sp.add_argument("--spurious-rate", type=float, default=0.3)
    add_seed(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("dataset", help="dataset operations")
    dsub = sp.add_subparsers(dest="dataset_command", required=True)
    d = dsub.add_parser("build", help="build window shards from a manifest")
    d.add_argument("--manifest", required=True)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--stride", type=int, default=60)
    d.add_argument("--hp-hz", type=float, default=None)
    d.set_defaults(func=cmd_dataset_build, command="dataset build")
    d = dsub.add_parser("split", help="partition a manifest by subject/trials")
    d.add_argument("--manifest", required=True)
    d.add_argument("--target", required=True)
    d.add_argument("--n-target-trials", type=int, default=0)
    d.add_argument("--train-out", default="train_manifest.json")
    d.add_argument("--test-out", default="test_manifest.json")
    d.set_defaults(func=cmd_dataset_split, command="dataset split")
    d = dsub.add_parser("synth", help="alias of the top-level synth command")
    d.add_argument("--subjects", type=int, default=6)
    d.add_argument("--trials", type=int, default=2)
    d.add_argument("--duration", type=float, default=24.0)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--clean", action="store_true")
    d.add_argument("--spurious-rate", type=float, default=0.3)
    d.add_argument("--seed", type=int, default=None)
    d.set_defaults(func=cmd_synth, command="dataset synth")

    def add_train_common(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--holdout", default=None, help="subject left out for testing")
        sp.add_argument("--n-target-trials", type=int, default=1)
        sp.add_argument("--stride", type=int, default=60)
        sp.add_argument("--batch", type=int, default=64)
        sp.add_argument("--accum", type=int, default=1)
        sp.add_argument("--epochs", type=int, default=60)
        sp.add_argument("--val-fraction", type=float, default=0.1)
        add_seed(sp)

    sp = sub.add_parser("train-timing", help="step 1: train the timing predictor")
    add_train_common(sp)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.set_defaults(func=cmd_train_timing)

    sp = sub.add_parser("train", help="step 2: train the joint angle model")
    add_train_common(sp)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.add_argument("--flags", default="YYY", help="decoupling/aux/filter marks, e.g. YYY, nnn, YnY")
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--timing-model", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="step 3: adapt on a calibration recording")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.add_argument("--subject", default=None)
    sp.add_argument("--batch", type=int, default=64)
    add_seed(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a model on a manifest split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--holdout", default=None)
    sp.add_argument("--n-target-trials", type=int, default=1)
    sp.add_argument("--stride", type=int, default=60)
    sp.add_argument("--report", choices=["json", "csv"], default="json")
    sp.add_argument("--out", dest="outfile", required=True)
    add_seed(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="strategy ablation table")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--combos", choices=["core", "all"], default="core")
    sp.add_argument("--n-target-trials", type=int, default=1)
    sp.add_argument("--stride", type=int, default=240)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--val-fraction", type=float, default=0.1)
    add_seed(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("stream", help="streaming inference over frames")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--replay", help="recording file to replay")
    group.add_argument("--listen", type=int, help="TCP port to accept frames on")
    sp.add_argument("--rate", type=float, default=None, help="replay rate (default: as fast as possible)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--mask", default=None)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--hp-hz", type=float, default=None)
    sp.set_defaults(func=cmd_stream)

    sp = sub.add_parser("plot-data", help="per-gait average curve CSV")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.set_defaults(func=cmd_plot_data)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericDivergenceError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
