"""Command-line entry point for the full toolchain.

Every subcommand is deterministic given identical flags and seeds. A JSON
config file (--config) can supply any flag value by its long name with
underscores; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import archive, complexity, metrics, prune, quantize, synth
from .geometry import NoFlameDetected, SceneCalib, characterize
from .infer import colorize, forward_f32, postprocess, preprocess
from .model import build_band_segmenter, build_unet, fold_batchnorm
from .netpbm import read_netpbm, write_pgm, write_ppm
from .pipeline import (
    PipelineConfig, bench_model, directory_source, rate_limited, run_pipeline,
    synthetic_source,
)


def _shape(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.lower().split("x"))


def _pair(text: str) -> tuple[int, int]:
    x, y = (int(v) for v in text.split(","))
    return x, y


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def frame_to_input(frame: np.ndarray, graph) -> np.ndarray:
    """Adapt a camera frame to the model input: full preprocessing for the
    standard 480x640 -> 240x320 path, plain scaling when sizes already match."""
    h, w, c = graph.input_shape
    if frame.ndim == 2:
        frame = np.repeat(frame[:, :, None], 3, axis=2)
    if frame.shape == (480, 640, 3) and (h, w, c) == (240, 320, 3):
        return preprocess(frame)
    if frame.shape[:2] == (h, w):
        x = frame[:, :, :c] if frame.shape[2] >= c else np.repeat(frame[:, :, :1], c, axis=2)
        return (x / 255.0).astype(np.float32)
    raise ValueError(f"frame {frame.shape} incompatible with model input {graph.input_shape}")


def _load_frames(path, graph):
    files = sorted(p for p in Path(path).iterdir()
                   if p.suffix in (".pgm", ".ppm") and p.name.startswith("frame"))
    if not files:
        files = sorted(p for p in Path(path).iterdir() if p.suffix in (".pgm", ".ppm"))
    if not files:
        raise FileNotFoundError(f"no frames in {path}")
    return [frame_to_input(read_netpbm(p), graph) for p in files]


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    h, w = args.size
    # keep the flame proportions of the reference 480x640 scene at any size
    sy, sx = h / 480.0, w / 640.0
    spec = synth.FlameSceneSpec(
        seed=args.seed, height=h, width=w,
        nozzle_px=(max(1, int(40 * sx)), h // 2),
        lift_off_px=max(1, int(30 * sx)),
        length_px=max(1, int(360 * sx)),
        max_width_px=max(2, int(140 * sy)),
    )
    split = tuple(args.split) if args.split else None
    manifest = synth.generate_dataset(args.n, spec, args.out, split=split)
    print(f"wrote {args.n} scenes to {args.out} ({len(manifest.splitlines()) - 1} manifest rows)")
    return 0


def cmd_build(args) -> int:
    if args.kind == "bands":
        graph = build_band_segmenter(input_shape=tuple(args.input))
    else:
        graph = build_unet(args.depth, args.base_filters, tuple(args.input),
                           num_classes=args.classes, with_batchnorm=args.batchnorm,
                           seed=args.seed)
        if args.sparsity > 0:
            graph = prune.zero_filters(graph, args.sparsity, seed=args.seed)
    archive.write_model_archive(graph, args.out)
    from .model import count_parameters
    print(f"wrote {args.out}: {len(graph.layers)} layers, "
          f"{count_parameters(graph)} parameters")
    return 0


def cmd_analyze(args) -> int:
    graph = archive.read_model_archive(args.model)
    report = complexity.model_complexity(graph, tuple(args.input) if args.input else None)
    print(report.to_table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def cmd_fold_bn(args) -> int:
    graph = archive.read_model_archive(args.model)
    archive.write_model_archive(fold_batchnorm(graph), args.out)
    print(f"wrote folded model to {args.out}")
    return 0


def cmd_equalize(args) -> int:
    graph = archive.read_model_archive(args.model)
    archive.write_model_archive(quantize.equalize_cross_layer(graph, passes=args.passes), args.out)
    print(f"wrote equalized model ({args.passes} passes) to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    graph = archive.read_model_archive(args.model)
    frames = _load_frames(args.frames, graph)
    stats = quantize.calibrate(graph, frames)
    payload = {}
    for lid, ts in stats.per_layer.items():
        payload[f"min_{lid}"] = ts.min
        payload[f"max_{lid}"] = ts.max
        payload[f"hist_{lid}"] = ts.hist
        payload[f"range_{lid}"] = np.array([ts.hist_lo, ts.hist_hi])
    np.savez(args.out, frames_seen=stats.frames_seen, **payload)
    print(f"calibrated {len(stats.per_layer)} tensors over {stats.frames_seen} frames -> {args.out}")
    return 0


def _load_stats(path) -> quantize.CalibrationStats:
    data = np.load(path)
    stats = quantize.CalibrationStats(frames_seen=int(data["frames_seen"]))
    for key in data.files:
        if key.startswith("min_"):
            lid = int(key[4:])
            ts = quantize.TensorStats(min=float(data[f"min_{lid}"]), max=float(data[f"max_{lid}"]))
            ts.hist = data[f"hist_{lid}"]
            ts.hist_lo, ts.hist_hi = (float(v) for v in data[f"range_{lid}"])
            stats.per_layer[lid] = ts
    return stats


def cmd_quantize(args) -> int:
    graph = archive.read_model_archive(args.model)
    qgraph = quantize.quantize_model(graph, _load_stats(args.stats), scheme=args.scheme)
    archive.write_model_archive(qgraph, args.out)
    print(f"wrote int8 model ({args.scheme}) to {args.out}")
    return 0


def cmd_prune(args) -> int:
    graph = archive.read_model_archive(args.model)
    frames = _load_frames(args.frames, graph)
    if args.masks:
        mask_files = sorted(p for p in Path(args.masks).iterdir()
                            if p.suffix == ".pgm" and p.name.startswith("mask"))
        masks = [read_netpbm(p) for p in mask_files[:len(frames)]]
    else:
        masks = [postprocess(forward_f32(graph, f)) for f in frames]
    pruned, history = prune.prune_loop(graph, frames, masks,
                                       step_fraction=args.step, max_drop=args.max_drop,
                                       max_rounds=args.max_rounds)
    archive.write_model_archive(pruned, args.out)
    if args.history:
        Path(args.history).write_text(prune.history_csv(history))
    first, last = history[0], history[-1] if history[-1].accepted else history[-2]
    print(f"pruned in {len(history) - 1} rounds: params {first.params} -> {last.params}, "
          f"MACs {first.macs} -> {last.macs}, dice {first.dice:.4f} -> {last.dice:.4f}")
    return 0


def cmd_infer(args) -> int:
    from .infer import forward_i8, quantize_tensor
    graph = archive.read_model_archive(args.model)
    frame = read_netpbm(args.frame)
    x = frame_to_input(frame, graph)
    if graph.quantized:
        probs = forward_i8(graph, quantize_tensor(x, graph.input_quant))
    else:
        probs = forward_f32(graph, x)
    mask = postprocess(probs)
    if args.out_mask:
        write_pgm(args.out_mask, mask)
    if args.out_overlay:
        write_ppm(args.out_overlay, colorize(mask))
    counts = np.bincount(mask.ravel(), minlength=graph.num_classes)
    print("class pixel counts:", " ".join(f"{c}:{n}" for c, n in enumerate(counts)))
    return 0


def cmd_pipeline(args) -> int:
    model = archive.read_model_archive(args.model) if args.model else None
    if args.source == "synthetic":
        source = synthetic_source(args.seed, args.count)
    else:
        source = directory_source(args.source)
    if args.fps:
        source = rate_limited(source, args.fps)
    calib = SceneCalib(metres_per_pixel=args.mpp, nozzle_px=tuple(args.nozzle)) \
        if args.nozzle else None
    config = PipelineConfig(
        source=source, model=model, mode=args.mode,
        queue_capacity=args.queue_capacity, warmup_frames=args.warmup,
        calib=calib, sink=args.sink, out_dir=Path(args.out) if args.out else None,
        stage_delays_ms=tuple(args.delays) if args.delays else None,
    )
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    stats = run_pipeline(config)
    print(stats.to_table())
    if args.stats_csv:
        Path(args.stats_csv).write_text(stats.to_csv())
    if args.log:
        with open(args.log, "w") as f:
            for entry in stats.frame_log:
                f.write(json.dumps(entry) + "\n")
    return 0


def cmd_characterize(args) -> int:
    calib = SceneCalib(metres_per_pixel=args.mpp, nozzle_px=tuple(args.nozzle),
                       axis=args.axis, min_component_px=args.min_component)
    paths = [Path(args.mask)] if Path(args.mask).is_file() else \
        sorted(p for p in Path(args.mask).iterdir()
               if p.suffix == ".pgm" and p.name.startswith("mask"))
    rows = ["frame,L_m,S_m,A_m2,px_count,components"]
    for p in paths:
        try:
            g = characterize(read_netpbm(p), calib)
            rows.append(f"{p.name},{g.length_m:.6f},{g.liftoff_m:.6f},{g.area_m2:.8f},"
                        f"{g.flame_px_count},{g.component_count}")
        except NoFlameDetected:
            rows.append(f"{p.name},,,,0,0")
    out = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(out)
    else:
        print(out, end="")
    return 0


def cmd_eval(args) -> int:
    pred_files = sorted(p for p in Path(args.pred).iterdir() if p.suffix == ".pgm")
    pred_masks = [p for p in pred_files if p.name.startswith("mask")]
    pred_files = pred_masks or pred_files
    truth_files = sorted(p for p in Path(args.truth).iterdir()
                         if p.suffix == ".pgm" and p.name.startswith("mask"))
    if len(pred_files) != len(truth_files):
        raise ValueError(f"{len(pred_files)} predictions vs {len(truth_files)} truths")
    rows = ["frame,macro_dice,macro_jaccard"]
    dices, jacs = [], []
    geo_pred, geo_truth = {k: [] for k in "LSA"}, {k: [] for k in "LSA"}
    calib = SceneCalib(metres_per_pixel=args.mpp, nozzle_px=tuple(args.nozzle)) \
        if args.nozzle else None
    for pp, tp in zip(pred_files, truth_files):
        pm, tm = read_netpbm(pp), read_netpbm(tp)
        d, j = metrics.dice(pm, tm), metrics.jaccard(pm, tm)
        dices.append(d)
        jacs.append(j)
        rows.append(f"{pp.name},{d:.6f},{j:.6f}")
        if calib is not None:
            try:
                gp, gt = characterize(pm, calib), characterize(tm, calib)
            except NoFlameDetected:
                continue
            for key, a, b in (("L", gp.length_m, gt.length_m),
                              ("S", gp.liftoff_m, gt.liftoff_m),
                              ("A", gp.area_m2, gt.area_m2)):
                geo_pred[key].append(a)
                geo_truth[key].append(b)
    print(f"macro dice {np.mean(dices):.4f}  macro jaccard {np.mean(jacs):.4f}")
    if calib is not None and geo_truth["L"]:
        for key in "LSA":
            print(f"{key}: MAPE {metrics.mape(geo_pred[key], geo_truth[key]):.3f}%  "
                  f"RMSPE {metrics.rmspe(geo_pred[key], geo_truth[key]):.3f}%")
    if args.out:
        Path(args.out).write_text("\n".join(rows) + "\n")
    return 0


def cmd_bench(args) -> int:
    graph = archive.read_model_archive(args.model)
    result = bench_model(graph, reps=args.reps, seed=args.seed)
    print(f"latency mean {result['mean_s'] * 1000:.2f} ms, min {result['min_s'] * 1000:.2f} ms "
          f"over {args.reps} reps")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="flamecam",
                                     description="jet-flame smart-camera toolchain")
    parser.add_argument("--config", help="JSON file supplying flag defaults")
    subs = parser.add_subparsers(dest="command", required=True)
    sp: dict[str, argparse.ArgumentParser] = {}

    def sub(name, func, **kw):
        p = subs.add_parser(name, **kw)
        p.set_defaults(func=func)
        sp[name] = p
        return p

    p = sub("gen", cmd_gen, help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=201)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_shape, default=(480, 640), help="HxW")
    p.add_argument("--split", type=_shape, default=None, help="train x val x test")

    p = sub("build", cmd_build, help="build a seeded model archive")
    p.add_argument("--kind", choices=["unet", "bands"], default="unet")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--base-filters", type=int, default=8)
    p.add_argument("--input", type=_shape, default=(240, 320, 3), help="HxWxC")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--batchnorm", action="store_true")
    p.add_argument("--sparsity", type=float, default=0.0,
                   help="fraction of prunable filters to zero (over-provisioned model)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub("analyze", cmd_analyze, help="MACs/FLOPs complexity report")
    p.add_argument("--model", required=True)
    p.add_argument("--input", type=_shape, default=None, help="HxWxC override")
    p.add_argument("--csv")

    p = sub("fold-bn", cmd_fold_bn, help="fold batchnorm into convolutions")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub("equalize", cmd_equalize, help="cross-layer equalization")
    p.add_argument("--model", required=True)
    p.add_argument("--passes", type=int, default=30)
    p.add_argument("--out", required=True)

    p = sub("calibrate", cmd_calibrate, help="collect activation statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", required=True, help="directory of PGM/PPM frames")
    p.add_argument("--out", required=True, help="output .npz stats file")

    p = sub("quantize", cmd_quantize, help="produce the int8 model")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--scheme", choices=["minmax", "percentile"], default="minmax")
    p.add_argument("--out", required=True)

    p = sub("prune", cmd_prune, help="iterative APoZ channel pruning")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--masks", help="reference masks; defaults to the model's own outputs")
    p.add_argument("--step", type=float, default=0.03)
    p.add_argument("--max-drop", type=float, default=0.03)
    p.add_argument("--max-rounds", type=int, default=None)
    p.add_argument("--history", help="CSV of per-round params/macs/flops/dice")
    p.add_argument("--out", required=True)

    p = sub("infer", cmd_infer, help="segment one frame")
    p.add_argument("--model", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--out-mask")
    p.add_argument("--out-overlay")

    p = sub("pipeline", cmd_pipeline, help="run the streaming pipeline")
    p.add_argument("--model")
    p.add_argument("--mode", choices=["single", "multi"], default="single")
    p.add_argument("--source", default="synthetic", help="'synthetic' or a frame directory")
    p.add_argument("--count", type=int, default=50, help="frames for the synthetic source")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queue-capacity", type=int, default=4)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--fps", type=float, default=None, help="fixed-rate replay (e.g. 4)")
    p.add_argument("--sink", choices=["masks", "overlays"], default=None)
    p.add_argument("--out", help="sink output directory")
    p.add_argument("--delays", type=_floats, default=None,
                   help="injected per-stage delays in ms, e.g. 10,20,40,10")
    p.add_argument("--mpp", type=float, default=0.01)
    p.add_argument("--nozzle", type=_pair, default=None, help="x,y enables characterization")
    p.add_argument("--stats-csv")
    p.add_argument("--log", help="per-frame JSON-lines log")

    p = sub("characterize", cmd_characterize, help="geometry from mask(s)")
    p.add_argument("--mask", required=True, help="mask PGM or directory of mask_*.pgm")
    p.add_argument("--mpp", type=float, required=True)
    p.add_argument("--nozzle", type=_pair, required=True)
    p.add_argument("--axis", choices=["horizontal", "vertical"], default="horizontal")
    p.add_argument("--min-component", type=int, default=50)
    p.add_argument("--out")

    p = sub("eval", cmd_eval, help="Dice/Jaccard (and geometry errors) vs truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mpp", type=float, default=0.01)
    p.add_argument("--nozzle", type=_pair, default=None)
    p.add_argument("--out")

    p = sub("bench", cmd_bench, help="model forward latency")
    p.add_argument("--model", required=True)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    return parser, sp


def _scan_config(argv, subcommands):
    """Locate --config and the subcommand without a full parse, so config
    values can satisfy required flags."""
    config_path = None
    command = None
    it = iter(range(len(argv)))
    for i in it:
        tok = argv[i]
        if tok == "--config":
            config_path = argv[i + 1] if i + 1 < len(argv) else None
            next(it, None)
        elif tok.startswith("--config="):
            config_path = tok.split("=", 1)[1]
        elif command is None and tok in subcommands:
            command = tok
    return config_path, command


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    config_path, command = _scan_config(argv, subparsers)
    if config_path and command:
        config = json.loads(Path(config_path).read_text())
        subparsers[command].set_defaults(
            **{k: v for k, v in config.items() if k != "command"})
        # config-supplied values satisfy required flags; explicit flags still win
        for action in subparsers[command]._actions:
            if action.dest in config:
                action.required = False
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - one-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
