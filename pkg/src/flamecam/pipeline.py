"""Staged streaming runtime: capture -> preprocess -> inference -> postprocess.

Runs the four stages either sequentially per frame (single mode) or as one
worker thread per stage connected by bounded blocking FIFO queues (multi
mode). Backpressure comes from the queue capacity; frames are never
dropped or reordered, so both modes produce identical outputs.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .geometry import FlameGeometry, NoFlameDetected, SceneCalib, characterize, render_overlay
from .infer import colorize, forward_f32, forward_i8, postprocess, preprocess, quantize_tensor
from .model import ModelGraph
from .netpbm import read_netpbm, write_pgm, write_ppm
from .synth import FlameSceneSpec, generate_scene, vary_spec

STAGES = ("capture", "preprocess", "inference", "postprocess")

SINGLE = "single"
MULTI = "multi"

_POISON = object()


@dataclass
class PipelineConfig:
    source: Iterable[tuple[int, np.ndarray]]
    model: ModelGraph | None = None
    mode: str = SINGLE
    queue_capacity: int = 4
    warmup_frames: int = 10
    calib: SceneCalib | None = None
    sink: str | None = None  # None | "masks" | "overlays"
    out_dir: Path | None = None
    stage_delays_ms: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.mode not in (SINGLE, MULTI):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.sink not in (None, "masks", "overlays"):
            raise ValueError(f"unknown sink {self.sink!r}")
        if self.sink and self.out_dir is None:
            raise ValueError("sink requires out_dir")


@dataclass
class StageStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float


@dataclass
class PipelineStats:
    stages: dict[str, StageStats]
    throughput_fps: float
    frames_processed: int
    frames_dropped: int
    frame_ids: list[int]
    geometry: list[FlameGeometry | None]
    frame_log: list[dict] = field(default_factory=list)

    def to_table(self) -> str:
        lines = [f"{'stage':<12} {'mean ms':>10} {'p50 ms':>10} {'p95 ms':>10}"]
        for name in STAGES:
            s = self.stages[name]
            lines.append(f"{name:<12} {s.mean_ms:>10.2f} {s.p50_ms:>10.2f} {s.p95_ms:>10.2f}")
        lines.append(f"throughput: {self.throughput_fps:.2f} fps over "
                     f"{self.frames_processed} frames ({self.frames_dropped} dropped)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["stage,mean_ms,p50_ms,p95_ms"]
        for name in STAGES:
            s = self.stages[name]
            rows.append(f"{name},{s.mean_ms:.4f},{s.p50_ms:.4f},{s.p95_ms:.4f}")
        rows.append(f"throughput_fps,{self.throughput_fps:.4f},,")
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Frame sources
# ---------------------------------------------------------------------------

def directory_source(path) -> Iterator[tuple[int, np.ndarray]]:
    """Frames from *.pgm / *.ppm files, sorted by name; grayscale is replicated to BGR."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix in (".pgm", ".ppm"))
    # dataset directories hold frame_* and mask_* side by side; feed only frames
    frame_files = [p for p in files if p.name.startswith("frame")]
    files = frame_files or files
    if not files:
        raise FileNotFoundError(f"no PGM/PPM frames in {path}")
    for i, p in enumerate(files):
        img = read_netpbm(p)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        yield i, img


def synthetic_source(seed: int, count: int,
                     base_spec: FlameSceneSpec | None = None) -> Iterator[tuple[int, np.ndarray]]:
    """Deterministic stream of generated scenes as BGR frames."""
    base = base_spec or FlameSceneSpec(seed=seed)
    rng = np.random.default_rng(seed)
    for i in range(count):
        spec = vary_spec(base, rng, seed=seed * 1_000_003 + i)
        frame, _, _ = generate_scene(spec)
        yield i, np.repeat(frame[:, :, None], 3, axis=2)


def rate_limited(source: Iterable[tuple[int, np.ndarray]],
                 fps: float) -> Iterator[tuple[int, np.ndarray]]:
    """Replay a source at a fixed rate (the capture cadence of a real camera)."""
    period = 1.0 / fps
    start = time.perf_counter()
    for i, (fid, frame) in enumerate(source):
        due = start + i * period
        delay = due - time.perf_counter()
        if delay > 0:
            time.sleep(delay)
        yield fid, frame


# ---------------------------------------------------------------------------
# Stage bodies
# ---------------------------------------------------------------------------

def _make_stages(config: PipelineConfig):
    delays = config.stage_delays_ms or (0, 0, 0, 0)
    model = config.model

    def run_model(x: np.ndarray) -> np.ndarray:
        if model is None:
            return np.zeros(x.shape[:2] + (4,), dtype=np.float32)
        if model.quantized:
            return forward_i8(model, quantize_tensor(x, model.input_quant))
        return forward_f32(model, x)

    def capture(item):
        return item

    def pre(item):
        item["tensor"] = preprocess(item["frame"])
        del item["frame"]
        return item

    def infer_stage(item):
        item["probs"] = run_model(item.pop("tensor"))
        return item

    def post(item):
        mask = postprocess(item.pop("probs"))
        item["mask"] = mask
        if config.calib is not None:
            try:
                item["geometry"] = characterize(mask, config.calib)
            except NoFlameDetected:
                item["geometry"] = None
        if config.sink == "masks":
            write_pgm(Path(config.out_dir) / f"mask_{item['id']:04d}.pgm", mask)
        elif config.sink == "overlays":
            rgb = colorize(mask)
            geom = item.get("geometry")
            if geom is not None:
                rgb = render_overlay(rgb, geom)
            write_ppm(Path(config.out_dir) / f"overlay_{item['id']:04d}.ppm", rgb)
        return item

    bodies = [capture, pre, infer_stage, post]

    def timed(stage_idx: int, body: Callable, durations: list[float]):
        delay = delays[stage_idx] / 1000.0

        def run(item):
            t0 = time.perf_counter()
            if delay:
                time.sleep(delay)
            out = body(item)
            dt = time.perf_counter() - t0
            durations.append(dt)
            out.setdefault("stamps", {})[STAGES[stage_idx]] = time.perf_counter()
            return out

        return run

    durations: list[list[float]] = [[] for _ in STAGES]
    stages = [timed(i, b, durations[i]) for i, b in enumerate(bodies)]
    return stages, durations


def _summarize(durations, done_times, results, warmup: int) -> PipelineStats:
    n = len(done_times)
    post = slice(warmup, None)
    stage_stats = {}
    for name, durs in zip(STAGES, durations):
        d = np.asarray(durs[post]) * 1000.0
        if d.size == 0:
            d = np.asarray(durs) * 1000.0
        stage_stats[name] = StageStats(float(d.mean()), float(np.percentile(d, 50)),
                                       float(np.percentile(d, 95)))
    if n > warmup and done_times[-1] > done_times[warmup - 1 if warmup else 0]:
        t0 = done_times[warmup - 1] if warmup else done_times[0]
        count = n - warmup if warmup else n - 1
        fps = count / (done_times[-1] - t0)
    else:
        fps = 0.0
    return PipelineStats(
        stages=stage_stats,
        throughput_fps=fps,
        frames_processed=n,
        frames_dropped=0,
        frame_ids=[r["id"] for r in results],
        geometry=[r.get("geometry") for r in results],
        frame_log=[{"id": r["id"], **{k: v for k, v in r.get("stamps", {}).items()}}
                   for r in results],
    )


def run_pipeline(config: PipelineConfig) -> PipelineStats:
    """Execute the pipeline to source exhaustion and return its statistics."""
    stages, durations = _make_stages(config)
    results: list[dict] = []
    done_times: list[float] = []

    if config.mode == SINGLE:
        for fid, frame in config.source:
            item = {"id": fid, "frame": frame}
            for stage in stages:
                item = stage(item)
            results.append(item)
            done_times.append(time.perf_counter())
    else:
        _run_multi(config, stages, results, done_times)

    if len(results) <= config.warmup_frames:
        raise ValueError(f"source yielded {len(results)} frames, "
                         f"need more than warmup_frames={config.warmup_frames}")
    return _summarize(durations, done_times, results, config.warmup_frames)


def _run_multi(config: PipelineConfig, stages, results, done_times) -> None:
    qs = [queue.Queue(maxsize=config.queue_capacity) for _ in range(len(stages))]
    errors: list[BaseException] = []

    def producer():
        try:
            for fid, frame in config.source:
                qs[0].put({"id": fid, "frame": frame})
        except BaseException as e:  # noqa: BLE001 - propagated to the caller
            errors.append(e)
        finally:
            qs[0].put(_POISON)

    def worker(idx: int):
        last = idx == len(stages) - 1
        while True:
            item = qs[idx].get()
            if item is _POISON:
                if not last:
                    qs[idx + 1].put(_POISON)
                return
            try:
                out = stages[idx](item)
            except BaseException as e:  # noqa: BLE001
                errors.append(e)
                if not last:
                    qs[idx + 1].put(_POISON)
                # drain remaining input so upstream stages can finish
                while qs[idx].get() is not _POISON:
                    pass
                return
            if last:
                results.append(out)
                done_times.append(time.perf_counter())
            else:
                qs[idx + 1].put(out)

    threads = [threading.Thread(target=producer, name="pipeline-source")]
    threads += [threading.Thread(target=worker, args=(i,), name=f"pipeline-{STAGES[i]}")
                for i in range(len(stages))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


def bench_model(graph: ModelGraph, input_shape: tuple[int, int, int] | None = None,
                reps: int = 10, seed: int = 0) -> dict[str, float]:
    """Mean/min forward latency in seconds over reps runs on a random frame."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    shape = tuple(input_shape or graph.input_shape)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=shape).astype(np.float32)
    xq = quantize_tensor(x, graph.input_quant) if graph.quantized else None
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        if graph.quantized:
            forward_i8(graph, xq)
        else:
            forward_f32(graph, x)
        samples.append(time.perf_counter() - t0)
    return {"mean_s": float(np.mean(samples)), "min_s": float(np.min(samples)),
            "reps": float(reps)}
