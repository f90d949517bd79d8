"""Structured filter pruning: APoZ scoring, channel surgery with skip-edge
bookkeeping, and the iterative prune-until-degradation loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .complexity import model_complexity
from .infer import forward_f32, postprocess
from .metrics import dice
from .model import (
    BATCHNORM, CONCAT, CONV, INPUT, LEAKY_RELU, MAXPOOL, RELU, SOFTMAX, UPSAMPLE,
    GraphError, ModelGraph, count_parameters, validate_graph,
)

ZERO_EPS = 1e-9  # |activation| below this counts as zero for LeakyReLU channels


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class ApozEntry:
    layer_id: int
    filter_index: int
    apoz: float
    prunable: bool


@dataclass(frozen=True)
class ApozReport:
    entries: tuple[ApozEntry, ...]
    frames_counted: int

    def prunable_entries(self) -> list[ApozEntry]:
        return [e for e in self.entries if e.prunable]


def protected_conv_ids(graph: ModelGraph) -> set[int]:
    """First 2 and last 2 conv layers in topological order are never pruned."""
    convs = [l.id for l in graph.layers if l.kind == CONV]
    return set(convs[:2]) | set(convs[-2:])


def _activation_site(graph: ModelGraph, conv_id: int):
    """The layer whose output carries the conv's post-activation values.

    Follows a directly-attached BN and then a (Leaky)ReLU when present;
    falls back to the conv output itself.
    """
    site = graph.layer(conv_id)
    kinds = (BATCHNORM, RELU, LEAKY_RELU)
    for _ in range(2):
        cons = [l for l in graph.consumers(site.id) if l.kind in kinds and l.inputs == [site.id]]
        if not cons:
            break
        site = cons[0]
        if site.kind in (RELU, LEAKY_RELU):
            break
    return site


def compute_apoz(graph: ModelGraph, frames) -> ApozReport:
    """Fraction of exactly-zero post-activation values per conv filter, over
    all frames and spatial positions."""
    frames = list(frames)
    if not frames:
        raise ValueError("APoZ needs at least one frame")
    protected = protected_conv_ids(graph)
    sites = {l.id: _activation_site(graph, l.id) for l in graph.conv_layers()}
    zero_counts: dict[int, np.ndarray] = {}
    totals: dict[int, int] = {}
    for frame in frames:
        record: dict[int, np.ndarray] = {}
        forward_f32(graph, frame, record=record)
        for conv_id, site in sites.items():
            act = record[site.id]
            zeros = (np.abs(act) <= ZERO_EPS) if site.kind == LEAKY_RELU else (act == 0.0)
            zero_counts[conv_id] = zero_counts.get(conv_id, 0) + zeros.sum(axis=(0, 1))
            totals[conv_id] = totals.get(conv_id, 0) + act.shape[0] * act.shape[1]
    entries = []
    for conv in graph.conv_layers():
        apoz = zero_counts[conv.id] / totals[conv.id]
        for i, a in enumerate(apoz):
            entries.append(ApozEntry(conv.id, i, float(a), conv.id not in protected))
    return ApozReport(entries=tuple(entries), frames_counted=len(frames))


# ---------------------------------------------------------------------------
# Surgery
# ---------------------------------------------------------------------------

def remove_filters(graph: ModelGraph, victims) -> tuple[ModelGraph, dict[int, list[int]]]:
    """Delete conv filters and every downstream weight column that fed on them.

    victims: iterable of (conv layer id, filter index). Returns the pruned
    graph plus a channel map: surviving original output-channel indices per
    layer, with Concat offsets resolved.
    """
    victims_by_layer: dict[int, set[int]] = {}
    for lid, fi in victims:
        victims_by_layer.setdefault(lid, set()).add(fi)

    protected = protected_conv_ids(graph)
    index = {l.id: l for l in graph.layers}
    for lid, idxs in victims_by_layer.items():
        layer = index.get(lid)
        if layer is None or layer.kind != CONV:
            raise PruneError(f"layer {lid} is not a conv layer")
        if lid in protected:
            raise PruneError(f"layer {lid} is protected (first/last two convs)")
        cout = layer.weight.shape[0]
        if not all(0 <= i < cout for i in idxs):
            raise PruneError(f"filter index out of range for layer {lid}")
        if len(idxs) >= cout:
            raise PruneError(f"removing all {cout} filters of layer {lid}")

    g = graph.copy()
    keep_map: dict[int, list[int]] = {}  # layer id -> surviving original channel indices
    shapes = validate_graph(graph)
    for layer in g.layers:
        k = layer.kind
        if k == INPUT:
            keep_map[layer.id] = list(range(graph.input_shape[2]))
        elif k == CONV:
            in_keep = keep_map[layer.inputs[0]]
            drop = victims_by_layer.get(layer.id, set())
            out_keep = [i for i in range(layer.weight.shape[0]) if i not in drop]
            layer.weight = layer.weight[np.ix_(out_keep, in_keep)].copy()
            layer.bias = layer.bias[out_keep].copy()
            keep_map[layer.id] = out_keep
        elif k == BATCHNORM:
            in_keep = keep_map[layer.inputs[0]]
            for name in ("gamma", "beta", "mean", "var"):
                setattr(layer, name, getattr(layer, name)[in_keep].copy())
            keep_map[layer.id] = in_keep
        elif k == CONCAT:
            merged, offset = [], 0
            for src in layer.inputs:
                orig_c = shapes[src][2]
                merged.extend(offset + i for i in keep_map[src])
                offset += orig_c
            keep_map[layer.id] = merged
        else:  # relu, leaky, pool, upsample, softmax pass channels through
            keep_map[layer.id] = keep_map[layer.inputs[0]]
    validate_graph(g)
    return g, keep_map


def zero_filters(graph: ModelGraph, fraction: float, seed: int = 0) -> ModelGraph:
    """Zero the weights and bias of a fraction of the prunable filters.

    Produces a deliberately over-provisioned model: zeroed channels are
    inert (post-ReLU output exactly zero), score APoZ 1.0, and can be
    pruned away without changing the network function.
    """
    g = graph.copy()
    protected = protected_conv_ids(g)
    rng = np.random.default_rng(seed)
    for layer in g.conv_layers():
        if layer.id in protected:
            continue
        cout = layer.weight.shape[0]
        n = min(int(round(fraction * cout)), cout - 1)
        if n <= 0:
            continue
        idx = rng.choice(cout, size=n, replace=False)
        layer.weight[idx] = 0.0
        layer.bias[idx] = -1.0  # constant negative pre-activation
        # a following batchnorm would otherwise re-bias the channel; pin it to
        # a pass-through that keeps the output negative
        for consumer in g.consumers(layer.id):
            if consumer.kind == BATCHNORM:
                consumer.gamma[idx] = 0.0
                consumer.beta[idx] = -1.0
                consumer.mean[idx] = 0.0
                consumer.var[idx] = 1.0
    return g


# ---------------------------------------------------------------------------
# Iterative pruning loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PruneRound:
    round: int
    params: int
    macs: int
    flops: int
    dice: float
    accepted: bool


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "params", "macs", "flops", "dice", "accepted"])
    for r in history:
        w.writerow([r.round, r.params, r.macs, r.flops, f"{r.dice:.6f}", int(r.accepted)])
    return buf.getvalue()


def _mean_dice(graph: ModelGraph, frames, reference_masks) -> float:
    scores = []
    for frame, ref in zip(frames, reference_masks):
        mask = postprocess(forward_f32(graph, frame))
        scores.append(dice(mask, ref, num_classes=graph.num_classes))
    return float(np.mean(scores))


def prune_loop(graph: ModelGraph, frames, reference_masks,
               step_fraction: float = 0.03, max_drop: float = 0.03,
               max_rounds: int | None = None) -> tuple[ModelGraph, list[PruneRound]]:
    """Iteratively remove the globally-worst APoZ filters until quality degrades.

    Each round re-scores APoZ, removes ceil(step_fraction * prunable filter
    count) filters (never emptying a layer), and evaluates mean macro Dice
    against reference_masks; stops when the relative drop from the initial
    model exceeds max_drop, returning the last model within budget.
    """
    frames = list(frames)
    reference_masks = list(reference_masks)
    if not frames or len(frames) != len(reference_masks):
        raise ValueError("need equal, non-empty frames and reference masks")

    def snapshot(rnd, g, d, accepted):
        rep = model_complexity(g)
        return PruneRound(rnd, count_parameters(g), rep.total_macs, rep.total_flops, d, accepted)

    base_dice = _mean_dice(graph, frames, reference_masks)
    history = [snapshot(0, graph, base_dice, True)]
    current = graph
    rnd = 0
    while max_rounds is None or rnd < max_rounds:
        rnd += 1
        report = compute_apoz(current, frames)
        prunable = report.prunable_entries()
        if not prunable:
            break
        step = math.ceil(step_fraction * len(prunable))
        # deterministic global ranking: worst APoZ first, ties by position
        ranked = sorted(prunable, key=lambda e: (-e.apoz, e.layer_id, e.filter_index))
        widths = {l.id: l.weight.shape[0] for l in current.conv_layers()}
        picked, pending = [], {}
        for e in ranked:
            if len(picked) >= step:
                break
            if widths[e.layer_id] - pending.get(e.layer_id, 0) <= 1:
                continue  # never empty a layer
            pending[e.layer_id] = pending.get(e.layer_id, 0) + 1
            picked.append((e.layer_id, e.filter_index))
        if not picked:
            break
        trial, _ = remove_filters(current, picked)
        d = _mean_dice(trial, frames, reference_masks)
        rel_drop = (base_dice - d) / base_dice if base_dice > 0 else math.inf
        accepted = rel_drop <= max_drop
        history.append(snapshot(rnd, trial, d, accepted))
        if not accepted:
            break
        current = trial
    return current, history
