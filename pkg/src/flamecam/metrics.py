"""Segmentation and regression metrics: Dice, Jaccard, frequency-balanced
class weights, weighted categorical cross-entropy (evaluation only),
MAPE and RMSPE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights W = 1 / ln(1.02 + P) with P the pixel frequency."""

    weights: np.ndarray
    probabilities: np.ndarray


def class_weights(masks: Iterable[np.ndarray], num_classes: int) -> ClassWeights:
    counts = np.zeros(num_classes, dtype=np.int64)
    total = 0
    for mask in masks:
        counts += np.bincount(np.asarray(mask).ravel(), minlength=num_classes)[:num_classes]
        total += mask.size
    if total == 0:
        raise ValueError("empty mask set")
    p = counts / total
    w = 1.0 / np.log(1.02 + p)
    return ClassWeights(weights=w, probabilities=p)


def _check_shapes(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")


def dice(pred: np.ndarray, truth: np.ndarray, num_classes: int = 4,
         mode: str = "macro"):
    """Per-class 2|P∩T|/(|P|+|T|); a class absent from both masks scores 1.0.

    mode="macro" returns the mean over classes, "per-class" the vector.
    """
    _check_shapes(pred, truth)
    scores = np.empty(num_classes)
    for c in range(num_classes):
        p = pred == c
        t = truth == c
        denom = int(p.sum()) + int(t.sum())
        scores[c] = 1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom
    return float(scores.mean()) if mode == "macro" else scores


def jaccard(pred: np.ndarray, truth: np.ndarray, num_classes: int = 4,
            mode: str = "macro"):
    """Per-class |P∩T|/|P∪T|; same absent-class convention as dice."""
    _check_shapes(pred, truth)
    scores = np.empty(num_classes)
    for c in range(num_classes):
        p = pred == c
        t = truth == c
        union = int((p | t).sum())
        scores[c] = 1.0 if union == 0 else int((p & t).sum()) / union
    return float(scores.mean()) if mode == "macro" else scores


def weighted_ce(probs: np.ndarray, truth: np.ndarray, weights: ClassWeights) -> float:
    """-(1/N) * sum of W[truth] * ln(prob of true class), floored at 1e-12."""
    if probs.shape[:2] != truth.shape:
        raise ValueError(f"probs {probs.shape} do not match truth {truth.shape}")
    h, w = truth.shape
    p_true = probs[np.arange(h)[:, None], np.arange(w)[None, :], truth]
    wts = np.asarray(weights.weights)[truth]
    return float(-(wts * np.log(np.maximum(p_true, PROB_FLOOR))).mean())


def _rel_errors(pred: Sequence[float], truth: Sequence[float]) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("pred and truth must be equal-length, non-empty")
    if np.any(t == 0):
        raise ZeroDivisionError("MAPE/RMSPE undefined for zero truth values")
    return (p - t) / t


def mape(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Mean absolute percentage error, in percent."""
    return float(100.0 * np.abs(_rel_errors(pred, truth)).mean())


def rmspe(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Root-mean-square percentage error, in percent."""
    return float(100.0 * math.sqrt((_rel_errors(pred, truth) ** 2).mean()))
