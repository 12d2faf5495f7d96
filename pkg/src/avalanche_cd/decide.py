"""Operating-point selection: F-beta threshold sweeps, binarization, closing."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .raster import RasterGrid

DEFAULT_CANDIDATE_CAP = 4096


def fbeta(precision, recall, beta: float = 1.0):
    """Weighted harmonic mean of precision and recall; 0 where undefined.

    Works elementwise on arrays.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = b2 * p + r
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.where(den > 0, (1 + b2) * p * r / np.where(den > 0, den, 1.0), 0.0)
    return float(val) if val.ndim == 0 else val


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


@dataclass(frozen=True)
class ThresholdResult:
    threshold: float
    beta: float
    precision: float
    recall: float
    f_beta: float
    f1: float
    iou: float

    def to_json(self) -> dict:
        return asdict(self)


def candidate_thresholds(scores: np.ndarray, cap: int | None = DEFAULT_CANDIDATE_CAP) -> np.ndarray:
    uniq = np.unique(np.asarray(scores, dtype=np.float64))
    if cap is not None and uniq.size > cap:
        pick = np.unique(np.round(np.linspace(0, uniq.size - 1, cap)).astype(np.int64))
        uniq = uniq[pick]
    return uniq


def counts_at(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray):
    """(tp, fp, fn) for predicted-positive <=> score >= t, for every t."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    return tp, fp, pos.size - tp


def sweep_thresholds(scores, labels, beta: float = 1.0,
                     cap: int | None = DEFAULT_CANDIDATE_CAP) -> ThresholdResult:
    """Best F-beta over the unique scores used as thresholds (ties -> higher threshold).

    With more than ``cap`` unique scores the candidates are an evenly spaced
    subset of the sorted unique values; ``cap=None`` sweeps all of them.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.size == 0 or scores.size != labels.size:
        raise ValueError("scores and labels must be non-empty and the same length")
    if not labels.any():
        raise ValueError("threshold sweep needs at least one positive label")
    cands = candidate_thresholds(scores, cap)
    tp, fp, fn = counts_at(scores, labels, cands)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f = fbeta(precision, recall, beta)
    f = np.atleast_1d(f)
    best = cands.size - 1 - int(np.argmax(f[::-1]))
    p, r = float(precision[best]), float(recall[best])
    return ThresholdResult(
        threshold=float(cands[best]),
        beta=float(beta),
        precision=p,
        recall=r,
        f_beta=float(f[best]),
        f1=fbeta(p, r, 1.0),
        iou=float(_ratio(tp[best], tp[best] + fp[best] + fn[best])),
    )


def binarize(prob, threshold: float):
    """1 where value >= threshold, else 0. Accepts a RasterGrid or an array."""
    if isinstance(prob, RasterGrid):
        return prob.with_data((prob.data >= threshold).astype(np.float32),
                              channel_names=prob.channel_names)
    return (np.asarray(prob) >= threshold).astype(np.uint8)


_SQUARE = np.ones((3, 3), dtype=bool)


def _close_2d(mask: np.ndarray) -> np.ndarray:
    # zero padding by one pixel: the closing of a set never reaches past the
    # pad ring, so cropping back gives the unbounded-plane result exactly
    padded = np.pad(mask.astype(bool), 1, constant_values=False)
    dilated = ndimage.binary_dilation(padded, structure=_SQUARE)
    closed = ndimage.binary_erosion(dilated, structure=_SQUARE, border_value=1)
    return closed[1:-1, 1:-1]


def morph_close(mask):
    """One 3x3 dilation followed by one 3x3 erosion."""
    if isinstance(mask, RasterGrid):
        out = np.stack([_close_2d(b >= 0.5) for b in mask.data]).astype(np.float32)
        return mask.with_data(out, channel_names=mask.channel_names)
    arr = np.asarray(mask)
    if arr.ndim == 3:
        return np.stack([_close_2d(b) for b in arr]).astype(arr.dtype)
    return _close_2d(arr).astype(arr.dtype)
