"""Pixel metrics, average precision, confusion maps and polygon hit rates."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .decide import _ratio, fbeta
from .raster import RasterGrid, atomic_write_bytes

TN, TP, FN, FP = 0, 1, 2, 3
CONFUSION_COLORS = {
    TN: (0, 0, 0),        # black
    TP: (0, 255, 0),      # green
    FN: (255, 0, 0),      # red
    FP: (255, 255, 0),    # yellow
}


def _as_bool(x) -> np.ndarray:
    if isinstance(x, RasterGrid):
        x = x.data[0] if x.channels == 1 else x.data
    return np.asarray(x) >= 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        return float(_ratio(self.tp, self.tp + self.fp))

    @property
    def recall(self) -> float:
        return float(_ratio(self.tp, self.tp + self.fn))

    @property
    def iou(self) -> float:
        return float(_ratio(self.tp, self.tp + self.fp + self.fn))

    def f(self, beta: float = 1.0) -> float:
        return fbeta(self.precision, self.recall, beta)

    def summary(self) -> dict:
        return {
            **asdict(self),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f(1.0),
            "f2": self.f(2.0),
            "iou": self.iou,
        }


def confusion_counts(pred, truth) -> ConfusionCounts:
    p, t = _as_bool(pred), _as_bool(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def pixel_metrics(pred, truth) -> dict:
    """Counts plus precision, recall, F1, F2 and IoU as a flat dict."""
    return confusion_counts(pred, truth).summary()


def auprc(scores, labels) -> float:
    """Step-wise average precision over descending unique score thresholds."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores = one threshold
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def confusion_map(pred, truth, like: RasterGrid | None = None) -> RasterGrid:
    """Per-pixel codes 0=TN, 1=TP, 2=FN, 3=FP."""
    p, t = _as_bool(pred), _as_bool(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    codes = np.full(p.shape, TN, dtype=np.float32)
    codes[p & t] = TP
    codes[~p & t] = FN
    codes[p & ~t] = FP
    if like is None and isinstance(truth, RasterGrid):
        like = truth
    gt = like.geo_transform if like is not None else None
    return RasterGrid(codes[None], geo_transform=gt, channel_names=("confusion",))


def confusion_rgb(codes) -> np.ndarray:
    arr = codes.data[0] if isinstance(codes, RasterGrid) else np.asarray(codes)
    lut = np.zeros((4, 3), dtype=np.uint8)
    for code, color in CONFUSION_COLORS.items():
        lut[code] = color
    return lut[arr.astype(np.int64)]


def save_confusion_png(codes, path: str | os.PathLike) -> None:
    from io import BytesIO

    from PIL import Image

    buf = BytesIO()
    Image.fromarray(confusion_rgb(codes), mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(Path(path), buf.getvalue())


# -- polygon-level evaluation -------------------------------------------------


@dataclass(frozen=True)
class PolygonRecord:
    """Rasterized reference polygon; ``runs`` are (row, col_start, col_end) half-open runs."""

    polygon_id: str
    size_class: int
    runs: tuple

    def __post_init__(self):
        if not 1 <= self.size_class <= 5:
            raise ValueError(f"{self.polygon_id}: size class {self.size_class} outside 1..5")
        runs = tuple((int(r), int(a), int(b)) for r, a, b in self.runs)
        if not runs or any(b <= a for _, a, b in runs):
            raise ValueError(f"{self.polygon_id}: empty or malformed pixel runs")
        object.__setattr__(self, "runs", runs)

    @property
    def pixel_count(self) -> int:
        return sum(b - a for _, a, b in self.runs)

    def covered(self, pred: np.ndarray) -> int:
        h, w = pred.shape
        n = 0
        for r, a, b in self.runs:
            if not (0 <= r < h and 0 <= a and b <= w):
                raise ValueError(f"{self.polygon_id}: run ({r}, {a}, {b}) outside {h}x{w} grid")
            n += int(np.count_nonzero(pred[r, a:b]))
        return n

    def to_json(self) -> dict:
        return {"polygon_id": self.polygon_id, "size_class": self.size_class,
                "rle": [list(r) for r in self.runs]}

    @classmethod
    def from_json(cls, obj: dict) -> "PolygonRecord":
        return cls(str(obj["polygon_id"]), int(obj["size_class"]), tuple(map(tuple, obj["rle"])))


def rle_encode(mask: np.ndarray) -> tuple:
    """Row runs (row, start, end) of the True pixels of a 2-D mask."""
    runs = []
    m = np.asarray(mask).astype(bool)
    for r in np.nonzero(m.any(axis=1))[0]:
        row = np.r_[False, m[r], False].astype(np.int8)
        edges = np.nonzero(np.diff(row))[0]
        runs.extend((int(r), int(a), int(b)) for a, b in zip(edges[::2], edges[1::2]))
    return tuple(runs)


def rle_decode(runs: Iterable, shape: tuple) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for r, a, b in runs:
        out[r, a:b] = True
    return out


def write_inventory(records: Sequence[PolygonRecord], path: str | os.PathLike) -> None:
    text = "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)
    atomic_write_bytes(Path(path), text.encode("utf-8"))


def read_inventory(path: str | os.PathLike) -> list[PolygonRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return [PolygonRecord.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class HitReport:
    per_class: dict = field(default_factory=dict)   # size class -> [attempted, hit]
    min_size_class: int = 2

    @property
    def attempted(self) -> int:
        return sum(a for c, (a, _) in self.per_class.items() if c >= self.min_size_class)

    @property
    def hits(self) -> int:
        return sum(h for c, (_, h) in self.per_class.items() if c >= self.min_size_class)

    @property
    def hit_rate(self) -> float:
        return float(_ratio(self.hits, self.attempted))

    def __add__(self, other: "HitReport") -> "HitReport":
        merged = {c: list(v) for c, v in self.per_class.items()}
        for c, (a, h) in other.per_class.items():
            cur = merged.setdefault(c, [0, 0])
            cur[0] += a
            cur[1] += h
        return HitReport(merged, self.min_size_class)

    def to_json(self) -> dict:
        return {
            "min_size_class": self.min_size_class,
            "attempted": self.attempted,
            "hits": self.hits,
            "hit_rate": self.hit_rate,
            "per_class": {
                str(c): {"attempted": a, "hits": h, "hit_rate": float(_ratio(h, a)),
                         "counted": c >= self.min_size_class}
                for c, (a, h) in sorted(self.per_class.items())
            },
        }


def polygon_hit(pred: np.ndarray, record: PolygonRecord) -> bool:
    # "at least half the area": 2 * covered >= area keeps the tie exact
    return 2 * record.covered(pred) >= record.pixel_count


def polygon_hit_rate(pred, inventory: Sequence[PolygonRecord], min_size_class: int = 2) -> HitReport:
    """Per-size-class hit counts; classes below ``min_size_class`` are reported but not totalled."""
    if not inventory:
        raise ValueError("empty polygon inventory")
    p = _as_bool(pred)
    per_class: dict = {}
    for rec in inventory:
        entry = per_class.setdefault(rec.size_class, [0, 0])
        entry[0] += 1
        entry[1] += int(polygon_hit(p, rec))
    return HitReport(per_class, min_size_class)
