"""Validity screening and channel standardization for dB backscatter.

SAR values count as valid only inside [-40, 20] dB. Statistics come from valid
values alone, and invalid pixels are replaced after standardization with the
normalized value of -50 dB, which always sits below every valid value.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .raster import RasterGrid, atomic_write_json

VALID_MIN_DB = -40.0
VALID_MAX_DB = 20.0
SENTINEL_DB = -50.0

SAR_CHANNELS = ("VV", "VH")
AUX_CHANNELS = ("LIA", "slope")


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelStats:
    """Mean/std of one channel and the value substituted for invalid pixels.

    ``db_window`` channels (SAR backscatter) use the dB validity window and the
    -50 dB sentinel; other channels accept any finite value and fill invalid
    pixels with 0 (the channel mean after standardization).
    """

    mean: float
    std: float
    sentinel: float
    db_window: bool = True

    def __post_init__(self):
        if not self.std > 0:
            raise StatsError(f"std must be positive, got {self.std}")


@dataclass
class NormalizationStats:
    channels: dict = field(default_factory=dict)
    valid_min: float = VALID_MIN_DB
    valid_max: float = VALID_MAX_DB
    sentinel_db: float = SENTINEL_DB
    source: str = "train"

    def __getitem__(self, name: str) -> ChannelStats:
        try:
            return self.channels[name]
        except KeyError:
            raise KeyError(f"no statistics for channel {name!r}") from None

    def to_json(self) -> dict:
        return {
            "channels": {
                name: {"mean": s.mean, "std": s.std, "sentinel": s.sentinel,
                       "db_window": s.db_window}
                for name, s in self.channels.items()
            },
            "valid_min": self.valid_min,
            "valid_max": self.valid_max,
            "sentinel_db": self.sentinel_db,
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        chans = {
            name: ChannelStats(float(v["mean"]), float(v["std"]), float(v["sentinel"]),
                               bool(v.get("db_window", True)))
            for name, v in obj["channels"].items()
        }
        return cls(chans, float(obj.get("valid_min", VALID_MIN_DB)),
                   float(obj.get("valid_max", VALID_MAX_DB)),
                   float(obj.get("sentinel_db", SENTINEL_DB)), obj.get("source", "train"))

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_json(Path(path), self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NormalizationStats":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def valid_values_mask(values: np.ndarray, db_window: bool = True, nodata: float | None = None,
                      valid_min: float = VALID_MIN_DB, valid_max: float = VALID_MAX_DB) -> np.ndarray:
    values = np.asarray(values)
    ok = np.isfinite(values)
    if nodata is not None:
        ok &= values.astype(np.float32).view(np.uint32) != np.float32(nodata).view(np.uint32)
    if db_window:
        with np.errstate(invalid="ignore"):
            ok &= (values >= valid_min) & (values <= valid_max)
    return ok


@dataclass(frozen=True)
class Moments:
    """Partial (count, mean, M2) summary; merges are exact up to rounding and order-fixed."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values: np.ndarray) -> "Moments":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            return cls()
        mu = float(v.mean())
        return cls(int(v.size), mu, float(np.sum((v - mu) ** 2)))

    def merge(self, other: "Moments") -> "Moments":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return Moments(n, mean, m2)

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.count))


def sentinel_value(mean: float, std: float, sentinel_db: float = SENTINEL_DB) -> float:
    return (sentinel_db - mean) / std


def compute_stats(scenes: Iterable[RasterGrid], channel: int | str, db_window: bool = True,
                  sentinel_db: float = SENTINEL_DB) -> ChannelStats:
    """Mean and population std of the valid values of ``channel`` over all scenes."""
    total = Moments()
    for grid in scenes:
        band = grid.band(channel)
        ok = valid_values_mask(band, db_window=db_window, nodata=grid.nodata)
        total = total.merge(Moments.of(band[ok]))
    if total.count < 2:
        raise StatsError(f"channel {channel!r}: {total.count} valid observations, need at least 2")
    std = total.std
    if std == 0:
        raise StatsError(f"channel {channel!r} is constant over its valid observations")
    fill = sentinel_value(total.mean, std, sentinel_db) if db_window else 0.0
    return ChannelStats(total.mean, std, fill, db_window)


def compute_dataset_stats(grids: Sequence[RasterGrid], source: str = "train") -> NormalizationStats:
    """Stats for every channel name appearing in ``grids``; SAR names use the dB window."""
    names: list[str] = []
    for g in grids:
        names.extend(n for n in g.channel_names if n not in names)
    chans = {}
    for name in names:
        having = [g for g in grids if name in g.channel_names]
        chans[name] = compute_stats(having, name, db_window=name not in AUX_CHANNELS)
    return NormalizationStats(chans, source=source)


def normalize_values(values: np.ndarray, stats: ChannelStats, nodata: float | None = None) -> np.ndarray:
    values = np.asarray(values)
    ok = valid_values_mask(values, db_window=stats.db_window, nodata=nodata)
    with np.errstate(invalid="ignore", over="ignore"):
        out = (values.astype(np.float64) - stats.mean) / stats.std
    out = np.where(ok, out, stats.sentinel)
    return out.astype(np.float32)


def normalize_channel(grid: RasterGrid, stats: NormalizationStats | ChannelStats,
                      channel: int | str) -> RasterGrid:
    """Single-channel grid of the standardized ``channel``; invalid pixels become the sentinel."""
    idx = grid.channel_names.index(channel) if isinstance(channel, str) else channel
    band = grid.band(idx)
    name = grid.channel_names[idx]
    cs = stats[name] if isinstance(stats, NormalizationStats) else stats
    return grid.with_data(normalize_values(band, cs, grid.nodata)[None], channel_names=[name])


def normalize_grid(grid: RasterGrid, stats: NormalizationStats) -> RasterGrid:
    bands = [normalize_values(grid.band(i), stats[name], grid.nodata)
             for i, name in enumerate(grid.channel_names)]
    return grid.with_data(np.stack(bands), channel_names=grid.channel_names)
