"""Raster container, sidecar file format and bilinear resampling.

A raster lives on disk as two files sharing a stem:

    <name>.json   header (dims, dtype tag, nodata, geo transform, channel names)
    <name>.bin    channel-major, then row-major little-endian float32 payload
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DTYPE_TAG = "f32le"
_DTYPE = np.dtype("<f4")


class RasterFormatError(ValueError):
    """Header or payload does not match the container format."""


@dataclass(frozen=True)
class RasterHeader:
    width: int
    height: int
    channels: int
    dtype: str = DTYPE_TAG
    nodata: Optional[float] = None
    geo_transform: Optional[tuple] = None
    channel_names: tuple = ()

    def __post_init__(self):
        if self.dtype != DTYPE_TAG:
            raise RasterFormatError(f"unsupported dtype tag {self.dtype!r}")
        if len(self.channel_names) != self.channels:
            raise RasterFormatError(
                f"{len(self.channel_names)} channel names for {self.channels} channels"
            )

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "channels": self.channels,
            "dtype": self.dtype,
            "nodata": self.nodata,
            "geo_transform": list(self.geo_transform) if self.geo_transform else None,
            "channel_names": list(self.channel_names),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RasterHeader":
        try:
            gt = obj.get("geo_transform")
            return cls(
                width=int(obj["width"]),
                height=int(obj["height"]),
                channels=int(obj["channels"]),
                dtype=obj.get("dtype", ""),
                nodata=None if obj.get("nodata") is None else float(obj["nodata"]),
                geo_transform=None if gt is None else tuple(float(v) for v in gt),
                channel_names=tuple(obj.get("channel_names") or ()),
            )
        except KeyError as exc:
            raise RasterFormatError(f"header missing field {exc}") from None


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """Immutable (channels, height, width) float32 grid.

    The array is copied on construction and flagged read-only, so a grid can be
    shared freely between threads.
    """

    data: np.ndarray
    nodata: Optional[float] = None
    geo_transform: Optional[tuple] = None
    channel_names: tuple = field(default=())

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"expected (channels, height, width), got shape {arr.shape}")
        c, h, w = arr.shape
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"empty raster shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        names = tuple(self.channel_names) or tuple(f"band{i + 1}" for i in range(c))
        if len(names) != c:
            raise ValueError(f"{len(names)} channel names for {c} channels")
        object.__setattr__(self, "channel_names", names)
        if self.geo_transform is not None:
            gt = tuple(float(v) for v in self.geo_transform)
            if len(gt) != 6:
                raise ValueError("geo_transform must have 6 entries")
            object.__setattr__(self, "geo_transform", gt)
        if self.nodata is not None:
            object.__setattr__(self, "nodata", float(self.nodata))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def value(self, channel: int, row: int, col: int) -> float:
        for name, idx, size in (
            ("channel", channel, self.channels),
            ("row", row, self.height),
            ("col", col, self.width),
        ):
            if not 0 <= idx < size:
                raise IndexError(f"{name} {idx} out of range [0, {size})")
        return float(self.data[channel, row, col])

    def band(self, channel: int | str) -> np.ndarray:
        if isinstance(channel, str):
            channel = self.channel_names.index(channel)
        if not 0 <= channel < self.channels:
            raise IndexError(f"channel {channel} out of range [0, {self.channels})")
        return self.data[channel]

    def valid_mask(self, channel: int | None = None) -> np.ndarray:
        """True where the value is finite and not bit-equal to nodata."""
        arr = self.data if channel is None else self.band(channel)
        ok = np.isfinite(arr)
        if self.nodata is not None:
            marker = np.float32(self.nodata).view(np.uint32)
            ok &= arr.view(np.uint32) != marker
        return ok

    def header(self) -> RasterHeader:
        return RasterHeader(
            width=self.width,
            height=self.height,
            channels=self.channels,
            nodata=self.nodata,
            geo_transform=self.geo_transform,
            channel_names=self.channel_names,
        )

    def pixel_area(self) -> Optional[float]:
        """Ground area of one pixel from the geo transform, or None."""
        if self.geo_transform is None:
            return None
        _, px_w, rot1, _, rot2, px_h = self.geo_transform
        return abs(px_w * px_h - rot1 * rot2)

    def with_data(self, data: np.ndarray, channel_names: Sequence[str] | None = None,
                  nodata: Optional[float] = None) -> "RasterGrid":
        """New grid sharing this grid's georeferencing."""
        return RasterGrid(data, nodata=nodata, geo_transform=self.geo_transform,
                          channel_names=tuple(channel_names or ()))


def _stem(path: str | os.PathLike) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(Path(path), text.encode("utf-8"))


def write_raster(grid: RasterGrid, path: str | os.PathLike) -> None:
    """Write ``grid`` as ``<stem>.json`` + ``<stem>.bin``."""
    stem = _stem(path)
    atomic_write_bytes(stem.with_suffix(".bin"), grid.data.astype(_DTYPE).tobytes(order="C"))
    atomic_write_json(stem.with_suffix(".json"), grid.header().to_json())


def read_header(path: str | os.PathLike) -> RasterHeader:
    stem = _stem(path)
    with open(stem.with_suffix(".json"), "r", encoding="utf-8") as fh:
        return RasterHeader.from_json(json.load(fh))


def read_raster(path: str | os.PathLike) -> RasterGrid:
    stem = _stem(path)
    header = read_header(stem)
    raw = stem.with_suffix(".bin").read_bytes()
    expected = header.width * header.height * header.channels
    if len(raw) != expected * _DTYPE.itemsize:
        raise RasterFormatError(
            f"{stem}: header declares {expected} values "
            f"({header.channels}x{header.height}x{header.width}), "
            f"payload holds {len(raw) / _DTYPE.itemsize:g}"
        )
    data = np.frombuffer(raw, dtype=_DTYPE).reshape(header.channels, header.height, header.width)
    return RasterGrid(data, nodata=header.nodata, geo_transform=header.geo_transform,
                      channel_names=header.channel_names)


def _source_coords(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # pixel-center convention: dst center (i + 0.5) lands at src (i + 0.5) * n_src / n_dst
    pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, pos - i0


def bilinear_sample(band: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a 2-D array at fractional (row, col) source coordinates."""
    band = np.asarray(band, dtype=np.float64)
    h, w = band.shape
    r = np.clip(np.asarray(rows, dtype=np.float64), 0, h - 1)
    c = np.clip(np.asarray(cols, dtype=np.float64), 0, w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = band[r0, c0] * (1 - fc) + band[r0, c1] * fc
    bottom = band[r1, c0] * (1 - fc) + band[r1, c1] * fc
    return top * (1 - fr) + bottom * fr


def bilinear_upsample(grid: RasterGrid, target_width: int, target_height: int) -> RasterGrid:
    if grid.channels != 1:
        raise ValueError("bilinear_upsample expects a single-channel grid")
    if target_width < grid.width or target_height < grid.height:
        raise ValueError(
            f"target {target_width}x{target_height} smaller than source {grid.width}x{grid.height}"
        )
    band = grid.data[0].astype(np.float64)
    r0, r1, fr = _source_coords(grid.height, target_height)
    c0, c1, fc = _source_coords(grid.width, target_width)
    fr = fr[:, None]
    fc = fc[None, :]
    top = band[r0][:, c0] * (1 - fc) + band[r0][:, c1] * fc
    bottom = band[r1][:, c0] * (1 - fc) + band[r1][:, c1] * fc
    out = top * (1 - fr) + bottom * fr

    gt = grid.geo_transform
    if gt is not None:
        sx = grid.width / target_width
        sy = grid.height / target_height
        gt = (gt[0], gt[1] * sx, gt[2] * sy, gt[3], gt[4] * sx, gt[5] * sy)
    return RasterGrid(out[None], nodata=grid.nodata, geo_transform=gt,
                      channel_names=grid.channel_names)
