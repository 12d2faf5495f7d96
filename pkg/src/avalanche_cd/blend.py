"""Streaming fusion of overlapping tile predictions into one scene map.

Every mode keeps per-pixel state whose update is commutative, so tiles may
arrive in any order (and be scored on any number of threads) without changing
the result:

* mean      running sum and count
* gaussian  running weighted sum and weight sum
* max/min   running extremum
* crop/none each tile writes its central region (edge tiles also write the
            border lying on the scene edge); where writes overlap, the pixel
            nearest its tile centre wins, ties going to the smaller origin
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .patches import PatchSpec, tile_origins
from .raster import RasterGrid

MODES = ("none", "mean", "max", "min", "gaussian", "center_crop")
_ALIASES = {"crop": "center_crop", "gauss": "gaussian", "average": "mean"}
WEIGHT_FLOOR = 1e-6


class UncoveredPixelError(RuntimeError):
    def __init__(self, rows, cols):
        self.rows, self.cols = rows, cols
        coords = ", ".join(f"({r}, {c})" for r, c in zip(rows[:5], cols[:5]))
        more = f" and {len(rows) - 5} more" if len(rows) > 5 else ""
        super().__init__(f"{len(rows)} scene pixels received no tile: {coords}{more}")


@dataclass(frozen=True)
class BlendMode:
    name: str = "gaussian"
    sigma: Optional[float] = None        # gaussian only; default size / 4
    crop_border: Optional[int] = None    # center_crop only; default (size - stride) // 2

    def __post_init__(self):
        name = _ALIASES.get(self.name, self.name)
        if name not in MODES:
            raise ValueError(f"unknown blend mode {self.name!r}; choose from {MODES}")
        object.__setattr__(self, "name", name)
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("gaussian sigma must be positive")
        if self.crop_border is not None and self.crop_border < 0:
            raise ValueError("crop border must be non-negative")

    def tiling(self, spec: PatchSpec) -> PatchSpec:
        """'none' is a disjoint partition: stride forced to the tile size."""
        return PatchSpec(spec.size, spec.size) if self.name == "none" else spec

    def resolved_sigma(self, size: int) -> float:
        return self.sigma if self.sigma is not None else size / 4.0

    def resolved_border(self, size: int, stride: int) -> int:
        if self.name == "none":
            return 0
        b = self.crop_border if self.crop_border is not None else (size - stride) // 2
        if not 2 * b < size:
            raise ValueError(f"crop border {b} must be < size/2 ({size / 2})")
        return b


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    c = (size - 1) / 2.0
    d = np.arange(size, dtype=np.float64) - c
    w = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return np.maximum(w, WEIGHT_FLOOR)


def centre_distance(size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    d = np.arange(size, dtype=np.float64) - c
    return d[:, None] ** 2 + d[None, :] ** 2


def crop_region(origin: tuple, size: int, border: int, height: int, width: int) -> np.ndarray:
    """Boolean (size, size) mask of the pixels a crop/none tile writes."""
    r, c = origin
    top = 0 if r == 0 else border
    bottom = size if r + size == height else size - border
    left = 0 if c == 0 else border
    right = size if c + size == width else size - border
    region = np.zeros((size, size), dtype=bool)
    region[top:bottom, left:right] = True
    return region


class BlendAccumulator:
    def __init__(self, height: int, width: int, mode: BlendMode, size: int, stride: int):
        self.height, self.width = height, width
        self.mode = mode
        self.size = size
        self.stride = stride
        self.count = np.zeros((height, width), dtype=np.int64)
        name = mode.name
        if name in ("mean", "gaussian"):
            self.total = np.zeros((height, width), dtype=np.float64)
            self.weight = np.zeros((height, width), dtype=np.float64)
            if name == "gaussian":
                self._window = gaussian_window(size, mode.resolved_sigma(size))
        elif name == "max":
            self.value = np.full((height, width), -np.inf)
        elif name == "min":
            self.value = np.full((height, width), np.inf)
        else:
            self.border = mode.resolved_border(size, stride)
            self.value = np.zeros((height, width), dtype=np.float64)
            self.best = np.full((height, width), np.inf)   # distance to owning tile centre
            self.owner = np.full((height, width, 2), np.iinfo(np.int64).max, dtype=np.int64)
            self._dist = centre_distance(size)

    def contribute(self, tile: np.ndarray, origin: tuple) -> None:
        tile = np.asarray(tile, dtype=np.float64)
        if tile.ndim == 3:
            tile = tile[0]
        s = self.size
        r, c = origin
        if tile.shape != (s, s):
            raise ValueError(f"tile shape {tile.shape} != ({s}, {s})")
        if r < 0 or c < 0 or r + s > self.height or c + s > self.width:
            raise ValueError(f"tile at {origin} exceeds scene {self.height}x{self.width}")
        win = np.s_[r:r + s, c:c + s]
        name = self.mode.name
        if name == "mean":
            self.total[win] += tile
            self.weight[win] += 1.0
            self.count[win] += 1
        elif name == "gaussian":
            self.total[win] += self._window * tile
            self.weight[win] += self._window
            self.count[win] += 1
        elif name == "max":
            np.maximum(self.value[win], tile, out=self.value[win])
            self.count[win] += 1
        elif name == "min":
            np.minimum(self.value[win], tile, out=self.value[win])
            self.count[win] += 1
        else:
            region = crop_region(origin, s, self.border, self.height, self.width)
            best = self.best[win]
            owner = self.owner[win]
            dist = self._dist
            tie = (dist == best) & (
                (r < owner[..., 0]) | ((r == owner[..., 0]) & (c < owner[..., 1]))
            )
            take = region & ((dist < best) | tie)
            self.value[win][take] = tile[take]
            best[take] = dist[take]
            owner[take] = (r, c)
            self.count[win] += region

    def finalize(self, like: RasterGrid | None = None) -> RasterGrid:
        uncovered = self.count == 0
        if uncovered.any():
            rows, cols = np.nonzero(uncovered)
            raise UncoveredPixelError(rows.tolist(), cols.tolist())
        if self.mode.name in ("mean", "gaussian"):
            out = self.total / self.weight
        else:
            out = self.value
        out = np.clip(out, 0.0, 1.0).astype(np.float32)
        gt = like.geo_transform if like is not None else None
        return RasterGrid(out[None], geo_transform=gt, channel_names=("probability",))


def blend_tiles(tiles, origins, height: int, width: int, mode: BlendMode, size: int,
                stride: int) -> RasterGrid:
    acc = BlendAccumulator(height, width, mode, size, stride)
    for tile, origin in zip(tiles, origins):
        acc.contribute(tile, origin)
    return acc.finalize()


def run_scene(model, scene, spec: PatchSpec, mode: BlendMode, threads: int = 1,
              batch_size: int = 64) -> RasterGrid:
    """Tile a normalized scene, score every tile and blend the predictions.

    Tiles are grouped into fixed batches independent of ``threads``, so the
    thread count only changes scheduling, never the arithmetic.
    """
    from .scorer import predict_batch

    tiling = mode.tiling(spec)
    origins = tile_origins(scene.height, scene.width, tiling)
    s = tiling.size

    def cut(grid, batch):
        if grid is None:
            return None
        return np.stack([grid.data[:, r:r + s, c:c + s] for r, c in batch])

    batches = [origins[i:i + batch_size] for i in range(0, len(origins), batch_size)]

    def score(batch):
        return predict_batch(model, cut(scene.pre, batch), cut(scene.post, batch),
                             cut(scene.aux, batch) if model.config.use_aux else None)

    acc = BlendAccumulator(scene.height, scene.width, mode, s, tiling.stride)
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, batches))
    else:
        results = [score(b) for b in batches]
    for batch, probs in zip(batches, results):
        for origin, tile in zip(batch, probs):
            acc.contribute(tile, origin)
    return acc.finalize(like=scene.pre)
