"""Co-registered pre/post/aux/mask rasters of one event, and their on-disk layout.

A scene directory holds ``scene.json`` (event id, split) plus the container
rasters ``pre``, ``post`` and optionally ``aux``, ``mask`` and ``inventory.jsonl``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .normalize import NormalizationStats, normalize_grid
from .raster import RasterGrid, atomic_write_json, read_raster, write_raster


@dataclass(frozen=True)
class SceneStack:
    event_id: str
    pre: RasterGrid
    post: RasterGrid
    aux: Optional[RasterGrid] = None
    mask: Optional[RasterGrid] = None
    split: str = "train"

    def __post_init__(self):
        dims = {(g.height, g.width) for g in self.grids()}
        if len(dims) != 1:
            raise ValueError(f"scene {self.event_id}: grids disagree on dimensions {sorted(dims)}")
        if self.pre.channels != self.post.channels:
            raise ValueError("pre and post must carry the same channels")

    def grids(self):
        return [g for g in (self.pre, self.post, self.aux, self.mask) if g is not None]

    @property
    def height(self) -> int:
        return self.pre.height

    @property
    def width(self) -> int:
        return self.pre.width

    def normalized(self, stats: NormalizationStats) -> "SceneStack":
        return SceneStack(
            self.event_id,
            normalize_grid(self.pre, stats),
            normalize_grid(self.post, stats),
            None if self.aux is None else normalize_grid(self.aux, stats),
            self.mask,
            self.split,
        )

    def mask_array(self) -> np.ndarray:
        if self.mask is None:
            raise ValueError(f"scene {self.event_id} has no mask")
        return self.mask.data[0] >= 0.5


def save_scene(scene: SceneStack, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("pre", "post", "aux", "mask"):
        grid = getattr(scene, name)
        if grid is not None:
            write_raster(grid, d / name)
    atomic_write_json(d / "scene.json", {"event_id": scene.event_id, "split": scene.split})
    return d


def load_scene(directory: str | Path) -> SceneStack:
    d = Path(directory)
    meta_path = d / "scene.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    parts = {}
    for name in ("pre", "post", "aux", "mask"):
        parts[name] = read_raster(d / name) if (d / f"{name}.json").exists() else None
    if parts["pre"] is None or parts["post"] is None:
        raise FileNotFoundError(f"{d}: scene needs pre.json/.bin and post.json/.bin")
    return SceneStack(meta.get("event_id", d.name), parts["pre"], parts["post"], parts["aux"],
                      parts["mask"], meta.get("split", "train"))


def find_scenes(root: str | Path, splits: tuple | None = None) -> list[Path]:
    """Scene directories under ``root`` (sorted), optionally restricted to ``splits``."""
    root = Path(root)
    if (root / "scene.json").exists():
        candidates = [root]
    else:
        candidates = sorted(p.parent for p in root.rglob("scene.json"))
    if splits is None:
        return candidates
    out = []
    for p in candidates:
        meta = json.loads((p / "scene.json").read_text())
        if meta.get("split", "train") in splits:
            out.append(p)
    return out
