"""Overlapping patch extraction, balanced epochs and train-time augmentation."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .raster import RasterGrid, read_raster, write_raster
from .scene import SceneStack

MANIFEST_COLUMNS = ("event_id", "split", "origin_row", "origin_col", "positive", "path")


@dataclass(frozen=True)
class PatchSpec:
    size: int = 64
    stride: Optional[int] = None

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("patch size must be positive")
        if self.stride is None:
            object.__setattr__(self, "stride", max(1, self.size // 2))
        if not 1 <= self.stride <= self.size:
            raise ValueError(f"stride {self.stride} outside [1, {self.size}]")


def patch_origins(dim: int, size: int, stride: int) -> list[int]:
    """Regular origins 0, stride, ... plus a clamped final origin at ``dim - size``."""
    if dim < size:
        raise ValueError(f"scene dimension {dim} smaller than patch size {size}")
    origins = list(range(0, dim - size + 1, stride))
    if origins[-1] != dim - size:
        origins.append(dim - size)
    return origins


def tile_origins(height: int, width: int, spec: PatchSpec) -> list[tuple[int, int]]:
    rows = patch_origins(height, spec.size, spec.stride)
    cols = patch_origins(width, spec.size, spec.stride)
    return [(r, c) for r in rows for c in cols]


@dataclass
class PatchSample:
    event_id: str
    origin: tuple
    pre: np.ndarray
    post: np.ndarray
    mask: np.ndarray
    aux: Optional[np.ndarray] = None
    positive: Optional[bool] = None

    def __post_init__(self):
        size = self.mask.shape[-1]
        for name in ("pre", "post", "aux"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[-2:] != self.mask.shape:
                raise ValueError(f"{name} window {arr.shape[-2:]} != mask window {self.mask.shape}")
        if self.mask.shape != (size, size):
            raise ValueError(f"patch windows must be square, got {self.mask.shape}")
        has_pos = bool(np.any(self.mask >= 0.5))
        if self.positive is None:
            self.positive = has_pos
        elif self.positive != has_pos:
            raise ValueError("positive flag disagrees with mask contents")

    @property
    def size(self) -> int:
        return self.mask.shape[-1]


def extract_patches(scene: SceneStack, spec: PatchSpec) -> list[PatchSample]:
    """Cut every window of the clamped tiling; scenes without a mask get all-zero masks."""
    h, w = scene.height, scene.width
    if h < spec.size or w < spec.size:
        raise ValueError(f"scene {w}x{h} smaller than patch size {spec.size}")
    mask = (scene.mask_array().astype(np.float32) if scene.mask is not None
            else np.zeros((h, w), np.float32))
    s = spec.size
    out = []
    for r, c in tile_origins(h, w, spec):
        win = np.s_[..., r:r + s, c:c + s]
        out.append(PatchSample(
            event_id=scene.event_id,
            origin=(r, c),
            pre=scene.pre.data[win],
            post=scene.post.data[win],
            mask=mask[r:r + s, c:c + s],
            aux=None if scene.aux is None else scene.aux.data[win],
        ))
    return out


def _event_quotas(pool_sizes: dict, total: int, rng: np.random.Generator) -> dict:
    """Split ``total`` draws across events as evenly as capacity allows.

    Events whose pool runs out are capped and their shortfall is re-split among
    the rest; remainders go to events picked by ``rng``.
    """
    quotas = {e: 0 for e in pool_sizes}
    active = sorted(e for e, n in pool_sizes.items() if n > 0)
    remaining = total
    while remaining > 0 and active:
        share, extra = divmod(remaining, len(active))
        bonus = set()
        if extra:
            bonus = {active[i] for i in rng.choice(len(active), size=extra, replace=False)}
        next_active = []
        for e in active:
            want = share + (1 if e in bonus else 0)
            room = pool_sizes[e] - quotas[e]
            take = min(want, room)
            quotas[e] += take
            remaining -= take
            if quotas[e] < pool_sizes[e]:
                next_active.append(e)
        active = next_active
    return quotas


def balanced_epoch(samples: Sequence[PatchSample], seed: int,
                   n_positive: Optional[int] = None) -> list[PatchSample]:
    """Equal numbers of positive and negative patches, negatives spread evenly per event."""
    pos = [s for s in samples if s.positive]
    neg = [s for s in samples if not s.positive]
    if not pos or not neg:
        raise ValueError(f"balanced epoch needs both classes (positives={len(pos)}, negatives={len(neg)})")
    rng = np.random.default_rng(seed)
    n = len(pos) if n_positive is None else min(n_positive, len(pos))
    n = min(n, len(neg))
    if n < len(pos):
        pos = [pos[i] for i in sorted(rng.choice(len(pos), size=n, replace=False))]

    by_event: dict = {}
    for s in neg:
        by_event.setdefault(s.event_id, []).append(s)
    quotas = _event_quotas({e: len(v) for e, v in by_event.items()}, n, rng)
    chosen = []
    for e in sorted(by_event):
        pool = by_event[e]
        idx = rng.choice(len(pool), size=quotas[e], replace=False)
        chosen.extend(pool[i] for i in sorted(idx))

    epoch = pos + chosen
    order = rng.permutation(len(epoch))
    return [epoch[i] for i in order]


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rot90_prob: float = 0.5
    affine_prob: float = 0.5
    rotation_deg: float = 10.0
    translate_frac: float = 0.05
    scale_range: tuple = (0.9, 1.1)
    shear_deg: float = 5.0
    radiometric_prob: float = 0.5
    noise_std: float = 0.05
    gain_range: tuple = (0.95, 1.05)

    def __post_init__(self):
        for name in ("flip_prob", "rot90_prob", "affine_prob", "radiometric_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        lo, hi = self.scale_range
        if not lo <= 1.0 <= hi:
            raise ValueError(f"scale range {self.scale_range} must straddle 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, radiometric_prob=0.0, noise_std=0.0)


def _affine_matrix(rng: np.random.Generator, cfg: AugmentConfig, size: int):
    """Output->input mapping (matrix, offset) about the patch centre."""
    theta = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    shear = np.deg2rad(rng.uniform(-cfg.shear_deg, cfg.shear_deg))
    scale = rng.uniform(*cfg.scale_range)
    t = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2) * size
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shr = np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
    forward = scale * rot @ shr
    inverse = np.linalg.inv(forward)
    centre = np.full(2, (size - 1) / 2.0)
    offset = centre - inverse @ (centre + t)
    return inverse, offset


def _warp(stack: np.ndarray, matrix, offset, order: int, fill: Sequence[float]) -> np.ndarray:
    out = np.empty_like(stack)
    for i in range(stack.shape[0]):
        out[i] = ndimage.affine_transform(stack[i], matrix, offset=offset, order=order,
                                          mode="constant", cval=float(fill[i]))
    return out


def augment(sample: PatchSample, config: AugmentConfig, seed: int,
            sar_fill: Optional[Sequence[float]] = None) -> PatchSample:
    """Randomly flip/rotate/warp all windows together, then perturb SAR radiometry.

    ``sar_fill`` gives the per-channel value used outside the warped footprint
    (normally each channel's sentinel); it defaults to 0.
    """
    rng = np.random.default_rng(seed)
    pre, post, mask = sample.pre, sample.post, sample.mask[None]
    aux = sample.aux
    n_sar = pre.shape[0]

    def apply(fn):
        nonlocal pre, post, mask, aux
        pre, post, mask = fn(pre), fn(post), fn(mask)
        if aux is not None:
            aux = fn(aux)

    if rng.random() < config.flip_prob:
        apply(lambda a: a[..., ::-1])
    if rng.random() < config.rot90_prob:
        k = int(rng.integers(1, 4))
        apply(lambda a: np.rot90(a, k, axes=(-2, -1)))
    if rng.random() < config.affine_prob:
        matrix, offset = _affine_matrix(rng, config, sample.size)
        fill = list(sar_fill) if sar_fill is not None else [0.0] * n_sar
        pre = _warp(np.ascontiguousarray(pre), matrix, offset, 1, fill)
        post = _warp(np.ascontiguousarray(post), matrix, offset, 1, fill)
        mask = _warp(np.ascontiguousarray(mask), matrix, offset, 0, [0.0])
        if aux is not None:
            aux = _warp(np.ascontiguousarray(aux), matrix, offset, 1, [0.0] * aux.shape[0])
    if rng.random() < config.radiometric_prob:
        gain_pre, gain_post = rng.uniform(*config.gain_range, size=2)
        pre = pre * np.float32(gain_pre)
        post = post * np.float32(gain_post)
        if config.noise_std > 0:
            pre = pre + rng.normal(0.0, config.noise_std, size=pre.shape).astype(np.float32)
            post = post + rng.normal(0.0, config.noise_std, size=post.shape).astype(np.float32)

    mask = (mask[0] >= 0.5).astype(np.float32)
    return replace(
        sample,
        pre=np.ascontiguousarray(pre, dtype=np.float32),
        post=np.ascontiguousarray(post, dtype=np.float32),
        mask=mask,
        aux=None if aux is None else np.ascontiguousarray(aux, dtype=np.float32),
        positive=bool(mask.any()),
    )


# -- on-disk patch sets ------------------------------------------------------


def sample_to_grid(sample: PatchSample, sar_names: Sequence[str] = ("VV", "VH"),
                   aux_names: Sequence[str] = ("LIA", "slope")) -> RasterGrid:
    bands = [sample.pre, sample.post]
    names = [f"pre_{n}" for n in sar_names] + [f"post_{n}" for n in sar_names]
    if sample.aux is not None:
        bands.append(sample.aux)
        names += list(aux_names)
    bands.append(sample.mask[None])
    names.append("mask")
    return RasterGrid(np.concatenate(bands, axis=0), channel_names=names)


def grid_to_sample(grid: RasterGrid, event_id: str, origin: tuple) -> PatchSample:
    names = grid.channel_names
    pre = np.stack([grid.data[i] for i, n in enumerate(names) if n.startswith("pre_")])
    post = np.stack([grid.data[i] for i, n in enumerate(names) if n.startswith("post_")])
    aux_idx = [i for i, n in enumerate(names) if n in ("LIA", "slope")]
    aux = np.stack([grid.data[i] for i in aux_idx]) if aux_idx else None
    mask = grid.data[names.index("mask")]
    return PatchSample(event_id, tuple(origin), pre, post, mask, aux)


@dataclass
class ManifestRow:
    event_id: str
    split: str
    origin_row: int
    origin_col: int
    positive: bool
    path: str


def subsample_balanced(samples: Sequence[PatchSample], seed: int) -> list[PatchSample]:
    """Keep every positive and an equal-sized seeded uniform subset of negatives."""
    pos = [s for s in samples if s.positive]
    neg = [s for s in samples if not s.positive]
    rng = np.random.default_rng(seed)
    k = min(len(pos), len(neg))
    keep = sorted(rng.choice(len(neg), size=k, replace=False)) if k else []
    chosen = {id(neg[i]) for i in keep}
    return [s for s in samples if s.positive or id(s) in chosen]


def write_patch_set(samples_by_split: dict, out_dir: str | os.PathLike) -> Path:
    """Write one raster per patch plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    rows = []
    for split in sorted(samples_by_split):
        for s in samples_by_split[split]:
            rel = Path(split) / s.event_id / f"r{s.origin[0]:05d}_c{s.origin[1]:05d}"
            write_raster(sample_to_grid(s), out / rel)
            rows.append(ManifestRow(s.event_id, split, s.origin[0], s.origin[1], s.positive,
                                    rel.as_posix()))
    manifest = out / "manifest.csv"
    tmp = manifest.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            writer.writerow([r.event_id, r.split, r.origin_row, r.origin_col, int(r.positive), r.path])
    os.replace(tmp, manifest)
    return manifest


def read_manifest(path: str | os.PathLike) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest missing columns {sorted(missing)}")
        return [ManifestRow(r["event_id"], r["split"], int(r["origin_row"]), int(r["origin_col"]),
                            r["positive"] in ("1", "true", "True"), r["path"]) for r in reader]


def load_split(manifest_path: str | os.PathLike, split: str) -> list[PatchSample]:
    base = Path(manifest_path).parent
    return [grid_to_sample(read_raster(base / r.path), r.event_id, (r.origin_row, r.origin_col))
            for r in read_manifest(manifest_path) if r.split == split]
