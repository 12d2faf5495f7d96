"""Synthetic bi-temporal scenes with injected avalanche-like deposits.

Deposits are rotated ellipses whose edge fades over a one-pixel linear ramp;
pixels at half intensity or more are mask-positive. Radar-shadow patches are
placed at the same footprint in both acquisitions and pushed below -40 dB.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .evalx import PolygonRecord, rle_encode
from .normalize import VALID_MAX_DB, VALID_MIN_DB
from .raster import RasterGrid
from .scene import SceneStack

PIXEL_SIZE_M = 10.0


@dataclass(frozen=True)
class SynthConfig:
    width: int = 128
    height: int = 128
    deposit_count: tuple = (3, 6)
    deposit_size: tuple = (3, 12)        # semi-axis range, pixels
    contrast_db: float = 6.0
    noise_db: float = 1.0
    invalid_fraction: float = 0.02
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.deposit_size
        if lo < 2 or hi < lo:
            raise ValueError(f"deposit size range {self.deposit_size} must satisfy 2 <= lo <= hi")
        if self.contrast_db < 0:
            raise ValueError("contrast must be non-negative")
        if not 0 <= self.deposit_count[0] <= self.deposit_count[1]:
            raise ValueError(f"bad deposit count range {self.deposit_count}")
        if not 0 <= self.invalid_fraction < 0.5:
            raise ValueError("invalid fraction must lie in [0, 0.5)")

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return cls(**kw)


def size_class(pixel_count: int) -> int:
    """Artifact-internal proxy for the 1..4 magnitude bands, by deposit pixel count."""
    if pixel_count < 10:
        return 1
    if pixel_count < 100:
        return 2
    if pixel_count < 1000:
        return 3
    return 4


def _smooth_field(rng, shape, scale, amplitude):
    f = ndimage.gaussian_filter(rng.normal(size=shape), sigma=scale, mode="reflect")
    f /= max(np.abs(f).max(), 1e-12)
    return f * amplitude


def _ellipse_intensity(shape, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # signed distance to the boundary in pixels (approx.), then a 1 px ramp centred on it
    edge = (1.0 - d) * min(a, b)
    return np.clip(edge + 0.5, 0.0, 1.0)


@dataclass
class SyntheticScene:
    scene: SceneStack
    inventory: list = field(default_factory=list)
    invalid: Optional[np.ndarray] = None


def generate(config: SynthConfig = SynthConfig(), event_id: str = "synth", split: str = "train") -> SyntheticScene:
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    shape = (h, w)

    # smooth dB backgrounds per polarisation, sharing one terrain-like pattern
    terrain = _smooth_field(rng, shape, 8.0, 4.0)
    base = np.stack([-12.0 + terrain + _smooth_field(rng, shape, 4.0, 1.5),
                     -19.0 + terrain + _smooth_field(rng, shape, 4.0, 1.5)])

    invalid = np.zeros(shape, dtype=bool)
    target = config.invalid_fraction * h * w
    tries = 0
    while invalid.sum() < target and tries < 1000:
        tries += 1
        r = rng.uniform(2, 6)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        yy, xx = np.ogrid[0:h, 0:w]
        invalid |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r

    n_dep = int(rng.integers(config.deposit_count[0], config.deposit_count[1] + 1))
    intensity = np.zeros(shape)
    owner = np.zeros(shape, dtype=np.int32)
    inventory = []
    lo, hi = config.deposit_size
    for k in range(n_dep):
        for _ in range(config.max_retries):
            a, b = rng.uniform(lo, hi, size=2)
            theta = rng.uniform(0, np.pi)
            reach = max(a, b) + 1
            if 2 * reach >= min(h, w):
                continue
            cy = rng.uniform(reach, h - reach)
            cx = rng.uniform(reach, w - reach)
            blob = _ellipse_intensity(shape, cy, cx, a, b, theta)
            footprint = blob > 0
            halo = ndimage.binary_dilation(footprint, iterations=2)
            if (halo & (owner > 0)).any() or (halo & invalid).any():
                continue
            break
        else:
            raise RuntimeError(f"could not place deposit {k + 1} of {n_dep} "
                               f"after {config.max_retries} attempts")
        intensity = np.maximum(intensity, blob)
        pix = blob >= 0.5
        owner[pix] = k + 1
        inventory.append(PolygonRecord(f"{event_id}-{k + 1:03d}", size_class(int(pix.sum())),
                                       rle_encode(pix)))

    noise = lambda: rng.normal(0.0, config.noise_db, size=(2, h, w))  # noqa: E731
    pre = base + noise()
    post = base + config.contrast_db * intensity[None] + noise()
    pre = np.clip(pre, VALID_MIN_DB, VALID_MAX_DB)
    post = np.clip(post, VALID_MIN_DB, VALID_MAX_DB)
    shadow = rng.uniform(-48.0, -41.0, size=shape)
    pre[:, invalid] = shadow[invalid]
    post[:, invalid] = shadow[invalid] + rng.normal(0, 0.5, size=int(invalid.sum()))
    post = np.where(invalid[None], np.minimum(post, VALID_MIN_DB - 0.5), post)

    slope = np.clip(30.0 + _smooth_field(rng, shape, 10.0, 20.0), 0.0, 70.0)
    lia = np.clip(40.0 + 0.6 * (slope - 30.0) + _smooth_field(rng, shape, 6.0, 5.0), 0.0, 90.0)

    gt = (0.0, PIXEL_SIZE_M, 0.0, 0.0, 0.0, -PIXEL_SIZE_M)
    mask = (owner > 0).astype(np.float32)
    stack = SceneStack(
        event_id,
        RasterGrid(pre, geo_transform=gt, channel_names=("VV", "VH")),
        RasterGrid(post, geo_transform=gt, channel_names=("VV", "VH")),
        RasterGrid(np.stack([lia, slope]), geo_transform=gt, channel_names=("LIA", "slope")),
        RasterGrid(mask[None], geo_transform=gt, channel_names=("mask",)),
        split,
    )
    return SyntheticScene(stack, inventory, invalid)


def generate_dataset(config: SynthConfig = SynthConfig(), n_train: int = 8, n_val: int = 2,
                     n_test: int = 2) -> list[SyntheticScene]:
    """Independent scenes for each split; scene seeds are spawned from ``config.seed``."""
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    seeds = np.random.SeedSequence(config.seed).generate_state(len(splits))
    out = []
    for i, (split, s) in enumerate(zip(splits, seeds)):
        cfg = SynthConfig(**{**asdict(config), "seed": int(s)})
        out.append(generate(cfg, event_id=f"{split}{i:02d}", split=split))
    return out


def load_config(path) -> SynthConfig:
    return SynthConfig.from_json(json.loads(Path(path).read_text()))
