import itertools

import numpy as np
import pytest

from avalanche_cd.blend import (
    MODES,
    BlendAccumulator,
    BlendMode,
    UncoveredPixelError,
    blend_tiles,
    run_scene,
)
from avalanche_cd.patches import PatchSpec, tile_origins
from avalanche_cd.raster import RasterGrid
from avalanche_cd.scene import SceneStack
from avalanche_cd.scorer import ScorerConfig, build_model, predict_batch

from oracles import blend_bruteforce


def random_tiles(rng, h, w, size, stride):
    origins = tile_origins(h, w, PatchSpec(size, stride))
    return [rng.random((size, size)) for _ in origins], origins


def two_tile_value(mode, a=0.2, b=0.6):
    # 1x4 strip is awkward for square tiles, so use a 2x3 scene with 2x2 tiles at
    # columns 0 and 1; column 1 is covered by both and is equidistant from both centres
    acc = BlendAccumulator(2, 3, BlendMode(mode), 2, 1)
    acc.contribute(np.full((2, 2), a), (0, 0))
    acc.contribute(np.full((2, 2), b), (0, 1))
    return acc.finalize().data[0]


def test_two_tile_examples():
    assert two_tile_value("mean")[0, 1] == pytest.approx(0.4)
    assert two_tile_value("max")[0, 1] == pytest.approx(0.6)
    assert two_tile_value("min")[0, 1] == pytest.approx(0.2)
    assert two_tile_value("gaussian")[0, 1] == pytest.approx(0.4)


@pytest.mark.parametrize("mode", MODES)
def test_single_tile_identity(rng, mode):
    tile = rng.random((16, 16)).astype(np.float32)
    out = blend_tiles([tile], [(0, 0)], 16, 16, BlendMode(mode), 16, 16)
    np.testing.assert_array_equal(out.data[0], tile)


@pytest.mark.parametrize("mode", MODES)
def test_matches_bruteforce_48(rng, mode):
    size, stride = 16, 8
    if mode == "none":
        stride = 16
    tiles, origins = random_tiles(rng, 48, 48, size, stride)
    bm = BlendMode(mode)
    out = blend_tiles(tiles, origins, 48, 48, bm, size, stride).data[0]
    ref = blend_bruteforce([t.tolist() for t in tiles], origins, 48, 48, bm.name, size,
                           sigma=bm.resolved_sigma(size), border=bm.resolved_border(size, stride))
    np.testing.assert_allclose(out, np.array(ref), atol=1e-6, rtol=0)


def test_gaussian_flat_limit(rng):
    tiles, origins = random_tiles(rng, 40, 40, 16, 8)
    mean = blend_tiles(tiles, origins, 40, 40, BlendMode("mean"), 16, 8).data
    flat = blend_tiles(tiles, origins, 40, 40, BlendMode("gaussian", sigma=1e6), 16, 8).data
    np.testing.assert_allclose(mean, flat, atol=1e-4)


@pytest.mark.parametrize("mode", MODES)
def test_permutation_invariance(rng, mode):
    tiles, origins = random_tiles(rng, 37, 29, 8, 4)
    base = blend_tiles(tiles, origins, 37, 29, BlendMode(mode), 8, 4).data
    for _ in range(3):
        perm = rng.permutation(len(tiles))
        out = blend_tiles([tiles[i] for i in perm], [origins[i] for i in perm], 37, 29,
                          BlendMode(mode), 8, 4).data
        if mode in ("mean", "gaussian"):
            np.testing.assert_allclose(out, base, atol=1e-6, rtol=0)
        else:
            np.testing.assert_array_equal(out, base)


def test_dominance(rng):
    tiles, origins = random_tiles(rng, 30, 30, 8, 3)
    lo, mid, hi = (blend_tiles(tiles, origins, 30, 30, BlendMode(m), 8, 3).data
                   for m in ("min", "mean", "max"))
    assert np.all(lo <= mid + 1e-7) and np.all(mid <= hi + 1e-7)


def test_uncovered_pixel_reports_coordinates():
    acc = BlendAccumulator(4, 4, BlendMode("mean"), 2, 2)
    acc.contribute(np.ones((2, 2)), (0, 0))
    with pytest.raises(UncoveredPixelError) as info:
        acc.finalize()
    assert (0, 2) in list(zip(info.value.rows, info.value.cols))
    assert len(info.value.rows) == 12


def test_out_of_bounds_tile():
    acc = BlendAccumulator(4, 4, BlendMode("max"), 2, 2)
    with pytest.raises(ValueError):
        acc.contribute(np.ones((2, 2)), (3, 0))


def test_mode_validation():
    assert BlendMode("crop").name == "center_crop"
    with pytest.raises(ValueError):
        BlendMode("median")
    with pytest.raises(ValueError):
        BlendMode("center_crop", crop_border=8).resolved_border(16, 8)
    assert BlendMode("none").tiling(PatchSpec(16, 4)).stride == 16


def tiny_scene(h, w, seed=0):
    rng = np.random.default_rng(seed)
    grid = lambda: RasterGrid(rng.normal(size=(2, h, w)), channel_names=("VV", "VH"))  # noqa: E731
    return SceneStack("t", grid(), grid())


@pytest.fixture(scope="module")
def tiny_model():
    return build_model(ScorerConfig(widths=(4, 8)), seed=3)


def test_run_scene_deterministic_and_matches_manual(tiny_model):
    scene = tiny_scene(27, 21)
    spec = PatchSpec(8, 4)
    a = run_scene(tiny_model, scene, spec, BlendMode("mean"))
    b = run_scene(tiny_model, scene, spec, BlendMode("mean"), threads=3, batch_size=5)
    np.testing.assert_array_equal(a.data, b.data)
    origins = tile_origins(27, 21, spec)
    pre = np.stack([scene.pre.data[:, r:r + 8, c:c + 8] for r, c in origins])
    post = np.stack([scene.post.data[:, r:r + 8, c:c + 8] for r, c in origins])
    tiles = predict_batch(tiny_model, pre, post)
    manual = blend_tiles(list(tiles), origins, 27, 21, BlendMode("mean"), 8, 4)
    np.testing.assert_allclose(a.data, manual.data, atol=1e-6)


def test_run_scene_partition(tiny_model):
    scene = tiny_scene(24, 16)
    out = run_scene(tiny_model, scene, PatchSpec(8, 4), BlendMode("none"))
    pre = np.stack([scene.pre.data[:, r:r + 8, c:c + 8]
                    for r, c in itertools.product(range(0, 24, 8), range(0, 16, 8))])
    post = np.stack([scene.post.data[:, r:r + 8, c:c + 8]
                     for r, c in itertools.product(range(0, 24, 8), range(0, 16, 8))])
    tiles = predict_batch(tiny_model, pre, post)
    for k, (r, c) in enumerate(itertools.product(range(0, 24, 8), range(0, 16, 8))):
        np.testing.assert_array_equal(out.data[0, r:r + 8, c:c + 8], tiles[k])
