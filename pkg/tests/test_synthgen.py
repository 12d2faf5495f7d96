import numpy as np
import pytest

from avalanche_cd.evalx import rle_decode
from avalanche_cd.synthgen import SynthConfig, generate, generate_dataset, size_class


def test_zero_contrast_is_hard_negative():
    item = generate(SynthConfig(contrast_db=0.0, noise_db=0.0, invalid_fraction=0.0, seed=4))
    s = item.scene
    assert s.mask_array().any()
    np.testing.assert_array_equal(s.pre.data, s.post.data)


def test_deterministic():
    a, b = generate(SynthConfig(seed=11)), generate(SynthConfig(seed=11))
    np.testing.assert_array_equal(a.scene.post.data, b.scene.post.data)
    np.testing.assert_array_equal(a.scene.aux.data, b.scene.aux.data)
    assert a.inventory == b.inventory
    c = generate(SynthConfig(seed=12))
    assert not np.array_equal(a.scene.post.data, c.scene.post.data)


def test_no_deposits():
    item = generate(SynthConfig(deposit_count=(0, 0)))
    assert not item.scene.mask_array().any()
    assert item.inventory == []


@pytest.mark.parametrize("seed", range(5))
def test_polygons_disjoint_and_cover_mask(seed):
    item = generate(SynthConfig(seed=seed))
    shape = item.scene.mask_array().shape
    cover = np.zeros(shape, int)
    for poly in item.inventory:
        pix = rle_decode(poly.runs, shape)
        cover += pix
        assert poly.size_class == size_class(int(pix.sum()))
    assert cover.max() == 1
    np.testing.assert_array_equal(cover == 1, item.scene.mask_array())


@pytest.mark.parametrize("seed", range(5))
def test_value_ranges(seed):
    item = generate(SynthConfig(seed=seed, invalid_fraction=0.05))
    inv = item.invalid
    assert inv.mean() >= 0.05
    for g in (item.scene.pre, item.scene.post):
        valid = g.data[:, ~inv]
        assert valid.min() >= -40 and valid.max() <= 20
        assert np.all(g.data[:, inv] < -40)


def test_size_class_bands():
    assert [size_class(n) for n in (1, 9, 10, 99, 100, 999, 1000, 5000)] == [1, 1, 2, 2, 3, 3, 4, 4]


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(deposit_size=(1, 4))
    with pytest.raises(ValueError):
        SynthConfig.from_json({"width": 64, "colour": 1})
    with pytest.raises(RuntimeError):
        generate(SynthConfig(width=24, height=24, deposit_count=(6, 6), deposit_size=(6, 8),
                             max_retries=5))


def test_dataset_splits():
    items = generate_dataset(SynthConfig(width=48, height=48, deposit_count=(1, 2),
                                         deposit_size=(3, 5)), 2, 1, 1)
    assert [i.scene.split for i in items] == ["train", "train", "val", "test"]
    assert len({i.scene.event_id for i in items}) == 4
