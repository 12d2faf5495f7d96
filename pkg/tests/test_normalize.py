import numpy as np
import pytest

from avalanche_cd.normalize import (
    ChannelStats,
    NormalizationStats,
    StatsError,
    compute_stats,
    normalize_channel,
)
from avalanche_cd.raster import RasterGrid

from oracles import filtered_mean_std


def grid(values, **kw):
    return RasterGrid(np.asarray(values, dtype=np.float32).reshape(1, 1, -1), **kw)


def test_two_values():
    s = compute_stats([grid([-10, -20])], 0)
    assert s.mean == -15 and s.std == 5 and s.sentinel == -7


def test_invalid_values_excluded():
    s = compute_stats([grid([-10, -20, -45, np.nan, 30])], 0)
    assert s.mean == -15
    assert s.std == 5


def test_matches_filtered_oracle(rng):
    scenes = []
    for _ in range(3):
        v = rng.normal(-15, 8, size=(1, 20, 30))
        v[rng.random(v.shape) < 0.1] = np.nan
        v[rng.random(v.shape) < 0.05] = -60
        scenes.append(RasterGrid(v))
    s = compute_stats(scenes, 0)
    flat = np.concatenate([g.data.ravel() for g in scenes])
    mean, std, _ = filtered_mean_std(flat)
    assert s.mean == pytest.approx(mean, abs=1e-9)
    assert s.std == pytest.approx(std, abs=1e-9)
    assert s.sentinel == (-50 - s.mean) / s.std


def test_errors():
    with pytest.raises(StatsError):
        compute_stats([grid([-10, np.nan, 50])], 0)
    with pytest.raises(StatsError):
        compute_stats([grid([-10, -10, -10])], 0)


def test_nodata_marker_counts_as_invalid():
    s = compute_stats([grid([-10, -20, -9999], nodata=-9999)], 0)
    assert s.mean == -15


def test_normalize_examples():
    cs = ChannelStats(-15.0, 5.0, -7.0)
    out = normalize_channel(grid([-15, -47, 25, np.inf]), cs, 0).data.ravel()
    assert out.tolist() == [0.0, -7.0, -7.0, -7.0]


def test_sentinel_count_and_separation(rng):
    v = rng.uniform(-55, 30, size=(2, 40, 40))
    g = RasterGrid(v, channel_names=("VV", "VH"))
    stats = NormalizationStats({n: compute_stats([g], n) for n in ("VV", "VH")})
    for name in ("VV", "VH"):
        out = normalize_channel(g, stats, name).data[0]
        band = g.band(name)
        invalid = ~((band >= -40) & (band <= 20))
        s = np.float32(stats[name].sentinel)
        assert np.count_nonzero(out == s) == np.count_nonzero(invalid)
        assert np.isfinite(out).all()
        assert out[~invalid].min() > s


def test_stats_file_roundtrip(tmp_path):
    stats = NormalizationStats({"VV": ChannelStats(-12.0, 3.0, -38 / 3), "LIA": ChannelStats(40, 5, 0.0, False)})
    stats.save(tmp_path / "s.json")
    back = NormalizationStats.load(tmp_path / "s.json")
    assert back.channels == stats.channels


def test_aux_channels_skip_db_window():
    g = RasterGrid(np.array([[[30.0, 50.0, 70.0, np.nan]]]), channel_names=("LIA",))
    s = compute_stats([g], "LIA", db_window=False)
    assert s.mean == 50.0
    out = normalize_channel(g, s, 0).data.ravel()
    assert out[3] == 0.0
