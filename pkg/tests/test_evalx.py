import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avalanche_cd.evalx import (
    ConfusionCounts,
    HitReport,
    PolygonRecord,
    auprc,
    confusion_counts,
    confusion_map,
    confusion_rgb,
    pixel_metrics,
    polygon_hit_rate,
    read_inventory,
    rle_decode,
    rle_encode,
    save_confusion_png,
    write_inventory,
)

from oracles import average_precision_enum, confusion_loops


def test_identity_metrics():
    t = np.zeros((6, 6))
    t[2:4, 1:5] = 1
    m = pixel_metrics(t, t)
    assert m["precision"] == m["recall"] == m["f1"] == m["iou"] == 1.0


def test_published_row_counts():
    # P=0.8199, R=0.7928 realized with integer counts
    tp, fn = 7928, 2072
    fp = round(tp / 0.8199 - tp)
    c = ConfusionCounts(tp, fp, fn, 100000)
    assert c.precision == pytest.approx(0.8199, abs=5e-5)
    assert c.f() == pytest.approx(0.8061, abs=1e-4)
    assert c.iou == pytest.approx(0.6752, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31))
def test_counts_match_loops(h, w, seed):
    rng = np.random.default_rng(seed)
    p = rng.random((h, w)) < 0.4
    t = rng.random((h, w)) < 0.3
    c = confusion_counts(p, t)
    assert (c.tp, c.fp, c.fn, c.tn) == confusion_loops(p.tolist(), t.tolist())
    if c.tp + c.fp + c.fn:
        f1 = c.f(1.0)
        assert c.iou == pytest.approx(f1 / (2 - f1), abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        pixel_metrics(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        confusion_map(np.zeros((2, 2)), np.zeros((3, 2)))


def test_auprc_perfect_and_flat():
    assert auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    labels = [1, 0, 0, 1, 0]
    assert auprc([0.5] * 5, labels) == pytest.approx(0.4)


def test_auprc_matches_enumeration(rng):
    for _ in range(5):
        s = np.round(rng.random(100), 2)
        y = rng.random(100) < 0.35
        y[0] = True
        assert auprc(s, y) == pytest.approx(average_precision_enum(s.tolist(), y.tolist()), abs=1e-9)


def test_auprc_monotone_invariance(rng):
    s = rng.random(200)
    y = rng.random(200) < s
    assert auprc(s, y) == pytest.approx(auprc(np.exp(3 * s) - 7, y), abs=1e-12)


def test_auprc_needs_positive():
    with pytest.raises(ValueError):
        auprc([0.1, 0.2], [0, 0])


def test_confusion_codes(rng):
    t = rng.random((10, 12)) < 0.3
    assert set(np.unique(confusion_map(t, t).data)) <= {0, 1}
    assert set(np.unique(confusion_map(~t, t).data)) <= {2, 3}
    p = rng.random((10, 12)) < 0.5
    codes = confusion_map(p, t).data[0]
    c = confusion_counts(p, t)
    hist = np.bincount(codes.astype(int).ravel(), minlength=4)
    assert hist.tolist() == [c.tn, c.tp, c.fn, c.fp]


def test_confusion_colors(tmp_path):
    codes = np.array([[0, 1], [2, 3]])
    rgb = confusion_rgb(codes)
    assert rgb[0, 0].tolist() == [0, 0, 0]
    assert rgb[0, 1].tolist() == [0, 255, 0]
    assert rgb[1, 0].tolist() == [255, 0, 0]
    assert rgb[1, 1].tolist() == [255, 255, 0]
    save_confusion_png(codes, tmp_path / "c.png")
    from PIL import Image

    assert np.array(Image.open(tmp_path / "c.png")).tolist() == rgb.tolist()


def polygon(n_pixels, size_class=2, pid="p", row=0):
    return PolygonRecord(pid, size_class, ((row, 0, n_pixels),))


def test_half_area_rule():
    pred = np.zeros((2, 10))
    pred[0, :5] = 1
    assert polygon_hit_rate(pred, [polygon(10)]).hits == 1
    pred[0, 4] = 0
    assert polygon_hit_rate(pred, [polygon(10)]).hits == 0


def test_size_one_reported_not_totalled():
    pred = np.ones((3, 10))
    inv = [polygon(4, 1, "a"), polygon(10, 2, "b", 1), polygon(10, 3, "c", 2)]
    rep = polygon_hit_rate(pred, inv)
    assert rep.attempted == 2 and rep.hits == 2 and rep.hit_rate == 1.0
    assert rep.to_json()["per_class"]["1"] == {"attempted": 1, "hits": 1, "hit_rate": 1.0,
                                               "counted": False}


def test_hit_rate_arithmetic():
    rep = HitReport({2: [25, 8], 3: [71, 53], 4: [16, 16]})
    assert rep.hits == 77 and rep.attempted == 112
    assert round(100 * rep.hit_rate, 2) == 68.75


def test_hit_monotone(rng):
    mask = rng.random((20, 20)) < 0.3
    inv = [PolygonRecord(f"p{i}", 2, rle_encode(rng.random((20, 20)) < 0.2)) for i in range(10)]
    pred = rng.random((20, 20)) < 0.4
    base = polygon_hit_rate(pred, inv).hits
    assert polygon_hit_rate(pred | mask, inv).hits >= base
    assert polygon_hit_rate(np.ones((20, 20)), inv).hit_rate == 1.0


def test_inventory_errors_and_bounds():
    with pytest.raises(ValueError):
        polygon_hit_rate(np.zeros((2, 2)), [])
    with pytest.raises(ValueError):
        PolygonRecord("x", 6, ((0, 0, 1),))
    with pytest.raises(ValueError):
        PolygonRecord("x", 2, ())
    with pytest.raises(ValueError):
        polygon_hit_rate(np.zeros((2, 2)), [PolygonRecord("x", 2, ((0, 0, 5),))])


def test_rle_roundtrip_and_file(tmp_path, rng):
    m = rng.random((9, 13)) < 0.4
    runs = rle_encode(m)
    np.testing.assert_array_equal(rle_decode(runs, m.shape), m)
    inv = [PolygonRecord("a", 3, runs)]
    write_inventory(inv, tmp_path / "inv.jsonl")
    assert read_inventory(tmp_path / "inv.jsonl") == inv
