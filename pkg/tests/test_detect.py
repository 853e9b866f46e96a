import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psagan.detect import (CELL, CircleAnnotation, DetectionMaps, DetectorTrainConfig, decode_detections, detect,
                           dihedral, downscale_image, grid_shape, load_annotations, match_detections,
                           multiscale_merge, predict_maps, rasterize_targets, save_annotations, train_detector)
from psagan.networks import build_network, preset
from psagan.synth import SceneSpec, generate_pair


def test_rasterize_example():
    maps = rasterize_targets([CircleAnnotation(42, 42, 8)], (64, 64), scale_factor=1)
    assert maps.shape == (16, 16)
    assert maps.p[10, 10] == 1.0 and maps.p.sum() == 1.0
    assert (maps.x[10, 10], maps.y[10, 10]) == (0.5, 0.5)
    assert maps.r[10, 10] == pytest.approx(0.4)
    assert maps.r.sum() == pytest.approx(0.4)


def test_empty_annotations_give_zero_maps():
    maps = rasterize_targets([], (128, 128), scale_factor=4)
    assert maps.shape == (8, 8) and not maps.to_array().any()
    assert decode_detections(maps) == []


def test_decode_example():
    z = np.zeros((16, 16))
    p, x, y, r = z.copy(), z.copy(), z.copy(), z.copy()
    p[10, 10], x[10, 10], y[10, 10], r[10, 10] = 1.0, 0.5, 0.5, 0.4
    (c,) = decode_detections(DetectionMaps(p, x, y, r, scale_factor=1))
    assert (c.x, c.y, c.p) == (42.0, 42.0, 1.0)
    assert c.r == pytest.approx(8.0)


def test_adjacent_cells_suppressed():
    z = np.zeros((8, 8))
    p = z.copy()
    p[3, 3], p[3, 4] = 0.9, 0.8
    out = decode_detections(DetectionMaps(p, z, z, z + 0.2, scale_factor=1))
    assert len(out) == 1 and out[0].p == 0.9


def test_equal_neighbours_first_in_scan_order_wins():
    z = np.zeros((6, 6))
    p = z.copy()
    p[2, 2] = p[2, 3] = p[3, 2] = 0.7
    out = decode_detections(DetectionMaps(p, z, z, z + 0.2, scale_factor=1))
    assert [(c.x, c.y) for c in out] == [(8.0, 8.0)]


def test_shared_cell_keeps_larger_radius():
    maps = rasterize_targets([CircleAnnotation(10, 10, 6), CircleAnnotation(11, 10, 9)], (64, 64), 1, max_radius=5)
    assert maps.p.sum() == 1 and maps.r[2, 2] == pytest.approx(9 / 4 / 5)


def test_radius_range_filter():
    big, small = CircleAnnotation(32, 32, 30), CircleAnnotation(96, 96, 2)
    maps = rasterize_targets([big, small], (128, 128), 1, max_radius=5, min_radius_cells=1.0)
    assert maps.p.sum() == 0


def _sparse_scene(rng, shape, sf, max_radius=5.0):
    """At most one circle per 4x4-cell block, two or more cells apart, so none share a 3x3 window."""
    span = CELL * sf
    gh, gw = grid_shape(shape, sf)
    out = []
    for by in range(0, gh - 2, 4):
        for bx in range(0, gw - 2, 4):
            if rng.random() < 0.5:
                continue
            cx, cy = bx + rng.integers(3), by + rng.integers(3)
            r = rng.uniform(0.2, max_radius) * span
            out.append(CircleAnnotation((cx + rng.random()) * span, (cy + rng.random()) * span, float(r)))
    return out


@settings(max_examples=1000, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), sf=st.sampled_from([1, 4, 8]))
def test_round_trip_and_monotone_threshold(seed, sf):
    rng = np.random.default_rng(seed)
    shape = (256, 256)
    truth = _sparse_scene(rng, shape, sf)
    maps = rasterize_targets(truth, shape, sf)
    got = decode_detections(maps)
    assert len(got) == len(truth)
    key = lambda c: (c.y, c.x)  # noqa: E731
    for t, g in zip(sorted(truth, key=key), sorted(got, key=key)):
        assert abs(t.x - g.x) <= 0.5 and abs(t.y - g.y) <= 0.5
        assert abs(t.r - g.r) <= 1e-9 * t.r + 1e-9
    # random confidences: count never increases with the threshold
    noisy = DetectionMaps(rng.random(maps.shape), maps.x, maps.y, maps.r + 0.1, sf)
    counts = [len(decode_detections(noisy, t)) for t in np.linspace(0, 1, 11)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert len(decode_detections(noisy, 0.4)) >= len(decode_detections(noisy, 0.8))


def test_decode_clamps_into_bounds():
    rng = np.random.default_rng(0)
    arr = rng.normal(0, 2, (4, 8, 8))
    arr[0] = rng.random((8, 8))
    maps = DetectionMaps.from_array(arr, scale_factor=4)
    for c in decode_detections(maps, 0.0):
        assert 0 <= c.x < 128 and 0 <= c.y < 128
        assert 0 < c.r <= 5 * 4 * 4


def test_merge_rules():
    a = [CircleAnnotation(20, 20, 8, 0.9)]
    b = [CircleAnnotation(21, 20, 8, 0.7), CircleAnnotation(80, 80, 8, 0.6)]
    assert multiscale_merge(a, []) == a and multiscale_merge([], b) == sorted(b, key=lambda c: -c.p)
    merged = multiscale_merge(a, b)
    assert merged == [a[0], b[1]]
    assert multiscale_merge(merged, []) == merged
    far = [CircleAnnotation(10, 10, 4, 0.5), CircleAnnotation(60, 60, 4, 0.5)]
    assert len(multiscale_merge(far, [])) == 2


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_merge_idempotent(seed):
    rng = np.random.default_rng(seed)
    mk = lambda n: [CircleAnnotation(*rng.uniform(0, 100, 2), rng.uniform(2, 10), rng.random())  # noqa: E731
                    for _ in range(n)]
    m = multiscale_merge(mk(8), mk(8))
    assert multiscale_merge(m, []) == m


def test_annotation_csv_round_trip(tmp_path):
    cs = [CircleAnnotation(1.5, 2.25, 3.125, 0.5)]
    save_annotations(tmp_path / "a.csv", cs)
    assert load_annotations(tmp_path / "a.csv") == cs
    save_annotations(tmp_path / "e.csv", [])
    assert (tmp_path / "e.csv").read_text().strip() == "x,y,r,p"
    (tmp_path / "bad.csv").write_text("x,y,radius\n1,2,3\n")
    with pytest.raises(ValueError):
        load_annotations(tmp_path / "bad.csv")


@pytest.mark.parametrize("k", range(8))
def test_dihedral_moves_circles_with_pixels(k):
    img = np.zeros((40, 60))
    img[5, 17] = 1.0
    out, (c,) = dihedral(img, [CircleAnnotation(17.5, 5.5, 1.0)], k)
    yy, xx = np.argwhere(out == 1.0)[0]
    assert (c.x, c.y) == (xx + 0.5, yy + 0.5)


def test_downscale_crops_to_cell_multiple():
    img = np.arange(70 * 70, dtype=float).reshape(70, 70)
    small = downscale_image(img, 4)
    assert small.shape == (16, 16)
    assert small[0, 0] == pytest.approx(img[:4, :4].mean())


def test_match_detections_one_to_one():
    truth = [CircleAnnotation(10, 10, 8), CircleAnnotation(40, 40, 8)]
    found = [CircleAnnotation(11, 10, 8.5), CircleAnnotation(10.5, 10, 8), CircleAnnotation(40, 45, 8)]
    assert match_detections(truth, found) == [(0, 1)]
    assert match_detections(truth, [CircleAnnotation(40, 40, 10)]) == []


def _net(seed=0):
    return build_network(preset("srpsa_net"), seed=seed)


def test_blank_image_gives_no_detections():
    net = _net()
    assert detect(np.zeros((128, 128)), net) == []
    with pytest.raises(ValueError):
        detect(np.zeros((64, 64)), None)


def test_predict_maps_shape_and_range():
    m = predict_maps(_net(), np.random.default_rng(0).random((128, 96)), 4)
    assert m.shape == (8, 6) and np.all((m.p >= 0) & (m.p <= 1))


def _scene(seed, shape=(64, 64), count=2):
    _, sem, c = generate_pair(SceneSpec(shape=shape, count=count, radius_mean=9, radius_std=1,
                                        separation=1.5, seed=seed))
    return sem, c


def test_single_sample_overfit():
    res = train_detector([_scene(0)], _net(), DetectorTrainConfig(epochs=300, batch=1, lr=1e-3, augment=False,
                                                                   weight_decay=0.0))
    first = next(step for step, loss, _ in res.history if loss < 1e-3)
    assert first <= 2000
    assert res.best_val < 1e-3


def test_descent_after_first_epoch_and_determinism():
    data = [_scene(s, (128, 128), 6) for s in range(8)]
    cfg = DetectorTrainConfig(epochs=1, lr=1e-3)
    a = train_detector(data, _net(), cfg)
    assert a.history[1][1] < a.history[0][1]
    b = train_detector(data, _net(), cfg)
    assert all(np.array_equal(a.state[k], b.state[k]) for k in a.state)
    with pytest.raises(ValueError):
        train_detector([], _net(), cfg)


def test_paper_defaults():
    cfg = DetectorTrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.lambda_p, cfg.max_radius, cfg.batch) == (1e-4, 1e-6, 5.0, 5.0, 4)
