import math

import numpy as np
import pytest

from uatrack.geometry import (COV_EPSILON, BBox, DegenerateWeightsError,
                              GaussianState, Rect, fit_gaussian, iou,
                              mahalanobis, rect_distances, set_distance)


def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(0, 0, -1, 5)
    with pytest.raises(ValueError):
        BBox(0, 0, 5, 0)
    with pytest.raises(ValueError):
        BBox(float("nan"), 0, 5, 5)


def test_rect_validation():
    with pytest.raises(ValueError):
        Rect(1, 0, 1, 5)
    with pytest.raises(ValueError):
        Rect(0, 5, 1, 5)


def test_iou_identity():
    b = BBox(5, 5, 10, 10)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(BBox(5, 5, 10, 10), BBox(100, 5, 10, 10)) == 0.0


def test_iou_half_overlap():
    # intersection 5x10 = 50, union 200 - 50 = 150
    a = BBox(5, 5, 10, 10)
    b = BBox(10, 5, 10, 10)
    assert iou(a, b) == pytest.approx(50.0 / 150.0, abs=1e-12)


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = BBox(*rng.uniform(1, 20, 2), *rng.uniform(1, 10, 2))
        b = BBox(*rng.uniform(1, 20, 2), *rng.uniform(1, 10, 2))
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0


def test_set_distance_overlap_zero():
    assert set_distance(Rect(0, 0, 5, 5), Rect(4, 4, 10, 10)) == 0.0
    assert set_distance(Rect(0, 0, 5, 5), Rect(5, 0, 10, 5)) == 0.0  # touching


def test_set_distance_axis_gap():
    assert set_distance(Rect(0, 0, 5, 5), Rect(10, 2, 11, 3)) == pytest.approx(5.0)


def test_set_distance_corner_gap():
    d = set_distance(Rect(0, 0, 5, 5), Rect(10, 10, 11, 11))
    assert d == pytest.approx(math.sqrt(50.0), abs=1e-12)


def _grid_points(r: Rect, step: float) -> np.ndarray:
    xs = np.arange(r.x0, r.x1 + step / 2, step)
    ys = np.arange(r.y0, r.y1 + step / 2, step)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _brute_force_distance(a: Rect, b: Rect, step: float = 0.25) -> float:
    pa = _grid_points(a, step)
    pb = _grid_points(b, step)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min()))


def test_set_distance_against_point_grid_oracle():
    rng = np.random.default_rng(11)
    for _ in range(60):
        a = Rect(*(lambda x, y, w, h: (x, y, x + w, y + h))(
            rng.uniform(0, 12), rng.uniform(0, 12),
            rng.uniform(0.5, 4), rng.uniform(0.5, 4)))
        b = Rect(*(lambda x, y, w, h: (x, y, x + w, y + h))(
            rng.uniform(0, 12), rng.uniform(0, 12),
            rng.uniform(0.5, 4), rng.uniform(0.5, 4)))
        exact = set_distance(a, b)
        approx = _brute_force_distance(a, b)
        assert exact == pytest.approx(approx, abs=0.4)
        assert exact == set_distance(b, a)
        # translation invariance
        shift = rng.uniform(-30, 30, 2)
        a2 = Rect(a.x0 + shift[0], a.y0 + shift[1], a.x1 + shift[0], a.y1 + shift[1])
        b2 = Rect(b.x0 + shift[0], b.y0 + shift[1], b.x1 + shift[0], b.y1 + shift[1])
        assert set_distance(a2, b2) == pytest.approx(exact, abs=1e-9)
        # zero iff intersecting (or touching)
        overlaps = a.x0 <= b.x1 and b.x0 <= a.x1 and a.y0 <= b.y1 and b.y0 <= a.y1
        assert (exact == 0.0) == overlaps


def test_rect_distances_matches_scalar():
    rng = np.random.default_rng(3)
    boxes = np.column_stack([rng.uniform(0, 30, 10), rng.uniform(0, 30, 10),
                             rng.uniform(1, 8, 10), rng.uniform(1, 8, 10)])
    rects = np.column_stack([rng.uniform(0, 30, 7), rng.uniform(0, 30, 7)])
    rects = np.hstack([rects, rects + rng.uniform(0.5, 5, (7, 2))])
    dmat = rect_distances(boxes, rects)
    for i in range(10):
        cx, cy, w, h = boxes[i]
        box_rect = Rect(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        for j in range(7):
            expect = set_distance(box_rect, Rect(*rects[j]))
            assert dmat[i, j] == pytest.approx(expect, abs=1e-12)


def test_fit_gaussian_point_mass():
    p = np.array([1.0, 2, 3, 4, 5, 6])
    g = fit_gaussian([p], [1.0])
    assert np.allclose(g.mean, p)
    assert np.allclose(g.cov, COV_EPSILON * np.eye(6))


def test_fit_gaussian_symmetric_points():
    p = np.array([3.0, -2, 1, 0, 4, -1])
    g = fit_gaussian([p, -p], [1.0, 1.0])
    assert np.allclose(g.mean, 0.0, atol=1e-12)


def test_fit_gaussian_hand_weighted_moments():
    a = np.zeros(6)
    b = np.zeros(6)
    b[0] = 2.0
    g = fit_gaussian([a, b], [1.0, 3.0])
    assert g.mean[0] == pytest.approx(1.5, abs=1e-12)
    assert g.cov[0, 0] == pytest.approx(0.75 + COV_EPSILON, abs=1e-12)


def test_fit_gaussian_weight_scale_invariance():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(8, 6))
    w = rng.uniform(0.1, 2.0, 8)
    g1 = fit_gaussian(pts, w)
    g2 = fit_gaussian(pts, w * 37.5)
    assert np.allclose(g1.mean, g2.mean, atol=1e-12)
    assert np.allclose(g1.cov, g2.cov, atol=1e-12)


def test_fit_gaussian_output_psd():
    rng = np.random.default_rng(9)
    for _ in range(25):
        n = int(rng.integers(1, 12))
        pts = rng.normal(scale=10, size=(n, 6))
        w = rng.uniform(0, 1, n)
        w[0] = max(w[0], 1e-3)
        g = fit_gaussian(pts, w)
        assert np.allclose(g.cov, g.cov.T)
        assert np.linalg.eigvalsh(g.cov).min() > 0


def test_fit_gaussian_degenerate_weights():
    with pytest.raises(DegenerateWeightsError):
        fit_gaussian([np.zeros(6)], [0.0])


def test_mahalanobis_center_and_identity():
    g = GaussianState(mean=np.zeros(6), cov=np.eye(6))
    assert mahalanobis(np.zeros(6), g) == 0.0
    e = np.zeros(6)
    e[2] = 1.0
    assert mahalanobis(e, g) == pytest.approx(1.0, rel=1e-6)


def test_mahalanobis_hand_solve():
    cov = np.eye(6)
    cov[0, 0] = 4.0
    g = GaussianState(mean=np.zeros(6), cov=cov)
    x = np.zeros(6)
    x[0] = 2.0
    assert mahalanobis(x, g) == pytest.approx(1.0, rel=1e-6)


def test_gaussian_state_validation():
    with pytest.raises(ValueError):
        GaussianState(mean=np.zeros(5), cov=np.eye(6))
    bad = np.eye(6)
    bad[0, 1] = 0.5  # asymmetric
    with pytest.raises(ValueError):
        GaussianState(mean=np.zeros(6), cov=bad)
    neg = np.eye(6)
    neg[0, 0] = -1.0
    with pytest.raises(ValueError):
        GaussianState(mean=np.zeros(6), cov=neg)
