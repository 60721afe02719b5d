import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import box

from roofcloud.core import PointCloud
from roofcloud.dataset import RoofSpec, generate_roof
from roofcloud.planefit import PlaneModel, PlaneSegment, segment_planes
from roofcloud.roofeval import (
    TABLE_COLUMNS,
    DegenerateOutlineError,
    EvalConfig,
    PlaneMatchResult,
    aggregate_metrics,
    density_profile,
    evaluate_roof,
    footprint,
    grid_iou,
    match_footprints,
    outline_2d,
    outline_iou,
    rasterize_points,
    rasterize_polygon,
    reports_csv,
    roof_scores,
)


def square_grid(x0, y0, size, n, z=0.0):
    g = np.linspace(0, size, n)
    xx, yy = np.meshgrid(g + x0, g + y0, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)])


def whole(cloud):
    n = len(cloud)
    return PlaneSegment(np.arange(n), PlaneModel([0, 0, 1], 0), 0.0)


def rect(x0, y0, x1, y1, res=0.1):
    return rasterize_polygon(box(x0, y0, x1, y1), res)


# --- grids -----------------------------------------------------------------

def test_footprint_examples():
    pts = square_grid(0.005, 0.005, 0.99, 100)
    g = footprint(whole(pts), pts, 0.5)
    assert g.count == 4 and g.area == pytest.approx(1.0)
    one = np.array([[3.3, 1.2, 0.0]])
    assert footprint(whole(one), one, 0.5).count == 1
    with pytest.raises(ValueError):
        footprint(PlaneSegment(np.array([], dtype=int), PlaneModel([0, 0, 1], 0), 0.0), pts, 0.5)


def test_gable_facet_footprint_area():
    roof = generate_roof(RoofSpec(kind="gable", width=10, depth=8, density=4, seed=0))
    idx = np.nonzero(roof.facet_labels == 0)[0]
    seg = PlaneSegment(idx, roof.facet_models[0], 0.0)
    area = footprint(seg, roof.cloud, 0.25).area
    assert abs(area - 40) <= 4


def test_grid_iou_examples():
    a = rect(0, 0, 1, 1)
    assert grid_iou(a, a) == 1.0
    assert grid_iou(a, rect(5, 5, 6, 6)) == 0.0
    assert grid_iou(a, rect(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=10 / 150)
    with pytest.raises(ValueError):
        grid_iou(a, rect(0, 0, 1, 1, res=0.2))


def test_grid_iou_from_points_half_overlap():
    a = rasterize_points(square_grid(0, 0, 1, 101)[:, :2], 0.1)
    b = rasterize_points(square_grid(0.5, 0, 1, 101)[:, :2], 0.1)
    assert grid_iou(a, b) == pytest.approx(1 / 3, abs=0.05)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_grid_iou_bounds_and_monotone(seed):
    rng = np.random.default_rng(seed)
    a = rasterize_points(rng.uniform(0, 3, (40, 2)), 0.25)
    b = rasterize_points(rng.uniform(0, 3, (40, 2)), 0.25)
    iou = grid_iou(a, b)
    assert 0 <= iou <= 1
    shared = rng.uniform(5, 6, (10, 2))
    a2 = rasterize_points(np.vstack([np.argwhere(a.cells) * 0.25 + 0.125 + np.array(a.index_origin) * 0.25, shared]), 0.25)
    b2 = rasterize_points(np.vstack([np.argwhere(b.cells) * 0.25 + 0.125 + np.array(b.index_origin) * 0.25, shared]), 0.25)
    assert grid_iou(a2, b2) >= iou - 1e-15


# --- matching --------------------------------------------------------------

def test_match_identical():
    gt = [rect(0, 0, 5, 4), rect(0, 4, 5, 8)]
    m = match_footprints(gt, gt)
    assert (m.tp, m.fp, m.fn) == (2, 0, 0)
    assert [(g, p) for g, p, _ in m.pairs] == [(0, 0), (1, 1)]


def test_match_sliver_is_false_positive():
    gt = [rect(0, 0, 5, 4), rect(0, 4, 5, 8)]
    pred = gt + [rect(4.7, 0, 5.3, 8)]
    m = match_footprints(gt, pred)
    assert (m.tp, m.fp, m.fn) == (2, 1, 0)


def test_match_thirty_percent_rejected():
    gt = [rect(0, 0, 10, 4), rect(0, 4, 10, 8)]
    pred = [rect(0, 0, 3, 4), rect(0, 4, 10, 8)]
    m = match_footprints(gt, pred)
    assert (m.tp, m.fp, m.fn) == (1, 1, 1)
    assert m.pairs[0][:2] == (1, 1)


def test_match_one_to_one_highest_iou_wins():
    gt = [rect(0, 0, 10, 4)]
    pred = [rect(0, 0, 6, 4), rect(0, 0, 9, 4)]
    m = match_footprints(gt, pred)
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)
    assert m.pairs[0][1] == 1


def test_match_planes_is_partial_injection():
    roof = generate_roof(RoofSpec(kind="hip", noise_sigma=0.03, seed=2))
    segs = segment_planes(roof.cloud)
    rng = np.random.default_rng(0)
    pred = roof.cloud.points + rng.normal(0, 0.05, roof.cloud.points.shape)
    from roofcloud.roofeval import match_planes

    m = match_planes(segs, roof.cloud, segment_planes(pred), pred)
    gts = [g for g, _, _ in m.pairs]
    preds = [p for _, p, _ in m.pairs]
    assert len(set(gts)) == len(gts) and len(set(preds)) == len(preds)
    assert m.tp == len(m.pairs)


# --- scores ----------------------------------------------------------------

def test_roof_scores_examples():
    assert roof_scores(PlaneMatchResult([], 2, 1, 1)) == (2 / 3, 2 / 3, 0.5)
    assert roof_scores(PlaneMatchResult([], 5, 0, 0)) == (1.0, 1.0, 1.0)
    assert roof_scores(PlaneMatchResult([], 0, 3, 2)) == (0.0, 0.0, 0.0)
    assert roof_scores(PlaneMatchResult([], 0, 0, 2)) == (0.0, None, 0.0)
    assert roof_scores(PlaneMatchResult([], 0, 0, 0)) == (None, None, None)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_quality_bounded_by_cm_and_cr(tp, fp, fn):
    cm, cr, q = roof_scores(PlaneMatchResult([], tp, fp, fn))
    if tp + fn > 0 and tp + fp > 0:
        assert cm == tp / (tp + fn) and cr == tp / (tp + fp) and q == tp / (tp + fp + fn)
        assert q <= min(cm, cr)


# --- outlines --------------------------------------------------------------

def test_outline_unit_square():
    shape = outline_2d(square_grid(0, 0, 1, 41))
    assert shape.geom_type == "Polygon"
    assert shape.area == pytest.approx(1.0, rel=0.05)


def test_outline_minimal_and_degenerate():
    tri = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    assert outline_2d(tri, alpha=0.1).area == pytest.approx(0.5)
    assert outline_2d(tri, alpha=10).is_empty
    with pytest.raises(DegenerateOutlineError):
        outline_2d(np.array([[0, 0, 0], [1, 1, 0], [2, 2, 0]], dtype=float), alpha=0.1)
    with pytest.raises(DegenerateOutlineError):
        outline_2d(np.zeros((2, 3)))


def test_outline_l_shape_area():
    roof = generate_roof(RoofSpec(kind="lcomposite", width=20, depth=14, density=20, seed=4))
    shape = outline_2d(roof.cloud)
    assert shape.area == pytest.approx(roof.outline.area, rel=0.05)
    hull = shape.convex_hull.area
    assert shape.area < 0.95 * hull  # concave


def test_outline_iou_examples():
    gt = square_grid(0, 0, 10, 41)
    assert outline_iou(gt, gt) == 1.0
    assert outline_iou(gt, gt + [50, 0, 0]) == 0.0
    dilated = square_grid(-0.5, -0.5, 11, 45)
    iou = outline_iou(gt, dilated)
    assert iou == pytest.approx(100 / 121, rel=0.05)
    assert outline_iou(dilated, gt) == iou


# --- density ---------------------------------------------------------------

def test_density_self_rule():
    pts = generate_roof(RoofSpec(kind="gable", seed=1)).cloud
    prof = density_profile(pts, pts, 0.5)
    np.testing.assert_array_equal(prof.counts_pred, prof.counts_gt + 1)
    assert prof.mean_pred == pytest.approx(prof.mean_gt + 1)
    assert prof.var_pred == pytest.approx(prof.var_gt)
    assert len(prof.counts_gt) == len(pts)


def test_density_empty_region_and_errors():
    gt = np.array([[0, 0, 0], [10, 0, 0]], dtype=float)
    pred = np.array([[0.1, 0, 0]])
    prof = density_profile(gt, pred, 0.5)
    assert prof.counts_pred.tolist() == [1, 0]
    assert prof.counts_gt.tolist() == [0, 0]
    with pytest.raises(ValueError):
        density_profile(gt, pred, 0)


# --- full evaluation -------------------------------------------------------

@pytest.mark.parametrize("kind", ["flat", "gable", "hip"])
def test_evaluate_self_is_perfect(kind):
    roof = generate_roof(RoofSpec(kind=kind, seed=3))
    rep = evaluate_roof(roof.cloud, roof.cloud)
    m = rep.metrics
    assert (m.completeness, m.correctness, m.quality, m.outline_iou) == (1.0, 1.0, 1.0, 1.0)
    assert m.cd_with_pad == 0 and m.emd_with_pad == 0
    assert m.cd_removed_pad == 0 and m.emd_removed_pad == 0
    assert rep.errors == {}


def test_evaluate_deleted_facet():
    roof = generate_roof(RoofSpec(kind="hip", seed=3))
    keep = np.nonzero(roof.facet_labels != 2)[0]
    rep = evaluate_roof(roof.cloud, roof.cloud.subset(keep))
    m = rep.metrics
    assert rep.match.fn >= 1
    assert m.completeness < 1 and m.correctness == 1


def test_evaluate_reports_failures_per_field():
    roof = generate_roof(RoofSpec(kind="flat", seed=3))
    line = PointCloud(np.column_stack([np.linspace(0, 5, 40), np.zeros(40), np.full(40, 5.0)]))
    rep = evaluate_roof(roof.cloud, line)
    assert rep.metrics.cd_with_pad is not None
    assert "outline_iou" in rep.errors
    assert rep.metrics.outline_iou is None


def test_report_serialization_and_columns():
    assert TABLE_COLUMNS == [
        "emd_with_pad", "cd_with_pad", "emd_removed_pad", "cd_removed_pad",
        "outline_iou", "completeness", "correctness", "quality",
    ]
    roof = generate_roof(RoofSpec(kind="gable", seed=3))
    rep = evaluate_roof(roof.cloud, roof.cloud, EvalConfig())
    d = rep.to_dict()
    json.dumps(d)
    text = reports_csv([("a", rep.metrics), ("b", rep.metrics)])
    lines = text.strip().split("\n")
    assert lines[0] == "sample," + ",".join(TABLE_COLUMNS)
    assert len(lines) == 3
    agg = aggregate_metrics([rep, rep])
    assert agg["quality"] == 1.0 and agg["quality_n"] == 2


def test_evaluate_deterministic():
    roof = generate_roof(RoofSpec(kind="lcomposite", noise_sigma=0.03, seed=8))
    pred = PointCloud(roof.cloud.points + 0.02)
    a = evaluate_roof(roof.cloud, pred).to_dict()
    b = evaluate_roof(roof.cloud, pred).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
