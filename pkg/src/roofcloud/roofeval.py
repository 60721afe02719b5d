"""Roof-shape evaluation: plane matching, completeness/correctness/quality,
alpha-shape outline IoU and fixed-radius density profiles."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import shapely
from scipy.spatial import Delaunay, QhullError, cKDTree
from shapely.geometry import MultiPolygon, Polygon
from shapely.ops import unary_union

from .core import PointCloud, as_cloud
from .dataset import remove_padding, resample
from .metrics import chamfer_distance, emd_distance
from .planefit import PlaneSegment, SegmentationParams, segment_planes

MATCH_AREA_FRACTION = 0.4

TABLE_COLUMNS = [
    "emd_with_pad",
    "cd_with_pad",
    "emd_removed_pad",
    "cd_removed_pad",
    "outline_iou",
    "completeness",
    "correctness",
    "quality",
]


class DegenerateOutlineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# occupancy grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean raster whose cell (i, j) covers ``[(i0+i)*res, (i0+i+1)*res)`` in x (same for y).

    ``index_origin`` is the integer lattice index of cell (0, 0); all grids
    share the lattice anchored at (0, 0), so grids built from different
    clouds are directly comparable.
    """

    index_origin: tuple[int, int]
    resolution: float
    cells: np.ndarray

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")

    @property
    def origin(self) -> np.ndarray:
        return np.array(self.index_origin, dtype=float) * self.resolution

    @property
    def count(self) -> int:
        return int(self.cells.sum())

    @property
    def area(self) -> float:
        return self.count * self.resolution**2

    def cell_set(self) -> set[tuple[int, int]]:
        ii, jj = np.nonzero(self.cells)
        return set(zip((ii + self.index_origin[0]).tolist(), (jj + self.index_origin[1]).tolist()))


def _lattice_box(xy_min, xy_max, resolution):
    lo = np.floor(np.asarray(xy_min) / resolution).astype(np.int64)
    hi = np.floor(np.asarray(xy_max) / resolution).astype(np.int64)
    return lo, hi - lo + 1


def point_spacing(cloud) -> float:
    """Median nearest-neighbour distance in the xy plane (0 for a single point)."""
    xy = as_cloud(cloud).xy
    if len(xy) < 2:
        return 0.0
    d, _ = cKDTree(xy).query(xy, k=2)
    return float(np.median(d[:, 1]))


def rasterize_points(xy, resolution: float, support_radius: float = 0.0) -> OccupancyGrid:
    """Cells containing a point, plus cells whose centre lies within ``support_radius`` of one."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(xy) == 0:
        raise ValueError("cannot rasterize an empty point set")
    lo, shape = _lattice_box(xy.min(axis=0) - support_radius, xy.max(axis=0) + support_radius, resolution)
    cells = np.zeros(shape, dtype=bool)
    own = np.floor(xy / resolution).astype(np.int64) - lo
    cells[own[:, 0], own[:, 1]] = True
    if support_radius > 0:
        gi, gj = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
        centers = np.column_stack([(gi.ravel() + lo[0] + 0.5), (gj.ravel() + lo[1] + 0.5)]) * resolution
        d, _ = cKDTree(xy).query(centers, k=1, distance_upper_bound=support_radius * (1 + 1e-12))
        cells |= (d <= support_radius).reshape(shape)
    return OccupancyGrid((int(lo[0]), int(lo[1])), float(resolution), cells)


def density_spacing(cloud, k: int = 8) -> float:
    """Mean sample spacing 1/sqrt(density), density from the median k-th neighbour radius in xy.

    Unlike the nearest-neighbour distance this is not shrunk by jitter.
    """
    xy = as_cloud(cloud).xy
    k = min(k, len(xy) - 1)
    if k < 1:
        return 0.0
    d, _ = cKDTree(xy).query(xy, k=k + 1)
    r = float(np.median(d[:, k]))
    return r * math.sqrt(math.pi / k)


def default_support_radius(cloud) -> float:
    # half the diagonal of one sample's share of the surface
    return density_spacing(cloud) * math.sqrt(2) / 2


def footprint(segment: PlaneSegment, cloud, resolution: float, support_radius: float | None = None) -> OccupancyGrid:
    """Rasterized top-down footprint of a plane segment.

    Each member point covers cells within ``support_radius`` (default: half
    the diagonal of the cloud's mean sample spacing), so the occupied area
    tracks the facet area rather than the point count.
    """
    cloud = as_cloud(cloud)
    idx = np.asarray(segment.indices, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("empty segment")
    if support_radius is None:
        support_radius = default_support_radius(cloud)
    return rasterize_points(cloud.xy[idx], resolution, support_radius)


def _aligned(a: OccupancyGrid, b: OccupancyGrid):
    if not math.isclose(a.resolution, b.resolution, rel_tol=1e-12):
        raise ValueError(f"resolution mismatch: {a.resolution} vs {b.resolution}")
    lo = np.minimum(a.index_origin, b.index_origin)
    hi = np.maximum(np.add(a.index_origin, a.cells.shape), np.add(b.index_origin, b.cells.shape))
    shape = tuple(hi - lo)
    out = []
    for g in (a, b):
        m = np.zeros(shape, dtype=bool)
        o = np.subtract(g.index_origin, lo)
        m[o[0]:o[0] + g.cells.shape[0], o[1]:o[1] + g.cells.shape[1]] = g.cells
        out.append(m)
    return out


def grid_intersection(a: OccupancyGrid, b: OccupancyGrid) -> int:
    ma, mb = _aligned(a, b)
    return int(np.count_nonzero(ma & mb))


def grid_iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    ma, mb = _aligned(a, b)
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(ma & mb) / union)


# ---------------------------------------------------------------------------
# plane matching and scores
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlaneMatchResult:
    pairs: list[tuple[int, int, float]]
    tp: int
    fp: int
    fn: int


def match_footprints(gt_grids, pred_grids) -> PlaneMatchResult:
    """Match predicted plane footprints to ground-truth ones.

    A prediction claims the ground-truth plane with the largest IoU (lowest
    index on ties) and keeps it only if their overlap covers at least 40%
    of that plane's area. A ground-truth plane accepts one claim: the one
    with the highest IoU, lowest prediction index on ties.
    """
    n_gt, n_pred = len(gt_grids), len(pred_grids)
    claims: dict[int, list[tuple[float, int]]] = {}
    for i, pg in enumerate(pred_grids):
        if n_gt == 0:
            break
        ious = [grid_iou(pg, g) for g in gt_grids]
        j = int(np.argmax(ious))
        if ious[j] <= 0:
            continue
        inter = grid_intersection(pg, gt_grids[j])
        if inter >= MATCH_AREA_FRACTION * gt_grids[j].count:
            claims.setdefault(j, []).append((ious[j], i))
    pairs = []
    for j in sorted(claims):
        iou, i = max(claims[j], key=lambda c: (c[0], -c[1]))
        pairs.append((j, i, float(iou)))
    tp = len(pairs)
    return PlaneMatchResult(pairs=pairs, tp=tp, fp=n_pred - tp, fn=n_gt - tp)


def match_planes(gt_segments, gt_cloud, pred_segments, pred_cloud, resolution: float = 0.1) -> PlaneMatchResult:
    gt_grids = [footprint(s, gt_cloud, resolution) for s in gt_segments]
    pred_grids = [footprint(s, pred_cloud, resolution) for s in pred_segments]
    return match_footprints(gt_grids, pred_grids)


def _ratio(num, den):
    return num / den if den > 0 else None


def roof_scores(m: PlaneMatchResult):
    """Completeness, correctness and quality; ``None`` where the denominator is zero."""
    tp, fp, fn = m.tp, m.fp, m.fn
    return _ratio(tp, tp + fn), _ratio(tp, tp + fp), _ratio(tp, tp + fp + fn)


# ---------------------------------------------------------------------------
# outlines
# ---------------------------------------------------------------------------

def default_alpha(cloud) -> float:
    s = point_spacing(cloud)
    if s <= 0:
        raise DegenerateOutlineError("cannot derive alpha from coincident points")
    return 1.0 / (2.0 * s)


def outline_2d(cloud, alpha: float | None = None):
    """Alpha shape of the top-down projection as a shapely (Multi)Polygon.

    Delaunay triangles with circumradius <= 1/alpha are kept and unioned.
    """
    cloud = as_cloud(cloud)
    xy = np.unique(cloud.xy, axis=0)
    if len(xy) < 3:
        raise DegenerateOutlineError("need at least 3 distinct points")
    if alpha is None:
        alpha = default_alpha(cloud)
    try:
        tri = Delaunay(xy)
    except QhullError as exc:
        raise DegenerateOutlineError("points are collinear") from exc
    t = xy[tri.simplices]
    a = np.linalg.norm(t[:, 1] - t[:, 2], axis=1)
    b = np.linalg.norm(t[:, 0] - t[:, 2], axis=1)
    c = np.linalg.norm(t[:, 0] - t[:, 1], axis=1)
    cross = (t[:, 1, 0] - t[:, 0, 0]) * (t[:, 2, 1] - t[:, 0, 1]) - (t[:, 1, 1] - t[:, 0, 1]) * (t[:, 2, 0] - t[:, 0, 0])
    area2 = np.abs(cross)
    with np.errstate(divide="ignore", invalid="ignore"):
        radius = np.where(area2 > 0, a * b * c / (2.0 * area2), np.inf)
    keep = radius <= 1.0 / alpha
    if not keep.any():
        return MultiPolygon()
    shape = unary_union([Polygon(p) for p in t[keep]])
    return shape


def rasterize_polygon(shape, resolution: float, bounds=None) -> OccupancyGrid:
    """Cells whose centre lies inside ``shape``."""
    if shape.is_empty:
        raise ValueError("empty polygon")
    xmin, ymin, xmax, ymax = bounds or shape.bounds
    lo, dims = _lattice_box((xmin, ymin), (xmax, ymax), resolution)
    gi, gj = np.meshgrid(np.arange(dims[0]), np.arange(dims[1]), indexing="ij")
    cx = (gi.ravel() + lo[0] + 0.5) * resolution
    cy = (gj.ravel() + lo[1] + 0.5) * resolution
    inside = shapely.contains_xy(shape, cx, cy).reshape(dims)
    return OccupancyGrid((int(lo[0]), int(lo[1])), float(resolution), inside)


def outline_iou(gt, pred, alpha: float | None = None, resolution: float = 0.1) -> float:
    """IoU of the two clouds' top-down alpha shapes on a shared raster.

    With ``alpha=None`` each cloud uses its own spacing-derived alpha.
    """
    a = outline_2d(gt, alpha)
    b = outline_2d(pred, alpha)
    if a.is_empty or b.is_empty:
        return 0.0
    return grid_iou(rasterize_polygon(a, resolution), rasterize_polygon(b, resolution))


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityProfile:
    radius: float
    counts_gt: np.ndarray
    counts_pred: np.ndarray

    @property
    def mean_gt(self) -> float:
        return float(np.mean(self.counts_gt))

    @property
    def mean_pred(self) -> float:
        return float(np.mean(self.counts_pred))

    @property
    def var_gt(self) -> float:
        return float(np.var(self.counts_gt))

    @property
    def var_pred(self) -> float:
        return float(np.var(self.counts_pred))

    @property
    def variance_gap(self) -> float:
        return abs(self.var_pred - self.var_gt)

    def summary(self) -> dict:
        return {
            "radius": self.radius,
            "mean_gt": self.mean_gt,
            "var_gt": self.var_gt,
            "mean_pred": self.mean_pred,
            "var_pred": self.var_pred,
        }


def density_profile(gt, pred, radius: float = 0.5) -> DensityProfile:
    """Neighbour counts within ``radius`` around every ground-truth point.

    ``counts_gt`` excludes the point itself; ``counts_pred`` counts every
    predicted point in range.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    g = as_cloud(gt)
    p = as_cloud(pred)
    g.require_nonempty("gt")
    p.require_nonempty("pred")
    counts_gt = cKDTree(g.points).query_ball_point(g.points, radius, return_length=True) - 1
    counts_pred = cKDTree(p.points).query_ball_point(g.points, radius, return_length=True)
    return DensityProfile(float(radius), np.asarray(counts_gt, dtype=np.int64), np.asarray(counts_pred, dtype=np.int64))


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    resolution: float = 0.1
    outline_alpha: float | None = None
    outline_on_padded: bool = False
    density_radius: float = 0.5
    pad_margin: float = 1.0
    pred_pad_mode: str = "auto"  # auto | labels | height | none
    strip_padding: bool = True  # False: plane, outline and density metrics see the padded clouds
    resample_emd: bool = True
    seed: int = 0
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)


@dataclass
class RoofMetrics:
    emd_with_pad: float | None = None
    cd_with_pad: float | None = None
    emd_removed_pad: float | None = None
    cd_removed_pad: float | None = None
    outline_iou: float | None = None
    completeness: float | None = None
    correctness: float | None = None
    quality: float | None = None


@dataclass
class RoofReport:
    metrics: RoofMetrics
    match: PlaneMatchResult | None
    density: DensityProfile | None
    n_gt_planes: int | None = None
    n_pred_planes: int | None = None
    errors: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"metrics": asdict(self.metrics)}
        out["planes"] = None if self.match is None else {
            "n_gt": self.n_gt_planes,
            "n_pred": self.n_pred_planes,
            "tp": self.match.tp,
            "fp": self.match.fp,
            "fn": self.match.fn,
            "pairs": [list(p) for p in self.match.pairs],
        }
        out["density"] = None if self.density is None else self.density.summary()
        out["errors"] = dict(sorted(self.errors.items()))
        return out


def _strip_pad(cloud: PointCloud, mode: str, margin: float) -> PointCloud:
    if mode == "none":
        return cloud
    if mode == "auto":
        mode = "labels" if cloud.labels is not None else "height"
    return remove_padding(cloud, mode, margin)


def _emd_equalized(a: PointCloud, b: PointCloud, cfg: EvalConfig) -> float:
    if len(a) != len(b):
        if not cfg.resample_emd:
            raise ValueError(f"sizes differ ({len(a)} vs {len(b)}) and resampling is off")
        b = resample(b, len(a), cfg.seed)
    return emd_distance(a, b)


def evaluate_roof(gt, pred, cfg: EvalConfig | None = None) -> RoofReport:
    """Run every roof metric; a failing metric is recorded in ``errors`` and left ``None``.

    Ground truth is de-padded by labels when labelled; the prediction per
    ``cfg.pred_pad_mode``. Plane scores, outline IoU and density use the
    de-padded clouds unless ``cfg.strip_padding`` is off.
    """
    cfg = cfg or EvalConfig()
    gt = as_cloud(gt)
    pred = as_cloud(pred)
    m = RoofMetrics()
    errors: dict[str, str] = {}

    def attempt(name, fn):
        try:
            return fn()
        except Exception as exc:  # reported per field, the rest of the report proceeds
            errors[name] = f"{type(exc).__name__}: {exc}"
            return None

    gt_roof = _strip_pad(gt, "labels" if gt.labels is not None else "none", cfg.pad_margin)
    pred_roof = attempt("pad_removal", lambda: _strip_pad(pred, cfg.pred_pad_mode, cfg.pad_margin))
    # clouds seen by the shape metrics (planes, outline, density)
    gt_eval, pred_eval = (gt_roof, pred_roof) if cfg.strip_padding else (gt, pred)

    m.cd_with_pad = attempt("cd_with_pad", lambda: chamfer_distance(gt, pred))
    m.emd_with_pad = attempt("emd_with_pad", lambda: _emd_equalized(gt, pred, cfg))
    if pred_roof is not None:
        m.cd_removed_pad = attempt("cd_removed_pad", lambda: chamfer_distance(gt_roof, pred_roof))
        m.emd_removed_pad = attempt("emd_removed_pad", lambda: _emd_equalized(gt_roof, pred_roof, cfg))
    if pred_eval is not None:
        a, b = (gt, pred) if cfg.outline_on_padded else (gt_eval, pred_eval)
        m.outline_iou = attempt("outline_iou", lambda: outline_iou(a, b, cfg.outline_alpha, cfg.resolution))

    match = None
    n_gt = n_pred = None
    gt_segs = attempt("gt_segmentation", lambda: segment_planes(gt_eval, cfg.segmentation))
    pred_segs = None
    if pred_eval is not None:
        pred_segs = attempt("pred_segmentation", lambda: segment_planes(pred_eval, cfg.segmentation))
    if gt_segs is not None and pred_segs is not None:
        n_gt, n_pred = len(gt_segs), len(pred_segs)
        match = attempt(
            "plane_matching",
            lambda: match_planes(gt_segs, gt_eval, pred_segs, pred_eval, cfg.resolution),
        )
        if match is not None:
            cm, cr, q = roof_scores(match)
            m.completeness, m.correctness, m.quality = cm, cr, q
            for name, v in (("completeness", cm), ("correctness", cr), ("quality", q)):
                if v is None:
                    errors[name] = "undefined: no planes on one side"

    density = None
    if pred_eval is not None:
        density = attempt("density", lambda: density_profile(gt_eval, pred_eval, cfg.density_radius))
    return RoofReport(m, match, density, n_gt, n_pred, errors)


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def _metric_dict(r) -> dict:
    if isinstance(r, RoofReport):
        return asdict(r.metrics)
    if isinstance(r, RoofMetrics):
        return asdict(r)
    return r.get("metrics", r)


def aggregate_metrics(reports) -> dict:
    """Per-column mean over the reports where the metric is defined.

    Accepts RoofReport, RoofMetrics or their ``to_dict`` forms.
    """
    rows = [_metric_dict(r) for r in reports]
    out = {}
    for col in TABLE_COLUMNS:
        vals = [row.get(col) for row in rows]
        vals = [v for v in vals if v is not None]
        out[col] = float(np.mean(vals)) if vals else None
        out[f"{col}_n"] = len(vals)
    return out


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_csv(rows: list[tuple[str, RoofMetrics | dict]], key: str = "sample") -> str:
    """Table-style CSV: one row per sample, columns in the standard metric order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key, *TABLE_COLUMNS])
    for name, metrics in rows:
        d = asdict(metrics) if not isinstance(metrics, dict) else metrics
        w.writerow([name, *(_fmt_cell(d.get(c)) for c in TABLE_COLUMNS)])
    return buf.getvalue()


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
