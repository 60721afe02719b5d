"""Synthetic roof generation, pad augmentation, pad removal and resampling."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import shapely
from shapely.geometry import Polygon

from .core import PointCloud, PointLabel, as_cloud
from .planefit import PlaneModel

MAX_POINTS = 3000
RESAMPLE_JITTER = 1e-6


def derive_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of a root seed."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode()), *map(int, keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


class RoofKind(str, Enum):
    FLAT = "flat"
    GABLE = "gable"
    HIP = "hip"
    L_COMPOSITE = "lcomposite"


@dataclass(frozen=True)
class RoofSpec:
    kind: RoofKind = RoofKind.GABLE
    width: float = 12.0
    depth: float = 8.0
    pitch: float = 30.0
    base_height: float = 5.0
    density: float = 4.0
    noise_sigma: float = 0.0
    seed: int = 0
    max_points: int = MAX_POINTS

    def __post_init__(self):
        object.__setattr__(self, "kind", RoofKind(self.kind))
        if not (self.width > 0 and self.depth > 0):
            raise ValueError("footprint dimensions must be positive")
        if not 0 <= self.pitch < 90:
            raise ValueError("pitch must be in [0, 90) degrees")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.max_points < 1:
            raise ValueError("max_points must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True)
class GroundTruthRoof:
    cloud: PointCloud
    facet_labels: np.ndarray
    facet_models: list[PlaneModel]
    outline: Polygon
    spec: RoofSpec = field(default_factory=RoofSpec)

    @property
    def n_facets(self) -> int:
        return len(self.facet_models)


@dataclass(frozen=True)
class PadConfig:
    ring_width: float = 1.0
    margin: float = 1.0
    density: float | None = None  # None: match the roof's points per outline area

    def __post_init__(self):
        if not self.ring_width > 0:
            raise ValueError("ring_width must be positive")
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.density is not None and not self.density > 0:
            raise ValueError("pad density must be positive")


# ---------------------------------------------------------------------------
# roof geometry: each kind maps xy to (facet id, z offset above base)
# ---------------------------------------------------------------------------

def _facets_flat(x, y, spec, t):
    return np.zeros(len(x), dtype=np.int64), np.zeros(len(x))


def _facets_gable(x, y, spec, t):
    half = spec.depth / 2
    label = (y >= 0).astype(np.int64)
    return label, t * (half - np.abs(y))


def _facets_hip(x, y, spec, t):
    hw, hd = spec.width / 2, spec.depth / 2
    to_long = hd - np.abs(y)   # distance to a long eave
    to_short = hw - np.abs(x)  # distance to a short eave
    long_side = to_long <= to_short
    label = np.where(long_side, (y >= 0).astype(np.int64), 2 + (x >= 0).astype(np.int64))
    return label, t * np.minimum(to_long, to_short)


def _l_parts(spec):
    w, d = spec.width, spec.depth
    main_y1 = -d / 2 + d / 2  # gable block spans the southern half
    wing_x0 = w / 2 - w / 3
    return main_y1, wing_x0


def _facets_l(x, y, spec, t):
    main_y1, _ = _l_parts(spec)
    d_main = spec.depth / 2
    mid = -spec.depth / 2 + d_main / 2
    in_main = y <= main_y1
    label = np.where(in_main, (y >= mid).astype(np.int64), 2)
    z = np.where(in_main, t * (d_main / 2 - np.abs(y - mid)), 0.0)
    return label, z


def _outline(spec) -> Polygon:
    hw, hd = spec.width / 2, spec.depth / 2
    if spec.kind is RoofKind.L_COMPOSITE:
        main_y1, wing_x0 = _l_parts(spec)
        return Polygon([(-hw, -hd), (hw, -hd), (hw, hd), (wing_x0, hd), (wing_x0, main_y1), (-hw, main_y1)])
    return Polygon([(-hw, -hd), (hw, -hd), (hw, hd), (-hw, hd)])


def _facet_models(spec, t) -> list[PlaneModel]:
    b = spec.base_height
    hw, hd = spec.width / 2, spec.depth / 2
    if spec.kind is RoofKind.FLAT:
        return [PlaneModel([0, 0, 1], -b)]
    if spec.kind is RoofKind.GABLE:
        # z = b + t*(hd + y) for y < 0 and z = b + t*(hd - y) for y >= 0
        return [PlaneModel([0, -t, 1], -(b + t * hd)), PlaneModel([0, t, 1], -(b + t * hd))]
    if spec.kind is RoofKind.HIP:
        return [
            PlaneModel([0, -t, 1], -(b + t * hd)),
            PlaneModel([0, t, 1], -(b + t * hd)),
            PlaneModel([-t, 0, 1], -(b + t * hw)),
            PlaneModel([t, 0, 1], -(b + t * hw)),
        ]
    d_main = spec.depth / 2
    mid = -spec.depth / 2 + d_main / 2
    c = b + t * (d_main / 2)
    return [
        PlaneModel([0, -t, 1], -(c - t * mid)),
        PlaneModel([0, t, 1], -(c + t * mid)),
        PlaneModel([0, 0, 1], -b),
    ]


_FACETS = {
    RoofKind.FLAT: _facets_flat,
    RoofKind.GABLE: _facets_gable,
    RoofKind.HIP: _facets_hip,
    RoofKind.L_COMPOSITE: _facets_l,
}


def jittered_grid(bounds, spacing: float, rng: np.random.Generator) -> np.ndarray:
    """One uniform sample per grid cell over ``(xmin, ymin, xmax, ymax)``."""
    xmin, ymin, xmax, ymax = bounds
    nx = max(1, int(round((xmax - xmin) / spacing)))
    ny = max(1, int(round((ymax - ymin) / spacing)))
    sx = (xmax - xmin) / nx
    sy = (ymax - ymin) / ny
    gx, gy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    u = rng.random((nx * ny, 2))
    x = xmin + (gx.ravel() + u[:, 0]) * sx
    y = ymin + (gy.ravel() + u[:, 1]) * sy
    return np.column_stack([x, y])


def _inside(poly, xy):
    return shapely.contains_xy(poly, xy[:, 0], xy[:, 1])


def generate_roof(spec: RoofSpec) -> GroundTruthRoof:
    """Sample a synthetic roof on a jittered grid at the requested horizontal density.

    If the footprint at ``density`` would exceed ``max_points``, the density
    is lowered to fit.
    """
    outline = _outline(spec)
    density = min(spec.density, spec.max_points / outline.area)
    spacing = 1.0 / np.sqrt(density)
    rng = derive_rng(spec.seed, "generation")
    xy = jittered_grid(outline.bounds, spacing, rng)
    xy = xy[_inside(outline, xy)]
    t = np.tan(np.deg2rad(spec.pitch))
    labels, rise = _FACETS[spec.kind](xy[:, 0], xy[:, 1], spec, t)
    z = spec.base_height + rise
    if spec.noise_sigma > 0:
        z = z + rng.normal(0.0, spec.noise_sigma, len(z))
    pts = np.column_stack([xy, z])
    cloud = PointCloud(pts, np.full(len(pts), PointLabel.ROOF))
    return GroundTruthRoof(cloud, labels, _facet_models(spec, t), outline, spec)


def add_padding(roof, outline: Polygon, cfg: PadConfig | None = None, seed: int = 0) -> PointCloud:
    """Append a low ring of pad points around ``outline``.

    Roof points come first (label roof), then pad points (label pad) at
    ``median(roof z) - margin``.
    """
    cfg = cfg or PadConfig()
    roof = as_cloud(roof)
    roof.require_nonempty("roof")
    if outline.is_empty or not outline.is_valid or outline.area <= 0:
        raise ValueError("degenerate outline")
    density = cfg.density if cfg.density is not None else len(roof) / outline.area
    outer = outline.buffer(cfg.ring_width, join_style=2)
    ring = outer.difference(outline)
    rng = derive_rng(seed, "padding")
    xy = jittered_grid(outer.bounds, 1.0 / np.sqrt(density), rng)
    xy = xy[_inside(ring, xy)]
    z_pad = float(np.median(roof.points[:, 2])) - cfg.margin
    pad = np.column_stack([xy, np.full(len(xy), z_pad)])
    pts = np.vstack([roof.points, pad])
    labels = np.concatenate([np.full(len(roof), PointLabel.ROOF), np.full(len(pad), PointLabel.PAD)])
    return PointCloud(pts, labels)


def remove_padding(cloud, mode: str = "labels", margin: float = 1.0) -> PointCloud:
    """Strip pad points.

    ``mode="labels"`` drops pad-labelled points exactly; ``mode="height"``
    drops points below ``median(z) - margin / 2`` and works on unlabeled
    predictions.
    """
    cloud = as_cloud(cloud)
    cloud.require_nonempty()
    if mode == "labels":
        if cloud.labels is None:
            raise ValueError("labels mode needs a labeled cloud")
        keep = cloud.labels == PointLabel.ROOF
    elif mode == "height":
        z = cloud.points[:, 2]
        keep = z >= np.median(z) - margin / 2
    else:
        raise ValueError(f"unknown pad removal mode {mode!r}")
    return cloud.subset(np.nonzero(keep)[0])


def resample(cloud, n: int, seed: int = 0) -> PointCloud:
    """Equalize a cloud to ``n`` points.

    Larger ``n`` appends jittered copies of randomly chosen points; smaller
    ``n`` keeps a random subset in original order.
    """
    cloud = as_cloud(cloud)
    cloud.require_nonempty()
    if n < 1:
        raise ValueError("n must be >= 1")
    m = len(cloud)
    if n == m:
        return cloud
    rng = derive_rng(seed, "resample", m, n)
    if n < m:
        keep = np.sort(rng.choice(m, size=n, replace=False))
        return cloud.subset(keep)
    extra = rng.integers(0, m, size=n - m)
    dup = cloud.points[extra] + rng.uniform(-RESAMPLE_JITTER, RESAMPLE_JITTER, size=(n - m, 3))
    labels = None if cloud.labels is None else np.concatenate([cloud.labels, cloud.labels[extra]])
    return PointCloud(np.vstack([cloud.points, dup]), labels)
