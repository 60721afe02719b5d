"""Normal estimation, total-least-squares plane fitting and region-growing segmentation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import SpatialIndex, as_cloud


class DegeneratePlaneError(ValueError):
    pass


@dataclass(frozen=True)
class PlaneModel:
    """Plane ``normal . p + offset = 0`` with a unit normal oriented upward (z >= 0)."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise DegeneratePlaneError("zero normal")
        n = n / norm
        off = float(self.offset) / norm
        if n[2] < 0 or (n[2] == 0 and _flip_horizontal(n)):
            n, off = -n, -off
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", off)

    def distance(self, points) -> np.ndarray:
        """Unsigned point-to-plane distance."""
        return np.abs(np.asarray(points, dtype=np.float64) @ self.normal + self.offset)

    def z_at(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        n = self.normal
        return -(xy @ n[:2] + self.offset) / n[2]


def _flip_horizontal(n):
    # vertical planes: make the first non-zero component positive
    nz = n[np.nonzero(n)[0][0]]
    return nz < 0


@dataclass(frozen=True)
class PlaneSegment:
    indices: np.ndarray
    model: PlaneModel
    rms: float


@dataclass(frozen=True)
class SegmentationParams:
    k_normals: int = 12
    angle_threshold: float = np.deg2rad(10.0)
    distance_threshold: float = 0.15
    min_points: int = 30
    refit_every: int = 20
    attach_boundary: bool = True
    absorb_fraction: float = 0.9

    def __post_init__(self):
        if self.k_normals < 3:
            raise ValueError("k_normals must be >= 3")
        if not (self.angle_threshold > 0 and self.distance_threshold > 0):
            raise ValueError("thresholds must be positive")
        if self.min_points < 3:
            raise ValueError("min_points must be >= 3")
        if self.refit_every < 1:
            raise ValueError("refit_every must be >= 1")
        if not 0 < self.absorb_fraction <= 1:
            raise ValueError("absorb_fraction must be in (0, 1]")


def _orient_up(normals):
    flip = normals[:, 2] < 0
    normals[flip] *= -1
    return normals


def _local_frames(cloud, k):
    pts = as_cloud(cloud).points
    if len(pts) < k:
        raise ValueError(f"cloud has {len(pts)} points, fewer than k={k}")
    if k < 3:
        raise ValueError("k must be >= 3")
    index = SpatialIndex(pts)
    _, nbr = index.knn(pts, k)
    local = pts[nbr]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = _orient_up(evecs[:, :, 0].copy())
    total = evals.sum(axis=1)
    curvature = np.divide(evals[:, 0], total, out=np.zeros(len(pts)), where=total > 0)
    return normals, curvature, nbr


def estimate_normals(cloud, k: int) -> np.ndarray:
    """Per-point unit normal from the k nearest neighbours (self included), z >= 0."""
    normals, _, _ = _local_frames(cloud, k)
    return normals


def _fit(points):
    if len(points) < 3:
        raise DegeneratePlaneError(f"need at least 3 points, got {len(points)}")
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    scale = max(s[0], 1e-300)
    if s[1] <= 1e-10 * scale:
        raise DegeneratePlaneError("points are collinear")
    normal = vt[2]
    return PlaneModel(normal, -float(normal @ centroid))


def fit_plane(cloud, indices=None) -> PlaneModel:
    """Total-least-squares plane through the selected points."""
    pts = as_cloud(cloud).points
    if indices is not None:
        pts = pts[np.asarray(indices, dtype=np.int64)]
    return _fit(pts)


def _rms(model, pts):
    return float(np.sqrt(np.mean(model.distance(pts) ** 2)))


def segment_planes(cloud, params: SegmentationParams | None = None) -> list[PlaneSegment]:
    """Greedy region growing seeded in ascending order of local curvature.

    A neighbour joins when its normal is within ``angle_threshold`` of the
    seed normal and it lies within ``distance_threshold`` of the region's
    current plane (refit every ``refit_every`` accepted points). Members
    that end up beyond the threshold of the final least-squares plane are
    released. Regions below ``min_points`` are dropped and their points
    become available to later seeds. Finally, leftover points adjacent to a
    segment join the nearest such plane if within ``distance_threshold``;
    plane models are not refit after this step.
    """
    params = params or SegmentationParams()
    cloud = as_cloud(cloud)
    pts = cloud.points
    n = len(pts)
    if n < params.min_points:
        raise ValueError(f"cloud has {n} points, fewer than min_points={params.min_points}")
    k = min(params.k_normals, n)
    normals, curvature, nbr = _local_frames(cloud, k)
    cos_thr = np.cos(params.angle_threshold)

    owner = np.full(n, -1, dtype=np.int64)
    tried = np.zeros(n, dtype=bool)
    seeds = np.lexsort((np.arange(n), curvature))
    found = []
    for seed in seeds:
        if owner[seed] >= 0 or tried[seed]:
            continue
        tried[seed] = True
        region_id = len(found)
        seed_normal = normals[seed]
        model = PlaneModel(seed_normal, -float(seed_normal @ pts[seed]))
        members = [seed]
        in_region = np.zeros(n, dtype=bool)
        in_region[seed] = True
        queue = deque([seed])
        since_refit = 0
        while queue:
            cur = queue.popleft()
            for j in nbr[cur]:
                if in_region[j] or owner[j] >= 0:
                    continue
                if abs(normals[j] @ seed_normal) < cos_thr:
                    continue
                if model.distance(pts[j]) > params.distance_threshold:
                    continue
                in_region[j] = True
                members.append(j)
                queue.append(j)
                since_refit += 1
                if since_refit >= params.refit_every:
                    since_refit = 0
                    try:
                        model = _fit(pts[members])
                    except DegeneratePlaneError:
                        pass
        if len(members) < params.min_points:
            continue
        members = np.array(sorted(members), dtype=np.int64)
        try:
            model = _fit(pts[members])
        except DegeneratePlaneError:
            continue
        for _ in range(3):
            keep = model.distance(pts[members]) <= params.distance_threshold
            if keep.all():
                break
            members = members[keep]
            if len(members) < 3:
                break
            model = _fit(pts[members])
        if len(members) < params.min_points:
            continue
        # final members must satisfy the threshold against the stored model
        members = members[model.distance(pts[members]) <= params.distance_threshold]
        if len(members) < params.min_points:
            continue
        owner[members] = region_id
        found.append((seed, PlaneSegment(members, model, _rms(model, pts[members]))))

    if params.attach_boundary and found:
        models = [seg.model for _, seg in found]
        _attach_boundary(pts, nbr, owner, models, params.distance_threshold)
        if _absorb_slivers(pts, nbr, owner, models, params.distance_threshold, params.absorb_fraction):
            _attach_boundary(pts, nbr, owner, models, params.distance_threshold)
        members = [np.nonzero(owner == rid)[0] for rid in range(len(found))]
        found = [
            (seed, _with_members(pts, m, seg.model))
            for m, (seed, seg) in zip(members, found) if len(m) > 0
        ]

    found.sort(key=lambda item: (-len(item[1].indices), item[0]))
    return [seg for _, seg in found]


def _with_members(pts, members, model):
    return PlaneSegment(members, model, _rms(model, pts[members]))


def _attach_boundary(pts, nbr, owner, models, threshold):
    """Give unowned points next to a segment to the closest adjacent plane within ``threshold``.

    Repeats until no point changes, so bands of blended normals along
    ridges and eaves are absorbed from the outside in.
    """
    while True:
        free = np.nonzero(owner < 0)[0]
        if len(free) == 0:
            return
        changes = []
        for i in free:
            cand = np.unique(owner[nbr[i]])
            cand = cand[cand >= 0]
            if len(cand) == 0:
                continue
            dist = np.array([models[r].distance(pts[i]) for r in cand])
            best = int(np.argmin(dist))
            if dist[best] <= threshold:
                changes.append((i, cand[best]))
        if not changes:
            return
        for i, r in changes:
            owner[i] = r


def _absorb_slivers(pts, nbr, owner, models, threshold, fraction):
    """Hand small segments that mostly fit a larger neighbour's plane over to it.

    Segments are visited smallest first. Points that fit no adjacent plane
    are released (owner -1). Returns True if anything changed.
    """
    sizes = np.bincount(owner[owner >= 0], minlength=len(models))
    changed = False
    for rid in np.lexsort((np.arange(len(models)), sizes)):
        members = np.nonzero(owner == rid)[0]
        if len(members) == 0:
            continue
        adj = np.unique(owner[nbr[members]])
        adj = adj[(adj >= 0) & (adj != rid)]
        adj = adj[sizes[adj] > len(members)]
        if len(adj) == 0:
            continue
        dist = np.array([models[a].distance(pts[members]) for a in adj])
        best = np.argmin(dist, axis=0)
        within = dist[best, np.arange(len(members))] <= threshold
        if within.mean() < fraction:
            continue
        owner[members] = -1
        owner[members[within]] = adj[best[within]]
        sizes = np.bincount(owner[owner >= 0], minlength=len(models))
        changed = True
    return changed
