"""Point-cloud container, XYZ / PLY-ascii I/O and exact nearest-neighbour search."""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class PointLabel(IntEnum):
    ROOF = 0
    PAD = 1


class PointCloudError(ValueError):
    """Raised for malformed point files and invalid clouds."""


class EmptyCloudError(PointCloudError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """Ordered (n, 3) float64 coordinates in meters with optional per-point labels."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PointCloudError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise PointCloudError("points contain NaN or Inf")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int8, copy=True)
            if lab.shape != (len(pts),):
                raise PointCloudError(
                    f"labels length {lab.shape} does not match {len(pts)} points"
                )
            if np.any((lab != PointLabel.ROOF) & (lab != PointLabel.PAD)):
                raise PointCloudError("labels must be 0 (roof) or 1 (pad)")
            lab.flags.writeable = False
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    def subset(self, indices) -> PointCloud:
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return PointCloud(self.points[indices], labels)

    def translated(self, t) -> PointCloud:
        return PointCloud(self.points + np.asarray(t, dtype=np.float64), self.labels)

    def require_nonempty(self, what: str = "cloud") -> None:
        if len(self.points) == 0:
            raise EmptyCloudError(f"{what} is empty")


def as_cloud(obj) -> PointCloud:
    """Accept a PointCloud or anything array-like of shape (n, 3)."""
    if isinstance(obj, PointCloud):
        return obj
    return PointCloud(np.asarray(obj, dtype=np.float64))


@dataclass(frozen=True)
class BoundingBox:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("bounding box corners must be 3-vectors")
        if np.any(lo > hi):
            raise ValueError(f"min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def inflated(self, fraction: float) -> BoundingBox:
        pad = 0.5 * fraction * self.extent
        return BoundingBox(self.min - pad, self.max + pad)

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.min) & (pts <= self.max), axis=-1)


def bounding_box(cloud) -> BoundingBox:
    cloud = as_cloud(cloud)
    cloud.require_nonempty()
    return BoundingBox(cloud.points.min(axis=0), cloud.points.max(axis=0))


class SpatialIndex:
    """k-NN and radius queries that agree exactly with exhaustive search.

    Distances are recomputed from coordinates and ties are broken by the
    lowest point index, so results do not depend on tree layout.
    """

    def __init__(self, cloud):
        cloud = as_cloud(cloud)
        cloud.require_nonempty()
        self.cloud = cloud
        self._pts = cloud.points
        self._tree = cKDTree(self._pts)

    def __len__(self) -> int:
        return len(self._pts)

    def _sq_dist(self, q, idx):
        d = self._pts[idx] - q[..., None, :]
        return np.einsum("...ij,...ij->...i", d, d)

    def knn(self, queries, k: int = 1):
        """Return ``(sq_distances, indices)`` each of shape (m, k), nearest first."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self._pts)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        k_eff = min(n, k + 2)
        _, idx = self._tree.query(q, k=k_eff)
        idx = idx.reshape(len(q), k_eff)
        d2 = self._sq_dist(q, idx)
        order = np.lexsort((idx, d2), axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)
        out_idx = idx[:, :k].copy()
        out_d2 = d2[:, :k].copy()
        if k_eff < n:
            # a tie at the k-th distance may extend past what the tree returned
            suspect = np.nonzero(d2[:, k - 1] >= d2[:, -1])[0]
            for r in suspect:
                cand = np.asarray(
                    self._tree.query_ball_point(q[r], np.sqrt(d2[r, k - 1]) * (1 + 1e-9) + 1e-300),
                    dtype=np.int64,
                )
                cd2 = self._sq_dist(q[r], cand)
                o = np.lexsort((cand, cd2))[:k]
                out_idx[r] = cand[o]
                out_d2[r] = cd2[o]
        return out_d2, out_idx

    def nearest(self, queries):
        """Single nearest neighbour: ``(sq_distances, indices)`` of shape (m,)."""
        d2, idx = self.knn(queries, 1)
        return d2[:, 0], idx[:, 0]

    def radius(self, query, r: float) -> np.ndarray:
        """Indices within distance ``r`` (inclusive) of one query, ascending."""
        q = np.asarray(query, dtype=np.float64)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-12)), dtype=np.int64)
        if len(cand) == 0:
            return cand
        keep = self._sq_dist(q, cand) <= r * r
        return np.sort(cand[keep])

    def radius_counts(self, queries, r: float) -> np.ndarray:
        """Number of indexed points within ``r`` (inclusive) of each query."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        return np.asarray(self._tree.query_ball_point(q, r, return_length=True), dtype=np.int64)


def build_index(cloud) -> SpatialIndex:
    return SpatialIndex(cloud)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    # shortest repr round-trips float64 exactly
    return repr(float(v))


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        fmt = fmt.lower()
        if fmt not in ("xyz", "ply"):
            raise PointCloudError(f"unknown point format {fmt!r}")
        return fmt
    return "ply" if path.suffix.lower() == ".ply" else "xyz"


def load_point_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read an XYZ text file or an ascii PLY file.

    ``fmt`` is ``"xyz"`` or ``"ply"``; by default it follows the file suffix.
    """
    path = Path(path)
    fmt = _detect_format(path, fmt)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise PointCloudError(f"{path}: not a text file (binary PLY is not supported)") from exc
    lines = text.splitlines()
    if fmt == "ply":
        return _parse_ply(lines, path)
    return _parse_xyz(lines, path)


def _parse_xyz(lines, path) -> PointCloud:
    pts, labels = [], []
    for lineno, line in enumerate(lines, 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) not in (3, 4):
            raise PointCloudError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(tok)}")
        try:
            pts.append([float(t) for t in tok[:3]])
            if len(tok) == 4:
                labels.append(int(tok[3]))
        except ValueError as exc:
            raise PointCloudError(f"{path}:{lineno}: {exc}") from None
    if not pts:
        raise EmptyCloudError(f"{path}: no points")
    if labels and len(labels) != len(pts):
        raise PointCloudError(f"{path}: label column present on only some lines")
    return PointCloud(np.array(pts), np.array(labels) if labels else None)


def _parse_ply(lines, path) -> PointCloud:
    if not lines or lines[0].strip() != "ply":
        raise PointCloudError(f"{path}:1: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for lineno, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok:
            continue
        key = tok[0]
        if key == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise PointCloudError(f"{path}:{lineno}: only ascii PLY is supported")
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tok) != 3:
                raise PointCloudError(f"{path}:{lineno}: malformed element line")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise PointCloudError(f"{path}:{lineno}: bad vertex count") from None
            elif n_vertex is None:
                raise PointCloudError(f"{path}:{lineno}: vertex element must come first")
        elif key == "property":
            if in_vertex:
                if len(tok) < 3 or tok[1] == "list":
                    raise PointCloudError(f"{path}:{lineno}: unsupported vertex property")
                props.append(tok[-1])
        elif key == "end_header":
            body_start = lineno
            break
        else:
            raise PointCloudError(f"{path}:{lineno}: unexpected header keyword {key!r}")
    if body_start is None:
        raise PointCloudError(f"{path}: missing end_header")
    if n_vertex is None:
        raise PointCloudError(f"{path}: no vertex element")
    if n_vertex == 0:
        raise EmptyCloudError(f"{path}: no points")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise PointCloudError(f"{path}: vertex element lacks x, y, z properties") from None
    lab_col = props.index("label") if "label" in props else None

    pts = np.empty((n_vertex, 3))
    labels = np.empty(n_vertex, dtype=np.int64) if lab_col is not None else None
    row = 0
    for lineno, line in enumerate(lines[body_start:], body_start + 1):
        if row == n_vertex:
            break
        tok = line.split()
        if not tok:
            continue
        if len(tok) != len(props):
            raise PointCloudError(
                f"{path}:{lineno}: expected {len(props)} fields, got {len(tok)}"
            )
        try:
            pts[row] = [float(tok[c]) for c in cols]
            if labels is not None:
                labels[row] = int(float(tok[lab_col]))
        except ValueError as exc:
            raise PointCloudError(f"{path}:{lineno}: {exc}") from None
        row += 1
    if row < n_vertex:
        raise PointCloudError(f"{path}: expected {n_vertex} vertices, found {row}")
    return PointCloud(pts, labels)


def format_point_cloud(cloud: PointCloud, fmt: str) -> str:
    rows = [" ".join(_fmt(v) for v in p) for p in cloud.points.tolist()]
    if cloud.labels is not None:
        rows = [f"{r} {int(l)}" for r, l in zip(rows, cloud.labels.tolist())]
    if fmt == "xyz":
        return "".join(r + "\n" for r in rows)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if cloud.labels is not None:
        header.append("property uchar label")
    header.append("end_header")
    return "\n".join(header) + "\n" + "".join(r + "\n" for r in rows)


def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename so readers never see partial output."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_point_cloud(cloud, path, fmt: str | None = None) -> None:
    cloud = as_cloud(cloud)
    path = Path(path)
    atomic_write_text(path, format_point_cloud(cloud, _detect_format(path, fmt)))
