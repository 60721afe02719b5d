import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roofcloud.core import (
    EmptyCloudError,
    PointCloud,
    PointCloudError,
    PointLabel,
    bounding_box,
    build_index,
    load_point_cloud,
    save_point_cloud,
)


def exhaustive_knn(points, q, k):
    d2 = ((points - q) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(points)), d2))[:k]
    return d2[order], order


def test_load_xyz_keeps_order(tmp_path):
    f = tmp_path / "a.xyz"
    f.write_text("0 0 0\n1 0 0\n0 1 0\n")
    c = load_point_cloud(f)
    np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert c.labels is None


def test_load_ply_ascii(tmp_path):
    f = tmp_path / "a.ply"
    f.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
        "1 2 3\n4 5 6\n"
    )
    c = load_point_cloud(f)
    np.testing.assert_array_equal(c.points, [[1, 2, 3], [4, 5, 6]])


def test_malformed_line_reports_line_number(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("0 0 0\n1 2\n")
    with pytest.raises(PointCloudError, match=r"bad\.xyz:2"):
        load_point_cloud(f)


def test_empty_file_rejected(tmp_path):
    f = tmp_path / "e.xyz"
    f.write_text("")
    with pytest.raises(EmptyCloudError):
        load_point_cloud(f)


def test_binary_ply_rejected(tmp_path):
    f = tmp_path / "b.ply"
    f.write_text(
        "ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with pytest.raises(PointCloudError, match="ascii"):
        load_point_cloud(f)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_point_cloud(tmp_path / "nope.xyz")


@pytest.mark.parametrize("suffix", ["xyz", "ply"])
def test_round_trip_exact(tmp_path, suffix):
    rng = np.random.default_rng(3)
    c = PointCloud(rng.normal(scale=50, size=(100, 3)))
    f = tmp_path / f"c.{suffix}"
    save_point_cloud(c, f)
    back = load_point_cloud(f)
    np.testing.assert_array_equal(back.points, c.points)


@pytest.mark.parametrize("suffix", ["xyz", "ply"])
def test_round_trip_labels(tmp_path, suffix):
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 2, size=30)
    c = PointCloud(rng.random((30, 3)), labels)
    f = tmp_path / f"c.{suffix}"
    save_point_cloud(c, f)
    if suffix == "ply":
        assert "property uchar label" in f.read_text()
    back = load_point_cloud(f)
    np.testing.assert_array_equal(back.labels, labels)
    np.testing.assert_array_equal(back.points, c.points)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_save_unwritable(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    with pytest.raises(OSError):
        save_point_cloud(PointCloud([[0, 0, 0]]), d / "x.xyz")


def test_save_missing_directory(tmp_path):
    with pytest.raises(OSError):
        save_point_cloud(PointCloud([[0, 0, 0]]), tmp_path / "no" / "such" / "x.xyz")


def test_cloud_validation():
    with pytest.raises(PointCloudError):
        PointCloud([[0, 0, np.nan]])
    with pytest.raises(PointCloudError):
        PointCloud([[0, 0, 0]], labels=[0, 1])
    c = PointCloud([[0, 0, 0], [1, 1, 1]], labels=[PointLabel.ROOF, PointLabel.PAD])
    assert not c.points.flags.writeable


def test_index_examples():
    grid = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
    d2, idx = build_index(grid).nearest([[0, 0, 0]])
    assert idx[0] == 0 and d2[0] == 0

    pair = build_index([[0, 0, 0], [1, 0, 0]])
    assert pair.nearest([[0.4, 0, 0]])[1][0] == 0
    # exhaustive oracle: distances 0 and 1, both <= 1.5
    pts = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    expected = np.nonzero(np.linalg.norm(pts, axis=1) <= 1.5)[0]
    np.testing.assert_array_equal(pair.radius([0, 0, 0], 1.5), expected)


def test_index_rejects_empty():
    with pytest.raises(EmptyCloudError):
        build_index(np.zeros((0, 3)))


def test_knn_tie_lowest_index():
    # four equidistant points around the query; duplicates included
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [1, 0, 0], [5, 5, 5]])
    index = build_index(pts)
    d2, idx = index.knn([[0, 0, 0]], k=3)
    np.testing.assert_array_equal(idx[0], [0, 1, 2])
    np.testing.assert_array_equal(d2[0], [1, 1, 1])


@settings(max_examples=60, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**32 - 1),
    st.integers(min_value=1, max_value=40),
    st.integers(min_value=1, max_value=6),
    st.booleans(),
)
def test_knn_matches_exhaustive(seed, n, k, lattice):
    rng = np.random.default_rng(seed)
    if lattice:
        pts = rng.integers(0, 3, size=(n, 3)).astype(float)
        q = rng.integers(0, 3, size=(5, 3)).astype(float)
    else:
        pts = rng.normal(size=(n, 3))
        q = rng.normal(size=(5, 3))
    k = min(k, n)
    d2, idx = build_index(pts).knn(q, k)
    for r in range(len(q)):
        ed2, eidx = exhaustive_knn(pts, q[r], k)
        np.testing.assert_array_equal(idx[r], eidx)
        np.testing.assert_allclose(d2[r], ed2, rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_bounding_box_contains_all(pts):
    box = bounding_box(pts)
    assert np.all(pts >= box.min) and np.all(pts <= box.max)
    np.testing.assert_array_equal(box.min, pts.min(axis=0))
    np.testing.assert_array_equal(box.max, pts.max(axis=0))


def test_bounding_box_examples():
    box = bounding_box([[0, 0, 0], [1, 2, 3]])
    np.testing.assert_array_equal(box.min, [0, 0, 0])
    np.testing.assert_array_equal(box.max, [1, 2, 3])
    single = bounding_box([[2, 3, 4]])
    np.testing.assert_array_equal(single.min, single.max)
    pts = np.random.default_rng(0).random((1000, 3))
    box = bounding_box(pts)
    assert np.all(box.min >= 0) and np.all(box.max <= 1)
    with pytest.raises(EmptyCloudError):
        bounding_box(np.zeros((0, 3)))
