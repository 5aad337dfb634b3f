import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pixpoint.geometry import (CameraIntrinsics, CorrespondenceSet,
                               RigidTransform, SensorRig, back_project,
                               gather_matched_features, match_correspondences,
                               project_points, Z_MIN)


def identity_rig(width=4, height=4, fx=1.0, fy=1.0, cx=0.0, cy=0.0):
    return SensorRig(
        CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height),
        RigidTransform(np.eye(3), np.zeros(3)),
    )


def random_rig(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return SensorRig(
        CameraIntrinsics(fx=rng.uniform(20, 120), fy=rng.uniform(20, 120),
                         cx=rng.uniform(10, 50), cy=rng.uniform(5, 30),
                         width=64, height=40),
        RigidTransform(q, rng.normal(scale=0.5, size=3)),
    )


class TestProjectPoints:
    def test_identity_rig_on_axis(self):
        coords, depth, visible = project_points(np.array([[0.0, 0.0, 1.0]]), identity_rig())
        assert np.allclose(coords[0], [0.0, 0.0])
        assert depth[0] == pytest.approx(1.0)
        assert visible[0]

    def test_behind_camera_invisible(self):
        coords, depth, visible = project_points(np.array([[0.0, 0.0, -1.0]]), identity_rig())
        assert not visible[0]
        assert np.isnan(coords[0]).all()

    def test_pinhole_formula(self):
        rig = identity_rig(width=256, height=256, fx=100.0, fy=100.0, cx=50.0, cy=50.0)
        coords, _, _ = project_points(np.array([[1.0, 0.0, 2.0]]), rig)
        assert coords[0, 0] == pytest.approx(100.0)

    def test_nonfinite_points_rejected(self):
        with pytest.raises(ValueError):
            project_points(np.array([[np.nan, 0.0, 1.0]]), identity_rig())

    def test_round_trip_recovers_visible_points(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            rig = random_rig(rng)
            pts = rng.uniform(-5, 5, size=(60, 3))
            coords, depth, visible = project_points(pts, rig)
            if not visible.any():
                continue
            recovered = back_project(coords[visible], depth[visible], rig)
            assert np.allclose(recovered, pts[visible], atol=1e-6)


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            RigidTransform(refl, np.zeros(3))

    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(0)
        rig = random_rig(rng)
        t = rig.lidar_to_camera
        pts = rng.normal(size=(10, 3))
        assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)


def brute_force_matches(points, rig):
    """Per-point projection plus explicit min-depth selection per pixel."""
    best = {}
    for i, p in enumerate(points):
        q = rig.lidar_to_camera.rotation @ p + rig.lidar_to_camera.translation
        if q[2] <= Z_MIN:
            continue
        u = rig.intrinsics.fx * q[0] / q[2] + rig.intrinsics.cx
        v = rig.intrinsics.fy * q[1] / q[2] + rig.intrinsics.cy
        col, row = int(np.floor(u)), int(np.floor(v))
        if not (0 <= col < rig.intrinsics.width and 0 <= row < rig.intrinsics.height):
            continue
        key = (row, col)
        if key not in best or q[2] < best[key][0]:
            best[key] = (q[2], i)
    return {key: idx for key, (_, idx) in sorted(best.items())}


class TestMatchCorrespondences:
    def test_all_behind_camera_empty(self):
        pts = np.array([[0.0, 0.0, -2.0], [1.0, 1.0, -1.0]])
        corr = match_correspondences(pts, identity_rig())
        assert corr.count == 0

    def test_nearest_depth_wins_shared_pixel(self):
        rig = identity_rig(width=8, height=8, fx=4.0, fy=4.0, cx=4.0, cy=4.0)
        pts = np.array([[0.1, 0.1, 2.0], [0.25, 0.25, 5.0]])  # same pixel (4, 4)
        expected = brute_force_matches(pts, rig)
        corr = match_correspondences(pts, rig)
        assert corr.count == 1
        assert expected[(corr.pixel_rows[0], corr.pixel_cols[0])] == corr.point_indices[0]
        assert corr.point_indices[0] == 0  # the 2 m point

    def test_grid_in_frustum_count(self):
        rig = identity_rig(width=4, height=4, fx=2.0, fy=2.0, cx=2.0, cy=2.0)
        xs = np.linspace(-1.4, 1.4, 4)
        pts = np.array([[x, y, 2.0] for x in xs for y in xs])
        expected = brute_force_matches(pts, rig)
        corr = match_correspondences(pts, rig)
        assert corr.count == len(expected)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            rig = random_rig(rng)
            pts = rng.uniform(-4, 4, size=(rng.integers(1, 80), 3))
            expected = brute_force_matches(pts, rig)
            corr = match_correspondences(pts, rig)
            got = {(r, c): i for r, c, i in
                   zip(corr.pixel_rows, corr.pixel_cols, corr.point_indices)}
            assert got == expected

    def test_sorted_by_row_then_col(self):
        rng = np.random.default_rng(5)
        rig = random_rig(rng)
        pts = rng.uniform(-4, 4, size=(200, 3))
        corr = match_correspondences(pts, rig)
        keys = list(zip(corr.pixel_rows, corr.pixel_cols))
        assert keys == sorted(keys)

    def test_dedup_idempotent(self):
        rng = np.random.default_rng(7)
        rig = random_rig(rng)
        pts = rng.uniform(-4, 4, size=(150, 3))
        corr = match_correspondences(pts, rig)
        retained = pts[corr.point_indices]
        again = match_correspondences(retained, rig)
        assert again.count == corr.count
        assert np.array_equal(again.pixel_rows, corr.pixel_rows)
        assert np.array_equal(again.pixel_cols, corr.pixel_cols)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 60))
    def test_removal_never_increases_count_and_bounds_hold(self, seed, n):
        rng = np.random.default_rng(seed)
        rig = random_rig(rng)
        pts = rng.uniform(-4, 4, size=(n, 3))
        corr = match_correspondences(pts, rig)
        assert np.all(corr.pixel_rows >= 0) and np.all(corr.pixel_rows < rig.intrinsics.height)
        assert np.all(corr.pixel_cols >= 0) and np.all(corr.pixel_cols < rig.intrinsics.width)
        assert len(set(corr.point_indices)) == corr.count
        if n > 1:
            sub = match_correspondences(pts[: n // 2], rig)
            assert sub.count <= corr.count


class TestGatherMatchedFeatures:
    def test_empty_correspondences(self):
        corr = CorrespondenceSet(np.empty(0, int), np.empty(0, int), np.empty(0, int))
        g, f = gather_matched_features(np.zeros((4, 4, 5)), np.zeros((3, 5)), corr)
        assert g.shape == (0, 5) and f.shape == (0, 5)

    def test_constant_map_rows(self):
        fmap = np.full((4, 6, 3), 2.5)
        pfeat = np.arange(12.0).reshape(4, 3)
        corr = CorrespondenceSet([0, 3], [5, 2], [1, 3])
        g, f = gather_matched_features(fmap, pfeat, corr)
        assert np.all(g == 2.5)
        assert np.array_equal(f, pfeat[[1, 3]])

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            h, w, d, n = rng.integers(2, 8, size=4)
            m = int(rng.integers(0, 10))
            fmap = rng.normal(size=(h, w, d))
            pfeat = rng.normal(size=(n, d))
            corr = CorrespondenceSet(rng.integers(0, h, m), rng.integers(0, w, m),
                                     rng.integers(0, n, m))
            g, f = gather_matched_features(fmap, pfeat, corr)
            for i in range(m):
                assert np.array_equal(g[i], fmap[corr.pixel_rows[i], corr.pixel_cols[i]])
                assert np.array_equal(f[i], pfeat[corr.point_indices[i]])

    def test_torch_tensors_keep_gradients(self):
        fmap = torch.randn(3, 3, 4, requires_grad=True)
        pfeat = torch.randn(5, 4, requires_grad=True)
        corr = CorrespondenceSet([0, 2], [1, 1], [4, 0])
        g, f = gather_matched_features(fmap, pfeat, corr)
        (g.sum() + f.sum()).backward()
        assert fmap.grad is not None and pfeat.grad is not None

    def test_shape_mismatch_rejected(self):
        corr = CorrespondenceSet([0], [0], [0])
        with pytest.raises(ValueError):
            gather_matched_features(np.zeros((2, 2, 3)), np.zeros((2, 4)), corr)
        with pytest.raises(ValueError):
            gather_matched_features(np.zeros((2, 2, 3)), np.zeros((2, 3)),
                                    CorrespondenceSet([5], [0], [0]))
