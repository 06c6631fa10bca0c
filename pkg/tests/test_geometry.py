from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_rigid
from limbfit.errors import DegenerateLimb, InvalidBandwidth, ShapeMismatch, ValidationError
from limbfit.geometry import (
    PointCloud,
    SkeletonPose,
    SkeletonTopology,
    check_soft_assignment,
    cylindrical_coords,
    gaussian_kernel,
    pad_or_downsample,
    point_segment_distance,
)

coord = st.floats(-100.0, 100.0, allow_nan=False)
vec = arrays(np.float64, 3, elements=coord)


class TestCylindricalCoords:
    def test_origin_point(self):
        z, r = cylindrical_coords([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [4.0, 2.0, 3.0])
        assert z == 0.0 and r == 0.0

    def test_far_endpoint(self):
        ya, yb = np.array([0.0, 1.0, 0.0]), np.array([3.0, 5.0, 0.0])
        z, r = cylindrical_coords(yb, ya, yb)
        assert z == pytest.approx(5.0, abs=1e-12)
        assert r == pytest.approx(0.0, abs=1e-12)

    def test_hand_example(self):
        z, r = cylindrical_coords([1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [2.0, 0.0, 0.0])
        assert z == pytest.approx(1.0) and r == pytest.approx(1.0)

    def test_signed_axial_coordinate(self):
        z, r = cylindrical_coords([-2.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
        assert z == pytest.approx(-2.0) and r == pytest.approx(1.0)

    def test_degenerate_limb(self):
        with pytest.raises(DegenerateLimb):
            cylindrical_coords([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1e-10])

    def test_broadcasts(self):
        P = np.random.default_rng(0).normal(size=(5, 3))
        z, r = cylindrical_coords(P, np.zeros(3), np.array([0.0, 0.0, 2.0]))
        np.testing.assert_allclose(z, P[:, 2])
        np.testing.assert_allclose(r, np.hypot(P[:, 0], P[:, 1]))

    @settings(max_examples=200, deadline=None)
    @given(p=vec, ya=vec, yb=vec, seed=st.integers(0, 2**32 - 1))
    def test_rigid_invariance(self, p, ya, yb, seed):
        if np.linalg.norm(yb - ya) < 1e-3:
            return
        R, t = random_rigid(np.random.default_rng(seed))
        z0, r0 = cylindrical_coords(p, ya, yb)
        z1, r1 = cylindrical_coords(R @ p + t, R @ ya + t, R @ yb + t)
        assert abs(z1 - z0) <= 1e-9 * max(1.0, abs(z0))
        assert abs(r1 - r0) <= 1e-9 * max(1.0, abs(r0))

    @settings(max_examples=200, deadline=None)
    @given(p=vec, ya=vec, yb=vec)
    def test_pythagoras(self, p, ya, yb):
        if np.linalg.norm(yb - ya) < 1e-3:
            return
        z, r = cylindrical_coords(p, ya, yb)
        q2 = float(np.sum((p - ya) ** 2))
        assert abs(z * z + r * r - q2) <= 1e-9 * max(1.0, q2)

    @settings(max_examples=200, deadline=None)
    @given(p=vec, ya=vec, yb=vec)
    def test_distance_equals_radius_over_segment(self, p, ya, yb):
        L = np.linalg.norm(yb - ya)
        if L < 1e-3:
            return
        z, r = cylindrical_coords(p, ya, yb)
        if 0.0 <= z <= L:
            assert point_segment_distance(p, ya, yb) == pytest.approx(float(r), rel=1e-9, abs=1e-9)


class TestPointSegmentDistance:
    def test_interior(self):
        assert point_segment_distance([0.3, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == 0.0

    def test_clamped_endpoint(self):
        assert point_segment_distance([2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == pytest.approx(1.0)

    def test_perpendicular_foot(self):
        assert point_segment_distance([0.5, 2.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == pytest.approx(2.0)

    def test_degenerate_segment_is_point_distance(self):
        assert point_segment_distance([3.0, 4.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]) == pytest.approx(5.0)

    @settings(max_examples=200, deadline=None)
    @given(p=vec, ya=vec, yb=vec)
    def test_endpoint_swap_symmetry(self, p, ya, yb):
        d0 = point_segment_distance(p, ya, yb)
        d1 = point_segment_distance(p, yb, ya)
        assert d0 == pytest.approx(float(d1), rel=1e-9, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(p=vec, ya=vec, yb=vec)
    def test_matches_dense_sampling(self, p, ya, yb):
        ts = np.linspace(0.0, 1.0, 2001)[:, None]
        dense = np.min(np.linalg.norm(p - (ya + ts * (yb - ya)), axis=1))
        d = point_segment_distance(p, ya, yb)
        assert d <= dense + 1e-9
        assert dense - d <= np.linalg.norm(yb - ya) / 2000 + 1e-9


class TestGaussianKernel:
    def test_equal_arguments(self):
        assert gaussian_kernel(0.7, 0.7, 0.1) == 1.0

    def test_one_bandwidth(self):
        assert gaussian_kernel(0.3, 0.2, 0.1) == pytest.approx(0.367879, abs=1e-6)

    def test_two_bandwidths(self):
        assert gaussian_kernel(0.0, 0.2, 0.1) == pytest.approx(0.018316, abs=1e-6)

    @pytest.mark.parametrize("h", [0.0, -0.1])
    def test_invalid_bandwidth(self, h):
        with pytest.raises(InvalidBandwidth):
            gaussian_kernel(0.0, 1.0, h)

    @given(x=coord, y=coord, h=st.floats(1e-3, 10.0))
    def test_symmetric_and_bounded(self, x, y, h):
        k = gaussian_kernel(x, y, h)
        assert k == gaussian_kernel(y, x, h)
        assert 0.0 <= k <= 1.0


class TestTypes:
    def test_topology_rejects_self_limb(self):
        with pytest.raises(ValidationError):
            SkeletonTopology(("a", "b"), ((0, 0),))

    def test_topology_rejects_duplicates(self):
        with pytest.raises(ValidationError):
            SkeletonTopology(("a", "b"), ((0, 1), (0, 1)))

    def test_topology_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            SkeletonTopology(("a", "b"), ((0, 2),))

    def test_background_class_is_J(self, topo):
        assert topo.background_class == topo.num_joints
        assert topo.num_classes == topo.num_joints + 1

    def test_topology_dict_round_trip(self, topo):
        assert SkeletonTopology.from_dict(topo.to_dict()) == topo

    def test_pose_rejects_nan(self):
        with pytest.raises(ValidationError):
            SkeletonPose(np.array([[0.0, np.nan, 0.0]]))

    def test_cloud_field_length(self):
        with pytest.raises(ShapeMismatch):
            PointCloud(np.zeros((3, 3)), forward_flow=np.zeros((2, 3)))

    def test_soft_assignment_rows(self):
        check_soft_assignment(np.full((4, 3), 1 / 3), 4, 3)
        with pytest.raises(ValidationError):
            check_soft_assignment(np.full((4, 3), 0.3), 4, 3)
        with pytest.raises(ValidationError):
            check_soft_assignment(np.array([[1.5, -0.5]]), 1, 2)

    def test_pad_or_downsample(self):
        rng = np.random.default_rng(0)
        big = PointCloud(rng.normal(size=(2000, 3)), gt_label=np.arange(2000))
        small = pad_or_downsample(big, 1024, rng)
        assert len(small) == 1024 and small.num_valid == 1024
        assert len(set(small.gt_label.tolist())) == 1024
        tiny = pad_or_downsample(PointCloud(np.ones((5, 3))), 8, rng, pad=True)
        assert len(tiny) == 8 and tiny.num_valid == 5
        np.testing.assert_array_equal(tiny.valid().points, np.ones((5, 3)))
