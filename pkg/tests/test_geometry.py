import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajcap.geometry import (
    AXIS_SWAP, CameraModel, GeometryError, TrajectoryPlan, _clip_polyline, clip_segment_near,
    load_calibration, load_plan, plan_to_polylines, project, save_calibration, save_plan,
    vehicle_to_camera,
)
from trajcap.raster import BOUNDARY_YELLOW, LANE_BLUE


def identity_cam(**kw):
    args = dict(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)
    args.update(kw)
    return CameraModel(**args)


def line(x0, x1, y, n=5, z=0.0):
    return [(x, y, z) for x in np.linspace(x0, x1, n)]


def make_plan(traj_x=(5.0, 30.0), n=10, y=0.0, z=0.0, speeds=None):
    traj = line(*traj_x, y=y, n=n, z=z)
    speeds = speeds if speeds is not None else [5.0] * n
    return TrajectoryPlan(traj, speeds, (line(5, 40, 3.0), line(5, 40, -3.0)),
                          (line(5, 40, 1.5), line(5, 40, -1.5)))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class TestVehicleToCamera:
    def test_optical_axis(self):
        np.testing.assert_allclose(vehicle_to_camera((10, 0, 0), identity_cam()), (0, 0, 10), atol=1e-15)

    def test_left_is_negative_x(self):
        np.testing.assert_allclose(vehicle_to_camera((10, 2, 0), identity_cam()), (-2, 0, 10), atol=1e-15)

    def test_translated_camera(self):
        cam = identity_cam(translation=(1.0, 0.0, 0.0))
        got = vehicle_to_camera((11, 0, 0), cam)
        # independent route: build the 4x4 camera-to-vehicle pose and invert it numerically
        pose = np.eye(4)
        pose[:3, :3] = AXIS_SWAP
        pose[:3, 3] = (1.0, 0.0, 0.0)
        expected = (np.linalg.inv(pose) @ np.array([11.0, 0, 0, 1]))[:3]
        np.testing.assert_allclose(got, expected, atol=1e-12)
        np.testing.assert_allclose(got, (0, 0, 10), atol=1e-12)

    def test_up_is_negative_y(self):
        np.testing.assert_allclose(vehicle_to_camera((10, 0, 1), identity_cam()), (0, -1, 10), atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rigid_transform_preserves_distances(self, seed):
        rng = np.random.default_rng(seed)
        cam = identity_cam(rotation=random_rotation(rng), translation=rng.normal(size=3) * 5)
        p, q = rng.normal(size=3) * 20, rng.normal(size=3) * 20
        d0 = np.linalg.norm(p - q)
        d1 = np.linalg.norm(vehicle_to_camera(p, cam) - vehicle_to_camera(q, cam))
        assert abs(d0 - d1) < 1e-9


class TestCameraModel:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError, match="orthonormal"):
            identity_cam(rotation=np.eye(3) * 2)

    def test_rejects_reflection(self):
        with pytest.raises(GeometryError, match="determinant"):
            identity_cam(rotation=np.diag([1.0, 1.0, -1.0]))

    @pytest.mark.parametrize("kw", [{"fx": 0.0}, {"fy": -1.0}, {"z_near": 0.0}, {"width": 0}])
    def test_rejects_bad_intrinsics(self, kw):
        with pytest.raises(GeometryError):
            identity_cam(**kw)

    def test_calibration_round_trip(self, tmp_path):
        cam = CameraModel.forward_facing()
        save_calibration(cam, tmp_path / "calib.json")
        back = load_calibration(tmp_path / "calib.json")
        assert back.to_dict() == cam.to_dict()

    def test_calibration_parse_error_names_line(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text('{\n "fx": 1,\n "fy": oops\n}')
        with pytest.raises(GeometryError, match=r"calib.json:3"):
            load_calibration(path)

    def test_calibration_missing_key(self):
        d = CameraModel.forward_facing().to_dict()
        del d["cy"]
        with pytest.raises(GeometryError, match="cy"):
            CameraModel.from_dict(d)


class TestProject:
    def test_principal_point(self):
        assert project((0, 0, 10), identity_cam()) == (64.0, 64.0)

    def test_lateral_offset(self):
        # 100 * (-2) / 10 + 64 = 44
        assert project((-2, 0, 10), identity_cam()) == pytest.approx((44.0, 64.0), abs=1e-12)

    def test_half_depth_doubles_offset(self):
        # 100 * (-2) / 5 + 64 = 24
        assert project((-2, 0, 5), identity_cam()) == pytest.approx((24.0, 64.0), abs=1e-12)

    def test_rejects_points_before_near_plane(self):
        with pytest.raises(ValueError, match="clip"):
            project((0, 0, 0.05), identity_cam())

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 100), st.floats(1.0, 20.0))
    def test_ray_invariance(self, x, y, z, lam):
        cam = identity_cam()
        u0, v0 = project((x, y, z), cam)
        u1, v1 = project((lam * x, lam * y, lam * z), cam)
        assert u1 == pytest.approx(u0, rel=1e-12, abs=1e-9)
        assert v1 == pytest.approx(v0, rel=1e-12, abs=1e-9)


class TestClip:
    def test_both_visible(self):
        a, b = (0, 0, 5), (0, 0, 10)
        out = clip_segment_near(a, b, 0.1)
        np.testing.assert_array_equal(out[0], a)
        np.testing.assert_array_equal(out[1], b)

    def test_both_hidden(self):
        assert clip_segment_near((0, 0, -1), (0, 0, -2), 0.1) is None

    def test_crossing(self):
        a2, b2 = clip_segment_near((0, 0, -1), (0, 0, 1), 0.1)
        # t = (0.1 - (-1)) / (1 - (-1)) = 0.55
        assert a2[2] == 0.1
        np.testing.assert_array_equal(b2, (0, 0, 1))

    def test_crossing_interpolates_other_axes(self):
        a2, _ = clip_segment_near((2, 4, -1), (0, 0, 1), 0.1)
        t = 0.55
        np.testing.assert_allclose(a2, (2 - 2 * t, 4 - 4 * t, 0.1), atol=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=6, max_size=6))
    def test_idempotent(self, c):
        once = clip_segment_near(c[:3], c[3:], 0.1)
        if once is None:
            return
        twice = clip_segment_near(once[0], once[1], 0.1)
        np.testing.assert_array_equal(twice[0], once[0])
        np.testing.assert_array_equal(twice[1], once[1])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=60))
    def test_clipped_runs_stay_in_front(self, coords):
        n = len(coords) // 3
        if n < 2:
            return
        pts = np.array(coords[: 3 * n]).reshape(n, 3)
        for run_pts, run_vals in _clip_polyline(pts, np.arange(n, dtype=float), 0.1):
            assert len(run_pts) >= 2
            assert all(p[2] >= 0.1 for p in run_pts)


class TestPlanToPolylines:
    def test_everything_behind(self):
        plan = make_plan(traj_x=(-30, -5))
        plan = TrajectoryPlan(plan.trajectory, plan.speeds, (line(-40, -5, 3), line(-40, -5, -3)),
                              (line(-40, -5, 1), line(-40, -5, -1)))
        assert plan_to_polylines(plan, identity_cam()) == []

    def test_straight_trajectory_on_axis(self):
        polys = plan_to_polylines(make_plan(n=10), identity_cam())
        traj = polys[-1]
        assert len(traj.vertices) == 10
        assert all(u == 64.0 for u, _ in traj.vertices)

    def test_order_and_colors(self):
        polys = plan_to_polylines(make_plan(), identity_cam())
        assert len(polys) == 5
        assert [p.colors[0] for p in polys[:4]] == [BOUNDARY_YELLOW] * 2 + [LANE_BLUE] * 2
        red = round(255 * 5.0 / 16.67)  # 76.48 -> 76
        assert polys[4].colors[0] == (red, 255 - red, 0)

    def test_partially_hidden_trajectory_is_clipped(self):
        # camera at height 0 looking forward; the path starts 2 m behind it
        plan = make_plan(traj_x=(-2.0, 8.0), n=11)
        traj = plan_to_polylines(plan, identity_cam())[-1]
        # x = -2..8 step 1: points at x >= 1 survive plus one near-plane crossing
        assert len(traj.vertices) == 9
        # the crossing vertex is at depth exactly z_near -> same u (on axis)
        assert traj.vertices[0][0] == 64.0

    def test_crossing_speed_is_interpolated(self):
        plan = make_plan(traj_x=(-1.0, 1.0), n=2, speeds=[0.0, 16.67])
        traj = plan_to_polylines(plan, identity_cam())[-1]
        # crossing at depth 0.1 is 55% of the way along: speed 0.55 * 16.67
        t = 0.55
        assert traj.colors[0] == (round(255 * t + 1e-9), round(255 * (1 - t)), 0)


class TestPlanFile:
    def test_round_trip(self, tmp_path):
        plan = make_plan()
        save_plan(plan, tmp_path / "plan.json")
        assert load_plan(tmp_path / "plan.json") == plan

    def test_schema(self, tmp_path):
        save_plan(make_plan(n=3), tmp_path / "plan.json")
        d = json.loads((tmp_path / "plan.json").read_text())
        assert set(d) == {"trajectory", "road_boundaries", "lane_lines"}
        assert len(d["trajectory"][0]) == 4
        assert len(d["road_boundaries"]) == 2 and len(d["lane_lines"]) == 2

    @pytest.mark.parametrize("mutate,match", [
        (lambda d: d["trajectory"].__setitem__(0, [0, 0, 0, -1]), "non-negative"),
        (lambda d: d["trajectory"].__setitem__(1, [0, 0, 0, 1]), "non-decreasing"),
        (lambda d: d["lane_lines"].pop(), "pair"),
        (lambda d: d["road_boundaries"][0].__setitem__(slice(1, None), []), "at least 2"),
        (lambda d: d.pop("lane_lines"), "lane_lines"),
    ])
    def test_invalid_plans(self, mutate, match):
        d = make_plan(n=3).to_dict()
        mutate(d)
        with pytest.raises(GeometryError, match=match):
            TrajectoryPlan.from_dict(d)

    def test_non_finite_rejected(self):
        d = make_plan(n=3).to_dict()
        d["trajectory"][0][1] = math.inf
        with pytest.raises(GeometryError, match="non-finite"):
            TrajectoryPlan.from_dict(d)
