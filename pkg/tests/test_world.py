import math

import numpy as np
import pytest

from frealab.world import (
    Action, Role, VehicleState, WHEELBASE, constraint_h, encode_pseudo_state, get_layout, h_from_distance,
    initial_world, min_bbox_distance, pseudo_state_shape, step_vehicle, step_world,
)
from frealab.world.trajlog import TrajectoryWriter, read_log, step_record

from conftest import make_world

# dense boundary sampling (1e4 points per edge) of a 2x2 square vs the same square turned 45 degrees, 4 m apart
BBOX_45_SAMPLED = 1.5857864407805453
# yaw after 0.1 s at 5 m/s, steer 0.3, integrated with 1e-4 s substeps
YAW_FINE_STEP = 0.061867249921923946


def box(vid, x, y, yaw=0.0, hl=1.0, hw=1.0):
    return VehicleState(vid, (x, y), yaw, 0.0, (hl, hw))


class TestStepVehicle:
    def test_straight_line(self):
        s = step_vehicle(VehicleState(1, (0.0, 0.0), 0.0, 5.0), Action(0.0, 0.0), 0.1)
        assert s.position == pytest.approx((0.5, 0.0), abs=1e-12)
        assert s.speed == 5.0

    def test_speed_floor(self):
        s = step_vehicle(VehicleState(1, (0.0, 0.0), 0.0, 0.0), Action(-3.0, 0.0), 0.1)
        assert s.speed == 0.0
        assert s.position == (0.0, 0.0)

    def test_yaw_increment_matches_fine_integration(self):
        s = step_vehicle(VehicleState(1, (0.0, 0.0), 0.0, 5.0), Action(0.0, 0.3), 0.1)
        assert s.yaw == pytest.approx((5.0 / WHEELBASE) * math.tan(0.3) * 0.1, abs=1e-15)
        assert s.yaw == pytest.approx(YAW_FINE_STEP, abs=1e-9)

    def test_action_clamped(self):
        a = Action(10.0, -2.0)
        assert (a.accel, a.steer) == (3.0, -0.3)

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            step_vehicle(VehicleState(1, (0.0, 0.0), 0.0, 1.0), Action(), 0.0)

    def test_invalid_state(self):
        with pytest.raises(ValueError):
            VehicleState(1, (0.0, 0.0), 0.0, -1.0)
        with pytest.raises(ValueError):
            VehicleState(1, (0.0, 0.0), 0.0, 1.0, (0.0, 1.0))


class TestBoxDistance:
    def test_face_to_face(self):
        assert min_bbox_distance(box(1, 0, 0), box(2, 5, 0)) == pytest.approx(3.0, abs=1e-12)

    def test_overlap(self):
        assert min_bbox_distance(box(1, 0, 0), box(2, 1.5, 0.5)) == 0.0

    def test_rotated_against_sampling(self):
        d = min_bbox_distance(box(1, 0, 0), box(2, 4, 0, math.pi / 4))
        assert abs(d - BBOX_45_SAMPLED) <= 1e-3
        assert d == pytest.approx(3.0 - math.sqrt(2.0), abs=1e-12)

    def test_symmetric(self):
        a, b = box(1, 0, 0, 0.3, 2.0, 0.8), box(2, 3, 2, -1.1, 1.5, 0.7)
        assert min_bbox_distance(a, b) == min_bbox_distance(b, a)


class TestConstraint:
    @pytest.mark.parametrize("d,h", [(0.5, -1.0), (0.05, 18.0), (0.1, 18.0)])
    def test_h_from_distance(self, d, h):
        assert h_from_distance(d) == h

    def test_world_h(self, road):
        # AV half length 2.25: bumper gap 0.5 m
        w = make_world(road, [(1, 50.0 + 4.5 + 0.5, 0.0, 0.0, 5.0, Role.BV)])
        assert constraint_h(w) == -1.0
        w = make_world(road, [(1, 50.0 + 4.5 + 0.05, 0.0, 0.0, 5.0, Role.BV)])
        assert constraint_h(w) == 18.0

    def test_no_bv(self, road):
        assert constraint_h(make_world(road)) == -1.0


class TestPseudoState:
    def test_cbv_ahead_row(self, road):
        w = make_world(road, [(1, 60.0, 0.0, 0.0, 4.0, Role.CBV)])
        ps = encode_pseudo_state(w, 1, (70.0, 0.0), 3)
        assert ps.shape == pseudo_state_shape(3) == (5, 6)
        np.testing.assert_allclose(ps[2], [10.0, 0.0, 2.25, 0.9, 0.0, 4.0], atol=1e-12)
        assert not ps[3:].any()

    def test_goal_at_av(self, road):
        w = make_world(road, [(1, 60.0, 0.0, 0.0, 4.0, Role.CBV)])
        assert encode_pseudo_state(w, 1, (50.0, 0.0))[1, 5] == 0.0

    def test_unknown_id(self, road):
        with pytest.raises(KeyError, match="invalid actor"):
            encode_pseudo_state(make_world(road), 7, (0.0, 0.0))

    def test_rows_sorted_by_distance(self, road):
        w = make_world(road, [(1, 60.0, 0.0, 0.0, 4.0, Role.CBV), (2, 80.0, 3.5, 0.0, 1.0, Role.BV),
                              (3, 40.0, 3.5, 0.0, 2.0, Role.BV)])
        ps = encode_pseudo_state(w, 1, (70.0, 0.0), 3)
        assert ps[3, 0] == pytest.approx(-10.0)
        assert ps[4, 0] == pytest.approx(30.0)


class TestStepWorld:
    def test_advances_without_events(self, road):
        w = make_world(road)
        w2, info = step_world(w, {})
        assert w2.time == pytest.approx(0.1)
        assert info.collisions == []
        assert w2.av.position[0] > 50.0

    def test_cbv_into_av(self, road):
        w = make_world(road, [(1, 56.0, 0.0, math.pi, 8.0, Role.CBV)], av=(50.0, 0.0, 0.0, 0.0))
        for _ in range(20):
            w, info = step_world(w, {1: Action(3.0, 0.0)})
            if info.collisions:
                break
        assert [set(e.ids) for e in info.collisions] == [{0, 1}]
        assert info.h == 18.0

    def test_missing_cbv_action(self, road):
        w = make_world(road, [(1, 60.0, 0.0, 0.0, 4.0, Role.CBV)])
        with pytest.raises(KeyError):
            step_world(w, {})

    def test_replay_identical(self):
        lay = get_layout("intersection")
        digests = []
        for _ in range(2):
            w = initial_world(lay, 3, lay.av_lanes[0], 15.0, 10)
            rng = np.random.default_rng(5)
            for _ in range(60):
                w, _ = step_world(w, {})
                rng.random()
            digests.append(w.digest())
        assert digests[0] == digests[1]


def test_trajectory_log_roundtrip(tmp_path, road):
    w = make_world(road, [(1, 60.0, 0.0, 0.0, 4.0, Role.BV)])
    rec = step_record(w, -1.0, (), v_h=-0.5)
    with TrajectoryWriter(tmp_path / "log.jsonl", seed=3) as tw:
        tw.write(rec)
    header, recs = read_log(tmp_path / "log.jsonl")
    assert header["seed"] == 3
    assert recs == [rec]


def test_bad_log(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"schema": "other"}\n')
    with pytest.raises(ValueError):
        read_log(p)
