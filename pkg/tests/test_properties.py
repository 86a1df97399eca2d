import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from frealab.adversary import gae, squash
from frealab.feasibility import expectile_loss, feasibility_advantage, qh_target
from frealab.metrics import MetricConfig, boxes_overlap, overall_score, severity
from frealab.world import Action, VehicleState, step_vehicle
from frealab.world.geometry import box_corners, min_bbox_distance, polygon_distance

finite = st.floats(-1e3, 1e3, allow_nan=False)
coord = st.floats(-30.0, 30.0, allow_nan=False)
yaw = st.floats(-math.pi, math.pi, allow_nan=False)
speed = st.floats(0.0, 20.0, allow_nan=False)
h_val = st.sampled_from([-1.0, 18.0])


def vehicle(vid, x, y, a, v=0.0):
    return VehicleState(vid, (x, y), a, v)


@given(coord, coord, yaw, coord, coord, yaw)
def test_box_distance_symmetric_and_consistent(x1, y1, a1, x2, y2, a2):
    va, vb = vehicle(0, x1, y1, a1), vehicle(1, x2, y2, a2)
    d = min_bbox_distance(va, vb)
    assert d >= 0.0
    assert abs(d - min_bbox_distance(vb, va)) <= 1e-9
    hit = boxes_overlap(np.array([[x1, y1]]), a1, va.extent, np.array([[x2, y2]]), a2, vb.extent)[0]
    if d > 1e-9:
        assert not hit
    # no closer than the centre distance minus both circumradii
    assert d >= math.hypot(x1 - x2, y1 - y2) - 2 * math.hypot(*va.extent) - 1e-9


@given(coord, coord, yaw, coord, coord)
def test_distance_translation_invariant(x1, y1, a1, dx, dy):
    pa = box_corners(x1, y1, a1, 2.0, 1.0)
    pb = box_corners(x1 + 7.0, y1 - 3.0, 0.3, 2.0, 1.0)
    d = polygon_distance(pa, pb)
    shift = lambda poly: [(px + dx, py + dy) for px, py in poly]  # noqa: E731
    assert abs(polygon_distance(shift(pa), shift(pb)) - d) <= 1e-7


@given(yaw, speed, st.floats(-3.0, 3.0), st.floats(-0.3, 0.3), st.floats(0.01, 0.5))
def test_vehicle_step_bounds(a, v, acc, steer, dt):
    nxt = step_vehicle(vehicle(0, 0.0, 0.0, a, v), Action(acc, steer), dt)
    assert nxt.speed >= 0.0
    assert abs(nxt.speed - max(0.0, v + acc * dt)) <= 1e-12
    travelled = math.hypot(*nxt.position)
    assert travelled <= 0.5 * (v + nxt.speed) * dt + 1e-9


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=2))
def test_squash_bounds(u):
    a = squash(np.array(u))
    assert abs(a[0]) <= 3.0 and abs(a[1]) <= 0.3


@given(finite, st.floats(0.51, 0.99))
def test_expectile_loss_shape(u, tau):
    loss = expectile_loss(u, tau)
    assert loss >= 0.0
    if u != 0:
        assert loss > 0.0 or abs(u) < 1e-150
    # negative residuals weigh tau, positive ones 1 - tau
    assert math.isclose(expectile_loss(abs(u), tau) * tau, expectile_loss(-abs(u), tau) * (1 - tau),
                        rel_tol=1e-12, abs_tol=1e-300)


@given(h_val, st.floats(-2.0, 20.0), st.floats(0.01, 0.99), st.booleans())
def test_qh_target_between_h_and_max(h, v_next, gamma, done):
    q = qh_target(h, v_next, gamma, done)
    hi = max(h, h if done else v_next)
    assert h - 1e-12 <= q <= hi + 1e-12


@given(h_val, h_val, st.floats(-2.0, 20.0), st.floats(-2.0, 20.0))
def test_feasibility_advantage_cases(hs, hn, vs, vn):
    a = feasibility_advantage(hs, hn, vs, vn)
    want = (vn if hn >= hs else max(hs, vn)) - vs
    assert a == want


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=12), st.floats(-5, 5), st.floats(0.1, 3.0))
def test_gae_is_linear_in_rewards(rewards, nv, k):
    n = len(rewards)
    values = np.linspace(-1.0, 1.0, n)
    done = [False] * n
    a1, _ = gae(rewards, values, nv, done)
    a2, _ = gae(np.array(rewards) * k, values * k, nv * k, done)
    np.testing.assert_allclose(a2, a1 * k, rtol=1e-9, atol=1e-9)


metric = st.fixed_dictionaries({"CR": st.floats(0, 1), "OR": st.floats(0, 50), "RF": st.floats(0, 10),
                                "UC": st.floats(0, 1), "TS": st.floats(0, 60)})


@given(metric, st.sampled_from(["CR", "OR", "RF", "UC", "TS"]), st.floats(0, 10))
def test_overall_score_bounded_and_monotone(m, key, extra):
    s = overall_score(m)
    assert 0.0 <= s <= 100.0
    worse = dict(m, **{key: m[key] + extra})
    assert overall_score(worse) <= s + 1e-9
    assert overall_score(m, MetricConfig()) == s


vec = st.tuples(st.floats(-20, 20), st.floats(-20, 20))


@given(vec, vec, vec, vec)
@settings(max_examples=200)
def test_severity_bounded_by_relative_speed(v1, v2, p1, p2):
    rel, imp = severity(v1, v2, p1, p2)
    assert rel >= 0.0 and imp >= 0.0
    assert imp <= 750.0 * rel * (1 + 1e-12) + 1e-9
    rel2, imp2 = severity(v2, v1, p2, p1)
    assert math.isclose(rel, rel2, abs_tol=1e-12) and math.isclose(imp, imp2, rel_tol=1e-9, abs_tol=1e-9)
