import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defix.config import Config, DQNConfig
from defix.rl import (HighLevelAction, LaneShift, MiniScenario, ReplayBuffer, RewardInputs, StallTracker,
                      Transition, apply_high_level, bellman_targets, compute_reward, epsilon_at, epsilon_greedy,
                      huber_grad, q_network, return_to_lane, shifted_dense)
from defix.sim import ScenarioTemplate, build_route
from oracles import reward_oracle

ROUTE = build_route("r", [[0.0, 0.0], [50.0, 0.0], [100.0, 0.0]])
bit = st.integers(0, 1)


@given(st.floats(0, 1e3), st.floats(0, 20), bit, bit, bit, bit, bit)
def test_reward_matches_oracle(delta, V, xi, beta, phi, tau, zeta):
    assert compute_reward(RewardInputs(delta, V, xi, beta, phi, tau, zeta)) == \
        reward_oracle(delta, V, xi, beta, phi, tau, zeta)


def test_reward_examples():
    assert compute_reward(RewardInputs(1.0, 5.0)) == 6.0
    assert compute_reward(RewardInputs(0.0, 0.0, phi=1, beta=1)) == 50.0
    assert compute_reward(RewardInputs(0.0, 4.0, phi=1)) == -4.0
    assert compute_reward(RewardInputs(0.0, 4.0, xi=1, phi=1)) == 4.0
    assert compute_reward(RewardInputs(0.0, 0.0, tau=1, zeta=1)) == -1600.0


@pytest.mark.parametrize("kw", [dict(delta=-1.0, V=0.0), dict(delta=0.0, V=float("nan")),
                                dict(delta=0.0, V=0.0, phi=2)])
def test_reward_inputs_validated(kw):
    with pytest.raises(ValueError):
        RewardInputs(**kw)


def test_stall_tracker():
    st_ = StallTracker(3)
    for v in (0, 0, 0):
        st_.update(v)
    assert st_.tau == 1
    st_.update(1.0)
    assert st_.count == 0 and st_.tau == 0


def test_lane_change_left_shifts_route_left():
    _, shift, dense = apply_high_level(HighLevelAction.LANE_CHANGE_LEFT, ROUTE, 0.0, LaneShift(), limit=3.5)
    assert shift.target == 3.5
    far = ROUTE.cum_s >= 12.0
    assert np.allclose(dense[far, 1], 3.5) and np.allclose(dense[far, 0], ROUTE.dense[far, 0])
    assert dense[0, 1] == pytest.approx(0.0)


@given(st.lists(st.sampled_from(list(HighLevelAction)), max_size=20), st.floats(0, 90))
def test_lane_shift_stays_in_corridor(actions, s):
    shift = LaneShift()
    for a in actions:
        _, shift, dense = apply_high_level(a, ROUTE, s, shift, limit=3.5)
        assert abs(shift.target) <= 3.5
        assert np.all(np.abs(dense[:, 1]) <= 3.5 + 1e-9)


def test_clamped_lane_change_is_idempotent():
    _, s1, _ = apply_high_level(HighLevelAction.LANE_CHANGE_LEFT, ROUTE, 0.0, LaneShift(), limit=3.5)
    _, s2, _ = apply_high_level(HighLevelAction.LANE_CHANGE_LEFT, ROUTE, 5.0, s1, limit=3.5)
    assert s2 is s1


def test_lane_change_cancels_pending_return():
    back = return_to_lane(LaneShift(3.5, 0.0, 0.0), 20.0, 8.0)
    _, s2, _ = apply_high_level(HighLevelAction.LANE_CHANGE_LEFT, ROUTE, 30.0, back, limit=3.5)
    assert s2.final == 3.5 and s2.offset_at(30.0) == pytest.approx(float(back.offset_at(30.0)))
    assert s2.offset_at(80.0) == 3.5


def test_stop_brakes_and_keeps_shift():
    shift = LaneShift(3.5, 0.0, 0.0)
    brake, s2, dense = apply_high_level(HighLevelAction.STOP, ROUTE, 10.0, shift, limit=3.5)
    assert brake and s2 is shift and np.array_equal(dense, shifted_dense(ROUTE, shift))


def test_replay_buffer_wraps():
    buf = ReplayBuffer(3, 2)
    for k in range(5):
        buf.add(Transition(np.full(2, k), k % 4, float(k), np.full(2, k + 1), k == 4))
    assert len(buf) == 3
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0]
    idx = buf.sample_indices(np.random.default_rng(0), 100)
    assert idx.min() >= 0 and idx.max() < 3


def test_bellman_and_huber():
    t = bellman_targets([1.0, 1.0], np.array([[0.0, 2.0], [5.0, 1.0]]), [False, True], 0.9)
    assert np.allclose(t, [2.8, 1.0])
    assert np.array_equal(huber_grad(np.array([-3.0, 0.5, 2.0])), [-1.0, 0.5, 1.0])


def test_epsilon_schedule():
    cfg = DQNConfig()
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(cfg.eps_steps, cfg) == pytest.approx(cfg.eps_end)
    assert epsilon_at(10 * cfg.eps_steps, cfg) == pytest.approx(cfg.eps_end)
    rng = np.random.default_rng(0)
    assert epsilon_greedy(np.array([0.0, 3.0, 1.0, 0.0]), 0.0, rng) == 1


def test_q_network_shape():
    cfg = Config()
    q = q_network(cfg, np.random.default_rng(0))
    assert q.forward(np.zeros((2, cfg.perception.n_features + 3))).shape == (2, 4)


def test_mini_scenario_round_trip_and_validation():
    tpl = ScenarioTemplate("stuck_vehicle", 40.0)
    ms = MiniScenario("r1:stuck", tpl, ROUTE, 35.0)
    back = MiniScenario.from_dict(ms.to_dict())
    assert back.scenario_id == ms.scenario_id
    with pytest.raises(ValueError):
        MiniScenario("x", tpl, ROUTE, 35.0, spawn_offset_range=(1.0, 5.0))


@given(st.floats(-3.5, 3.5), st.floats(-3.5, 3.5), st.floats(0, 100), st.floats(0, 100), st.floats(0, 20))
def test_return_to_lane_is_continuous_and_ends_on_lane(start, target, blend_s, s, hold):
    shift = LaneShift(target, start, blend_s)
    back = return_to_lane(shift, s, hold)
    done = max(s, blend_s + shift.blend)
    assert back.final == 0.0
    assert back.offset_at(s) == pytest.approx(float(shift.offset_at(s)))
    assert back.offset_at(done + hold) == pytest.approx(float(shift.offset_at(done)))
    assert back.offset_at(done + hold + back.blend) == pytest.approx(0.0)
    grid = np.linspace(s, done + hold + back.blend, 400)
    assert np.max(np.abs(np.diff(back.offset_at(grid)))) <= 7.0 * (grid[1] - grid[0]) / shift.blend + 1e-9
    assert return_to_lane(LaneShift(), s) == LaneShift()
