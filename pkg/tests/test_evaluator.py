import csv
import dataclasses

import numpy as np
import pytest

from decbf import evaluator as ev
from decbf.certificates import cbf_value
from decbf.evaluator import (
    LandscapeSpec,
    agent_rewards,
    eps_hat,
    evaluate,
    global_cbf,
    landscape,
    reward,
    safety_rate,
    safety_rate_from_flags,
    two_agent_state,
    write_trajectories,
)
from decbf.rollout import Rollout, run_episode
from decbf.world import observe, spawn


def synthetic_rollout(config, states, goals, safe):
    T1, N = safe.shape
    return Rollout(config=config, goals=np.asarray(goals, float), states=np.asarray(states, float),
                   actions=np.zeros((T1 - 1, N, config.dynamics.control_dim)), h=np.full((T1, N), np.nan),
                   min_dist=np.zeros((T1, N)), safe=np.asarray(safe, bool),
                   refined=np.zeros((T1 - 1, N), bool), explored=np.zeros((T1 - 1, N), bool))


def test_safety_rate_examples():
    assert safety_rate_from_flags(np.ones((10, 3), bool)) == 1.0
    safe = np.ones((10, 2), bool)
    safe[:5, 1] = False
    assert safety_rate_from_flags(safe) == 0.75


def test_safety_rate_matches_raw_positions(pair2d, nav):
    r = run_episode(pair2d, nav.with_agents(16), 2, explore=0.5, rng=np.random.default_rng(0))
    cfg, d = r.config, 2
    flags = np.zeros(r.safe.shape, bool)
    for t in range(r.states.shape[0]):
        pos = r.states[t, :, :d]
        for i in range(r.n_agents):
            dist = np.linalg.norm(pos - pos[i], axis=1)
            dist[i] = np.inf
            dist = dist[dist <= cfg.obs_radius]
            best = dist.min() if len(dist) else cfg.obs_radius
            for lo, hi in cfg.obstacles:
                od = np.linalg.norm(pos[i] - np.clip(pos[i], lo, hi))
                if od <= cfg.obs_radius:
                    best = min(best, od)
            flags[t, i] = best >= cfg.safe_distance
    assert safety_rate(r) == safety_rate_from_flags(flags)


def _two_agent_cfg(nav):
    return dataclasses.replace(nav, n_agents=2)


def test_reward_goal_reached_never_unsafe(nav):
    cfg = _two_agent_cfg(nav)
    goals = np.array([[1.0, 1.0], [2.0, 2.0]])
    states = np.zeros((3, 2, 4))
    states[-1, :, :2] = goals
    r = synthetic_rollout(cfg, states, goals, np.ones((3, 2)))
    assert agent_rewards(r).tolist() == [10.0, 10.0]


def test_reward_two_entries_no_goal(nav):
    cfg = _two_agent_cfg(nav)
    goals = np.array([[1.0, 1.0], [2.0, 2.0]])
    safe = np.array([[1, 1], [0, 1], [1, 1], [0, 1], [0, 1]])
    r = synthetic_rollout(cfg, np.zeros((5, 2, 4)), goals, safe)
    assert agent_rewards(r)[0] == -2.0
    assert agent_rewards(r, per_step=True)[0] == -3.0


def test_reward_never_exceeds_ten(nav):
    rng = np.random.default_rng(0)
    cfg = _two_agent_cfg(nav)
    for _ in range(100):
        T = int(rng.integers(2, 30))
        states = rng.uniform(0, 3, size=(T, 2, 4))
        goals = states[int(rng.integers(T)), :, :2] + rng.normal(0, 0.1, size=(2, 2))
        r = synthetic_rollout(cfg, states, goals, rng.random((T, 2)) < 0.8)
        assert np.all(agent_rewards(r) <= 10.0)
        assert reward(r) <= 10.0


def test_eps_hat_examples(monkeypatch, pair2d):
    monkeypatch.setattr(ev, "y_values", lambda pair, r: np.array(r))
    assert eps_hat(pair2d, [[0.5, 0.2]] * 5)[0] == 0.0
    ys = [[-0.1], [0.3], [0.0], [0.4], [-2.0], [1.0], [1.0], [1.0], [1.0], [1.0]]
    pooled, per_agent = eps_hat(pair2d, ys)
    assert pooled == pytest.approx(0.3)
    assert per_agent.tolist() == [pytest.approx(0.3)]


def test_global_cbf_is_min_of_agents(pair2d, nav):
    states, _ = spawn(nav, 1)
    states[:, 2:] = np.random.default_rng(0).normal(size=(len(states), 2))
    hs = [cbf_value(pair2d, states[i], observe(states, i, nav)) for i in range(len(states))]
    assert global_cbf(pair2d, states, nav) == pytest.approx(min(hs), abs=1e-12)
    assert (global_cbf(pair2d, states, nav) >= 0) == all(h >= 0 for h in hs)


def test_landscape_grid_and_csv(pair2d, headon, tmp_path):
    spec = LandscapeSpec((0.0, 1.0, 5), (-1.0, 1.0, 3))
    g = landscape(pair2d, headon, spec)
    assert g.values.shape == (5, 3) and np.all(np.isfinite(g.values))
    g.write_csv(tmp_path / "l.csv")
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert rows[0] == ["relative_distance", "relative_velocity", "h"]
    assert len(rows) == 16


def test_landscape_swap_symmetry(pair2d, headon):
    spec = LandscapeSpec((0.0, 1.0, 7), (-2.0, 2.0, 5))
    a = landscape(pair2d, headon, spec)
    b = landscape(pair2d, headon, spec, swap=True)
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-12)


def test_two_agent_state_geometry(kind2d):
    s = two_agent_state(kind2d, 0.6, 1.0, center=[1.0, 1.0])
    assert np.linalg.norm(s[1, :2] - s[0, :2]) == pytest.approx(0.6)
    closing = -np.dot(s[1, 2:] - s[0, 2:], (s[1, :2] - s[0, :2]) / 0.6)
    assert closing == pytest.approx(1.0)


def test_evaluate_aggregates(pair2d, nav):
    cfg = dataclasses.replace(nav, episode_steps=40).with_agents(4)
    res = evaluate(pair2d, cfg, 10, refine=False)
    assert len(res.per_episode()["safety_rate"]) == 10
    assert set(res.mean()) == set(res.std()) == set(ev.METRIC_FIELDS)
    assert res.mean()["opr_proportion"] == 0.0
    for e in res.episodes:
        for f in ("safety_rate", "goal_reached_fraction", "opr_proportion", "eps_hat"):
            assert 0.0 <= getattr(e, f) <= 1.0


def test_evaluate_deterministic_and_parallel_equal(pair2d, nav):
    cfg = dataclasses.replace(nav, episode_steps=30).with_agents(4)
    a = evaluate(pair2d, cfg, 3, refine=True, seeds=[5, 6, 7]).to_dict()
    b = evaluate(pair2d, cfg, 3, refine=True, seeds=[5, 6, 7]).to_dict()
    c = evaluate(pair2d, cfg, 3, refine=True, seeds=[5, 6, 7], jobs=2).to_dict()
    assert a == b == c
    assert "wall_time" not in a["mean"]


def test_safety_one_iff_no_unsafe_pair(pair2d, nav):
    r = run_episode(pair2d, nav.with_agents(8), 0)
    assert (safety_rate(r) == 1.0) == bool(r.safe.all())


def test_trajectory_csv_columns(pair2d, nav, tmp_path):
    cfg = dataclasses.replace(nav, episode_steps=5).with_agents(2)
    r = run_episode(pair2d, cfg, 0)
    write_trajectories(tmp_path / "t.csv", [r])
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["episode", "step", "agent", "s0", "s1", "s2", "s3", "a0", "a1", "h", "safe", "refined"]
    assert len(rows) == 1 + r.steps * 2
