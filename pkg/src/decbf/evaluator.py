"""Evaluation metrics and certificate diagnostics."""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .certificates import cbf_values, y_values
from .refiner import RefineConfig
from .rollout import Rollout, run_episode
from .world import ScenarioConfig, observe_all

GOAL_REWARD = 10.0
DANGER_PENALTY = -1.0
METRIC_FIELDS = ("safety_rate", "mean_reward", "goal_reached_fraction", "opr_proportion", "eps_hat",
                 "steps", "wall_time")


@dataclass
class EpisodeMetrics:
    safety_rate: float
    mean_reward: float
    goal_reached_fraction: float
    opr_proportion: float
    eps_hat: float
    steps: int
    wall_time: float
    eps_per_agent: list = field(default_factory=list)

    def as_dict(self):
        return dataclasses.asdict(self)


def safety_rate_from_flags(safe) -> float:
    """Mean over agents of each agent's fraction of safe timesteps; ``safe`` is (T, N)."""
    safe = np.asarray(safe, dtype=bool)
    return float(safe.mean(axis=0).mean())


def safety_rate(rollout: Rollout) -> float:
    return safety_rate_from_flags(rollout.safe)


def agent_rewards(rollout: Rollout, per_step=False) -> np.ndarray:
    """+10 the first time an agent is within goal_threshold of its goal; -1 for each entry
    into the dangerous set (each unsafe step with ``per_step``)."""
    reached = (rollout.goal_distance() <= rollout.config.goal_threshold).any(axis=0)
    unsafe = ~rollout.safe
    if per_step:
        penalties = unsafe.sum(axis=0)
    else:
        was_safe = np.vstack([np.ones((1, unsafe.shape[1]), dtype=bool), rollout.safe[:-1]])
        penalties = (unsafe & was_safe).sum(axis=0)
    return GOAL_REWARD * reached + DANGER_PENALTY * penalties


def reward(rollout: Rollout, per_step=False) -> float:
    return float(agent_rewards(rollout, per_step).mean())


def goal_reached_fraction(rollout: Rollout) -> float:
    return float((rollout.goal_distance() <= rollout.config.goal_threshold).any(axis=0).mean())


def opr_proportion(rollout: Rollout) -> float:
    return float(rollout.refined.mean()) if rollout.refined.size else 0.0


def eps_hat(pair, rollouts):
    """Fraction of (agent, trajectory) pairs whose y-value is <= 0.

    Returns ``(pooled, per_agent)``; ``per_agent`` averages over rollouts for each agent
    index (rollouts must share the agent count for this vector to be meaningful).
    """
    ys = np.array([y_values(pair, r) for r in rollouts])
    bad = ys <= 0
    return float(bad.mean()), bad.mean(axis=0)


def global_cbf(pair, states, config: ScenarioConfig) -> float:
    """Minimum over agents of their decentralized h on the joint state."""
    ob = observe_all(states, config)
    return float(cbf_values(pair, states, ob.rel, ob.kinds, ob.mask).data.min())


# ----------------------------------------------------------------------------- landscape


@dataclass
class LandscapeSpec:
    distance: tuple = (0.0, 1.0, 41)  # (low, high, count), metres
    velocity: tuple = (-2.0, 2.0, 41)  # closing speed: positive = approaching

    def axes(self):
        d = np.linspace(self.distance[0], self.distance[1], int(self.distance[2]))
        v = np.linspace(self.velocity[0], self.velocity[1], int(self.velocity[2]))
        return d, v


@dataclass
class Landscape:
    distances: np.ndarray
    velocities: np.ndarray
    values: np.ndarray  # (len(distances), len(velocities))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["relative_distance", "relative_velocity", "h"])
            for i, d in enumerate(self.distances):
                for j, v in enumerate(self.velocities):
                    w.writerow([repr(float(d)), repr(float(v)), repr(float(self.values[i, j]))])


def two_agent_state(kind, distance, closing_speed, center=None, swap=False):
    """Two agents on the x axis ``distance`` apart, approaching each other at ``closing_speed``."""
    n, d = kind.state_dim, kind.pos_dim
    s = np.zeros((2, n))
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    s[0, :d] = c
    s[1, :d] = c
    s[0, 0] -= distance / 2
    s[1, 0] += distance / 2
    s[0, d] = closing_speed / 2
    s[1, d] = -closing_speed / 2
    return s[::-1].copy() if swap else s


def landscape(pair, scenario: ScenarioConfig, spec: LandscapeSpec = LandscapeSpec(), swap=False) -> Landscape:
    """Global CBF of a two-agent configuration over (distance, closing speed).

    Obstacles are removed so the slice isolates the agent-agent interaction.
    """
    cfg = dataclasses.replace(scenario, n_agents=2, obstacles=[])
    dist, vel = spec.axes()
    center = (np.asarray(cfg.arena_low) + np.asarray(cfg.arena_high)) / 2
    states = np.array([two_agent_state(pair.kind, r, v, center, swap) for r in dist for v in vel])
    vals = np.empty(len(states))
    for k, s in enumerate(states):
        ob = observe_all(s, cfg)
        vals[k] = cbf_values(pair, s, ob.rel, ob.kinds, ob.mask).data.min()
    return Landscape(dist, vel, vals.reshape(len(dist), len(vel)))


# ----------------------------------------------------------------------------- evaluate


def episode_metrics(pair, rollout: Rollout, per_step_penalty=False, with_eps=True) -> EpisodeMetrics:
    if with_eps and pair is not None:
        ys = y_values(pair, rollout)
        eps_agents = (ys <= 0).astype(float)
    else:
        eps_agents = np.zeros(rollout.n_agents)
    return EpisodeMetrics(
        safety_rate=safety_rate(rollout),
        mean_reward=reward(rollout, per_step_penalty),
        goal_reached_fraction=goal_reached_fraction(rollout),
        opr_proportion=opr_proportion(rollout),
        eps_hat=float(eps_agents.mean()),
        steps=rollout.steps,
        wall_time=rollout.wall_time,
        eps_per_agent=eps_agents.tolist(),
    )


@dataclass
class Evaluation:
    episodes: list  # EpisodeMetrics
    seeds: list
    refine: bool
    rollouts: list = field(default_factory=list, repr=False)

    def mean(self):
        return {f: float(np.mean([getattr(e, f) for e in self.episodes])) for f in METRIC_FIELDS}

    def std(self):
        return {f: float(np.std([getattr(e, f) for e in self.episodes])) for f in METRIC_FIELDS}

    def per_episode(self):
        return {f: [getattr(e, f) for e in self.episodes] for f in METRIC_FIELDS}

    def eps_per_agent(self):
        return np.mean([e.eps_per_agent for e in self.episodes], axis=0).tolist()

    def to_dict(self, **extra):
        """Deterministic summary; wall-clock times are left out so reruns compare equal."""
        keep = [f for f in METRIC_FIELDS if f != "wall_time"]
        return {
            **extra,
            "refine": self.refine,
            "seeds": list(self.seeds),
            "episodes": len(self.episodes),
            "mean": {f: self.mean()[f] for f in keep},
            "std": {f: self.std()[f] for f in keep},
            "per_episode": {f: self.per_episode()[f] for f in keep},
            "eps_hat_per_agent": self.eps_per_agent(),
        }

    def write_json(self, path, **extra):
        with open(path, "w") as fh:
            json.dump(self.to_dict(**extra), fh, indent=2)


def _one(args):
    pair, scenario, seed, refine_cfg, per_step, with_eps, keep = args
    r = run_episode(pair, scenario, seed, refine=refine_cfg)
    return episode_metrics(pair, r, per_step, with_eps), (r if keep else None)


def evaluate(pair, scenario: ScenarioConfig, episodes=10, refine=False, *, seeds=None,
             refine_config: RefineConfig | None = None, jobs=1, per_step_penalty=False,
             with_eps=True, keep_rollouts=False) -> Evaluation:
    """Run seeded episodes and collect per-episode metrics.

    Seeds default to ``0 .. episodes-1``. With ``jobs > 1`` episodes run in worker
    processes; results are identical to the serial run.
    """
    seeds = list(range(episodes)) if seeds is None else list(seeds)
    rc = (refine_config or RefineConfig()) if refine else None
    tasks = [(pair, scenario, s, rc, per_step_penalty, with_eps, keep_rollouts) for s in seeds]
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_one, tasks))
    else:
        out = [_one(t) for t in tasks]
    return Evaluation([m for m, _ in out], seeds, bool(refine), [r for _, r in out if r is not None])


def write_trajectories(path, rollouts, episode_ids=None):
    """One row per (episode, step, agent) with state, action, h, safety and refinement flags."""
    episode_ids = range(len(rollouts)) if episode_ids is None else episode_ids
    with open(path, "w", newline="") as fh:
        w = None
        for ep, r in zip(episode_ids, rollouts):
            n, m = r.states.shape[2], r.actions.shape[2] if r.actions.ndim == 3 else 0
            if w is None:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["episode", "step", "agent"] + [f"s{k}" for k in range(n)]
                           + [f"a{k}" for k in range(m)] + ["h", "safe", "refined"])
            for t in range(r.steps):
                for i in range(r.n_agents):
                    w.writerow([ep, t, i, *map(repr, r.states[t, i].tolist()),
                                *map(repr, r.actions[t, i].tolist()), repr(float(r.h[t, i])),
                                int(r.safe[t, i]), int(r.refined[t, i])])


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
