"""Closed-loop simulation of a swarm under the learned (or reference) controller."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .certificates import cbf_values, policy_actions
from .errors import NumericError
from .refiner import RefineConfig, refine_batch
from .world import ScenarioConfig, obs_min_distance, observe_all, reference_control, spawn

log = logging.getLogger(__name__)


@dataclass
class Rollout:
    config: ScenarioConfig
    goals: np.ndarray  # (N, d)
    states: np.ndarray  # (T+1, N, n)
    actions: np.ndarray  # (T, N, m)
    h: np.ndarray  # (T+1, N); NaN when not recorded
    min_dist: np.ndarray  # (T+1, N)
    safe: np.ndarray  # (T+1, N)
    refined: np.ndarray  # (T, N) refinement triggered
    explored: np.ndarray  # (T, N) random action taken
    truncated: bool = False
    seed: int | None = None
    wall_time: float = 0.0
    obs: list = field(default_factory=list, repr=False)  # ObsBatch per state, if kept

    @property
    def steps(self):
        return len(self.actions)

    @property
    def n_agents(self):
        return self.states.shape[1]

    def goal_distance(self):
        d = self.config.dynamics.pos_dim
        return np.linalg.norm(self.states[:, :, :d] - self.goals[None], axis=-1)


def neighbor_motion(batch, states, prev_states):
    """Per-column displacement of each observed agent over the last step; zero for obstacles."""
    motion = np.zeros_like(batch.rel)
    is_agent = batch.mask & (batch.ids >= 0)
    if prev_states is not None and is_agent.any():
        j = batch.ids[is_agent]
        motion[is_agent] = states[j] - prev_states[j]
    return motion


def run_episode(
    pair,
    config: ScenarioConfig,
    seed,
    *,
    refine: RefineConfig | None = None,
    explore: float = 0.0,
    rng=None,
    controller: str = "learned",
    keep_obs: bool = False,
    record_h: bool = True,
    initial=None,
) -> Rollout:
    """Simulate one episode.

    ``controller`` is ``"learned"`` (policy network) or ``"reference"`` (LQR only).
    With probability ``explore`` each agent's action at each step is replaced by a
    uniform draw from the control box.
    """
    t0 = time.perf_counter()
    kind = config.dynamics
    states, goals = spawn(config, seed) if initial is None else initial
    states = np.array(states, dtype=float)
    rng = np.random.default_rng(seed) if rng is None else rng
    N, n, m, T = config.n_agents, kind.state_dim, kind.control_dim, config.episode_steps
    S = np.zeros((T + 1, N, n))
    A = np.zeros((T, N, m))
    H = np.full((T + 1, N), np.nan)
    D = np.zeros((T + 1, N))
    refined = np.zeros((T, N), dtype=bool)
    explored = np.zeros((T, N), dtype=bool)
    obs_list = []

    S[0] = states
    ob = observe_all(states, config)
    D[0] = obs_min_distance(ob, kind.pos_dim, config.obs_radius)
    prev = None
    truncated = False
    t_done = T
    for t in range(T):
        if keep_obs:
            obs_list.append(ob)
        if pair is not None and record_h:
            H[t] = cbf_values(pair, states, ob.rel, ob.kinds, ob.mask).data
        if controller == "reference" or pair is None:
            u = reference_control(kind, states, goals, config.goal_error_cap)
        else:
            u = policy_actions(pair, states, goals, ob.rel, ob.kinds, ob.mask).data
            if refine is not None and refine.enabled:
                motion = neighbor_motion(ob, states, prev)
                r = refine_batch(pair, states, ob.rel, ob.kinds, ob.mask, u, refine, motion)
                u = r.control
                refined[t] = r.triggered
        if explore > 0:
            mask = rng.random(N) < explore
            if mask.any():
                u = u.copy()
                u[mask] = rng.uniform(kind.low, kind.high, size=(int(mask.sum()), m))
                explored[t] = mask
        A[t] = u
        try:
            nxt = dyn.step(kind, states, u)
        except NumericError:
            log.warning("numeric failure at step %d (seed %s); episode truncated", t, seed)
            truncated = True
            t_done = t
            break
        prev, states = states, nxt
        S[t + 1] = states
        ob = observe_all(states, config)
        D[t + 1] = obs_min_distance(ob, kind.pos_dim, config.obs_radius)
    else:
        if keep_obs:
            obs_list.append(ob)
        if pair is not None and record_h:
            H[T] = cbf_values(pair, states, ob.rel, ob.kinds, ob.mask).data

    T1 = t_done + 1
    return Rollout(
        config=config,
        goals=np.asarray(goals, dtype=float),
        states=S[:T1],
        actions=A[:t_done],
        h=H[:T1],
        min_dist=D[:T1],
        safe=D[:T1] >= config.safe_distance,
        refined=refined[:t_done],
        explored=explored[:t_done],
        truncated=truncated,
        seed=seed,
        wall_time=time.perf_counter() - t0,
        obs=obs_list,
    )


def simulation_step(pair, states, goals, config):
    """Neighbour index, observations and policy forward for one step; returns actions."""
    ob = observe_all(states, config)
    return policy_actions(pair, states, goals, ob.rel, ob.kinds, ob.mask).data
