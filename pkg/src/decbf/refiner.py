"""Test-time action refinement against the learned certificate.

For an agent whose current h is non-negative, the hinge
``max(0, -h_dot(u + e) - lam * h)`` measures how far the proposed action violates the
derivative condition. ``e`` is found by gradient descent on
``phi(e) = hinge(e) + mu * |e|^2`` starting from zero.

The one-step lookahead needs the neighbours' next states, which are unknown at
decision time: each observed entity is assumed to repeat its displacement over the
last simulator step (obstacle proxies stay put).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import micrograd as mg
from .certificates import cbf_values
from .dynamics import clamp_control, step_graph
from .world import Observation

log = logging.getLogger(__name__)

HINGE_TOL = 1e-6


@dataclass
class RefineConfig:
    mu: float = 1.0
    step_size: float = 0.1
    max_iters: int = 20
    enabled: bool = True
    dynamic_mu: bool = False
    max_mu_doublings: int = 4
    safe_set_only: bool = False  # refine only where h >= 0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.enabled and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1 when refinement is enabled")


def _phi_graph(pair, state, rel, kinds, mask, motion, h_now, control, e, mu):
    """Hinge and phi per agent as Tensors, for increment Tensor ``e`` (B, m)."""
    kind = pair.kind
    B, n = state.shape
    s_next = step_graph(kind, state, mg.add(control, e))
    # rel_next = (entity + motion) - s_next, entity = rel + s
    shifted = np.where(mask[..., None], rel + motion + state[:, None, :], 0.0)
    rel_next = mg.mul(mg.add(shifted, mg.neg(mg.reshape(s_next, (B, 1, n)))), mask[..., None])
    h_next = cbf_values(pair, s_next, rel_next, kinds, mask)
    h_dot = mg.mul(mg.add(h_next, -h_now), 1.0 / pair.dt)
    hinge = mg.relu(mg.add(mg.neg(h_dot), -pair.lam * h_now))
    phi = hinge + mg.mul(mg.sum_(mg.square(e), axis=1), mu)
    return hinge, phi


def phi_batch(pair, state, rel, kinds, mask, control, e, motion=None, mu=1.0, h_now=None):
    """Numeric (hinge, phi) arrays for a batch of agents at increments ``e``."""
    state = np.asarray(state, dtype=float)
    if motion is None:
        motion = np.zeros_like(rel)
    if h_now is None:
        h_now = cbf_values(pair, state, rel, kinds, mask).data
    e = mg.as_tensor(e)
    hinge, phi = _phi_graph(pair, state, rel, kinds, mask, motion, h_now, np.asarray(control), e, mu)
    return hinge.data, phi.data


def phi(pair, state, observation: Observation, control, e, neighbor_motion=None, mu=1.0) -> float:
    """phi(e) for a single agent. ``neighbor_motion`` gives each observed entity's
    displacement over the last step (zeros if omitted)."""
    rel = np.asarray(observation.entities, dtype=float).reshape(1, -1, pair.kind.state_dim)
    kinds = np.asarray(observation.kinds).reshape(1, -1)
    mask = np.ones(kinds.shape, dtype=bool)
    motion = None if neighbor_motion is None else np.asarray(neighbor_motion, dtype=float)[None]
    _, p = phi_batch(
        pair, np.asarray(state, dtype=float)[None], rel, kinds, mask,
        np.asarray(control, dtype=float)[None], np.asarray(e, dtype=float)[None], motion, mu,
    )
    return float(p[0])


def phi_grad(pair, state, rel, kinds, mask, control, e, motion=None, mu=1.0, h_now=None):
    """Gradient of sum(phi) w.r.t. ``e``; since agents are independent this is the
    per-agent gradient."""
    state = np.asarray(state, dtype=float)
    if motion is None:
        motion = np.zeros_like(rel)
    if h_now is None:
        h_now = cbf_values(pair, state, rel, kinds, mask).data
    et = mg.Tensor(np.array(e, dtype=float), requires_grad=True)
    hinge, ph = _phi_graph(pair, state, rel, kinds, mask, motion, h_now, np.asarray(control), et, mu)
    mg.sum_(ph).backward()
    return hinge.data, ph.data, et.grad


@dataclass
class RefineResult:
    control: np.ndarray  # (B, m), clamped
    triggered: np.ndarray  # (B,) phi(0) > 0
    iterations: np.ndarray  # (B,)
    hinge0: np.ndarray
    hinge: np.ndarray
    fallback: np.ndarray  # (B,) non-finite increment, unrefined control used


def refine_batch(pair, state, rel, kinds, mask, control, config: RefineConfig, motion=None) -> RefineResult:
    state = np.asarray(state, dtype=float)
    control = np.asarray(control, dtype=float)
    B, m = control.shape
    kind = pair.kind
    if motion is None:
        motion = np.zeros_like(rel)
    h_now = cbf_values(pair, state, rel, kinds, mask).data
    zero = np.zeros((B, m))
    hinge0, _ = phi_batch(pair, state, rel, kinds, mask, control, zero, motion, config.mu, h_now)
    triggered = hinge0 > 0
    if config.safe_set_only:
        triggered &= h_now >= 0
    result = RefineResult(
        clamp_control(kind, control), triggered, np.zeros(B, dtype=int), hinge0, hinge0.copy(),
        np.zeros(B, dtype=bool),
    )
    if not config.enabled or not triggered.any():
        return result

    idx = np.nonzero(triggered)[0]
    mu = np.full(len(idx), float(config.mu))
    for _ in range(config.max_mu_doublings + 1 if config.dynamic_mu else 1):
        e, hinge, iters = _descend(pair, state[idx], rel[idx], kinds[idx], mask[idx], control[idx],
                                   motion[idx], h_now[idx], mu, config)
        if not config.dynamic_mu:
            break
        u = control[idx] + e
        binds = np.any((u < kind.low) | (u > kind.high), axis=1)
        if not binds.any():
            break
        mu = np.where(binds, 2 * mu, mu)
    bad = ~np.all(np.isfinite(e), axis=1)
    if bad.any():
        log.warning("non-finite refinement increment for %d agent(s); using policy action", bad.sum())
        e[bad] = 0.0
    result.control[idx] = clamp_control(kind, control[idx] + e)
    result.iterations[idx] = iters
    result.hinge[idx] = hinge
    result.fallback[idx] = bad
    return result


def _descend(pair, state, rel, kinds, mask, control, motion, h_now, mu, config):
    """Gradient descent on phi with per-agent step halving. A step is accepted only when
    neither phi nor the hinge increases; otherwise that agent's step size is halved."""
    B, m = control.shape
    e = np.zeros((B, m))
    step = np.full(B, config.step_size)
    iters = np.zeros(B, dtype=int)
    mu_col = mu if np.ndim(mu) else np.full(B, mu)
    hinge, ph, grad = phi_grad(pair, state, rel, kinds, mask, control, e, motion, mu_col, h_now)
    active = hinge > HINGE_TOL
    for _ in range(config.max_iters):
        if not active.any():
            break
        iters += active
        cand = e - np.where(active[:, None], step[:, None] * grad, 0.0)
        h_c, p_c, g_c = phi_grad(pair, state, rel, kinds, mask, control, cand, motion, mu_col, h_now)
        ok = active & np.isfinite(p_c) & (p_c <= ph) & (h_c <= hinge)
        e = np.where(ok[:, None], cand, e)
        hinge = np.where(ok, h_c, hinge)
        ph = np.where(ok, p_c, ph)
        grad = np.where(ok[:, None], g_c, grad)
        step = np.where(active & ~ok, step / 2, step)
        active = active & (hinge > HINGE_TOL)
    return e, hinge, iters


def refine(pair, state, observation: Observation, control, config: RefineConfig, neighbor_motion=None):
    """Refine one agent's action; returns ``(control, triggered)``."""
    rel = np.asarray(observation.entities, dtype=float).reshape(1, -1, pair.kind.state_dim)
    kinds = np.asarray(observation.kinds).reshape(1, -1)
    mask = np.ones(kinds.shape, dtype=bool)
    motion = None if neighbor_motion is None else np.asarray(neighbor_motion, dtype=float)[None]
    r = refine_batch(pair, np.asarray(state, dtype=float)[None], rel, kinds, mask,
                     np.asarray(control, dtype=float)[None], config, motion)
    return r.control[0], bool(r.triggered[0])
