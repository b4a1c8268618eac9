"""Scenario geometry, neighbour search, observations, safety labels and LQR references."""
from __future__ import annotations

import dataclasses
import functools
import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.linalg import solve_continuous_are

from .dynamics import DynamicsKind, Tag, clamp_control
from .errors import ConfigError, PlacementError

AGENT, OBSTACLE = 0, 1
MAX_REJECTIONS = 100_000
PRESETS = ("navigation2d", "headon2d", "maze3d", "tunnel3d")


@dataclass
class ScenarioConfig:
    name: str
    dynamics: DynamicsKind
    n_agents: int
    arena_low: tuple
    arena_high: tuple
    obstacles: list = field(default_factory=list)  # [(low, high), ...] axis-aligned boxes
    safe_distance: float = 0.1 * np.sqrt(2)
    obs_radius: float | None = None  # None -> 10 * safe_distance
    goal_threshold: float | None = None  # None -> safe_distance
    episode_steps: int = 400
    density_scaling: bool = True
    layout: str = "random"  # "random" | "headon"
    goal_error_cap: float | None = 1.0

    def __post_init__(self):
        if isinstance(self.dynamics, dict):
            self.dynamics = DynamicsKind.from_dict(self.dynamics)
        d = self.dynamics.pos_dim
        self.arena_low = tuple(float(v) for v in self.arena_low)
        self.arena_high = tuple(float(v) for v in self.arena_high)
        self.obstacles = [
            (tuple(float(v) for v in lo), tuple(float(v) for v in hi)) for lo, hi in self.obstacles
        ]
        if self.obs_radius is None:
            self.obs_radius = 10.0 * self.safe_distance
        if self.goal_threshold is None:
            self.goal_threshold = self.safe_distance
        problems = []
        if len(self.arena_low) != d or len(self.arena_high) != d:
            problems.append(f"arena bounds must have {d} components")
        elif not all(a < b for a, b in zip(self.arena_low, self.arena_high)):
            problems.append("arena_low must be < arena_high")
        for k, (lo, hi) in enumerate(self.obstacles):
            if len(lo) != d or len(hi) != d or not all(a <= b for a, b in zip(lo, hi)):
                problems.append(f"obstacle {k} is not a valid {d}D box")
        if int(self.n_agents) < 1:
            problems.append("n_agents must be >= 1")
        if not self.safe_distance > 0:
            problems.append("safe_distance must be positive")
        if not self.obs_radius > self.safe_distance:
            problems.append("obs_radius must exceed safe_distance")
        if int(self.episode_steps) < 1:
            problems.append("episode_steps must be >= 1")
        if self.layout not in ("random", "headon"):
            problems.append(f"unknown layout {self.layout!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        self.n_agents = int(self.n_agents)
        self.episode_steps = int(self.episode_steps)

    @property
    def kind(self) -> DynamicsKind:
        return self.dynamics

    @property
    def dt(self) -> float:
        return self.dynamics.dt

    @functools.cached_property
    def obstacle_arrays(self):
        d = self.dynamics.pos_dim
        if not self.obstacles:
            return np.zeros((0, d)), np.zeros((0, d))
        lo = np.array([o[0] for o in self.obstacles], dtype=float)
        hi = np.array([o[1] for o in self.obstacles], dtype=float)
        return lo, hi

    def with_agents(self, n: int) -> "ScenarioConfig":
        """Same scenario with ``n`` agents; with density scaling the arena, obstacles and
        episode length grow so that agents per unit area (volume) stays constant."""
        n = int(n)
        if not self.density_scaling or n == self.n_agents:
            return dataclasses.replace(self, n_agents=n)
        f = (n / self.n_agents) ** (1.0 / self.dynamics.pos_dim)
        lo = np.asarray(self.arena_low)

        def scale(p):
            return tuple(float(v) for v in lo + (np.asarray(p) - lo) * f)

        return dataclasses.replace(
            self,
            n_agents=n,
            arena_high=scale(self.arena_high),
            obstacles=[(scale(a), scale(b)) for a, b in self.obstacles],
            episode_steps=int(np.ceil(self.episode_steps * f)),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dynamics": self.dynamics.to_dict(),
            "n_agents": self.n_agents,
            "arena_low": list(self.arena_low),
            "arena_high": list(self.arena_high),
            "obstacles": [[list(lo), list(hi)] for lo, hi in self.obstacles],
            "safe_distance": self.safe_distance,
            "obs_radius": self.obs_radius,
            "goal_threshold": self.goal_threshold,
            "episode_steps": self.episode_steps,
            "density_scaling": self.density_scaling,
            "layout": self.layout,
            "goal_error_cap": self.goal_error_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        missing = {"name", "dynamics", "n_agents", "arena_low", "arena_high"} - set(d)
        if missing:
            raise ConfigError(f"missing scenario fields: {sorted(missing)}")
        try:
            return cls(**d)
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid scenario: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        """Load a scenario JSON file, or a shipped preset by name."""
        p = Path(path)
        if not p.exists() and str(path) in PRESETS:
            return load_preset(str(path))
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"scenario file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def load_preset(name: str) -> ScenarioConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("decbf.presets").joinpath(f"{name}.json").read_text()
    return ScenarioConfig.from_dict(json.loads(text))


# ----------------------------------------------------------------------------- observations


@dataclass
class Observation:
    """Entities seen by one agent. ``entities[k]`` is the k-th observed state relative
    to the observer (the k-th column of o_i); ``kinds[k]`` is AGENT or OBSTACLE."""

    entities: np.ndarray
    kinds: np.ndarray

    @property
    def columns(self) -> np.ndarray:
        return self.entities.T

    def __len__(self):
        return len(self.entities)

    def permuted(self, perm) -> "Observation":
        perm = np.asarray(perm, dtype=int)
        return Observation(self.entities[perm], self.kinds[perm])


@dataclass
class ObsBatch:
    """Padded observations for a batch of agents.

    ``abs_states`` holds absolute entity states (obstacle proxies have zero velocity);
    ``rel`` is ``abs_states - own`` with padded slots zeroed.
    """

    abs_states: np.ndarray  # (B, K, n)
    rel: np.ndarray  # (B, K, n)
    kinds: np.ndarray  # (B, K) int8
    mask: np.ndarray  # (B, K) bool
    ids: np.ndarray  # (B, K) agent index or -1 - obstacle index; padding -> INT_MIN

    def __len__(self):
        return len(self.rel)

    @property
    def width(self):
        return self.rel.shape[1]

    def counts(self):
        return self.mask.sum(axis=1)

    def single(self, b: int) -> Observation:
        m = self.mask[b]
        return Observation(self.rel[b][m].copy(), self.kinds[b][m].copy())


def _sqnorm(diff):
    out = diff[..., 0] * diff[..., 0]
    for k in range(1, diff.shape[-1]):
        out = out + diff[..., k] * diff[..., k]
    return out


def _norm(diff):
    return np.sqrt(_sqnorm(diff))


def neighbor_pairs(positions, radius):
    """All ordered pairs ``(i, j)``, ``i != j``, with ``|p_j - p_i| <= radius``.

    Uses a uniform hash grid with cell size ``radius``; only the 3^d surrounding
    cells are scanned. Returned arrays are sorted by ``i`` then ``j``.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    pos = np.asarray(positions, dtype=float)
    n, d = pos.shape
    if n < 2:
        e = np.zeros(0, dtype=np.int64)
        return e, e
    cells = np.floor((pos - pos.min(axis=0)) / radius).astype(np.int64) + 1
    dims = cells.max(axis=0) + 2
    strides = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        strides[k] = strides[k + 1] * dims[k + 1]
    key = cells @ strides
    order = np.argsort(key, kind="stable")
    skey = key[order]
    src_all, dst_all = [], []
    for off in itertools.product((-1, 0, 1), repeat=d):
        target = key + np.asarray(off, dtype=np.int64) @ strides
        start = np.searchsorted(skey, target, side="left")
        end = np.searchsorted(skey, target, side="right")
        cnt = end - start
        total = int(cnt.sum())
        if total == 0:
            continue
        src = np.repeat(np.arange(n), cnt)
        first = np.repeat(np.cumsum(cnt) - cnt, cnt)
        dst = order[np.repeat(start, cnt) + np.arange(total) - first]
        src_all.append(src)
        dst_all.append(dst)
    src = np.concatenate(src_all)
    dst = np.concatenate(dst_all)
    keep = (src != dst) & (_norm(pos[dst] - pos[src]) <= radius)
    src, dst = src[keep], dst[keep]
    o = np.lexsort((dst, src))
    return src[o], dst[o]


def neighbors(states, i, radius):
    """Index set of agents within ``radius`` of agent ``i`` (excluding ``i``)."""
    states = np.asarray(states, dtype=float)
    d = 3 if states.shape[1] == 8 else 2
    src, dst = neighbor_pairs(states[:, :d], radius)
    return set(dst[src == i].tolist())


def _obstacle_proxies(pos, config):
    """Closest obstacle surface points for each position: (B, M, d) points and (B, M) distances."""
    lo, hi = config.obstacle_arrays
    pts = np.clip(pos[:, None, :], lo[None], hi[None])
    return pts, _norm(pos[:, None, :] - pts)


def observe_all(states, config: ScenarioConfig, agents=None) -> ObsBatch:
    """Observations for ``agents`` (default all) against the full joint state."""
    states = np.asarray(states, dtype=float)
    kind = config.dynamics
    n, dim = states.shape
    d = kind.pos_dim
    agents = np.arange(n) if agents is None else np.asarray(agents, dtype=int)
    B = len(agents)
    pos = states[:, :d]
    src, dst = neighbor_pairs(pos, config.obs_radius)
    if B != n:
        sel = np.zeros(n, dtype=bool)
        sel[agents] = True
        remap = np.full(n, -1)
        remap[agents] = np.arange(B)
        keep = sel[src]
        src, dst = remap[src[keep]], dst[keep]
    n_agent_cols = np.bincount(src, minlength=B)

    opts, odist = _obstacle_proxies(pos[agents], config)
    oin = odist <= config.obs_radius  # (B, M)
    n_obs_cols = oin.sum(axis=1)
    counts = n_agent_cols + n_obs_cols
    K = int(counts.max()) if B else 0

    abs_states = np.zeros((B, K, dim))
    kinds = np.zeros((B, K), dtype=np.int8)
    mask = np.zeros((B, K), dtype=bool)
    ids = np.full((B, K), np.iinfo(np.int64).min, dtype=np.int64)

    if len(src):
        slot = np.arange(len(src)) - np.repeat(np.cumsum(n_agent_cols) - n_agent_cols, n_agent_cols)
        abs_states[src, slot] = states[dst]
        mask[src, slot] = True
        ids[src, slot] = dst
    if oin.any():
        b_idx, m_idx = np.nonzero(oin)
        slot = n_agent_cols[b_idx] + (
            np.arange(len(b_idx)) - np.repeat(np.cumsum(n_obs_cols) - n_obs_cols, n_obs_cols)
        )
        abs_states[b_idx, slot, :d] = opts[b_idx, m_idx]
        kinds[b_idx, slot] = OBSTACLE
        mask[b_idx, slot] = True
        ids[b_idx, slot] = -1 - m_idx
    rel = np.where(mask[..., None], abs_states - states[agents][:, None, :], 0.0)
    return ObsBatch(abs_states, rel, kinds, mask, ids)


def observe(states, i, config: ScenarioConfig) -> Observation:
    return observe_all(states, config, agents=[i]).single(0)


def relative_to(abs_states, mask, own):
    """Relative entity states for a batch given absolute entity states and own states."""
    return np.where(mask[..., None], abs_states - own[:, None, :], 0.0)


def obs_min_distance(batch: ObsBatch, pos_dim, sentinel):
    """Per-agent minimum entity distance; ``sentinel`` when nothing is observed."""
    dist = _norm(batch.rel[..., :pos_dim]) if batch.width else np.zeros((len(batch), 0))
    dist = np.where(batch.mask, dist, np.inf)
    out = dist.min(axis=1, initial=np.inf)
    return np.where(np.isfinite(out), out, sentinel)


def min_distance(states, i, config: ScenarioConfig) -> float:
    """Minimum distance from agent ``i`` to observed agents and obstacle surfaces;
    ``config.obs_radius`` when nothing is within range."""
    b = observe_all(states, config, agents=[i])
    return float(obs_min_distance(b, config.dynamics.pos_dim, config.obs_radius)[0])


@dataclass(frozen=True)
class SafetyLabel:
    min_dist: float
    safe: bool


def safety_label(states, i, config: ScenarioConfig) -> SafetyLabel:
    d = min_distance(states, i, config)
    return SafetyLabel(d, d >= config.safe_distance)


def safety_flags(states, config: ScenarioConfig):
    """(min_dist, safe) arrays for every agent."""
    b = observe_all(states, config)
    d = obs_min_distance(b, config.dynamics.pos_dim, config.obs_radius)
    return d, d >= config.safe_distance


# ----------------------------------------------------------------------------- reference control


@functools.lru_cache(maxsize=None)
def lqr(kind: DynamicsKind):
    """Continuous-time LQR about the goal equilibrium; returns ``(K, P)`` with ``u = -K x``.

    The 3D model is linearised about level hover (tan(theta) ~ theta).
    """
    n, m = kind.state_dim, kind.control_dim
    A = np.zeros((n, n))
    B = kind.control_matrix.copy()
    if kind.tag is Tag.DOUBLE_INTEGRATOR_2D:
        A[0, 2] = A[1, 3] = 1.0
        Q = np.diag([1.0, 1.0, 0.0, 0.0])
        R = np.eye(m)
    else:
        A[0, 3] = A[1, 4] = A[2, 5] = 1.0
        A[3, 6] = A[4, 7] = kind.gravity
        Q = np.diag([1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.1, 0.1])
        R = np.diag([10.0, 10.0, 1.0])
    P = solve_continuous_are(A, B, Q, R)
    K = np.linalg.solve(R, B.T @ P)
    return K, P


def goal_error(kind: DynamicsKind, state, goal, error_cap=None):
    """State error relative to the goal equilibrium; position error norm capped if requested."""
    state = np.asarray(state, dtype=float)
    goal = np.asarray(goal, dtype=float)
    d = kind.pos_dim
    x = state.copy()
    e = state[..., :d] - goal[..., :d]
    if error_cap is not None:
        nrm = _norm(e)[..., None]
        e = np.where(nrm > error_cap, e * (error_cap / np.maximum(nrm, 1e-300)), e)
    x[..., :d] = e
    return x


def reference_control_raw(kind: DynamicsKind, state, goal, error_cap=None):
    """Unclamped LQR output ``-K x``."""
    K, _ = lqr(kind)
    return -goal_error(kind, state, goal, error_cap) @ K.T


def reference_control(kind: DynamicsKind, state, goal, error_cap=None):
    """LQR goal-reaching control ``u^g``, clamped to the control bounds."""
    return clamp_control(kind, reference_control_raw(kind, state, goal, error_cap))


# ----------------------------------------------------------------------------- spawning


def _box_distance(p, config):
    lo, hi = config.obstacle_arrays
    if len(lo) == 0:
        return np.inf
    return float(_norm(p[None] - np.clip(p[None], lo, hi)).min())


def _capacity_check(config):
    span = np.asarray(config.arena_high) - np.asarray(config.arena_low)
    spacing = 3.0 * config.safe_distance
    cells = np.prod(np.floor(span / spacing) + 1)
    if cells < config.n_agents:
        raise ConfigError(
            f"arena {tuple(span)} too small for {config.n_agents} agents at spacing {spacing:.3f}"
        )


def _sample_points(config, rng, budget):
    lo, hi = np.asarray(config.arena_low), np.asarray(config.arena_high)
    spacing = 3.0 * config.safe_distance
    pts = np.zeros((config.n_agents, len(lo)))
    k = 0
    while k < config.n_agents:
        if budget[0] >= MAX_REJECTIONS:
            raise PlacementError(
                f"could not place {config.n_agents} agents after {MAX_REJECTIONS} rejections"
            )
        p = rng.uniform(lo, hi)
        if _box_distance(p, config) < spacing or (
            k and _sqnorm(pts[:k] - p).min() < spacing * spacing
        ):
            budget[0] += 1
            continue
        pts[k] = p
        k += 1
    return pts


def _headon_points(config, rng):
    n = config.n_agents
    if n % 2:
        raise ConfigError("headon layout needs an even number of agents")
    lo, hi = np.asarray(config.arena_low), np.asarray(config.arena_high)
    d = len(lo)
    rows = n // 2
    span = hi - lo
    margin = 3.0 * config.safe_distance
    starts, goals = [], []
    for r in range(rows):
        c = lo + span / 2
        c[1] = lo[1] + span[1] * (r + 1) / (rows + 1)
        jitter = rng.uniform(-0.1, 0.1, size=(2, d)) * margin
        jitter[:, 0] = 0.0
        a = c.copy()
        a[0] = lo[0] + margin
        b = c.copy()
        b[0] = hi[0] - margin
        starts += [a + jitter[0], b + jitter[1]]
        goals += [b + jitter[0], a + jitter[1]]
    return np.array(starts), np.array(goals)


def spawn(config: ScenarioConfig, seed):
    """Initial states and goal positions, deterministic in ``seed``.

    Starts (and separately goals) are pairwise at least ``3 * safe_distance`` apart and
    at least that far from every obstacle. Velocities and angles start at zero.
    """
    _capacity_check(config)
    rng = np.random.default_rng(seed)
    if config.layout == "headon":
        pos, goals = _headon_points(config, rng)
    else:
        budget = [0]
        pos = _sample_points(config, rng, budget)
        goals = _sample_points(config, rng, budget)
    states = np.zeros((config.n_agents, config.dynamics.state_dim))
    states[:, : config.dynamics.pos_dim] = pos
    return states, goals
