"""On-policy data collection and joint optimisation of the CBF and policy networks."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import micrograd as mg
from .certificates import (
    REGION_DANGEROUS,
    REGION_INITIAL,
    REGION_OTHER,
    SampleBatch,
    loss_terms,
    y_values,
)
from .errors import ConfigError, TrainingDiverged
from .rollout import run_episode
from .world import ScenarioConfig, reference_control

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["round", "step", "L", "Lc0", "Lcd", "Lch", "Lg", "probe_safety_rate", "eps_hat"]


@dataclass
class TrainConfig:
    iota: float = 0.05
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-6
    outer_iterations: int = 60
    steps_per_collection: int = 500
    episodes_per_collection: int = 2
    convergence_tol: float | None = 1e-3
    convergence_window: int = 5
    min_rounds: int = 20
    buffer_capacity: int = 200_000
    strict_x0: bool = False
    danger_fraction: float = 0.25  # batch share reserved for dangerous samples when they are rarer
    danger_memory: int = 0  # dangerous samples carried over from earlier rounds (0: none)
    probe_episodes: int = 1
    divergence_threshold: float = 1e6
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not 0 <= self.iota <= 1:
            problems.append("iota must be in [0, 1]")
        if not 0 <= self.danger_fraction <= 1:
            problems.append("danger_fraction must be in [0, 1]")
        if self.danger_memory < 0:
            problems.append("danger_memory must be >= 0")
        if self.batch_size < 1 or self.batch_size > self.buffer_capacity:
            problems.append("batch_size must be in [1, buffer_capacity]")
        if not self.lr > 0:
            problems.append("lr must be positive")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.outer_iterations < 1 or self.steps_per_collection < 0 or self.episodes_per_collection < 1:
            problems.append("round counts must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"training config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"training config {path} is not valid JSON: {exc}") from exc


class ReplayBuffer:
    """Fixed-capacity ring of training samples stored as padded arrays."""

    _fields = [f.name for f in fields(SampleBatch)]

    def __init__(self, capacity):
        self.capacity = int(capacity)
        self.count = 0  # total insertions
        self._data = None

    def __len__(self):
        return min(self.count, self.capacity)

    def clear(self, keep_dangerous=0):
        """Empty the buffer, optionally retaining the newest ``keep_dangerous`` dangerous samples."""
        kept = None
        if keep_dangerous > 0 and len(self):
            n = len(self)
            order = (np.arange(n) + (self.count - n)) % self.capacity
            dang = order[self._data["region"][order] == REGION_DANGEROUS]
            if len(dang):
                kept = self._take(dang[-keep_dangerous:])
        self.count = 0
        self._data = None
        if kept is not None:
            self.add(kept)

    def _grow(self, batch: SampleBatch):
        """Allocate or widen storage so ``batch``'s entity axes fit."""
        if self._data is None:
            self._data = {}
            for f in self._fields:
                a = getattr(batch, f)
                self._data[f] = np.zeros((self.capacity,) + a.shape[1:], dtype=a.dtype)
            return
        for f in ("rel", "kinds", "mask", "next_abs", "next_kinds", "next_mask"):
            have, want = self._data[f], getattr(batch, f)
            if want.shape[1] > have.shape[1]:
                pad = [(0, 0)] * have.ndim
                pad[1] = (0, want.shape[1] - have.shape[1])
                self._data[f] = np.pad(have, pad)

    def add(self, batch: SampleBatch):
        if len(batch) == 0:
            return
        self._grow(batch)
        pos = (self.count + np.arange(len(batch))) % self.capacity
        for f in self._fields:
            dst, src = self._data[f], getattr(batch, f)
            if src.ndim >= 2 and f not in ("state", "goal", "next_state", "u_ref"):
                dst[pos] = 0
                dst[pos, : src.shape[1]] = src
            else:
                dst[pos] = src
        self.count += len(batch)

    def all(self) -> SampleBatch:
        return self._take(np.arange(len(self)))

    def sample(self, size, rng, danger_fraction=0.0) -> SampleBatch:
        """Draw without replacement. If dangerous samples make up less than
        ``danger_fraction`` of the buffer, the batch is stratified so that up to that
        share comes from them."""
        n = len(self)
        size = min(size, n)
        if danger_fraction > 0:
            dang = self._data["region"][:n] == REGION_DANGEROUS
            n_d = int(dang.sum())
            want = int(round(danger_fraction * size))
            if 0 < n_d and n_d < danger_fraction * n:
                d_idx = np.nonzero(dang)[0]
                s_idx = np.nonzero(~dang)[0]
                k = min(want, n_d)
                idx = np.concatenate([rng.choice(d_idx, size=k, replace=False),
                                      rng.choice(s_idx, size=size - k, replace=False)])
                return self._take(idx)
        return self._take(rng.choice(n, size=size, replace=False))

    def _take(self, idx) -> SampleBatch:
        d = self._data
        k1 = int(d["mask"][idx].sum(axis=1).max(initial=0))
        k2 = int(d["next_mask"][idx].sum(axis=1).max(initial=0))
        out = {}
        for f in self._fields:
            a = d[f][idx]
            if f in ("rel", "kinds", "mask"):
                a = a[:, :k1]
            elif f in ("next_abs", "next_kinds", "next_mask"):
                a = a[:, :k2]
            out[f] = a
        return SampleBatch(**out)


def rollout_samples(rollout) -> SampleBatch:
    """Training samples for every (t, agent) of a rollout kept with ``keep_obs``."""
    cfg = rollout.config
    kind = cfg.dynamics
    T = rollout.steps
    if T == 0:
        raise ValueError("rollout has no transitions")
    N, n = rollout.n_agents, kind.state_dim
    K1 = max(o.width for o in rollout.obs[:T])
    K2 = max(o.width for o in rollout.obs[1 : T + 1])

    def stack(obs_seq, K, attr):
        first = getattr(obs_seq[0], attr)
        out = np.zeros((len(obs_seq), N, K) + first.shape[2:], dtype=first.dtype)
        for t, o in enumerate(obs_seq):
            a = getattr(o, attr)
            out[t, :, : a.shape[1]] = a
        return out.reshape((len(obs_seq) * N, K) + first.shape[2:])

    now, nxt = rollout.obs[:T], rollout.obs[1 : T + 1]
    region = np.full((T, N), REGION_OTHER, dtype=np.int8)
    region[0] = REGION_INITIAL
    region[~rollout.safe[:T]] = REGION_DANGEROUS
    states = rollout.states[:T].reshape(T * N, n)
    goals = np.broadcast_to(rollout.goals[None], (T, N, kind.pos_dim)).reshape(T * N, -1)
    return SampleBatch(
        state=states,
        goal=np.ascontiguousarray(goals),
        rel=stack(now, K1, "rel"),
        kinds=stack(now, K1, "kinds"),
        mask=stack(now, K1, "mask"),
        next_state=rollout.states[1 : T + 1].reshape(T * N, n),
        next_abs=stack(nxt, K2, "abs_states"),
        next_kinds=stack(nxt, K2, "kinds"),
        next_mask=stack(nxt, K2, "mask"),
        region=region.reshape(-1),
        u_ref=reference_control(kind, states, goals, cfg.goal_error_cap),
    )


def collect(pair, scenario: ScenarioConfig, config: TrainConfig, buffer: ReplayBuffer, seeds, rng):
    """Run one episode per seed under the current policy (random actions with prob. iota)
    and add every transition to ``buffer``. Returns the rollouts."""
    rollouts = []
    for s in seeds:
        r = run_episode(pair, scenario, int(s), explore=config.iota, rng=rng, keep_obs=True, record_h=False)
        if r.steps:
            buffer.add(rollout_samples(r))
        r.obs = []
        rollouts.append(r)
    return rollouts


def train_iteration(pair, buffer: ReplayBuffer, config: TrainConfig, rng) -> dict:
    """One SGD step on the total loss of a random batch; returns the loss values."""
    batch = buffer.sample(config.batch_size, rng, config.danger_fraction)
    terms = loss_terms(pair, batch, strict_x0=config.strict_x0)
    terms["L"].backward()
    stats = {k: float(v.data) for k, v in terms.items()}
    stats["n_dangerous"] = int((batch.region == REGION_DANGEROUS).sum())
    mg.sgd_step(pair.params.values(), config.lr, config.weight_decay)
    return stats


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)  # losses of the first batch before any update
    stopped: str = ""

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in HISTORY_COLUMNS})


def probe(pair, scenario, seeds):
    """Closed-loop probe episodes without exploration: (safety rate, eps_hat)."""
    safety, ys = [], []
    for s in seeds:
        r = run_episode(pair, scenario, int(s), record_h=False)
        safety.append(r.safe.mean())
        ys.append(y_values(pair, r))
    ys = np.concatenate(ys)
    return float(np.mean(safety)), float(np.mean(ys <= 0))


def _converged(rows, config):
    w = config.convergence_window
    if config.convergence_tol is None or len(rows) < max(2 * w, config.min_rounds):
        return False
    prev = np.mean([r["L"] for r in rows[-2 * w : -w]])
    last = np.mean([r["L"] for r in rows[-w:]])
    return (prev - last) / max(abs(prev), 1e-12) < config.convergence_tol


def train(pair, scenario: ScenarioConfig, config: TrainConfig, *, history_path=None,
          checkpoint_path=None, dump_dir=None, progress=None):
    """Alternate on-policy collection and SGD for ``outer_iterations`` rounds (or until the
    windowed loss improvement drops below ``convergence_tol``)."""
    ss = np.random.SeedSequence(config.seed)
    rng_collect, rng_batch = (np.random.default_rng(s) for s in ss.spawn(2))
    buffer = ReplayBuffer(config.buffer_capacity)
    history = TrainHistory()
    step = 0
    probe_seeds = [10_000_000 + config.seed * 1000 + k for k in range(config.probe_episodes)]
    for rnd in range(1, config.outer_iterations + 1):
        t0 = time.perf_counter()
        buffer.clear(config.danger_memory)
        seeds = [config.seed * 1_000_003 + rnd * 1000 + k for k in range(config.episodes_per_collection)]
        collect(pair, scenario, config, buffer, seeds, rng_collect)
        if len(buffer) < config.batch_size:
            raise ConfigError(f"collection produced {len(buffer)} samples, fewer than batch_size")
        sums = dict.fromkeys(["L", "Lc0", "Lcd", "Lch", "Lg"], 0.0)
        for _ in range(config.steps_per_collection):
            stats = train_iteration(pair, buffer, config, rng_batch)
            if not history.initial:
                history.initial = stats
            log.debug("round %d step %d L=%.4g Lc=%.4g Lg=%.4g", rnd, step, stats["L"], stats["Lc"], stats["Lg"])
            if not math.isfinite(stats["L"]) or stats["L"] > config.divergence_threshold:
                _dump(dump_dir, pair, history, stats)
                raise TrainingDiverged(f"loss {stats['L']:.3g} at round {rnd}, step {step}")
            for k in sums:
                sums[k] += stats[k]
            step += 1
        k = max(config.steps_per_collection, 1)
        safety, eps = probe(pair, scenario, probe_seeds)
        row = {"round": rnd, "step": step, **{key: v / k for key, v in sums.items()},
               "probe_safety_rate": safety, "eps_hat": eps}
        history.rows.append(row)
        log.info("round %d: L=%.4f Lc0=%.4f Lcd=%.4f Lch=%.4f Lg=%.4f safety=%.4f eps=%.3f (%.1fs)",
                 rnd, row["L"], row["Lc0"], row["Lcd"], row["Lch"], row["Lg"], safety, eps,
                 time.perf_counter() - t0)
        if progress is not None:
            progress(row)
        if checkpoint_path is not None:
            pair.save(checkpoint_path)
        if history_path is not None:
            history.write_csv(history_path)
        if _converged(history.rows, config):
            history.stopped = f"converged after {rnd} rounds"
            break
    else:
        history.stopped = f"completed {config.outer_iterations} rounds"
    return pair, history


def _dump(dump_dir, pair, history, stats):
    if dump_dir is None:
        return
    d = Path(dump_dir)
    d.mkdir(parents=True, exist_ok=True)
    pair.save(d / "diverged_checkpoint.json")
    (d / "diverged_stats.json").write_text(json.dumps({"last": stats, "rows": history.rows}, default=float))
