"""Decentralized CBF and policy networks, the y-function, and the joint training loss.

Both networks share one topology: each observed entity (relative state, entity-kind
flag, distance) goes through a two-layer ReLU encoder, the results are max-pooled
per feature, concatenated with an embedding of the agent's own state, and fed to a
two-layer head. The CBF head emits a scalar; the policy head emits a residual on top
of the LQR goal controller, squashed into the control box.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import micrograd as mg
from .dynamics import DynamicsKind, step_graph
from .errors import CheckpointError, NumericError, UndefinedValueError
from .world import OBSTACLE, Observation, goal_error, lqr, relative_to

REGION_OTHER, REGION_INITIAL, REGION_DANGEROUS = 0, 1, 2


@dataclass
class CertificatePair:
    kind: DynamicsKind
    params: dict
    gamma: float = 1e-2
    lam: float = 1.0
    eta: float = 0.1
    hidden: int = 64
    goal_error_cap: float | None = 1.0

    def __post_init__(self):
        if not (self.gamma > 0 and self.lam > 0 and self.eta >= 0):
            raise ValueError("need gamma > 0, lam > 0, eta >= 0")

    @property
    def dt(self):
        return self.kind.dt

    def blocks(self, prefix=""):
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def meta(self):
        return {
            "gamma": self.gamma,
            "lam": self.lam,
            "eta": self.eta,
            "hidden": self.hidden,
            "goal_error_cap": self.goal_error_cap,
            "dynamics": self.kind.to_dict(),
        }

    def save(self, path):
        mg.save(self.params.values(), path, self.kind.tag.value, self.meta())

    @classmethod
    def load(cls, path) -> "CertificatePair":
        blocks, tag, meta = mg.load(path)
        try:
            kind = DynamicsKind.from_dict(meta["dynamics"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: missing dynamics description") from exc
        if kind.tag.value != tag:
            raise CheckpointError(f"{path}: dynamics_kind {tag!r} disagrees with meta")
        expected = param_shapes(kind, meta.get("hidden", 64))
        got = {k: v.data.shape for k, v in blocks.items()}
        if got != expected:
            raise CheckpointError(f"{path}: parameter shapes do not match a {tag} network")
        return cls(
            kind,
            {k: blocks[k] for k in expected},
            gamma=meta.get("gamma", 1e-2),
            lam=meta.get("lam", 1.0),
            eta=meta.get("eta", 0.1),
            hidden=meta.get("hidden", 64),
            goal_error_cap=meta.get("goal_error_cap", 1.0),
        )


def column_dim(kind):
    return kind.state_dim + 2


def param_shapes(kind: DynamicsKind, hidden=64):
    """Name -> shape table for both networks."""
    n, d, m = kind.state_dim, kind.pos_dim, kind.control_dim
    shapes = {}
    for net, own_dim, out in (("cbf", n - d, 1), ("policy", n, m)):
        shapes.update(
            {
                f"{net}.enc1.W": (hidden, column_dim(kind)),
                f"{net}.enc1.b": (hidden,),
                f"{net}.enc2.W": (hidden, hidden),
                f"{net}.enc2.b": (hidden,),
                f"{net}.own.W": (hidden, own_dim),
                f"{net}.own.b": (hidden,),
                f"{net}.head1.W": (hidden, 2 * hidden),
                f"{net}.head1.b": (hidden,),
                f"{net}.head2.W": (out, hidden),
                f"{net}.head2.b": (out,),
            }
        )
    return shapes


def init_pair(kind: DynamicsKind, seed=0, hidden=64, **hyper) -> CertificatePair:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(kind, hidden).items():
        if name.endswith(".W"):
            scale = np.sqrt(2.0 / shape[1])
            if name.endswith("head2.W"):
                scale *= 0.1
            params[name] = mg.ParamBlock(name, rng.normal(0.0, scale, size=shape))
        else:
            params[name] = mg.ParamBlock(name, np.zeros(shape))
    return CertificatePair(kind, params, hidden=hidden, **hyper)


# ----------------------------------------------------------------------------- forward


def _column_features(kind, rel, kinds):
    """Per-entity input: relative state, obstacle flag, distance."""
    rel = mg.as_tensor(rel)
    flag = (np.asarray(kinds) == OBSTACLE).astype(float)[..., None]
    dist = mg.norm(mg.index(rel, (Ellipsis, slice(0, kind.pos_dim))))
    return mg.concat([rel, flag, mg.reshape(dist, dist.shape + (1,))])


def _forward(pair, net, own, rel, kinds, mask):
    p = pair.params
    feats = _column_features(pair.kind, rel, kinds)
    z = mg.relu(mg.affine(p[f"{net}.enc1.W"], p[f"{net}.enc1.b"], feats))
    z = mg.relu(mg.affine(p[f"{net}.enc2.W"], p[f"{net}.enc2.b"], z))
    pooled = mg.masked_max_pool(z, mask)
    emb = mg.relu(mg.affine(p[f"{net}.own.W"], p[f"{net}.own.b"], own))
    z = mg.relu(mg.affine(p[f"{net}.head1.W"], p[f"{net}.head1.b"], mg.concat([pooled, emb])))
    return mg.affine(p[f"{net}.head2.W"], p[f"{net}.head2.b"], z)


def cbf_values(pair, states, rel, kinds, mask):
    """Batched h(s, o). ``states`` may be an array or a Tensor (B, n); returns Tensor (B,)."""
    states = mg.as_tensor(states)
    own = mg.index(states, (slice(None), slice(pair.kind.pos_dim, None)))
    out = _forward(pair, "cbf", own, rel, kinds, mask)
    return mg.reshape(out, (out.shape[0],))


def policy_actions(pair, states, goals, rel, kinds, mask):
    """Batched pi(s, o): LQR goal term plus learned residual, squashed into the control box."""
    kind = pair.kind
    states = np.asarray(states, dtype=float)
    err = goal_error(kind, states, goals, pair.goal_error_cap)
    K, _ = lqr(kind)
    base = -err @ K.T
    resid = _forward(pair, "policy", err, rel, kinds, mask)
    lo, hi = kind.low, kind.high
    c, w = (hi + lo) / 2, (hi - lo) / 2
    return mg.clip(mg.mul(mg.tanh(mg.mul(resid + (base - c), 1.0 / w)), w) + c, lo, hi)


def _single(obs: Observation, kind):
    ent = np.asarray(obs.entities, dtype=float).reshape(-1, kind.state_dim)
    return ent[None], np.asarray(obs.kinds).reshape(1, -1), np.ones((1, len(ent)), dtype=bool)


def cbf_value(pair, state, observation: Observation) -> float:
    rel, kinds, mask = _single(observation, pair.kind)
    h = float(cbf_values(pair, np.asarray(state, dtype=float)[None], rel, kinds, mask).data[0])
    if not np.isfinite(h):
        raise NumericError("non-finite CBF value")
    return h


def policy_action(pair, state, observation: Observation, goal) -> np.ndarray:
    rel, kinds, mask = _single(observation, pair.kind)
    u = policy_actions(
        pair, np.asarray(state, dtype=float)[None], np.asarray(goal, dtype=float)[None], rel, kinds, mask
    ).data[0]
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite policy output")
    return u


def h_dot_numeric(pair, state, observation, next_state, next_observation, dt=None) -> float:
    """Finite-difference time derivative of h between two consecutive (s, o) pairs."""
    dt = pair.dt if dt is None else dt
    return (cbf_value(pair, next_state, next_observation) - cbf_value(pair, state, observation)) / dt


# ----------------------------------------------------------------------------- losses


@dataclass
class SampleBatch:
    """Training samples. ``next_abs`` holds absolute states of the entities observed at
    t+dt so the next relative observation can be rebuilt from a recomputed own state."""

    state: np.ndarray  # (B, n)
    goal: np.ndarray  # (B, d)
    rel: np.ndarray  # (B, K, n)
    kinds: np.ndarray
    mask: np.ndarray
    next_state: np.ndarray  # (B, n) as recorded
    next_abs: np.ndarray  # (B, K2, n)
    next_kinds: np.ndarray
    next_mask: np.ndarray
    region: np.ndarray  # (B,) REGION_*
    u_ref: np.ndarray  # (B, m)

    def __len__(self):
        return len(self.state)

    def subset(self, idx) -> "SampleBatch":
        return SampleBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def loss_terms(pair, batch: SampleBatch, strict_x0=False, recompute_next=True):
    """All loss pieces as Tensors: ``Lc0, Lcd, Lch, Lc, Lg, L``.

    ``Lch`` only counts samples whose current h is >= 0. With ``recompute_next`` the
    next state is re-simulated from the current policy action so gradients reach the
    policy through the h-derivative term.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    kind = pair.kind
    h = cbf_values(pair, batch.state, batch.rel, batch.kinds, batch.mask)
    u = policy_actions(pair, batch.state, batch.goal, batch.rel, batch.kinds, batch.mask)
    if recompute_next:
        s_next = step_graph(kind, batch.state, u)
        B, n = batch.state.shape
        rel_next = mg.mul(
            mg.add(batch.next_abs, mg.neg(mg.reshape(s_next, (B, 1, n)))), batch.next_mask[..., None]
        )
    else:
        s_next = batch.next_state
        rel_next = relative_to(batch.next_abs, batch.next_mask, batch.next_state)
    h_next = cbf_values(pair, s_next, rel_next, batch.next_kinds, batch.next_mask)

    dangerous = (batch.region == REGION_DANGEROUS).astype(float)
    if strict_x0:
        initial = (batch.region == REGION_INITIAL).astype(float)
    else:
        initial = 1.0 - dangerous
    in_xh = (h.data >= 0).astype(float)
    g = pair.gamma
    h_dot = mg.mul(h_next - h, 1.0 / pair.dt)
    Lc0 = mg.sum_(mg.mul(mg.relu(g - h), initial))
    Lcd = mg.sum_(mg.mul(mg.relu(h + g), dangerous))
    Lch = mg.sum_(mg.mul(mg.relu(g - h_dot - mg.mul(h, pair.lam)), in_xh))
    Lc = Lc0 + Lcd + Lch
    Lg = mg.sum_(mg.norm(u - batch.u_ref))
    return {"Lc0": Lc0, "Lcd": Lcd, "Lch": Lch, "Lc": Lc, "Lg": Lg, "L": Lc + mg.mul(Lg, pair.eta)}


def cbf_loss(pair, batch, strict_x0=False):
    return float(loss_terms(pair, batch, strict_x0)["Lc"].data)


def goal_loss(pair, batch):
    return float(loss_terms(pair, batch)["Lg"].data)


def total_loss(pair, batch, strict_x0=False):
    return float(loss_terms(pair, batch, strict_x0)["L"].data)


# ----------------------------------------------------------------------------- y-function


def y_from_values(h, h_dot, initial, dangerous, lam):
    """min over (initial: h), (dangerous: -h), (h >= 0 with a next sample: h_dot + lam h).

    ``h_dot`` may contain NaN where no next sample exists. Returns +inf contributions for
    empty categories; raises if all three are empty.
    """
    h = np.asarray(h, dtype=float)
    h_dot = np.asarray(h_dot, dtype=float)
    xh = (h >= 0) & np.isfinite(h_dot)
    cands = []
    if np.any(initial):
        cands.append(h[initial].min())
    if np.any(dangerous):
        cands.append((-h[dangerous]).min())
    if np.any(xh):
        cands.append((h_dot[xh] + lam * h[xh]).min())
    if not cands:
        raise UndefinedValueError("trajectory has no initial, dangerous or h>=0 samples")
    return float(min(cands))


@dataclass
class TrajectoryValues:
    """Per-time, per-agent h, h-dot and region masks of a rollout."""

    h: np.ndarray  # (T+1, N)
    h_dot: np.ndarray  # (T+1, N), NaN on the last row
    initial: np.ndarray
    dangerous: np.ndarray
    extra: dict = field(default_factory=dict)


def trajectory_values(pair, rollout) -> TrajectoryValues:
    from .world import observe_all

    states = rollout.states
    T1, N, _ = states.shape
    H = np.empty((T1, N))
    for t in range(T1):
        ob = observe_all(states[t], rollout.config)
        H[t] = cbf_values(pair, states[t], ob.rel, ob.kinds, ob.mask).data
    Hd = np.full((T1, N), np.nan)
    Hd[:-1] = (H[1:] - H[:-1]) / pair.dt
    initial = np.zeros((T1, N), dtype=bool)
    initial[0] = True
    dangerous = ~rollout.safe
    return TrajectoryValues(H, Hd, initial, dangerous)


def y_value(pair, rollout, i) -> float:
    tv = trajectory_values(pair, rollout)
    return y_from_values(tv.h[:, i], tv.h_dot[:, i], tv.initial[:, i], tv.dangerous[:, i], pair.lam)


def y_values(pair, rollout) -> np.ndarray:
    tv = trajectory_values(pair, rollout)
    return np.array(
        [
            y_from_values(tv.h[:, i], tv.h_dot[:, i], tv.initial[:, i], tv.dangerous[:, i], pair.lam)
            for i in range(tv.h.shape[1])
        ]
    )
