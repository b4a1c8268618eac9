import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decbf import dynamics as dyn
from decbf.certificates import (
    REGION_DANGEROUS,
    REGION_INITIAL,
    REGION_OTHER,
    SampleBatch,
    cbf_value,
    cbf_values,
    h_dot_numeric,
    init_pair,
    loss_terms,
    policy_action,
    policy_actions,
    total_loss,
    trajectory_values,
    y_from_values,
    y_value,
    y_values,
)
from decbf.errors import UndefinedValueError
from decbf.rollout import run_episode
from decbf.trainer import rollout_samples
from decbf.world import Observation, goal_error, lqr, reference_control

from gradcheck import check


def constant_cbf(kind, value, **hyper):
    """Pair whose CBF is the constant ``value`` (policy left random)."""
    pair = init_pair(kind, seed=0, **hyper)
    for name, p in pair.params.items():
        if name.startswith("cbf."):
            p.data[...] = 0.0
    pair.params["cbf.head2.b"].data[...] = value
    return pair


def batch_of(kind, states, goals, obs, region, u_ref=None, next_states=None):
    """SampleBatch from single-agent observations (entities relative to the state)."""
    B = len(states)
    K = max(1, max(len(o) for o in obs))
    n = kind.state_dim
    rel = np.zeros((B, K, n))
    kinds = np.zeros((B, K), dtype=np.int8)
    mask = np.zeros((B, K), dtype=bool)
    for b, o in enumerate(obs):
        rel[b, : len(o)] = o.entities
        kinds[b, : len(o)] = o.kinds
        mask[b, : len(o)] = True
    next_states = states if next_states is None else next_states
    u_ref = np.zeros((B, kind.control_dim)) if u_ref is None else u_ref
    return SampleBatch(
        state=np.asarray(states, float), goal=np.asarray(goals, float), rel=rel, kinds=kinds, mask=mask,
        next_state=np.asarray(next_states, float), next_abs=rel + np.asarray(states)[:, None, :],
        next_kinds=kinds, next_mask=mask, region=np.asarray(region), u_ref=np.asarray(u_ref, float),
    )


def rand_obs(rng, n, k):
    return Observation(rng.normal(0, 0.5, size=(k, n)), rng.integers(0, 2, size=k).astype(np.int8))


# ----------------------------------------------------------------------------- invariance


@pytest.mark.parametrize("which", ["2d", "3d"])
def test_permutation_and_duplicate_invariance(which, pair2d, pair3d):
    pair = pair2d if which == "2d" else pair3d
    n, d = pair.kind.state_dim, pair.kind.pos_dim
    rng = np.random.default_rng(7)
    for _ in range(100):
        k = int(rng.integers(0, 17))
        s = rng.normal(0, 0.3, size=n)
        goal = rng.normal(0, 1, size=d)
        ob = rand_obs(rng, n, k)
        h, u = cbf_value(pair, s, ob), policy_action(pair, s, ob, goal)
        perm = ob.permuted(rng.permutation(k))
        assert cbf_value(pair, s, perm) == h
        assert policy_action(pair, s, perm, goal).tobytes() == u.tobytes()
        if k:
            j = int(rng.integers(k))
            dup = Observation(np.vstack([ob.entities, ob.entities[j]]), np.append(ob.kinds, ob.kinds[j]))
            assert cbf_value(pair, s, dup) == h
            assert policy_action(pair, s, dup, goal).tobytes() == u.tobytes()


def test_output_shape_independent_of_count(pair3d):
    rng = np.random.default_rng(0)
    s = np.zeros(8)
    for k in range(0, 40, 3):
        ob = rand_obs(rng, 8, k)
        assert np.shape(policy_action(pair3d, s, ob, np.ones(3))) == (3,)
        assert np.isfinite(cbf_value(pair3d, s, ob))


def test_padding_does_not_change_values(pair2d):
    rng = np.random.default_rng(3)
    rel = rng.normal(size=(1, 5, 4))
    kinds = np.zeros((1, 5), dtype=np.int8)
    mask = np.array([[True, True, False, True, False]])
    s = rng.normal(size=(1, 4))
    padded = cbf_values(pair2d, s, rel, kinds, mask).data
    tight = cbf_values(pair2d, s, rel[:, mask[0]], kinds[:, mask[0]], mask[:, mask[0]]).data
    assert padded.tobytes() == tight.tobytes()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e4))
def test_policy_output_within_bounds(seed, scale):
    pair = init_pair(dyn.DynamicsKind.drone_3d(), seed=seed % 1000)
    rng = np.random.default_rng(seed)
    s = rng.normal(0, 1, size=8)
    s[6:] = np.clip(s[6:], -1.4, 1.4)
    s[:6] *= scale
    u = policy_action(pair, s, rand_obs(rng, 8, int(rng.integers(0, 5))), rng.normal(size=3) * scale)
    assert np.all(u >= pair.kind.low) and np.all(u <= pair.kind.high)


def test_zero_neighbors_is_state_feedback(pair2d):
    """With no columns, the pooled vector is the zero floor; compare to a manual forward."""
    p = {k: v.data for k, v in pair2d.params.items()}
    kind = pair2d.kind
    s = np.array([0.3, -0.2, 0.5, 0.1])
    goal = np.array([1.0, 0.4])
    relu = lambda z: np.maximum(z, 0.0)
    err = goal_error(kind, s, goal, pair2d.goal_error_cap)
    emb = relu(p["policy.own.W"] @ err + p["policy.own.b"])
    z = relu(p["policy.head1.W"] @ np.concatenate([np.zeros(64), emb]) + p["policy.head1.b"])
    resid = p["policy.head2.W"] @ z + p["policy.head2.b"]
    K, _ = lqr(kind)
    w = (kind.high - kind.low) / 2
    c = (kind.high + kind.low) / 2
    expect = np.clip(c + w * np.tanh((resid - K @ err - c) / w), kind.low, kind.high)
    empty = Observation(np.zeros((0, 4)), np.zeros(0, dtype=np.int8))
    np.testing.assert_allclose(policy_action(pair2d, s, empty, goal), expect, rtol=1e-12)

    emb = relu(p["cbf.own.W"] @ s[2:] + p["cbf.own.b"])
    z = relu(p["cbf.head1.W"] @ np.concatenate([np.zeros(64), emb]) + p["cbf.head1.b"])
    h = (p["cbf.head2.W"] @ z + p["cbf.head2.b"])[0]
    assert cbf_value(pair2d, s, empty) == pytest.approx(h, rel=1e-12)


def test_cbf_ignores_own_absolute_position(pair2d):
    rng = np.random.default_rng(0)
    ob = rand_obs(rng, 4, 3)
    s = np.array([0.1, 0.2, 0.3, 0.4])
    t = s.copy()
    t[:2] += 17.0
    assert cbf_value(pair2d, s, ob) == cbf_value(pair2d, t, ob)


# ----------------------------------------------------------------------------- h dot


def linear_cbf(kind, c, offset=10.0):
    """h = c * (rel_x of the pooled neighbour + offset): linear in the observer's x."""
    pair = init_pair(kind, seed=0)
    for name, p in pair.params.items():
        if name.startswith("cbf."):
            p.data[...] = 0.0
    P = pair.params
    P["cbf.enc1.W"].data[0, 0] = 1.0
    P["cbf.enc1.b"].data[0] = offset
    P["cbf.enc2.W"].data[0, 0] = 1.0
    P["cbf.head1.W"].data[0, 0] = 1.0
    P["cbf.head2.W"].data[0, 0] = c
    return pair


def test_h_dot_zero_for_identical_pair(pair2d):
    rng = np.random.default_rng(1)
    ob = rand_obs(rng, 4, 3)
    s = rng.normal(size=4)
    assert h_dot_numeric(pair2d, s, ob, s, ob) == 0.0


@pytest.mark.parametrize("vx", [0.5, -0.8])
def test_h_dot_linear_synthetic(kind2d, vx):
    c = 0.7
    pair = linear_cbf(kind2d, c)
    neighbour = np.array([1.0, 0.0, 0.0, 0.0])
    s = np.array([0.0, 0.0, vx, 0.0])
    s1 = dyn.step(kind2d, s, [0.0, 0.0])
    ob0 = Observation((neighbour - s)[None], np.zeros(1, dtype=np.int8))
    ob1 = Observation((neighbour - s1)[None], np.zeros(1, dtype=np.int8))
    hd = h_dot_numeric(pair, s, ob0, s1, ob1)
    assert hd == pytest.approx(-c * vx, rel=1e-9)


def test_h_dot_sign_flips_with_direction(kind2d):
    pair = linear_cbf(kind2d, 1.3)
    neighbour = np.array([1.0, 0.0, 0.0, 0.0])
    out = []
    for vx in (0.4, -0.4):
        s = np.array([0.0, 0.0, vx, 0.0])
        s1 = dyn.step(kind2d, s, [0.0, 0.0])
        ob0 = Observation((neighbour - s)[None], np.zeros(1, dtype=np.int8))
        ob1 = Observation((neighbour - s1)[None], np.zeros(1, dtype=np.int8))
        out.append(h_dot_numeric(pair, s, ob0, s1, ob1))
    assert np.sign(out[0]) == -np.sign(out[1]) != 0


# ----------------------------------------------------------------------------- losses


def _simple_batch(kind, region, u_ref=None):
    B = len(region)
    states = np.zeros((B, kind.state_dim))
    states[:, 0] = np.arange(B)
    empty = Observation(np.zeros((0, kind.state_dim)), np.zeros(0, dtype=np.int8))
    return batch_of(kind, states, np.zeros((B, kind.pos_dim)), [empty] * B, region, u_ref)


def test_all_hinges_inactive_gives_zero(kind2d):
    pair = constant_cbf(kind2d, 0.5)
    batch = _simple_batch(kind2d, [REGION_INITIAL, REGION_OTHER, REGION_OTHER])
    t = loss_terms(pair, batch)
    assert float(t["Lc"].data) == 0.0


def test_dangerous_sample_at_zero_costs_gamma(kind2d):
    pair = constant_cbf(kind2d, 0.0)
    t = loss_terms(pair, _simple_batch(kind2d, [REGION_DANGEROUS]))
    assert float(t["Lcd"].data) == pytest.approx(pair.gamma)
    assert float(t["Lc0"].data) == 0.0


def test_strict_x0_only_counts_first_step(kind2d):
    pair = constant_cbf(kind2d, -0.2)
    batch = _simple_batch(kind2d, [REGION_INITIAL, REGION_OTHER, REGION_OTHER])
    relaxed = float(loss_terms(pair, batch)["Lc0"].data)
    strict = float(loss_terms(pair, batch, strict_x0=True)["Lc0"].data)
    assert relaxed == pytest.approx(3 * (pair.gamma + 0.2))
    assert strict == pytest.approx(pair.gamma + 0.2)


def test_xh_filter_skips_negative_h(kind2d):
    pair = constant_cbf(kind2d, -0.3)
    t = loss_terms(pair, _simple_batch(kind2d, [REGION_OTHER, REGION_OTHER]))
    assert float(t["Lch"].data) == 0.0


def test_total_loss_arithmetic(kind2d):
    # one dangerous sample: Lcd = 0.99 + 0.01, Lch = relu(0.01 - 0.99) = 0, Lg = |(6, 8)| = 10
    pair = constant_cbf(kind2d, 0.99)
    batch = _simple_batch(kind2d, [REGION_DANGEROUS])
    u = policy_actions(pair, batch.state, batch.goal, batch.rel, batch.kinds, batch.mask).data
    batch.u_ref = u - np.array([[6.0, 8.0]])
    t = loss_terms(pair, batch)
    assert float(t["Lc"].data) == pytest.approx(1.0)
    assert float(t["Lg"].data) == pytest.approx(10.0)
    assert float(t["L"].data) == pytest.approx(2.0)


def test_goal_loss_examples(kind2d, pair2d):
    batch = _simple_batch(kind2d, [REGION_OTHER, REGION_OTHER])
    u = policy_actions(pair2d, batch.state, batch.goal, batch.rel, batch.kinds, batch.mask).data
    batch.u_ref = u.copy()
    assert float(loss_terms(pair2d, batch)["Lg"].data) == 0.0
    batch.u_ref = u - np.array([[3.0, 4.0], [0.0, 0.0]])
    assert float(loss_terms(pair2d, batch)["Lg"].data) == pytest.approx(5.0)


def test_eta_zero_total_is_cbf_loss(nav):
    pair = init_pair(nav.dynamics, seed=1, eta=0.0)
    batch = _rollout_batch(pair, nav)
    t = loss_terms(pair, batch)
    assert float(t["L"].data) == float(t["Lc"].data)


def _rollout_batch(pair, scenario, seed=0, size=64):
    r = run_episode(pair, scenario.with_agents(4), seed, keep_obs=True, record_h=False, explore=0.3)
    b = rollout_samples(r)
    idx = np.random.default_rng(seed).choice(len(b), size=size, replace=False)
    return b.subset(idx)


def test_loss_additive_over_split(pair2d, nav):
    batch = _rollout_batch(pair2d, nav)
    whole = loss_terms(pair2d, batch)
    a = loss_terms(pair2d, batch.subset(np.arange(0, 30)))
    b = loss_terms(pair2d, batch.subset(np.arange(30, len(batch))))
    for k in whole:
        assert float(whole[k].data) == pytest.approx(float(a[k].data) + float(b[k].data), rel=1e-12)


def test_loss_matches_scalar_recomputation(pair2d, nav):
    """Two-sample batch checked against single-sample evaluations outside the graph."""
    batch = _rollout_batch(pair2d, nav, seed=3).subset(np.arange(2))
    batch.region = np.array([REGION_DANGEROUS, REGION_OTHER])
    pair, kind = pair2d, pair2d.kind
    g, lam, dt = pair.gamma, pair.lam, pair.dt
    lc0 = lcd = lch = lg = 0.0
    for b in range(2):
        m = batch.mask[b]
        ob = Observation(batch.rel[b][m], batch.kinds[b][m])
        h = cbf_value(pair, batch.state[b], ob)
        u = policy_action(pair, batch.state[b], ob, batch.goal[b])
        s1 = dyn.step(kind, batch.state[b], u)
        m1 = batch.next_mask[b]
        ob1 = Observation(batch.next_abs[b][m1] - s1, batch.next_kinds[b][m1])
        hd = (cbf_value(pair, s1, ob1) - h) / dt
        if batch.region[b] == REGION_DANGEROUS:
            lcd += max(0.0, g + h)
        else:
            lc0 += max(0.0, g - h)
        if h >= 0:
            lch += max(0.0, g - hd - lam * h)
        lg += float(np.linalg.norm(u - batch.u_ref[b]))
    t = loss_terms(pair, batch)
    assert float(t["Lc0"].data) == pytest.approx(lc0, abs=1e-10)
    assert float(t["Lcd"].data) == pytest.approx(lcd, abs=1e-10)
    assert float(t["Lch"].data) == pytest.approx(lch, abs=1e-9)
    assert float(t["Lg"].data) == pytest.approx(lg, rel=1e-10)
    assert float(t["L"].data) >= 0


@pytest.mark.parametrize("which", ["2d", "3d"])
def test_total_loss_gradient(which, nav):
    from decbf.world import load_preset

    scenario = nav if which == "2d" else load_preset("maze3d")
    pair = init_pair(scenario.dynamics, seed=5)
    batch = _rollout_batch(pair, scenario, seed=2, size=16)
    rng = np.random.default_rng(0)
    err = check(lambda: loss_terms(pair, batch)["L"], list(pair.params.values()), rng, max_entries=4)
    assert err < 1e-4


def test_reference_matches_sample_u_ref(pair2d, nav):
    batch = _rollout_batch(pair2d, nav)
    np.testing.assert_allclose(batch.u_ref, reference_control(nav.dynamics, batch.state, batch.goal, 1.0))


# ----------------------------------------------------------------------------- y value


def test_y_from_values_example():
    h = np.array([0.5, 0.8, 0.9])
    hd = np.array([-0.3, -0.6, np.nan])  # hd + h = 0.2 at both steps
    init = np.array([True, False, False])
    y = y_from_values(h, hd, init, np.zeros(3, bool), lam=1.0)
    assert y == pytest.approx(0.2)


def test_y_empty_raises():
    with pytest.raises(UndefinedValueError):
        y_from_values(np.array([-1.0]), np.array([np.nan]), np.array([False]), np.array([False]), 1.0)


def test_y_positive_margin_implies_conditions():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h = rng.normal(0.5, 0.5, size=10)
        hd = np.append(rng.normal(0, 1, size=9), np.nan)
        init = np.zeros(10, bool)
        init[0] = True
        dang = rng.random(10) < 0.2
        y = y_from_values(h, hd, init, dang, 1.0)
        if y > 0.01:
            assert h[0] >= y and np.all(-h[dang] >= y)
            xh = (h >= 0) & np.isfinite(hd)
            assert np.all(hd[xh] + h[xh] >= y)


def test_y_value_matches_exhaustive_scan(pair2d, nav):
    r = run_episode(pair2d, nav.with_agents(4), 1)
    tv = trajectory_values(pair2d, r)
    for i in range(r.n_agents):
        best = np.inf
        for t in range(r.steps + 1):
            h = cbf_value(pair2d, r.states[t, i], _obs_at(r, t, i))
            if t == 0:
                best = min(best, h)
            if not r.safe[t, i]:
                best = min(best, -h)
            if h >= 0 and t < r.steps:
                h1 = cbf_value(pair2d, r.states[t + 1, i], _obs_at(r, t + 1, i))
                best = min(best, (h1 - h) / pair2d.dt + pair2d.lam * h)
            assert h == pytest.approx(tv.h[t, i], abs=1e-12)
        assert y_value(pair2d, r, i) == pytest.approx(best, abs=1e-9)
    assert y_values(pair2d, r).shape == (r.n_agents,)


def _obs_at(r, t, i):
    from decbf.world import observe

    return observe(r.states[t], i, r.config)
