import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import RecordingOracle, TableOracle, seal_violations, small_world

from nodeinject import attacker as A
from nodeinject import graph as G
from nodeinject import numcore as nc
from nodeinject.a2c import default_density


@pytest.fixture(scope="module")
def world():
    return small_world()


@pytest.fixture(scope="module")
def cont_world():
    return small_world(space=G.CONTINUOUS, seed=1)


def make_policy(g, seed=0, **kw):
    cfg = A.PolicyConfig(hidden=8, feature_space=g.feature_space, seed=seed,
                         init_density=default_density(g), **kw)
    return A.AttackerPolicies(g.n_features, g.n_classes, cfg)


def injected(g, budgets, target=None, feats=None):
    d = G.GraphDelta(g, budgets)
    x = np.zeros(g.n_features) if feats is None else feats
    d.inject_node(x)
    if target is not None:
        d.wire_edge(0, target)
    return d


# ---------------------------------------------------------------- config


def test_bad_config():
    with pytest.raises(A.AttackConfigError):
        A.AttackerPolicies(4, 2, A.PolicyConfig(readout="max"))
    with pytest.raises(A.AttackConfigError):
        A.AttackerPolicies(4, 2, A.PolicyConfig(feature_space="ternary"))


def test_feature_space_mismatch(world):
    g, _, _ = world
    pol = A.AttackerPolicies(g.n_features, g.n_classes, A.PolicyConfig(hidden=4, feature_space=G.CONTINUOUS))
    with pytest.raises(A.AttackConfigError):
        A.generate_node(pol, G.GraphDelta(g), 0, nc.RngStream(0))


def test_policy_save_load(world, tmp_path):
    g, _, _ = world
    pol = make_policy(g, seed=3)
    pol.save(tmp_path / "p.ckpt", {"note": 1})
    back, extra = A.AttackerPolicies.load(tmp_path / "p.ckpt")
    assert extra == {"note": 1} and back.config == pol.config
    for k, v in pol.state().items():
        assert np.array_equal(back.state()[k], v)


def test_parameter_groups_are_disjoint(world):
    g, _, _ = world
    pol = make_policy(g)
    ids = [set(map(id, ps)) for ps in (pol.generator_params, pol.sampler_params, pol.value_params)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert len(pol.params) == sum(map(len, ids))


# ---------------------------------------------------------------- generator


def test_bernoulli_log_prob_oracle():
    logits = np.array([-2.0, 0.0, 1.5, 4.0])
    x = np.array([1.0, 0.0, 1.0, 0.0])
    p = 1 / (1 + np.exp(-logits))
    ref = np.sum(x * np.log(p) + (1 - x) * np.log(1 - p))
    assert A.bernoulli_log_prob(nc.Tensor(logits), x).item() == pytest.approx(ref, abs=1e-12)


def test_discrete_feature_loss_zero_at_allowed_density():
    for beta in (0.0, 0.25, 0.5):
        x = np.zeros(20)
        x[: int(4 * (1 + beta))] = 1
        assert A.discrete_feature_loss(x, 4.0, beta).item() == pytest.approx(0.0)
    assert A.discrete_feature_loss(np.zeros(20), 4.0, 0.0).item() == pytest.approx(1.0)


def test_continuous_feature_loss_matches_numpy():
    rng = np.random.default_rng(0)
    x, mu, sigma = rng.normal(size=5), rng.normal(size=5), np.exp(rng.normal(size=5))
    stats = G.FeatureStats(1.0, rng.normal(size=5), np.exp(rng.normal(size=5)))

    def logn(v, m, s):
        return -0.5 * np.log(2 * np.pi) - np.log(s) - (v - m) ** 2 / (2 * s * s)

    lp, lq = logn(x, mu, sigma), logn(x, stats.mu, stats.sigma)
    ref = np.sum(np.exp(lp) * (lp - lq))
    for beta in (0.0, 0.1, 10.0):
        got = A.continuous_feature_loss(x, mu, sigma, stats, beta).item()
        assert got == pytest.approx(max(ref - beta, 0.0), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([0.0, 0.25, 0.5]))
def test_discrete_generation_is_binary_and_capped(world, seed, beta):
    g, split, _ = world
    pol = make_policy(g, seed=seed % 5)
    t = int(split.test[seed % len(split.test)])
    act = A.generate_node(pol, G.GraphDelta(g), t, nc.RngStream(seed), beta)
    assert set(np.unique(act.features)) <= {0.0, 1.0}
    assert act.features.sum() <= G.discrete_cap(g, beta)
    again = A.node_log_prob(pol, G.GraphDelta(g), t, act.sample, beta)
    assert again.item() == pytest.approx(act.log_prob.item(), abs=1e-12)
    assert np.all(act.features <= act.sample)


def test_generation_is_reproducible(world):
    g, _, _ = world
    pol = make_policy(g)
    a = A.generate_node(pol, G.GraphDelta(g), 3, nc.RngStream(9))
    b = A.generate_node(pol, G.GraphDelta(g), 3, nc.RngStream(9))
    assert np.array_equal(a.features, b.features)
    ga = A.generate_node(pol, G.GraphDelta(g), 3, nc.RngStream(1), mode=A.GREEDY)
    gb = A.generate_node(pol, G.GraphDelta(g), 3, nc.RngStream(2), mode=A.GREEDY)
    assert np.array_equal(ga.features, gb.features)


def test_initial_density_tracks_clean_rows(world):
    g, _, _ = world
    pol = make_policy(g)
    pol.gn_head.data[:] = 0.0  # isolate the bias
    pre = A._generator_head(pol, G.GraphDelta(g), 0).data
    expected_bits = (1 / (1 + np.exp(-pre))).sum()
    assert expected_bits == pytest.approx(g.feature_stats().mean_row_l1, rel=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([0.0, 0.05, 0.5]))
def test_continuous_generation_respects_kl(cont_world, seed, beta):
    g, split, _ = cont_world
    pol = make_policy(g, seed=seed % 3)
    pol.gn_mu.data = pol.gn_mu.data * 20  # push the proposal far from the data
    act = A.generate_node(pol, G.GraphDelta(g), int(split.test[0]), nc.RngStream(seed), beta)
    mu, sigma = act.params
    assert G.gaussian_kl(mu, sigma, g.feature_stats().mu, g.feature_stats().sigma) <= beta + 1e-6
    d = G.GraphDelta(g, G.Budgets(1, 1, beta))
    d.inject_node(act.features, act.params)
    assert G.budget_indicator(g, d, G.Budgets(1, 1, beta))


# ---------------------------------------------------------------- edge sampler


def test_legal_mask_rules(world):
    g, _, _ = world
    d = G.GraphDelta(g, G.Budgets(2, 2, 1.0))
    d.inject_node(np.zeros(g.n_features))
    d.inject_node(np.zeros(g.n_features))
    d.wire_edge(0, 5)
    u0, u1 = d.global_id(0), d.global_id(1)
    mask = A.legal_mask(d, 0, np.array([5, 6, u0, u1]))
    assert mask.tolist() == [False, True, False, True]
    d.wire_edge(1, 7)
    d.wire_edge(1, 8)
    # u1 is saturated, so u0 may no longer wire to it
    assert A.legal_mask(d, 0, np.array([u1])).tolist() == [False]


def test_candidate_peers_is_two_hop_ball_plus_injected(world):
    g, _, _ = world
    d = G.GraphDelta(g, G.Budgets(2, 2, 1.0))
    d.inject_node(np.zeros(g.n_features))
    d.inject_node(np.zeros(g.n_features))
    t = 4
    ball = set(G.k_hop_subgraph(d, t, 2).nodes.tolist())
    assert set(A.candidate_peers(d, t, 0).tolist()) == ball | {d.global_id(1)}
    assert set(A.candidate_peers(d, t, 0, full_graph=True).tolist()) == set(range(d.n_total)) - {d.global_id(0)}


def test_edge_distribution_normalized_and_masked(world):
    g, _, _ = world
    pol = make_policy(g)
    d = injected(g, G.Budgets(1, 2, 1.0), target=2)
    dist = A.edge_distribution(pol, d, 2, 0)
    p = dist.probs().data
    assert p.sum() == pytest.approx(1.0) and np.all(p[~dist.mask] == 0)
    assert not dist.mask[list(dist.nodes).index(2)]
    with pytest.raises(A.AttackConfigError):
        dist.log_prob(2)
    legal = dist.nodes[dist.mask]
    lp = np.array([dist.log_prob(int(v)).item() for v in legal])
    assert np.allclose(np.exp(lp), p[dist.mask])


def test_adjacency_bias_shifts_target_row_logits(world):
    g, _, _ = world
    t = 6
    d = injected(g, G.Budgets(1, 1, 1.0))
    p0 = make_policy(g, adjacency_bias=0.0)
    p1 = make_policy(g, adjacency_bias=2.5)
    l0 = A.edge_distribution(p0, d, t, 0)
    l1 = A.edge_distribution(p1, d, t, 0)
    row = np.array([1.0 if v == t or g.has_edge(t, int(v)) else 0.0 for v in l0.nodes])
    assert np.allclose(l1.logits.data - l0.logits.data, 2.5 * row)


def test_dead_end_and_greedy_choice():
    x = np.eye(2)
    g = G.Graph(2, [(0, 1)], x, np.array([0, 1]), 2)
    pol = make_policy(g)
    d = G.GraphDelta(g, G.Budgets(1, 3, 5.0))
    d.inject_node(np.zeros(2))
    peer, _ = A.sample_edge(pol, d, 0, 0, nc.RngStream(0), A.GREEDY)
    dist = A.edge_distribution(pol, d, 0, 0)
    assert peer == int(dist.nodes[np.argmax(dist.probs().data)])
    d.wire_edge(0, 0)
    d.wire_edge(0, 1)
    with pytest.raises(A.DeadEndError):
        A.sample_edge(pol, d, 0, 0, nc.RngStream(0))


# ---------------------------------------------------------------- value and reward


def test_value_is_nonnegative_and_near_zero_at_init(world):
    g, split, oracle = world
    pol = make_policy(g)
    for v in split.test[:5]:
        out = oracle.clean_log_probs(int(v))
        y = int(np.argmax(out))
        val = A.predict_value(pol, G.GraphDelta(g), int(v), y, out).item()
        assert 0.0 <= val < 0.5


def test_reward_adds_bonus_on_flip(world):
    g, split, oracle = world
    t = int(split.test[0])
    clean = oracle.clean_log_probs(t)
    y = int(np.argmax(clean))
    before = A.EpisodeState(t, G.GraphDelta(g), y, clean)
    after = A.EpisodeState(t, G.GraphDelta(g), y, clean)
    assert A.compute_reward(oracle, before, after, bonus=1.0) == 0.0 and not after.terminal
    fake = clean.copy()
    fake[y], fake[(y + 1) % len(fake)] = clean[(y + 1) % len(fake)] - 5, 0.0
    flipped = A.EpisodeState(t, G.GraphDelta(g), y, fake)
    r = A.compute_reward(oracle, before, flipped, bonus=0.7)
    assert r == pytest.approx(-fake[y] + clean[y] + 0.7) and flipped.terminal


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 3), st.integers(1, 3))
def test_rewards_telescope(world, seed, bn, be):
    g, split, oracle = world
    pol = make_policy(g, seed=seed % 4)
    t = int(split.test[seed % len(split.test)])
    ep = A.run_episode(pol, oracle, t, G.Budgets(bn, be, 0.5), nc.RngStream(seed), gamma=1.0, bonus=0.0)
    total = sum(tr.reward for tr in ep.transitions)
    assert abs(total - (ep.losses[-1] - ep.losses[0])) <= 1e-9
    assert ep.transitions[0].ret == pytest.approx(total, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 3), st.integers(1, 3), st.sampled_from([A.SAMPLE, A.GREEDY]))
def test_episode_respects_budgets_and_query_bound(world, seed, bn, be, mode):
    g, split, oracle = world
    pol = make_policy(g, seed=seed % 4)
    b = G.Budgets(bn, be, 0.25)
    t = int(split.test[seed % len(split.test)])
    oracle.clean_log_probs(t)
    ep = A.run_episode(pol, oracle, t, b, nc.RngStream(seed), mode=mode)
    assert G.budget_indicator(g, ep.delta, b)
    assert ep.queries <= bn * be
    assert ep.delta.n_injected <= bn
    if ep.success:
        assert np.argmax(oracle.query(t, ep.delta)) != np.argmax(oracle.clean_log_probs(t))
        assert ep.transitions[-1].kind == "edge"
    kinds = [tr.kind for tr in ep.transitions]
    assert kinds.count("node") == ep.delta.n_injected
    assert kinds.count("edge") == len(ep.delta.injected_edges)


def test_episode_skips_clean_misclassified(world):
    g, split, oracle = world
    t = int(split.test[0])
    y = int(np.argmax(oracle.clean_log_probs(t)))
    ep = A.run_episode(make_policy(g), oracle, t, G.Budgets(), nc.RngStream(0), true_label=(y + 1) % g.n_classes)
    assert ep.status == A.SKIPPED and not ep.transitions and ep.queries == 0


def test_episode_does_not_touch_base_graph(world):
    g, split, oracle = world
    before = g.fingerprint()
    A.run_episode(make_policy(g), oracle, int(split.test[1]), G.Budgets(2, 2, 0.5), nc.RngStream(1))
    assert g.fingerprint() == before


# ---------------------------------------------------------------- black-box seal


def rollout_signature(pol, oracle, targets, budgets, mode):
    sig = []
    for i, t in enumerate(targets):
        ep = A.run_episode(pol, oracle, int(t), budgets, nc.RngStream(i), mode=mode)
        sig.append((ep.status, ep.delta.to_record(), [tr.reward for tr in ep.transitions], ep.queries))
    return sig


@pytest.mark.parametrize("mode", [A.SAMPLE, A.GREEDY])
def test_behaviour_invariant_under_table_stub(world, mode):
    g, split, oracle = world
    pol = make_policy(g, seed=2)
    b = G.Budgets(2, 2, 0.25)
    rec = RecordingOracle(oracle)
    targets = split.test[:12]
    live = rollout_signature(pol, rec, targets, b, mode)
    stub = TableOracle(g, oracle.n_classes, rec.table)
    assert rollout_signature(pol, stub, targets, b, mode) == live


def test_attacker_source_has_no_path_to_victim_parameters():
    assert seal_violations() == []
