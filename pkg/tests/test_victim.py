import json
import socket

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodeinject import graph as G
from nodeinject import numcore as nc
from nodeinject import victim as V
from nodeinject.numcore import RngStream


def set_weights(model, w0, b0, w1, b1):
    model.load_state({"w0": np.asarray(w0, float), "b0": np.asarray(b0, float),
                      "w1": np.asarray(w1, float), "b1": np.asarray(b1, float)})


@pytest.fixture(scope="module")
def planted():
    g, split = G.generate_planted_partition(120, 3, 0.15, 0.01, RngStream(2),
                                            G.PlantedPartitionFeatures(n_features=12, p_topic=0.4, p_noise=0.05))
    model, info = V.train_victim(g, split, V.VictimConfig(epochs=80, seed=0))
    return g, split, model, info


def test_isolated_node_zero_weights_uniform():
    g = G.Graph(1, [], np.ones((1, 3)))
    m = V.GcnModel(3, 4, hidden=2)
    set_weights(m, np.zeros((3, 2)), np.zeros(2), np.zeros((2, 4)), np.zeros(4))
    assert np.allclose(V.gcn_forward(m, g, [0]), np.log(0.25))


def test_path_matches_hand_propagation():
    # scalar weights: out = A relu(A x w0 + b0) w1 + b1
    x = np.array([[1.0], [0.0], [2.0], [-1.0]])
    g = G.Graph(4, [(0, 1), (1, 2), (2, 3)], x, feature_space=G.CONTINUOUS)
    m = V.GcnModel(1, 2, hidden=1)
    set_weights(m, [[0.7]], [0.1], [[1.5, -0.5]], [0.2, 0.0])
    a = np.zeros((4, 4))
    deg = np.array([2, 3, 3, 2], float)
    for u, v in [(0, 1), (1, 2), (2, 3)] + [(i, i) for i in range(4)]:
        a[u, v] = a[v, u] = 1 / np.sqrt(deg[u] * deg[v])
    h = np.maximum(a @ (x * 0.7) + 0.1, 0)
    logits = a @ (h * np.array([[1.5, -0.5]])) + np.array([0.2, 0.0])
    ref = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    assert np.max(np.abs(V.gcn_forward(m, g, range(4)) - ref)) <= 1e-10


def test_sgc_is_linear():
    x = np.array([[1.0], [-3.0]])
    g = G.Graph(2, [(0, 1)], x, feature_space=G.CONTINUOUS)
    m = V.GcnModel(1, 2, hidden=1, arch=V.SGC)
    set_weights(m, [[1.0]], [0.0], [[1.0, 0.0]], [0.0, 0.0])
    # both hops are averages; relu would zero the negative mean
    lg = m.logits(G.normalize_adjacency(g, sparse=True), x).data
    assert np.allclose(lg[:, 0], [-1.0, -1.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = 7
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.35]
    x = rng.normal(size=(n, 3))
    m = V.GcnModel(3, 2, hidden=4, seed=seed % 100)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    g = G.Graph(n, edges, x, feature_space=G.CONTINUOUS)
    gp = G.Graph(n, [(inv[u], inv[v]) for u, v in edges], x[perm], feature_space=G.CONTINUOUS)
    out = V.gcn_forward(m, g, range(n))
    outp = V.gcn_forward(m, gp, range(n))
    assert np.allclose(outp[inv], out, atol=1e-12)


def test_unknown_arch():
    with pytest.raises(V.ConfigError):
        V.GcnModel(2, 2, arch="gat")


def test_lr_zero_keeps_init():
    g, split = G.generate_planted_partition(40, 2, 0.3, 0.02, RngStream(0),
                                            G.PlantedPartitionFeatures(n_features=6))
    init = V.GcnModel(6, 2, 16, seed=3).state()
    m, _ = V.train_victim(g, split, V.VictimConfig(epochs=1, lr=0.0, seed=3, weight_decay=0.0))
    for k, v in init.items():
        assert np.array_equal(m.state()[k], v)


def test_train_requires_labels():
    g = G.Graph(3, [], np.zeros((3, 2)))
    with pytest.raises(V.ConfigError):
        V.train_victim(g, G.SplitSpec([0], [1], [2]))
    g = G.Graph(3, [], np.zeros((3, 2)), np.zeros(3, int))
    with pytest.raises(V.ConfigError):
        V.train_victim(g, G.SplitSpec([], [1], [2]))


def test_strong_planted_partition_accuracy():
    accs = []
    for seed in range(20):
        g, split = G.generate_planted_partition(400, 4, 0.05, 0.002, RngStream(seed),
                                                G.PlantedPartitionFeatures(64, 0.3, 0.03))
        _, info = V.train_victim(g, split, V.VictimConfig(seed=seed, epochs=100))
        accs.append(info["metrics"]["test_acc"])
    assert np.median(accs) >= 0.9


def test_training_is_deterministic(planted):
    g, split, model, info = planted
    m2, info2 = V.train_victim(g, split, V.VictimConfig(epochs=80, seed=0))
    assert info2["metrics"] == info["metrics"]
    for k, v in model.state().items():
        assert np.array_equal(m2.state()[k], v)


def test_checkpoint_round_trip(planted, tmp_path):
    g, split, model, _ = planted
    V.save_victim(tmp_path / "v.ckpt", model, V.VictimConfig())
    m2 = V.load_victim(tmp_path / "v.ckpt")
    assert np.array_equal(V.gcn_forward(m2, g, split.test), V.gcn_forward(model, g, split.test))


# ---------------------------------------------------------------- oracle


def test_query_empty_delta_matches_full_forward(planted):
    g, split, model, _ = planted
    o = V.VictimOracle(model, g)
    full = V.gcn_forward(model, g, np.arange(g.n_nodes))
    for v in split.test[:15]:
        assert np.allclose(o.query(int(v)), full[v], atol=1e-12)
        assert np.allclose(o.query(int(v), G.GraphDelta(g)), full[v], atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_local_query_matches_full_graph_with_injection(planted, seed):
    g, split, model, _ = planted
    o = V.VictimOracle(model, g)
    rng = np.random.default_rng(seed)
    d = G.GraphDelta(g, G.Budgets(2, 3, 1.0))
    t = int(rng.integers(g.n_nodes))
    for _ in range(2):
        k = d.inject_node(G.project_discrete((rng.random(12) < 0.3).astype(float), rng.random(12),
                                             G.discrete_cap(g, 1.0)))
        for p in rng.choice(d.n_total, 3, replace=False):
            try:
                d.wire_edge(k, int(p))
            except G.GraphError:
                pass
    if d.degree(0) and not d.has_edge(d.global_id(0), t):
        try:
            d.wire_edge(0, t)
        except G.GraphError:
            pass
    ref = V.gcn_forward(model, d, [t])[0]
    assert np.max(np.abs(o.query(t, d) - ref)) <= 1e-10


def test_query_counter_and_purity(planted):
    g, _, model, _ = planted
    o = V.VictimOracle(model, g)
    a, b = o.query(5), o.query(5)
    assert np.array_equal(a, b) and o.query_count == 2
    with pytest.raises(ValueError):
        a[0] = 0.0


def test_clean_cache_queries_once(planted):
    g, split, model, _ = planted
    o = V.VictimOracle(model, g)
    nodes = split.test[:10]
    p1 = V.clean_prediction_cache(o, nodes)
    q = o.query_count
    p2 = V.clean_prediction_cache(o, nodes)
    assert q == len(nodes) and o.query_count == q
    assert np.array_equal(p1, p2)
    assert all(p == np.argmax(o.query(int(v))) for p, v in zip(p1, nodes))
    o2 = V.VictimOracle(model, g)
    assert np.array_equal(V.clean_prediction_cache(o2, nodes), p1)


def test_query_rejects_foreign_delta(planted):
    g, _, model, _ = planted
    o = V.VictimOracle(model, g)
    other = G.Graph(g.n_nodes, g.edges, g.features, g.labels)
    with pytest.raises(ValueError):
        o.query(0, G.GraphDelta(other))
    with pytest.raises(IndexError):
        o.query(g.n_nodes)


def six_node_flip_fixture():
    # target 0 (class 0) hangs off a class-0 chain; feature 1 votes 3x for class 1
    x = np.array([[1, 0], [1, 0], [1, 0], [0, 1], [0, 1], [0, 1]], float)
    g = G.Graph(6, [(0, 1), (1, 2), (3, 4), (4, 5)], x, np.array([0, 0, 0, 1, 1, 1]), 2)
    m = V.GcnModel(2, 2, hidden=2, seed=0)
    set_weights(m, np.diag([1.0, 3.0]), np.zeros(2), 4 * np.eye(2), np.zeros(2))
    return g, m


def test_opposite_class_injection_flips_degree_one_target():
    g, m = six_node_flip_fixture()
    o = V.VictimOracle(m, g)
    assert np.argmax(o.query(0)) == 0
    flipped = []
    for feats in ([0, 1], [1, 0], [1, 1], [0, 0]):
        for peer in range(g.n_nodes):
            d = G.GraphDelta(g, G.Budgets(1, 1, 1.0))
            d.inject_node(np.array(feats, float))
            d.wire_edge(0, peer)
            if np.argmax(o.query(0, d)) != 0:
                flipped.append((tuple(feats), peer))
    assert flipped == [((0, 1), 0)]


def test_model_is_not_reachable_from_oracle(planted):
    g, _, model, _ = planted
    o = V.VictimOracle(model, g)
    public = [a for a in dir(o) if not a.startswith("__")]
    assert all(not isinstance(getattr(o, a), V.GcnModel) for a in public if not a.startswith("_VictimOracle"))
    assert not any(isinstance(v, V.GcnModel) for k, v in vars(o).items() if not k.startswith("_VictimOracle"))


def test_export_hidden_is_sealed(planted):
    g, _, model, _ = planted
    o = V.VictimOracle(model, g)
    with pytest.raises(V.SealError):
        o.export_hidden([0])
    o.enable_diagnostics()
    assert o.export_hidden([0, 1]).shape == (2, model.hidden)
    with o.attack_session():
        with pytest.raises(V.SealError):
            o.export_hidden([0])


def test_oracle_server_round_trip(planted):
    g, _, model, _ = planted
    o = V.VictimOracle(model, g)
    server = V.serve_oracle(o)
    try:
        host, port = server.server_address[:2]
        x = np.zeros(g.n_features)
        x[:3] = 1
        req = {"target": 4, "inject": [{"features": x.tolist(), "edges": [4]}]}
        with socket.create_connection((host, port), timeout=5) as s:
            fh = s.makefile("rw", encoding="utf-8")
            fh.write(json.dumps(req) + "\n" + json.dumps({"target": "x"}) + "\n")
            fh.flush()
            ok = json.loads(fh.readline())
            bad = json.loads(fh.readline())
    finally:
        server.shutdown()
        server.server_close()
    d = G.GraphDelta(g)
    d.inject_node(x)
    d.wire_edge(0, 4)
    assert np.allclose(ok["log_probs"], V.gcn_forward(model, d, [4])[0], atol=1e-12)
    assert "error" in bad


def test_dimension_mismatch():
    g = G.Graph(2, [], np.zeros((2, 3)))
    with pytest.raises(nc.DimensionError):
        V.VictimOracle(V.GcnModel(4, 2), g)
