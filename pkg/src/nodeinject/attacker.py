"""Attack policies (node generator, edge sampler, value predictor) and the attack MDP.

An episode against one target alternates a node-generation action with up
to ``n_edges`` wiring actions per injected node, for up to ``n_nodes``
injected nodes.  Only wiring actions carry a reward: the change in the
victim's loss on the target's clean prediction, plus a bonus when the
prediction flips (which also ends the episode).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import numcore as nc
from .graph import (CONTINUOUS, DISCRETE, Budgets, Graph, GraphDelta, discrete_cap,
                    k_hop_subgraph, kl_shrink_factor, normalize_adjacency, project_discrete)
from .victim import VictimOracle

log = logging.getLogger(__name__)

SAMPLE = "sample"
GREEDY = "greedy"


class AttackConfigError(ValueError):
    pass


class DeadEndError(RuntimeError):
    """Every wiring candidate is masked."""


@dataclass
class PolicyConfig:
    hidden: int = 64
    k: int = 2
    tau: float = 1.0
    feature_space: str = DISCRETE
    readout: str = "sum"  # "sum" or "mean"
    adjacency_bias: float = 1.0
    full_graph: bool = False
    init_density: float | None = None  # starting P(bit) for discrete generators
    value_init_scale: float = 5.0  # victim-output block of the value head starts as scale * I
    seed: int = 0


class AttackerPolicies:
    """Parameters of the three sub-networks; each owns an independent GCL stack."""

    def __init__(self, n_features: int, n_classes: int, config: PolicyConfig | None = None):
        self.config = cfg = config or PolicyConfig()
        if cfg.feature_space not in (DISCRETE, CONTINUOUS):
            raise AttackConfigError(f"unknown feature space {cfg.feature_space!r}")
        if cfg.readout not in ("sum", "mean"):
            raise AttackConfigError(f"unknown readout {cfg.readout!r}")
        self.n_features, self.n_classes = n_features, n_classes
        gen = nc.RngStream(cfg.seed).generator
        d, F, C = cfg.hidden, n_features, n_classes

        def glorot(*shape):
            fan_in, fan_out = shape[0], shape[-1] if len(shape) > 1 else 1
            r = np.sqrt(6.0 / (fan_in + fan_out))
            return gen.uniform(-r, r, size=shape)

        def stack(prefix):
            dims = [F] + [d] * cfg.k
            return [nc.parameter(glorot(dims[i], dims[i + 1]), f"{prefix}.gcl{i}") for i in range(cfg.k)]

        self.gn_layers = stack("gn")
        self.gn_head = nc.parameter(glorot(2 * d, F), "gn.head")
        bias0 = 0.0
        if cfg.init_density is not None:
            p = min(max(cfg.init_density, 1e-4), 1 - 1e-4)
            bias0 = np.log(p / (1 - p))
        self.gn_bias = nc.parameter(np.full(F, bias0), "gn.bias")
        self.gn_mu = self.gn_sigma = None
        if cfg.feature_space == CONTINUOUS:
            self.gn_mu = nc.parameter(glorot(F, F), "gn.mu")
            self.gn_mu_bias = nc.parameter(np.zeros(F), "gn.mu_bias")
            self.gn_sigma = nc.parameter(glorot(F, F) * 0.1, "gn.sigma")
            self.gn_sigma_bias = nc.parameter(np.zeros(F), "gn.sigma_bias")
        self.ge_layers = stack("ge")
        self.ge_score = nc.parameter(glorot(d + F), "ge.score")
        # learned extra logit on the target itself; starts at 0 (pure adjacency-row bias)
        self.ge_target = nc.parameter(np.zeros(1), "ge.target")
        self.gv_layers = stack("gv")
        # Start near V = 0: small returns are the common case, and a large
        # initial baseline drives every advantage strongly negative.
        head = np.zeros((d + C, C))
        head[d:] = cfg.value_init_scale * np.eye(C)
        self.gv_head = nc.parameter(head, "gv.head")
        self.gv_bias = nc.parameter(np.zeros(C), "gv.bias")

    @property
    def generator_params(self) -> list[nc.Tensor]:
        ps = self.gn_layers + [self.gn_head, self.gn_bias]
        if self.gn_mu is not None:
            ps += [self.gn_mu, self.gn_mu_bias, self.gn_sigma, self.gn_sigma_bias]
        return ps

    @property
    def sampler_params(self) -> list[nc.Tensor]:
        return self.ge_layers + [self.ge_score, self.ge_target]

    @property
    def value_params(self) -> list[nc.Tensor]:
        return self.gv_layers + [self.gv_head, self.gv_bias]

    @property
    def params(self) -> list[nc.Tensor]:
        return self.generator_params + self.sampler_params + self.value_params

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if state[p.name].shape != p.shape:
                raise AttackConfigError(f"shape mismatch for {p.name}")
            p.data = np.array(state[p.name], dtype=np.float64)
            p.zero_grad()

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"policy": asdict(self.config), "n_features": self.n_features,
                "n_classes": self.n_classes, "extra": extra or {}}
        checkpoint.save(path, "attacker", meta, self.state())

    @classmethod
    def load(cls, path) -> tuple["AttackerPolicies", dict]:
        meta, tensors = checkpoint.load(path, "attacker")
        pol = cls(meta["n_features"], meta["n_classes"], PolicyConfig(**meta["policy"]))
        pol.load_state(tensors)
        return pol, meta.get("extra", {})


# ---------------------------------------------------------------- shared pieces


@dataclass
class LocalView:
    """The target's K-hop ball in the current graph, ready for message passing."""

    nodes: np.ndarray
    adj: object
    x: np.ndarray
    center: int


def local_view(policies: AttackerPolicies, delta: GraphDelta, target: int, extra=()) -> LocalView:
    if policies.config.full_graph:
        nodes = np.arange(delta.n_total)
    else:
        nodes = k_hop_subgraph(delta, target, policies.config.k).nodes
    if len(extra):
        missing = [v for v in extra if v not in set(nodes.tolist())]
        nodes = np.concatenate([nodes, np.asarray(missing, dtype=np.int64)])
    adj = normalize_adjacency(delta, nodes, sparse=True)
    center = int(np.flatnonzero(nodes == target)[0])
    return LocalView(nodes, adj, delta.feature_rows(nodes), center)


def propagate(layers: list[nc.Tensor], view: LocalView) -> nc.Tensor:
    h = nc.Tensor(view.x)
    for w in layers:
        h = nc.relu(nc.spmm(view.adj, h @ w))
    return h


@dataclass
class NodeAction:
    features: np.ndarray
    log_prob: nc.Tensor
    feature_loss: nc.Tensor
    params: tuple[np.ndarray, np.ndarray] | None = None
    sample: np.ndarray | None = None  # raw draw before the density cap (discrete only)


def _readout(policies: AttackerPolicies, h: nc.Tensor) -> nc.Tensor:
    r = nc.column_sum_readout(h)
    return nc.scale(r, 1.0 / h.shape[0]) if policies.config.readout == "mean" else r


def _generator_head(policies: AttackerPolicies, delta: GraphDelta, target: int) -> nc.Tensor:
    view = local_view(policies, delta, target)
    h = propagate(policies.gn_layers, view)
    summary = nc.concat([_readout(policies, h), nc.take(h, view.center)])
    return nc.add(summary @ policies.gn_head, policies.gn_bias)


def _gaussian_params(policies: AttackerPolicies, g: Graph, z: nc.Tensor, beta_f: float | None):
    mu = nc.add(z @ policies.gn_mu, policies.gn_mu_bias)
    sigma = nc.positive(nc.add(z @ policies.gn_sigma, policies.gn_sigma_bias))
    if beta_f is None:
        return mu, sigma
    st = g.feature_stats()
    t = kl_shrink_factor(mu.data, sigma.data, st, beta_f)
    if t < 1.0:
        mu = nc.add(nc.scale(mu, t), (1.0 - t) * st.mu)
        log_sigma = nc.add(nc.scale(nc.log(sigma), t), (1.0 - t) * np.log(st.sigma))
        sigma = nc.exp(log_sigma)
    return mu, sigma


def discrete_feature_loss(x, mean_row_l1: float, beta_f: float) -> nc.Tensor:
    """(|x|_1 / mean_row_L1 - (1 + beta_f))^2: zero at the allowed density."""
    ratio = nc.scale(nc.sum(x), 1.0 / mean_row_l1)
    return nc.square(nc.sub(ratio, 1.0 + beta_f))


def continuous_feature_loss(x, mu, sigma, stats, beta_f: float) -> nc.Tensor:
    """Pointwise p log(p/q) of the injected value under generator vs clean Gaussian.

    Summed over dimensions, shifted by ``beta_f`` and floored at zero.
    """
    log_p = nc.gaussian_log_density(x, mu, sigma)
    log_q = nc.gaussian_log_density(x, stats.mu, stats.sigma)
    total = nc.sub(nc.sum(nc.mul(nc.exp(log_p), nc.sub(log_p, log_q))), beta_f)
    return nc.relu(total)


def generate_node(policies: AttackerPolicies, delta: GraphDelta, target: int, rng: nc.RngStream,
                  beta_f: float = 0.0, mode: str = SAMPLE, enforce_budget: bool = True) -> NodeAction:
    """Draw an injected node's features from the generator.

    Discrete graphs: binary straight-through sample with P(bit) = sigmoid(head),
    trimmed to the density cap.  Continuous graphs: Gaussian with learned mean
    and scale, shrunk toward the clean feature statistics until the KL budget
    holds.  Returns the realized features, their log-probability and the
    feature regularizer.
    """
    g = delta.base
    if g.feature_space != policies.config.feature_space:
        raise AttackConfigError(f"policy built for {policies.config.feature_space} features, "
                                f"graph is {g.feature_space}")
    pre = _generator_head(policies, delta, target)
    if g.feature_space == DISCRETE:
        z = nc.sigmoid(pre)
        if mode == GREEDY:
            hard = (z.data >= 0.5).astype(np.float64)
            x = nc.straight_through(hard, z)
        else:
            x = nc.gumbel_bernoulli_st(pre, policies.config.tau, rng)
        # score and regularise the raw draw; the capped vector is a function of it,
        # and its density can never exceed the target, so L_f on it only pushes up
        raw = x.data.copy()
        log_prob = bernoulli_log_prob(pre, raw)
        feature_loss = discrete_feature_loss(x, g.feature_stats().mean_row_l1, beta_f)
        if enforce_budget:
            hard = project_discrete(x.data, z.data, discrete_cap(g, beta_f))
            if not np.array_equal(hard, x.data):
                x = nc.straight_through(hard, x)
        return NodeAction(x.data.copy(), log_prob, feature_loss, sample=raw)

    z = nc.sigmoid(pre)
    mu, sigma = _gaussian_params(policies, g, z, beta_f if enforce_budget else None)
    if mode == GREEDY:
        x = mu
    else:
        x = nc.gaussian_sample(mu, sigma, rng)
    log_prob = nc.sum(nc.gaussian_log_density(nc.detach(x), mu, sigma))
    feature_loss = continuous_feature_loss(x, mu, sigma, g.feature_stats(), beta_f)
    return NodeAction(x.data.copy(), log_prob, feature_loss, (mu.data.copy(), sigma.data.copy()))


def bernoulli_log_prob(logits: nc.Tensor, x: np.ndarray) -> nc.Tensor:
    """sum_i x_i log sigmoid(l_i) + (1 - x_i) log sigmoid(-l_i)."""
    on = nc.mul(nc.log_sigmoid(logits), x)
    off = nc.mul(nc.log_sigmoid(nc.neg(logits)), 1.0 - x)
    return nc.sum(nc.add(on, off))


def node_log_prob(policies: AttackerPolicies, delta: GraphDelta, target: int, x: np.ndarray,
                  beta_f: float = 0.0, enforce_budget: bool = True) -> nc.Tensor:
    """Differentiable log-probability of features ``x`` at state ``delta``."""
    pre = _generator_head(policies, delta, target)
    if delta.base.feature_space == DISCRETE:
        return bernoulli_log_prob(pre, np.asarray(x))
    mu, sigma = _gaussian_params(policies, delta.base, nc.sigmoid(pre),
                                 beta_f if enforce_budget else None)
    return nc.sum(nc.gaussian_log_density(np.asarray(x), mu, sigma))


# ---------------------------------------------------------------- edge sampler


@dataclass
class EdgeDistribution:
    nodes: np.ndarray  # global ids of the scored rows
    logits: nc.Tensor
    mask: np.ndarray  # True = legal peer

    def probs(self) -> nc.Tensor:
        return nc.softmax(self.logits, self.mask)

    def log_prob(self, peer: int) -> nc.Tensor:
        pos = int(np.flatnonzero(self.nodes == peer)[0])
        if not self.mask[pos]:
            raise AttackConfigError(f"peer {peer} is not a legal candidate")
        legal = np.flatnonzero(self.mask)
        return nc.take(nc.log_softmax(nc.take(self.logits, legal)), int(np.searchsorted(legal, pos)))

    def entropy(self) -> nc.Tensor:
        lp = nc.log_softmax(nc.take(self.logits, np.flatnonzero(self.mask)))
        return nc.neg(nc.sum(nc.mul(nc.exp(lp), lp)))


def edge_distribution(policies: AttackerPolicies, delta: GraphDelta, target: int, k: int) -> EdgeDistribution:
    """Scores for wiring injected node ``k``: Z_e w_e + bias * A[target] over the view."""
    others = [delta.global_id(j) for j in range(delta.n_injected) if j != k]
    view = local_view(policies, delta, target, extra=others)
    h = propagate(policies.ge_layers, view)
    x_a = delta.injected_features[k]
    z = nc.concat([h, nc.repeat_rows(nc.Tensor(x_a), view.nodes.size)], axis=1)
    a_row = np.array([1.0 if (v == target or delta.has_edge(target, int(v))) else 0.0
                      for v in view.nodes])
    logits = nc.add(z @ policies.ge_score, policies.config.adjacency_bias * a_row)
    is_target = (view.nodes == target).astype(np.float64)
    logits = nc.add(logits, nc.matmul(is_target[:, None], policies.ge_target))
    return EdgeDistribution(view.nodes, logits, legal_mask(delta, k, view.nodes))


def legal_mask(delta: GraphDelta, k: int, nodes) -> np.ndarray:
    """Which of ``nodes`` injected node ``k`` may still be wired to."""
    u = delta.global_id(k)
    budget = delta.budgets.n_edges if delta.budgets is not None else np.inf
    return np.array([
        v != u and not delta.has_edge(u, int(v))
        and not (v >= delta.base.n_nodes and delta.full_degree(int(v)) >= budget)
        for v in nodes
    ], dtype=bool)


def candidate_peers(delta: GraphDelta, target: int, k: int, hops: int = 2,
                    full_graph: bool = False) -> np.ndarray:
    """Legal peers for injected node ``k``: the target's view plus other injected nodes."""
    if full_graph:
        nodes = np.arange(delta.n_total)
    else:
        nodes = k_hop_subgraph(delta, target, hops).nodes
        others = [delta.global_id(j) for j in range(delta.n_injected) if j != k]
        nodes = np.concatenate([nodes, np.setdiff1d(np.asarray(others, dtype=np.int64), nodes)])
    return nodes[legal_mask(delta, k, nodes)]


def sample_edge(policies: AttackerPolicies, delta: GraphDelta, target: int, k: int,
                rng: nc.RngStream, mode: str = SAMPLE) -> tuple[int, nc.Tensor]:
    """Choose a peer for injected node ``k``; returns (peer id, log-probability)."""
    dist = edge_distribution(policies, delta, target, k)
    if not dist.mask.any():
        raise DeadEndError(f"no legal peer for injected node {k} around target {target}")
    p = dist.probs().data
    idx = int(np.argmax(p)) if mode == GREEDY else rng.categorical(p)
    peer = int(dist.nodes[idx])
    return peer, dist.log_prob(peer)


# ---------------------------------------------------------------- value + reward


def predict_value(policies: AttackerPolicies, delta: GraphDelta, target: int, clean_label: int,
                  oracle_out: np.ndarray) -> nc.Tensor:
    """NLL of the clean label under head(h_target || victim output): a value estimate >= 0."""
    view = local_view(policies, delta, target)
    h = propagate(policies.gv_layers, view)
    feat = nc.concat([nc.take(h, view.center), nc.Tensor(oracle_out)])
    return nc.cross_entropy(nc.add(feat @ policies.gv_head, policies.gv_bias), clean_label)


@dataclass
class EpisodeState:
    target: int
    delta: GraphDelta
    clean_label: int
    log_probs: np.ndarray | None = None
    step: int = 0
    terminal: bool = False

    def resolve(self, oracle: VictimOracle) -> np.ndarray:
        if self.log_probs is None:
            self.log_probs = oracle.query(self.target, self.delta)
        return self.log_probs

    @property
    def loss(self) -> float:
        return float(-self.log_probs[self.clean_label])

    @property
    def flipped(self) -> bool:
        return int(np.argmax(self.log_probs)) != self.clean_label


def compute_reward(oracle: VictimOracle, before: EpisodeState, after: EpisodeState,
                   bonus: float = 1.0) -> float:
    """Loss change on the clean prediction; adds ``bonus`` and marks terminal on a flip."""
    if before.target != after.target:
        raise ValueError("states refer to different targets")
    before.resolve(oracle)
    after.resolve(oracle)
    r = after.loss - before.loss
    if after.flipped:
        after.terminal = True
        r += bonus
    return r


# ---------------------------------------------------------------- episodes

SKIPPED = "skipped"
FLIPPED = "flipped"
EXHAUSTED = "exhausted"
DEAD_END = "dead_end"
ABORTED = "aborted"


@dataclass
class EpisodeResult:
    target: int
    status: str
    transitions: list = field(default_factory=list)
    delta: GraphDelta | None = None
    losses: list[float] = field(default_factory=list)
    feature_losses: list[nc.Tensor] = field(default_factory=list)
    queries: int = 0

    @property
    def success(self) -> bool:
        return self.status == FLIPPED

    @property
    def feature_loss_sum(self) -> float:
        return float(np.sum([f.item() for f in self.feature_losses])) if self.feature_losses else 0.0


def run_episode(policies: AttackerPolicies, oracle: VictimOracle, target: int, budgets: Budgets,
                rng: nc.RngStream, gamma: float = 0.95, bonus: float = 1.0, mode: str = SAMPLE,
                true_label: int | None = None, episode_id: int = 0) -> EpisodeResult:
    """Attack one target until its prediction flips or the budgets run out."""
    from .a2c import Transition, compute_returns

    g = oracle.graph
    q0 = oracle.query_count
    clean = oracle.clean_log_probs(target)
    y = int(np.argmax(clean))
    if true_label is not None and y != int(true_label):
        return EpisodeResult(target, SKIPPED, queries=oracle.query_count - q0)
    state = EpisodeState(target, GraphDelta(g, budgets), y, clean)
    res = EpisodeResult(target, EXHAUSTED, losses=[state.loss])
    steps = []  # (kind, snapshot, action, k, oracle_out, reward)
    try:
        with oracle.attack_session():
            for _ in range(budgets.n_nodes):
                snap = state.delta.copy()
                act = generate_node(policies, snap, target, rng, budgets.feature_shift, mode)
                k = state.delta.inject_node(act.features, act.params)
                res.feature_losses.append(act.feature_loss)
                scored = act.sample if act.sample is not None else act.features
                steps.append(("node", snap, scored, k, state.log_probs, 0.0))
                for _ in range(budgets.n_edges):
                    snap = state.delta.copy()
                    try:
                        peer, _ = sample_edge(policies, snap, target, k, rng, mode)
                    except DeadEndError:
                        res.status = DEAD_END
                        break
                    nxt = state.delta.copy()
                    nxt.wire_edge(k, peer)
                    after = EpisodeState(target, nxt, y, step=state.step + 1)
                    r = compute_reward(oracle, state, after, bonus)
                    steps.append(("edge", snap, peer, k, state.log_probs, r))
                    state = after
                    res.losses.append(state.loss)
                    if state.terminal:
                        res.status = FLIPPED
                        break
                if res.status in (FLIPPED, DEAD_END):
                    break
    except nc.NonFiniteError as exc:
        log.warning("episode on target %d aborted: %s", target, exc)
        res.status = ABORTED
        res.feature_losses = []
        steps = []
    returns = compute_returns([s[5] for s in steps], gamma)
    res.transitions = [
        Transition(target=target, kind=kind, delta=snap, action=action, injected=k,
                   oracle_out=out, clean_label=y, reward=r, ret=R, episode_id=episode_id,
                   beta_f=budgets.feature_shift)
        for (kind, snap, action, k, out, r), R in zip(steps, returns)
    ]
    res.delta = state.delta
    res.queries = oracle.query_count - q0
    return res
