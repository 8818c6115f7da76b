"""Advantage actor-critic training for the attack policies."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import numcore as nc
from .attacker import (GREEDY, SAMPLE, AttackConfigError, AttackerPolicies, EpisodeResult,
                       edge_distribution, node_log_prob, predict_value, run_episode)
from .graph import Budgets, GraphDelta, SplitSpec
from .victim import ConfigError, VictimOracle

log = logging.getLogger(__name__)


class ConsistencyError(RuntimeError):
    """A stored action cannot be re-scored under its stored state."""


@dataclass
class Transition:
    target: int
    kind: str  # "node" or "edge"
    delta: GraphDelta  # state before the action
    action: object  # feature vector or peer id
    injected: int
    oracle_out: np.ndarray  # victim output at the state
    clean_label: int
    reward: float
    ret: float
    episode_id: int = 0
    beta_f: float = 0.0


def compute_returns(rewards, gamma: float) -> list[float]:
    """Discounted suffix sums R_t = sum_j gamma^(j-t) r_j."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = float(rewards[t]) + gamma * acc
        out[t] = acc
    return out


class MemoryBuffer:
    """Holds exactly one rollout batch; emptied after every update."""

    def __init__(self):
        self.transitions: list[Transition] = []
        self.feature_losses: list[nc.Tensor] = []

    def add_episode(self, ep: EpisodeResult) -> None:
        self.transitions.extend(ep.transitions)
        self.feature_losses.extend(ep.feature_losses)

    def clear(self) -> None:
        self.transitions.clear()
        self.feature_losses.clear()

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass
class TrainConfig:
    gamma: float = 0.95
    lr: float = 1e-4
    tau: float = 1.0
    hidden: int = 64
    episodes_per_update: int = 16
    max_epochs: int = 50
    patience: int = 3
    bonus: float = 1.0
    episodes_per_target: int = 1
    feature_weight: float = 1.0  # multiplier on every L_f term
    entropy_weight: float = 0.0  # optional bonus on the edge sampler's entropy (0 = off)
    eval_mode: str = GREEDY  # validation rollouts: "greedy" or "sample"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


def action_log_prob(t: Transition, policies: AttackerPolicies) -> nc.Tensor:
    """Re-score the stored action under the stored state (differentiable)."""
    if t.kind == "node":
        return node_log_prob(policies, t.delta, t.target, t.action, t.beta_f)
    dist = edge_distribution(policies, t.delta, t.target, t.injected)
    try:
        return dist.log_prob(int(t.action))
    except (AttackConfigError, IndexError) as exc:
        raise ConsistencyError(str(exc)) from exc


def value_of(t: Transition, policies: AttackerPolicies) -> nc.Tensor:
    return predict_value(policies, t.delta, t.target, t.clean_label, t.oracle_out)


def policy_loss(t: Transition, policies: AttackerPolicies, oracle: VictimOracle | None = None,
                value: float | None = None) -> nc.Tensor:
    """-log p(a|s) * (R - V(s)) with the advantage held constant."""
    v = value if value is not None else value_of(t, policies).item()
    return nc.scale(action_log_prob(t, policies), -(t.ret - v))


def value_loss(t: Transition, policies: AttackerPolicies, oracle: VictimOracle | None = None,
               value: nc.Tensor | None = None) -> nc.Tensor:
    """|V(s) - R|; subgradient 0 at equality."""
    v = value if value is not None else value_of(t, policies)
    return nc.absolute(nc.sub(v, t.ret))


def total_loss(buffer: MemoryBuffer, policies: AttackerPolicies, oracle: VictimOracle | None = None,
               feature_losses=None, feature_weight: float = 1.0, entropy_weight: float = 0.0) -> nc.Tensor:
    """Sum of value and policy losses over the buffer plus every feature regularizer."""
    if len(buffer) == 0:
        raise nc.StateError("memory buffer is empty")
    terms = []
    for t in buffer.transitions:
        v = value_of(t, policies)
        terms.append(value_loss(t, policies, value=v))
        terms.append(policy_loss(t, policies, value=v.item()))
        if entropy_weight and t.kind == "edge":
            dist = edge_distribution(policies, t.delta, t.target, t.injected)
            terms.append(nc.scale(dist.entropy(), -entropy_weight))
    fl = buffer.feature_losses if feature_losses is None else feature_losses
    terms.extend(fl if feature_weight == 1.0 else [nc.scale(f, feature_weight) for f in fl])
    total = terms[0]
    for term in terms[1:]:
        total = nc.add(total, term)
    return total


# ---------------------------------------------------------------- training loop


def default_density(g) -> float | None:
    """Mean fraction of active bits in clean discrete rows (None for continuous graphs)."""
    if g.feature_space != "discrete":
        return None
    return g.feature_stats().mean_row_l1 / g.n_features


def correctly_classified(oracle: VictimOracle, nodes) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64)
    labels = oracle.graph.labels
    if labels is None:
        return nodes
    pred = oracle.clean_prediction(nodes) if nodes.size else np.zeros(0, dtype=int)
    return nodes[pred == labels[nodes]]


def attack_success_rate(policies: AttackerPolicies, oracle: VictimOracle, targets, budgets: Budgets,
                        rng: nc.RngStream, config: TrainConfig, mode: str | None = None) -> float:
    if len(targets) == 0:
        return float("nan")
    mode = mode or config.eval_mode
    wins = 0
    for i, v in enumerate(targets):
        ep = run_episode(policies, oracle, int(v), budgets, rng.spawn(i), config.gamma,
                         config.bonus, mode)
        wins += ep.success
    return wins / len(targets)


@dataclass
class TrainState:
    epoch: int = 0
    best_rate: float = -1.0
    best_epoch: int = 0
    since_best: int = 0
    best_params: dict = field(default_factory=dict)
    log: list = field(default_factory=list)


def train_attacker(config: TrainConfig, oracle: VictimOracle, split: SplitSpec, budgets: Budgets,
                   policies: AttackerPolicies | None = None, state: TrainState | None = None,
                   optimizer: nc.Adam | None = None, val_targets=None, train_targets=None,
                   on_epoch=None) -> tuple[AttackerPolicies, TrainState]:
    """Roll out, update, and early-stop on validation attack success.

    Returns the best-validation policies and the training state (whose
    ``log`` holds one row per epoch; epoch 0 is the untrained policy).
    """
    g = oracle.graph
    train = correctly_classified(oracle, split.train if train_targets is None else train_targets)
    if train.size == 0:
        raise ConfigError("no correctly classified training targets")
    val = correctly_classified(oracle, split.val if val_targets is None else val_targets)
    if policies is None:
        from .attacker import PolicyConfig
        policies = AttackerPolicies(g.n_features, g.n_classes,
                                    PolicyConfig(hidden=config.hidden, tau=config.tau,
                                                 feature_space=g.feature_space, seed=config.seed,
                                                 init_density=default_density(g)))
    opt = optimizer or nc.Adam(policies.params, lr=config.lr)
    st = state or TrainState()
    root = nc.RngStream(config.seed)
    buffer = MemoryBuffer()

    if st.epoch == 0:
        q0 = oracle.query_count
        rate = attack_success_rate(policies, oracle, val, budgets, root.spawn(10_000), config)
        st.best_rate, st.best_params = rate, policies.state()
        st.log.append({"epoch": 0, "success_rate_val": rate, "success_rate_train": float("nan"),
                       "mean_return": float("nan"), "mean_Lf": float("nan"),
                       "victim_queries": oracle.query_count - q0, "seconds": 0.0})
        if on_epoch:
            on_epoch(st, policies, opt)

    while st.epoch < config.max_epochs and st.since_best < config.patience:
        st.epoch += 1
        t0, q0 = time.time(), oracle.query_count
        rng = root.spawn(st.epoch)
        order = np.repeat(train, config.episodes_per_target)[rng.permutation(train.size * config.episodes_per_target)]
        returns, lfs, wins = [], [], 0
        for b in range(0, order.size, config.episodes_per_update):
            for j, v in enumerate(order[b:b + config.episodes_per_update]):
                ep = run_episode(policies, oracle, int(v), budgets, rng.spawn(b + j), config.gamma,
                                 config.bonus, SAMPLE, episode_id=b + j)
                buffer.add_episode(ep)
                wins += ep.success
                if ep.transitions:
                    returns.append(ep.transitions[0].ret)
                lfs.append(ep.feature_loss_sum)
            if len(buffer):
                try:
                    loss = total_loss(buffer, policies, feature_weight=config.feature_weight,
                                      entropy_weight=config.entropy_weight)
                    nc.backward(loss)
                    opt.step()
                except nc.NonFiniteError as exc:
                    log.warning("update skipped: %s", exc)
                    opt.zero_grad()
            buffer.clear()
        rate = attack_success_rate(policies, oracle, val, budgets, root.spawn(10_000), config)
        if rate > st.best_rate:
            st.best_rate, st.best_epoch, st.since_best = rate, st.epoch, 0
            st.best_params = policies.state()
        else:
            st.since_best += 1
        st.log.append({
            "epoch": st.epoch, "success_rate_val": rate, "success_rate_train": wins / order.size,
            "mean_return": float(np.mean(returns)) if returns else 0.0,
            "mean_Lf": float(np.mean(lfs)) if lfs else 0.0,
            "victim_queries": oracle.query_count - q0, "seconds": round(time.time() - t0, 3),
        })
        log.info("epoch %d: val success %.3f (best %.3f @ %d)", st.epoch, rate, st.best_rate, st.best_epoch)
        if on_epoch:
            on_epoch(st, policies, opt)
    best = AttackerPolicies(policies.n_features, policies.n_classes, policies.config)
    best.load_state(st.best_params)
    return best, st


LOG_FIELDS = ["epoch", "success_rate_val", "success_rate_train", "mean_return", "mean_Lf",
              "victim_queries", "seconds"]


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def save_training_state(path, policies: AttackerPolicies, opt: nc.Adam, st: TrainState,
                        config: TrainConfig, budgets: Budgets) -> None:
    """Everything needed to resume: live params, Adam moments, best snapshot, log."""
    tensors = {f"live/{k}": v for k, v in policies.state().items()}
    tensors.update({f"best/{k}": v for k, v in st.best_params.items()})
    opt_state = opt.state_dict()
    for i, (m, v) in enumerate(zip(opt_state["m"], opt_state["v"])):
        tensors[f"adam/m{i}"] = m
        tensors[f"adam/v{i}"] = v
    meta = {
        "policy": asdict(policies.config), "n_features": policies.n_features,
        "n_classes": policies.n_classes, "train": asdict(config), "budgets": asdict(budgets),
        "adam_t": opt_state["t"], "epoch": st.epoch, "best_rate": st.best_rate,
        "best_epoch": st.best_epoch, "since_best": st.since_best, "log": st.log,
    }
    checkpoint.save(path, "attacker-train", meta, tensors)


def load_training_state(path):
    from .attacker import PolicyConfig

    meta, tensors = checkpoint.load(path, "attacker-train")
    pol = AttackerPolicies(meta["n_features"], meta["n_classes"], PolicyConfig(**meta["policy"]))
    pol.load_state({k[5:]: v for k, v in tensors.items() if k.startswith("live/")})
    cfg = TrainConfig(**meta["train"])
    opt = nc.Adam(pol.params, lr=cfg.lr)
    n = len(pol.params)
    opt.load_state_dict({"t": meta["adam_t"], "m": [tensors[f"adam/m{i}"] for i in range(n)],
                         "v": [tensors[f"adam/v{i}"] for i in range(n)]})
    st = TrainState(meta["epoch"], meta["best_rate"], meta["best_epoch"], meta["since_best"],
                    {k[5:]: v for k, v in tensors.items() if k.startswith("best/")}, meta["log"])
    return pol, opt, st, cfg, Budgets(**meta["budgets"])
