"""Experiment plumbing: configs, evaluation reports, baselines, sweeps and exports.

Everything a run needs lives in one JSON document (see ``ExperimentConfig``);
a run is reproducible from that document plus the seed list.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import a2c
from . import numcore as nc
from .attacker import (DEAD_END, EXHAUSTED, FLIPPED, GREEDY, AttackerPolicies, PolicyConfig,
                       candidate_peers, run_episode)
from .graph import (CONTINUOUS, DISCRETE, Budgets, Graph, GraphDelta, PlantedPartitionFeatures,
                    SplitSpec, budget_indicator, discrete_cap, generate_planted_partition,
                    load_citation_bundle, load_native_bundle, project_discrete)
from .victim import ConfigError, GcnModel, VictimConfig, VictimOracle, gcn_forward, train_victim

log = logging.getLogger(__name__)

DATA_ENV = "NODEINJECT_DATA"
THREADS_ENV = "NODEINJECT_THREADS"
CLEAN_MISS = "clean_miss"


# ---------------------------------------------------------------- configuration


@dataclass
class DatasetSpec:
    """Where the graph comes from.

    kind = "planted": synthetic planted partition built from the fields below.
    kind = "citation": ``<name>.content`` / ``<name>.cites`` pair in ``path``.
    kind = "native": directory written by ``save_native_bundle``.
    Relative paths are looked up under ``$NODEINJECT_DATA`` when not found.
    """

    kind: str = "planted"
    path: str = ""
    name: str = "cora"
    n_nodes: int = 400
    n_classes: int = 4
    p_in: float = 0.012
    p_out: float = 0.003
    feature_space: str = DISCRETE
    n_features: int = 64
    p_topic: float = 0.25
    p_noise: float = 0.05
    mean_scale: float = 1.0
    noise: float = 1.0
    split_fractions: tuple = (0.2, 0.2, 0.6)
    train_per_class: int = 20
    n_val: int = 500
    n_test: int = 1000
    seed: int = 0


@dataclass
class AttackSpec:
    train: a2c.TrainConfig = field(default_factory=a2c.TrainConfig)
    budgets: Budgets = field(default_factory=lambda: Budgets(1, 1, 0.0))
    policy: PolicyConfig = field(default_factory=PolicyConfig)


@dataclass
class EvalSpec:
    split: str = "test"  # "test", "val" or "train"
    max_targets: int = 0  # 0 = every node of the split
    mode: str = GREEDY
    seeds: list = field(default_factory=lambda: [0])
    sweep_tune_epochs: int = 0  # > 0: fine-tune the attacker at each swept budget


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    victim: VictimConfig = field(default_factory=VictimConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc, "config")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Reseed victim and attacker together (the dataset keeps its own seed)."""
        cfg = ExperimentConfig.from_dict(self.to_dict())
        cfg.victim.seed = seed
        cfg.attack.train.seed = seed
        cfg.attack.policy.seed = seed
        return cfg


def fixture_config(feature_space: str = DISCRETE) -> ExperimentConfig:
    """The planted-partition setup used by the acceptance suite and scripts."""
    cfg = ExperimentConfig()
    cfg.dataset.feature_space = feature_space
    cfg.attack.policy.readout = "mean"
    t = cfg.attack.train
    t.lr, t.max_epochs, t.patience, t.episodes_per_target = 1e-3, 60, 60, 3
    cfg.evaluation.sweep_tune_epochs = 20
    if feature_space == CONTINUOUS:
        cfg.dataset.n_features = 32
        cfg.attack.budgets = Budgets(1, 1, 1.0)
    return cfg


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        sub = _NESTED.get((cls.__name__, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif name == "split_fractions":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    ("ExperimentConfig", "dataset"): DatasetSpec,
    ("ExperimentConfig", "victim"): VictimConfig,
    ("ExperimentConfig", "attack"): AttackSpec,
    ("ExperimentConfig", "evaluation"): EvalSpec,
    ("AttackSpec", "train"): a2c.TrainConfig,
    ("AttackSpec", "budgets"): Budgets,
    ("AttackSpec", "policy"): PolicyConfig,
}


def resolve_path(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(DATA_ENV):
        alt = Path(os.environ[DATA_ENV]) / p
        if alt.exists():
            return alt
    return p


def prepare_dataset(spec: DatasetSpec) -> tuple[Graph, SplitSpec]:
    if spec.kind == "planted":
        feats = PlantedPartitionFeatures(spec.n_features, spec.p_topic, spec.p_noise, spec.mean_scale, spec.noise)
        return generate_planted_partition(spec.n_nodes, spec.n_classes, spec.p_in, spec.p_out,
                                          nc.RngStream(spec.seed), feats, spec.feature_space,
                                          tuple(spec.split_fractions))
    if spec.kind == "citation":
        root = resolve_path(spec.path)
        content, cites = root / f"{spec.name}.content", root / f"{spec.name}.cites"
        for p in (content, cites):
            if not p.is_file():
                raise FileNotFoundError(f"dataset file not found: {p}")
        return load_citation_bundle(content, cites, spec.train_per_class, spec.n_val, spec.n_test)
    if spec.kind == "native":
        root = resolve_path(spec.path)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {root}")
        return load_native_bundle(root, spec.feature_space)
    raise ConfigError(f"unknown dataset kind {spec.kind!r}")


def eval_targets(split: SplitSpec, spec: EvalSpec) -> np.ndarray:
    if spec.split not in ("train", "val", "test"):
        raise ConfigError(f"unknown evaluation split {spec.split!r}")
    nodes = np.asarray(getattr(split, spec.split), dtype=np.int64)
    return nodes[:spec.max_targets] if spec.max_targets > 0 else nodes


def default_policy(g: Graph, spec: AttackSpec) -> AttackerPolicies:
    cfg = dataclasses.replace(spec.policy, feature_space=g.feature_space,
                              tau=spec.train.tau, hidden=spec.train.hidden)
    if cfg.init_density is None:
        cfg.init_density = a2c.default_density(g)
    return AttackerPolicies(g.n_features, g.n_classes, cfg)


def check_feature_mode(g: Graph, policies: AttackerPolicies) -> None:
    if g.feature_space != policies.config.feature_space:
        raise ConfigError(f"attacker was built for {policies.config.feature_space} features, "
                          f"dataset is {g.feature_space}")


# ---------------------------------------------------------------- reports


@dataclass
class TargetRecord:
    target: int
    label: int
    clean_pred: int
    status: str
    success: bool  # misclassified after the attack (clean misses included)
    features_digest: str = ""
    edges: str = ""
    queries: int = 0
    losses: str = ""
    delta: GraphDelta | None = dataclasses.field(default=None, repr=False, compare=False)


CSV_FIELDS = ["seed", "target", "label", "clean_pred", "status", "success", "features_digest",
              "edges", "queries", "losses"]


def features_digest(delta: GraphDelta | None) -> str:
    if delta is None or delta.n_injected == 0:
        return ""
    blob = np.ascontiguousarray(np.stack(delta.injected_features), dtype="<f8").tobytes()
    return hashlib.sha256(blob).hexdigest()[:16]


def _record(target: int, label: int, clean_pred: int, status: str, delta, queries: int,
            losses) -> TargetRecord:
    edges = ";".join(f"{delta.global_id(k)}-{p}" for k, p in delta.injected_edges) if delta else ""
    return TargetRecord(target, label, clean_pred, status, status in (FLIPPED, CLEAN_MISS),
                        features_digest(delta), edges, queries,
                        ";".join(f"{v:.6f}" for v in losses), delta)


@dataclass
class AttackReport:
    """Per-target outcomes for one method, grouped by seed."""

    method: str
    runs: dict = field(default_factory=dict)  # seed -> list[TargetRecord]

    def rate(self, seed) -> float:
        recs = self.runs[seed]
        return float(np.mean([r.success for r in recs])) if recs else float("nan")

    @property
    def rates(self) -> list[float]:
        return [self.rate(s) for s in self.runs]

    def flip_rate(self, seed) -> float:
        """Flipped / attacked, over targets the victim got right before the attack."""
        recs = [r for r in self.runs[seed] if r.status != CLEAN_MISS]
        return float(np.mean([r.status == FLIPPED for r in recs])) if recs else float("nan")

    @property
    def mean(self) -> float:
        r = [v for v in self.rates if not np.isnan(v)]
        return float(np.mean(r)) if r else float("nan")

    @property
    def std(self) -> float:
        r = [v for v in self.rates if not np.isnan(v)]
        return float(np.std(r)) if r else float("nan")

    def records(self):
        for seed, recs in self.runs.items():
            for r in recs:
                yield seed, r

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(CSV_FIELDS)
        for seed, r in self.records():
            w.writerow([seed, r.target, r.label, r.clean_pred, r.status, int(r.success),
                        r.features_digest, r.edges, r.queries, r.losses])
        return buf.getvalue()

    def summary(self) -> str:
        if np.isnan(self.mean):
            return "N/A"
        return f"{100 * self.mean:.1f} ± {100 * self.std:.1f}"


def markdown_table(reports: list[AttackReport]) -> str:
    lines = ["| method | misclassification (%) | seeds | targets |", "|---|---|---|---|"]
    for rep in reports:
        n = sum(len(v) for v in rep.runs.values())
        lines.append(f"| {rep.method} | {rep.summary()} | {len(rep.runs)} | {n} |")
    return "\n".join(lines) + "\n"


def rate_from_csv(text: str) -> dict:
    """Recompute per-seed rates from a report CSV."""
    rows = list(csv.DictReader(io.StringIO(text)))
    out: dict = {}
    for row in rows:
        out.setdefault(int(row["seed"]), []).append(int(row["success"]))
    return {s: float(np.mean(v)) for s, v in out.items()}


# ---------------------------------------------------------------- evaluation


def _threads(n: int | None) -> int:
    if n:
        return max(1, int(n))
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


def _map_targets(fn, targets, threads: int | None):
    n = _threads(threads)
    if n == 1:
        return [fn(int(v)) for v in targets]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(lambda v: fn(int(v)), targets))


def _clean_miss(oracle: VictimOracle, v: int) -> TargetRecord | None:
    g = oracle.graph
    label = int(g.labels[v]) if g.labels is not None else -1
    pred = int(oracle.clean_prediction(v)[0])
    if label >= 0 and pred != label:
        return TargetRecord(v, label, pred, CLEAN_MISS, True)
    return None


def attack_targets(policies: AttackerPolicies, oracle: VictimOracle, targets, budgets: Budgets,
                   seed: int = 0, mode: str = GREEDY, gamma: float = 0.95, bonus: float = 1.0,
                   threads: int | None = None) -> list[TargetRecord]:
    """Run the learned attacker once against every target."""
    check_feature_mode(oracle.graph, policies)
    root = nc.RngStream(seed).spawn("evaluate")

    def one(v: int) -> TargetRecord:
        miss = _clean_miss(oracle, v)
        if miss is not None:
            return miss
        ep = run_episode(policies, oracle, v, budgets, root.spawn(v), gamma, bonus, mode)
        return _record(v, int(oracle.graph.labels[v]) if oracle.graph.labels is not None else -1,
                       int(oracle.clean_prediction(v)[0]), ep.status, ep.delta, ep.queries, ep.losses)

    return _map_targets(one, targets, threads)


def clean_records(oracle: VictimOracle, targets) -> list[TargetRecord]:
    out = []
    for v in np.asarray(targets, dtype=np.int64):
        v = int(v)
        miss = _clean_miss(oracle, v)
        out.append(miss or TargetRecord(v, int(oracle.graph.labels[v]), int(oracle.clean_prediction(v)[0]),
                                        EXHAUSTED, False))
    return out


# ---------------------------------------------------------------- baselines

RANDOM_INJECT = "RandomInject"
GREEDY_PROBE = "GreedyProbe"


def random_features(g: Graph, budgets: Budgets, rng: nc.RngStream):
    """A feature vector from the clean empirical distribution, within the feature budget."""
    if g.feature_space == CONTINUOUS:
        st = g.feature_stats()
        return st.mu + st.sigma * rng.normal(size=g.n_features), (st.mu.copy(), st.sigma.copy())
    row = np.array(g.features[rng.integers(0, g.n_nodes)], dtype=np.float64)
    return project_discrete(row, rng.uniform(size=g.n_features), discrete_cap(g, budgets.feature_shift)), None


def baseline_episode(method: str, oracle: VictimOracle, target: int, budgets: Budgets,
                     rng: nc.RngStream, hops: int = 2) -> tuple[str, GraphDelta, int, list[float]]:
    """One baseline attack; returns (status, delta, queries, loss trajectory).

    Both baselines draw features from the same stream, so a paired seed gives
    them identical injected vectors; they differ only in peer choice.
    """
    if method not in (RANDOM_INJECT, GREEDY_PROBE):
        raise ConfigError(f"unknown baseline {method!r}")
    g = oracle.graph
    q0 = oracle.query_count
    clean = oracle.clean_log_probs(target)
    y = int(np.argmax(clean))
    delta = GraphDelta(g, budgets)
    losses = [float(-clean[y])]
    feat_rng, peer_rng = rng.spawn("features"), rng.spawn("peers")
    status = EXHAUSTED
    with oracle.attack_session():
        for _ in range(budgets.n_nodes):
            x, params = random_features(g, budgets, feat_rng)
            k = delta.inject_node(x, params)
            for _ in range(budgets.n_edges):
                cands = candidate_peers(delta, target, k, hops)
                if cands.size == 0:
                    status = DEAD_END
                    break
                if method == RANDOM_INJECT:
                    peer = int(cands[peer_rng.integers(0, cands.size)])
                    delta.wire_edge(k, peer)
                    out = oracle.query(target, delta)
                else:
                    best = None
                    for c in cands:
                        trial = delta.copy()
                        trial.wire_edge(k, int(c))
                        lp = oracle.query(target, trial)
                        if best is None or -lp[y] > best[0]:
                            best = (float(-lp[y]), int(c), lp)
                    delta.wire_edge(k, best[1])
                    out = best[2]
                losses.append(float(-out[y]))
                if int(np.argmax(out)) != y:
                    status = FLIPPED
                    break
            if status in (FLIPPED, DEAD_END):
                break
    return status, delta, oracle.query_count - q0, losses


def baseline_targets(method: str, oracle: VictimOracle, targets, budgets: Budgets, seed: int = 0,
                     hops: int = 2, threads: int | None = None) -> list[TargetRecord]:
    root = nc.RngStream(seed).spawn("baseline")

    def one(v: int) -> TargetRecord:
        miss = _clean_miss(oracle, v)
        if miss is not None:
            return miss
        status, delta, q, losses = baseline_episode(method, oracle, v, budgets, root.spawn(v), hops)
        return _record(v, int(oracle.graph.labels[v]), int(oracle.clean_prediction(v)[0]),
                       status, delta, q, losses)

    return _map_targets(one, targets, threads)


# ---------------------------------------------------------------- validation of reports


def revalidate(oracle: VictimOracle, report: AttackReport, budgets: Budgets) -> list[str]:
    """Replay every stored successful delta; return a list of problems (empty = clean)."""
    problems = []
    for seed, r in report.records():
        if r.status == CLEAN_MISS or r.delta is None:
            continue
        if not budget_indicator(oracle.graph, r.delta, budgets):
            problems.append(f"seed {seed} target {r.target}: budget violated")
        if r.success:
            out = oracle.query(r.target, r.delta)
            if int(np.argmax(out)) == r.clean_pred:
                problems.append(f"seed {seed} target {r.target}: stored delta does not flip")
    return problems


def audit_budgets(g: Graph, deltas, budgets: Budgets) -> int:
    """Number of stored deltas that break any budget."""
    return sum(0 if d is None else int(not budget_indicator(g, d, budgets)) for d in deltas)


# ---------------------------------------------------------------- pipeline


@dataclass
class TrainedRun:
    graph: Graph
    split: SplitSpec
    oracle: VictimOracle
    policies: AttackerPolicies
    victim_info: dict
    train_state: a2c.TrainState


def train_pipeline(cfg: ExperimentConfig, seed: int | None = None, data=None) -> TrainedRun:
    """Dataset -> victim -> attacker, reseeding victim and attacker with ``seed``."""
    if seed is not None:
        cfg = cfg.with_seed(seed)
    g, split = data if data is not None else prepare_dataset(cfg.dataset)
    model, info = train_victim(g, split, cfg.victim)
    oracle = VictimOracle(model, g)
    pol = default_policy(g, cfg.attack)
    best, st = a2c.train_attacker(cfg.attack.train, oracle, split, cfg.attack.budgets, policies=pol)
    return TrainedRun(g, split, oracle, best, info, st)


def compare_methods(run: TrainedRun, targets, budgets: Budgets, seed: int, mode: str = GREEDY,
                    threads: int | None = None) -> dict[str, list[TargetRecord]]:
    """Clean, both baselines and the learned attacker on the same targets."""
    return {
        "Clean": clean_records(run.oracle, targets),
        RANDOM_INJECT: baseline_targets(RANDOM_INJECT, run.oracle, targets, budgets, seed,
                                        run.policies.config.k, threads),
        GREEDY_PROBE: baseline_targets(GREEDY_PROBE, run.oracle, targets, budgets, seed,
                                       run.policies.config.k, threads),
        "G2A2C": attack_targets(run.policies, run.oracle, targets, budgets, seed, mode, threads=threads),
    }


def clone_policies(policies: AttackerPolicies) -> AttackerPolicies:
    twin = AttackerPolicies(policies.n_features, policies.n_classes, dataclasses.replace(policies.config))
    twin.load_state(policies.state())
    return twin


def sweep(policies: AttackerPolicies, oracle: VictimOracle, targets, base: Budgets, axis: str,
          values, seeds=(0,), mode: str = GREEDY, threads: int | None = None,
          tune: a2c.TrainConfig | None = None, split: SplitSpec | None = None) -> list[AttackReport]:
    """Evaluate an attacker under a range of budgets along ``axis``.

    With ``tune`` (and the ``split`` to train on), each value warm-starts from
    the previous value's attacker and fine-tunes under its own budget. Budgets
    are nested, so the previous attacker run at its own (tighter) budget is
    also a legal attack here; validation success picks between the two, ties
    going to the previous one. Values equal to ``base`` reuse the attacker.
    """
    names = {"n_nodes": "n_nodes", "beta_n": "n_nodes", "n_edges": "n_edges", "beta_e": "n_edges",
             "feature_shift": "feature_shift", "beta_f": "feature_shift"}
    if axis not in names:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if tune is not None and split is None:
        raise ConfigError("a tuned sweep needs the training split")
    reports, current, operating = [], policies, base
    for val in values:
        b = dataclasses.replace(base, **{names[axis]: type(getattr(base, names[axis]))(val)})
        if tune is None or b == base:
            operating = b
        else:
            tuned, st = a2c.train_attacker(tune, oracle, split, b, policies=clone_policies(current))
            held = a2c.correctly_classified(oracle, split.val)
            kept = a2c.attack_success_rate(current, oracle, held, operating,
                                           nc.RngStream(tune.seed).spawn(10_000), tune)
            if st.best_rate > kept:
                current, operating = tuned, b
            log.info("%s=%g: tuned val %.3f (epoch %d) vs kept %.3f", axis, val, st.best_rate,
                     st.best_epoch, kept)
        rep = AttackReport(f"{axis}={val:g}")
        for s in seeds:
            rep.runs[s] = attack_targets(current, oracle, targets, operating, s, mode, threads=threads)
        reports.append(rep)
    return reports


def monotone(values: list[float], tol: float = 0.0) -> bool:
    return all(b >= a - tol for a, b in zip(values, values[1:]))


def sweep_csv(axis: str, values, reports: list[AttackReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["axis", "value", "mean", "std", "rates"])
    for v, rep in zip(values, reports):
        w.writerow([axis, v, f"{rep.mean:.6f}", f"{rep.std:.6f}", ";".join(f"{r:.6f}" for r in rep.rates)])
    return buf.getvalue()


# ---------------------------------------------------------------- embeddings


def export_embeddings(oracle: VictimOracle, target: int, attacked: GraphDelta) -> str:
    """CSV of victim hidden embeddings before and after an attack.

    The pre section holds the target and its clean neighbors; the post
    section repeats them on the attacked graph and adds the injected nodes.
    Needs ``oracle.enable_diagnostics()`` and no active attack.
    """
    g = oracle.graph
    nbrs = [int(u) for u in g.neighbors(target)]
    base_nodes = [target] + nbrs
    pre = oracle.export_hidden(base_nodes)
    injected = [attacked.global_id(k) for k in range(attacked.n_injected)]
    post = oracle.export_hidden(base_nodes + injected, attacked)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["section", "node", "role"] + [f"h{i}" for i in range(pre.shape[1])])
    roles = ["target"] + ["neighbor"] * len(nbrs)
    for node, role, row in zip(base_nodes, roles, pre):
        w.writerow(["pre", node, role] + [repr(float(x)) for x in row])
    for node, role, row in zip(base_nodes + injected, roles + ["injected"] * len(injected), post):
        w.writerow(["post", node, role] + [repr(float(x)) for x in row])
    return buf.getvalue()



# ---------------------------------------------------------------- toy family with exhaustive optimum


@dataclass
class ToyFamily:
    graph: Graph
    split: SplitSpec
    oracle: VictimOracle
    size: int

    def fixture_nodes(self, target: int) -> list[int]:
        base = (int(target) // self.size) * self.size
        return list(range(base, base + self.size))

    def dictionary(self) -> list[np.ndarray]:
        """Empty row plus one one-hot profile per class."""
        f = self.graph.n_features
        return [np.zeros(f)] + [np.eye(f)[c] for c in range(f)]


def toy_fixture_family(n_pairs: int, seed: int = 0, size: int = 8, max_extra: int = 2,
                       margin: float = 4.0) -> ToyFamily:
    """Disjoint union of small two-class fixtures with a hand-set frozen GCN.

    Each fixture is a random tree plus up to ``max_extra`` chords, with one-hot
    class features. Fixtures come in mirrored pairs (same wiring, classes
    swapped) so neither class dominates the training signal. Node 0 of every
    fixture is its target. Both the victim and the attacker see two hops, so
    fixtures never interact.
    """
    if n_pairs < 3:
        raise ConfigError("need at least 3 fixture pairs")
    rng = np.random.default_rng(seed)
    edges, feats = [], []
    for f in range(n_pairs):
        local = [(v, int(rng.integers(0, v))) for v in range(1, size)]
        for _ in range(int(rng.integers(0, max_extra + 1))):
            a, b = rng.choice(size, 2, replace=False)
            local.append((int(a), int(b)))
        cls = (rng.random(size) < 0.5).astype(int)
        for m, lab in ((0, cls), (1, 1 - cls)):
            base = size * (2 * f + m)
            edges.extend((base + a, base + b) for a, b in local)
            feats.append(np.eye(2)[lab])
    x = np.vstack(feats)
    n = x.shape[0]
    model = GcnModel(2, 2, hidden=2)
    model.load_state({"w0": np.eye(2), "b0": np.zeros(2), "w1": margin * np.eye(2), "b1": np.zeros(2)})
    scratch = Graph(n, edges, x, np.zeros(n, dtype=np.int64), 2)
    labels = gcn_forward(model, scratch, np.arange(n)).argmax(1)
    g = Graph(n, scratch.edges, x, labels, 2)
    targets = np.arange(2 * n_pairs) * size
    a, b = int(round(0.6 * n_pairs)) * 2, int(round(0.8 * n_pairs)) * 2
    split = SplitSpec(targets[:a], targets[a:b], targets[b:])
    return ToyFamily(g, split, VictimOracle(model, g), size)


def brute_force_best(family: ToyFamily, target: int, budgets: Budgets) -> tuple[float, np.ndarray, int]:
    """Best single injection over dictionary profiles x fixture peers.

    Returns (loss increase, features, peer). The loss is the NLL of the
    clean prediction, as in the attacker's reward.
    """
    oracle = family.oracle
    clean = oracle.clean_log_probs(target)
    y = int(np.argmax(clean))
    best = (-np.inf, None, -1)
    for feats in family.dictionary():
        for peer in family.fixture_nodes(target):
            d = GraphDelta(family.graph, budgets)
            d.inject_node(feats)
            d.wire_edge(0, peer)
            inc = float(clean[y] - oracle.query(target, d)[y])
            if inc > best[0]:
                best = (inc, feats, peer)
    return best


def toy_optimality(policies: AttackerPolicies, family: ToyFamily, targets, budgets: Budgets,
                   threshold: float = 0.9) -> tuple[float, list[float]]:
    """Share of targets where the greedy attack reaches ``threshold`` of the optimum."""
    ratios = []
    for t in targets:
        t = int(t)
        best, _, _ = brute_force_best(family, t, budgets)
        y = int(np.argmax(family.oracle.clean_log_probs(t)))
        ep = run_episode(policies, family.oracle, t, budgets, nc.RngStream(0), mode=GREEDY)
        got = float(family.oracle.clean_log_probs(t)[y] - family.oracle.query(t, ep.delta)[y])
        ratios.append(got / best if best > 0 else 1.0)
    return float(np.mean(np.array(ratios) >= threshold)), ratios
