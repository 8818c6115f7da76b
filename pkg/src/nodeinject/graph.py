"""Graph data model, injection deltas, budgets and dataset loading."""
from __future__ import annotations

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .numcore import RngStream

log = logging.getLogger(__name__)

DISCRETE = "discrete"
CONTINUOUS = "continuous"
FEATURE_SPACES = (DISCRETE, CONTINUOUS)

# slack on the discrete density cap and on the continuous KL bound
DISCRETE_TOLERANCE = 0.05
KL_TOLERANCE = 1e-6


class GraphError(ValueError):
    pass


class BudgetError(GraphError):
    pass


class FeatureError(GraphError):
    pass


class EdgeError(GraphError):
    pass


class ParseError(GraphError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Budgets:
    """Per-target attack budget: injected nodes, degree per injected node, feature shift."""

    n_nodes: int = 1
    n_edges: int = 1
    feature_shift: float = 0.0

    def __post_init__(self):
        if self.n_nodes < 1 or self.n_edges < 1 or self.feature_shift < 0:
            raise BudgetError(f"invalid budgets {self}")


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        a, b, c = set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())
        if a & b or a & c or b & c:
            raise GraphError("split sets overlap")

    def check(self, n_nodes: int) -> None:
        for arr in (self.train, self.val, self.test):
            if arr.size and (arr.min() < 0 or arr.max() >= n_nodes):
                raise GraphError("split references a node outside the graph")


@dataclass(frozen=True)
class FeatureStats:
    mean_row_l1: float
    mu: np.ndarray
    sigma: np.ndarray


class Graph:
    """Undirected graph with node features; treat as immutable after construction."""

    def __init__(self, n_nodes: int, edges, features, labels=None, n_classes: int | None = None,
                 feature_space: str = DISCRETE):
        if feature_space not in FEATURE_SPACES:
            raise GraphError(f"unknown feature space {feature_space!r}")
        self.n_nodes = int(n_nodes)
        self.feature_space = feature_space
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.n_nodes:
            raise GraphError(f"feature matrix shape {self.features.shape} does not match {n_nodes} nodes")
        if feature_space == DISCRETE and not np.isin(self.features, (0.0, 1.0)).all():
            raise FeatureError("discrete feature space requires 0/1 features")
        self.edges = _canonical_edges(edges, self.n_nodes)
        if labels is None:
            self.labels = None
            self.n_classes = int(n_classes or 0)
        else:
            self.labels = np.asarray(labels, dtype=np.int64)
            if self.labels.shape != (self.n_nodes,):
                raise GraphError("labels must have one entry per node")
            self.n_classes = int(n_classes if n_classes is not None else self.labels.max() + 1)
        for arr in (self.features, self.edges):
            arr.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_nodes, self.n_nodes))
        adj.sort_indices()
        self.adj = adj
        self.degrees = np.diff(adj.indptr)
        self._stats: FeatureStats | None = None

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def neighbors(self, v: int) -> np.ndarray:
        return self.adj.indices[self.adj.indptr[v]:self.adj.indptr[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < nb.size and nb[i] == v)

    def feature_stats(self) -> FeatureStats:
        if self._stats is None:
            x = self.features
            self._stats = FeatureStats(
                mean_row_l1=float(np.abs(x).sum(axis=1).mean()),
                mu=x.mean(axis=0),
                sigma=np.maximum(x.std(axis=0), 1e-6),
            )
        return self._stats

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.edges):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
        h.update(f"{self.n_nodes}/{self.n_classes}/{self.feature_space}".encode())
        return h.hexdigest()

    def __repr__(self) -> str:
        return (f"Graph(n_nodes={self.n_nodes}, n_edges={len(self.edges)}, "
                f"n_features={self.n_features}, n_classes={self.n_classes}, {self.feature_space})")


def _canonical_edges(edges, n: int) -> np.ndarray:
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = e.reshape(-1, 2)
    if e.min() < 0 or e.max() >= n:
        raise EdgeError("edge endpoint out of range")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


class GraphDelta:
    """Injected nodes and edges layered over an untouched base graph.

    Injected node ``k`` has global id ``base.n_nodes + k``.  Edges are stored
    as ``(k, peer)`` with ``peer`` a global id (clean or injected).
    """

    def __init__(self, base: Graph, budgets: Budgets | None = None):
        self.base = base
        self.budgets = budgets
        self.injected_features: list[np.ndarray] = []
        self.feature_params: list[tuple[np.ndarray, np.ndarray] | None] = []
        self.injected_edges: list[tuple[int, int]] = []
        self._extra: dict[int, list[int]] = {}

    # -- views
    @property
    def n_injected(self) -> int:
        return len(self.injected_features)

    @property
    def n_total(self) -> int:
        return self.base.n_nodes + self.n_injected

    def global_id(self, k: int) -> int:
        return self.base.n_nodes + k

    def degree(self, k: int) -> int:
        return len(self._extra.get(self.global_id(k), ()))

    def neighbors(self, v: int) -> np.ndarray:
        extra = self._extra.get(v)
        if v < self.base.n_nodes:
            nb = self.base.neighbors(v)
            return nb if not extra else np.concatenate([nb, np.asarray(extra, dtype=np.int64)])
        return np.asarray(extra or [], dtype=np.int64)

    def full_degree(self, v: int) -> int:
        d = len(self._extra.get(v, ()))
        if v < self.base.n_nodes:
            d += int(self.base.degrees[v])
        return d

    def has_edge(self, u: int, v: int) -> bool:
        if u < self.base.n_nodes and v < self.base.n_nodes:
            return self.base.has_edge(u, v)
        return v in self._extra.get(u, ())

    def feature_rows(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        n = self.base.n_nodes
        out = np.empty((nodes.size, self.base.n_features))
        clean = nodes < n
        out[clean] = self.base.features[nodes[clean]]
        for i in np.flatnonzero(~clean):
            out[i] = self.injected_features[nodes[i] - n]
        return out

    def all_edges(self) -> np.ndarray:
        extra = np.array([(self.global_id(k), p) for k, p in self.injected_edges], dtype=np.int64)
        return np.concatenate([self.base.edges, extra.reshape(-1, 2)])

    def to_graph(self) -> Graph:
        """Materialize base + delta as a standalone graph (labels of injected nodes: -1)."""
        feats = np.vstack([self.base.features] + [x[None] for x in self.injected_features])
        labels = None
        if self.base.labels is not None:
            labels = np.concatenate([self.base.labels, -np.ones(self.n_injected, dtype=np.int64)])
        space = self.base.feature_space
        return Graph(self.n_total, self.all_edges(), feats, labels, self.base.n_classes, space)

    def copy(self) -> "GraphDelta":
        d = GraphDelta(self.base, self.budgets)
        d.injected_features = list(self.injected_features)
        d.feature_params = list(self.feature_params)
        d.injected_edges = list(self.injected_edges)
        d._extra = {k: list(v) for k, v in self._extra.items()}
        return d

    # -- mutations
    def inject_node(self, x, params: tuple[np.ndarray, np.ndarray] | None = None) -> int:
        """Append an isolated node with features ``x``; returns its injected index."""
        x = np.asarray(x, dtype=np.float64).copy()
        if x.shape != (self.base.n_features,):
            raise FeatureError(f"feature vector must have length {self.base.n_features}")
        if not np.all(np.isfinite(x)):
            raise FeatureError("feature vector contains non-finite values")
        if self.base.feature_space == DISCRETE and not np.isin(x, (0.0, 1.0)).all():
            raise FeatureError("discrete graph accepts only binary feature vectors")
        if self.budgets is not None:
            if self.n_injected >= self.budgets.n_nodes:
                raise BudgetError(f"node budget {self.budgets.n_nodes} exhausted")
            if not feature_shift_ok(self.base, x, self.budgets.feature_shift, params):
                raise BudgetError("injected features exceed the feature-shift budget")
        x.setflags(write=False)
        self.injected_features.append(x)
        self.feature_params.append(params)
        return self.n_injected - 1

    def wire_edge(self, k: int, peer: int) -> None:
        if not 0 <= k < self.n_injected:
            raise EdgeError(f"no injected node {k}")
        if not 0 <= peer < self.n_total:
            raise EdgeError(f"peer {peer} outside the graph")
        u = self.global_id(k)
        if peer == u:
            raise EdgeError("self-edge rejected")
        if self.has_edge(u, peer):
            raise EdgeError(f"edge ({u}, {peer}) already present")
        if self.budgets is not None and self.degree(k) >= self.budgets.n_edges:
            raise BudgetError(f"edge budget {self.budgets.n_edges} exhausted for injected node {k}")
        if peer >= self.base.n_nodes and self.budgets is not None:
            if len(self._extra.get(peer, ())) >= self.budgets.n_edges:
                raise BudgetError(f"edge budget exhausted for injected peer {peer}")
        self.injected_edges.append((k, int(peer)))
        self._extra.setdefault(u, []).append(int(peer))
        self._extra.setdefault(int(peer), []).append(u)

    def to_record(self) -> dict:
        return {
            "features": [x.tolist() for x in self.injected_features],
            "edges": [list(e) for e in self.injected_edges],
        }


GraphView = "Graph | GraphDelta"


def as_delta(view) -> GraphDelta:
    return view if isinstance(view, GraphDelta) else GraphDelta(view)


# ---------------------------------------------------------------- adjacency


def normalize_adjacency(view, nodes=None, sparse: bool = False):
    """D^-1/2 (A + I) D^-1/2 over the whole view, or the subgraph induced by ``nodes``.

    When ``nodes`` is given, degrees are counted inside the induced subgraph.
    """
    d = as_delta(view)
    if nodes is None:
        nodes = np.arange(d.n_total)
    nodes = np.asarray(nodes, dtype=np.int64)
    rows, cols = induced_edges(d, nodes)
    n = nodes.size
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)) + sp.identity(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    dinv = sp.diags(1.0 / np.sqrt(deg))
    out = (dinv @ a @ dinv).tocsr()
    return out if sparse else out.toarray()


def induced_edges(d: GraphDelta, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Both directions of every edge with both endpoints in ``nodes`` (local indices)."""
    n_base = d.base.n_nodes
    if nodes.size == d.n_total and np.array_equal(nodes, np.arange(d.n_total)):
        e = d.all_edges()
        return np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]])
    local = {int(v): i for i, v in enumerate(nodes)}
    base_nodes = nodes[nodes < n_base]
    rows, cols = [], []
    if base_nodes.size:
        sub = d.base.adj[base_nodes][:, base_nodes].tocoo()
        bl = np.array([local[int(v)] for v in base_nodes], dtype=np.int64)
        rows.append(bl[sub.row])
        cols.append(bl[sub.col])
    er, ec = [], []
    for k, p in d.injected_edges:
        u = d.global_id(k)
        if u in local and p in local:
            er += [local[u], local[p]]
            ec += [local[p], local[u]]
    rows.append(np.asarray(er, dtype=np.int64))
    cols.append(np.asarray(ec, dtype=np.int64))
    return np.concatenate(rows), np.concatenate(cols)


@dataclass
class Subgraph:
    nodes: np.ndarray  # global ids, BFS order, center first
    local: dict[int, int]
    center_local: int = 0
    hops: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def k_hop_subgraph(view, center: int, k: int) -> Subgraph:
    """All nodes within ``k`` hops of ``center`` (injected nodes included)."""
    d = as_delta(view)
    if not 0 <= center < d.n_total:
        raise IndexError(f"center {center} outside graph of {d.n_total} nodes")
    dist = {int(center): 0}
    order = [int(center)]
    q = deque([int(center)])
    while q:
        v = q.popleft()
        if dist[v] == k:
            continue
        for u in d.neighbors(v):
            u = int(u)
            if u not in dist:
                dist[u] = dist[v] + 1
                order.append(u)
                q.append(u)
    nodes = np.asarray(order, dtype=np.int64)
    return Subgraph(nodes, {v: i for i, v in enumerate(order)}, 0,
                    np.asarray([dist[v] for v in order], dtype=np.int64))


# ---------------------------------------------------------------- budgets


def density_ratio(g: Graph, x) -> float:
    """L1 norm of ``x`` relative to the mean row L1 norm of the clean features."""
    m = g.feature_stats().mean_row_l1
    return float(np.abs(np.asarray(x)).sum() / m) if m > 0 else float(np.abs(np.asarray(x)).sum())


def discrete_cap(g: Graph, beta_f: float) -> int:
    """Largest number of active bits a discrete injected vector may carry."""
    return int(np.floor((1.0 + beta_f + DISCRETE_TOLERANCE) * g.feature_stats().mean_row_l1 + 1e-9))


def gaussian_kl(mu_p, sigma_p, mu_q, sigma_q) -> float:
    """KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2)) summed over independent dimensions."""
    mu_p, sigma_p = np.asarray(mu_p), np.asarray(sigma_p)
    mu_q, sigma_q = np.asarray(mu_q), np.asarray(sigma_q)
    return float(np.sum(np.log(sigma_q / sigma_p)
                        + (sigma_p ** 2 + (mu_p - mu_q) ** 2) / (2 * sigma_q ** 2) - 0.5))


def feature_kl(g: Graph, x, params=None) -> float:
    """KL of an injected node's feature distribution to the clean empirical Gaussian.

    Without generator parameters the vector is scored as N(x, sigma_X^2).
    """
    st = g.feature_stats()
    mu, sigma = (np.asarray(x), st.sigma) if params is None else params
    return gaussian_kl(mu, sigma, st.mu, st.sigma)


def feature_shift_ok(g: Graph, x, beta_f: float, params=None) -> bool:
    if g.feature_space == DISCRETE:
        return int(np.abs(np.asarray(x)).sum()) <= discrete_cap(g, beta_f)
    return feature_kl(g, x, params) <= beta_f + KL_TOLERANCE


def budget_indicator(g: Graph, delta: GraphDelta, b: Budgets) -> bool:
    """True when the delta respects every budget (node count, degree, feature shift)."""
    if delta.n_injected > b.n_nodes:
        return False
    if any(delta.degree(k) > b.n_edges for k in range(delta.n_injected)):
        return False
    return all(feature_shift_ok(g, x, b.feature_shift, p)
               for x, p in zip(delta.injected_features, delta.feature_params))


def project_discrete(x: np.ndarray, priority: np.ndarray, cap: int) -> np.ndarray:
    """Keep at most ``cap`` active bits of ``x``, preferring high ``priority``."""
    x = np.asarray(x, dtype=np.float64).copy()
    on = np.flatnonzero(x > 0.5)
    if on.size <= cap:
        return x
    keep = on[np.argsort(-np.asarray(priority)[on], kind="stable")[:cap]]
    out = np.zeros_like(x)
    out[keep] = 1.0
    return out


def kl_shrink_factor(mu, sigma, stats: FeatureStats, beta_f: float, iters: int = 60) -> float:
    """Largest t in [0, 1] such that the interpolated Gaussian stays within ``beta_f`` KL.

    The interpolation moves mu linearly and log-sigma linearly from the clean
    statistics (t = 0) to the proposal (t = 1); KL is monotone along the path.
    """
    mu, sigma = np.asarray(mu), np.asarray(sigma)

    def kl_at(t):
        m = stats.mu + t * (mu - stats.mu)
        s = stats.sigma * (sigma / stats.sigma) ** t
        return gaussian_kl(m, s, stats.mu, stats.sigma)

    if kl_at(1.0) <= beta_f:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if kl_at(mid) <= beta_f:
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------- loaders


def load_citation_bundle(content_path, cites_path, train_per_class: int = 20,
                         n_val: int = 500, n_test: int = 1000) -> tuple[Graph, SplitSpec]:
    """Read a ``.content`` / ``.cites`` citation bundle.

    Nodes keep their first-appearance order.  The split takes the first
    ``train_per_class`` nodes of each class for training, then the next
    ``n_val`` remaining nodes for validation and the next ``n_test`` for test.
    """
    content_path, cites_path = Path(content_path), Path(cites_path)
    ids: dict[str, int] = {}
    rows, label_names = [], []
    width = None
    with content_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ParseError(content_path, lineno, "expected id, features and label")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(content_path, lineno, f"expected {width} fields, got {len(parts)}")
            try:
                feats = np.array([int(v) for v in parts[1:-1]], dtype=np.float64)
            except ValueError:
                raise ParseError(content_path, lineno, "non-integer feature value") from None
            if not np.isin(feats, (0.0, 1.0)).all():
                raise ParseError(content_path, lineno, "features must be binary")
            if parts[0] in ids:
                raise ParseError(content_path, lineno, f"duplicate node id {parts[0]!r}")
            ids[parts[0]] = len(rows)
            rows.append(feats)
            label_names.append(parts[-1])
    if not rows:
        raise ParseError(content_path, 0, "empty content file")
    classes = sorted(set(label_names))
    label_of = {c: i for i, c in enumerate(classes)}
    labels = np.array([label_of[c] for c in label_names], dtype=np.int64)

    edges, dangling = [], 0
    with cites_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(cites_path, lineno, "expected two node ids")
            a, b = ids.get(parts[0]), ids.get(parts[1])
            if a is None or b is None:
                dangling += 1
                continue
            edges.append((a, b))
    if dangling:
        log.warning("skipped %d citations with unknown node ids", dangling)
    g = Graph(len(rows), edges, np.vstack(rows), labels, len(classes), DISCRETE)
    g.dangling_citations = dangling
    return g, ordered_split(labels, len(classes), train_per_class, n_val, n_test)


def ordered_split(labels: np.ndarray, n_classes: int, train_per_class: int,
                  n_val: int, n_test: int) -> SplitSpec:
    counts = np.zeros(n_classes, dtype=int)
    train = []
    for v, c in enumerate(labels):
        if c >= 0 and counts[c] < train_per_class:
            counts[c] += 1
            train.append(v)
    taken = set(train)
    rest = [v for v in range(labels.size) if v not in taken]
    return SplitSpec(np.array(train), np.array(rest[:n_val]), np.array(rest[n_val:n_val + n_test]))


def load_native_bundle(directory, feature_space: str | None = None) -> tuple[Graph, SplitSpec]:
    """Read ``nodes.tsv`` / ``edges.tsv`` / ``splits.tsv`` from ``directory``."""
    directory = Path(directory)
    ids: dict[str, int] = {}
    feats, labels = [], []
    path = directory / "nodes.tsv"
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, "expected id<TAB>features<TAB>label")
            try:
                feats.append(np.array([float(v) for v in parts[1].split(",")]))
                labels.append(int(parts[2]) if parts[2] not in ("", "-") else -1)
            except ValueError:
                raise ParseError(path, lineno, "bad number") from None
            ids[parts[0]] = len(ids)
    x = np.vstack(feats)
    edges = []
    path = directory / "edges.tsv"
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or parts[0] not in ids or parts[1] not in ids:
                raise ParseError(path, lineno, "bad edge row")
            edges.append((ids[parts[0]], ids[parts[1]]))
    split = {"train": [], "val": [], "test": []}
    path = directory / "splits.tsv"
    if path.exists():
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != 2 or parts[1] not in split or parts[0] not in ids:
                    raise ParseError(path, lineno, "bad split row")
                split[parts[1]].append(ids[parts[0]])
    if feature_space is None:
        feature_space = DISCRETE if np.isin(x, (0.0, 1.0)).all() else CONTINUOUS
    y = np.array(labels, dtype=np.int64)
    labelled = y[y >= 0]
    g = Graph(len(ids), edges, x, y if labelled.size else None,
              int(labelled.max() + 1) if labelled.size else 0, feature_space)
    return g, SplitSpec(np.array(split["train"]), np.array(split["val"]), np.array(split["test"]))


def save_native_bundle(directory, g: Graph, split: SplitSpec) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fmt = (lambda v: str(int(v))) if g.feature_space == DISCRETE else repr
    with (directory / "nodes.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        for v in range(g.n_nodes):
            lab = "-" if g.labels is None or g.labels[v] < 0 else str(int(g.labels[v]))
            fh.write(f"{v}\t{','.join(fmt(float(f)) for f in g.features[v])}\t{lab}\n")
    with (directory / "edges.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        for a, b in g.edges:
            fh.write(f"{a}\t{b}\n")
    with (directory / "splits.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        for name, arr in (("train", split.train), ("val", split.val), ("test", split.test)):
            for v in arr:
                fh.write(f"{v}\t{name}\n")


# ---------------------------------------------------------------- synthetic


@dataclass
class PlantedPartitionFeatures:
    """Feature model for the synthetic generator.

    Discrete: each class owns a block of ``n_features // k`` topic words that
    fire with ``p_topic``; every other word fires with ``p_noise``.
    Continuous: class means drawn from N(0, mean_scale^2), per-node noise
    N(0, noise^2).
    """

    n_features: int = 64
    p_topic: float = 0.25
    p_noise: float = 0.03
    mean_scale: float = 1.0
    noise: float = 1.0


def generate_planted_partition(n: int, k: int, p_in: float, p_out: float,
                               rng: RngStream, features: PlantedPartitionFeatures | None = None,
                               feature_space: str = DISCRETE,
                               split_fractions=(0.2, 0.2, 0.6)) -> tuple[Graph, SplitSpec]:
    """Community graph: edges inside a community with ``p_in``, across with ``p_out``.

    When ``n`` is not a multiple of ``k`` the first ``n % k`` communities get
    one extra node.
    """
    if not (0 <= p_out < p_in <= 1):
        raise GraphError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if k < 1 or n < k:
        raise GraphError("need at least one node per community")
    fm = features or PlantedPartitionFeatures()
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    labels = np.repeat(np.arange(k), sizes)
    gen = rng.generator

    iu, ju = np.triu_indices(n, 1)
    same = labels[iu] == labels[ju]
    draw = gen.random(iu.size)
    keep = np.where(same, draw < p_in, draw < p_out)
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    F = fm.n_features
    if feature_space == DISCRETE:
        perm = gen.permutation(F)
        block = max(F // k, 1)
        prob = np.full((k, F), fm.p_noise)
        for c in range(k):
            prob[c, perm[c * block:(c + 1) * block]] = fm.p_topic
        x = (gen.random((n, F)) < prob[labels]).astype(np.float64)
    elif feature_space == CONTINUOUS:
        means = gen.standard_normal((k, F)) * fm.mean_scale
        x = means[labels] + gen.standard_normal((n, F)) * fm.noise
    else:
        raise GraphError(f"unknown feature space {feature_space!r}")

    g = Graph(n, edges, x, labels, k, feature_space)
    order = gen.permutation(n)
    f_train, f_val, _ = split_fractions
    n_train, n_val = int(round(f_train * n)), int(round(f_val * n))
    split = SplitSpec(np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_val]),
                      np.sort(order[n_train + n_val:]))
    return g, split
