"""Victim GCN/SGC models, their training loop, and the query-only oracle."""
from __future__ import annotations

import contextlib
import json
import logging
import socketserver
import threading
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from . import checkpoint
from . import numcore as nc
from .graph import (Graph, GraphDelta, SplitSpec, as_delta, induced_edges, k_hop_subgraph,
                    normalize_adjacency)

log = logging.getLogger(__name__)

GCN = "gcn"
SGC = "sgc"


class ConfigError(ValueError):
    pass


class SealError(PermissionError):
    """Raised when a diagnostic path is used while an attack is running."""


@dataclass
class VictimConfig:
    arch: str = GCN
    hidden: int = 16
    epochs: int = 200
    lr: float = 1e-2
    weight_decay: float = 5e-4
    dropout: float = 0.5
    patience: int = 20
    row_normalize: bool = False
    seed: int = 0


class GcnModel:
    """Two propagation steps: Â act(Â X W0 + b0) W1 + b1, then log-softmax.

    ``act`` is ReLU for GCN and the identity for SGC.
    """

    def __init__(self, n_features: int, n_classes: int, hidden: int = 16, arch: str = GCN,
                 row_normalize: bool = False, seed: int = 0):
        if arch not in (GCN, SGC):
            raise ConfigError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.row_normalize = row_normalize
        self.n_features, self.n_classes, self.hidden = n_features, n_classes, hidden
        gen = nc.RngStream(seed).generator

        def glorot(fan_in, fan_out):
            r = np.sqrt(6.0 / (fan_in + fan_out))
            return gen.uniform(-r, r, size=(fan_in, fan_out))

        self.w0 = nc.parameter(glorot(n_features, hidden), "w0")
        self.b0 = nc.parameter(np.zeros(hidden), "b0")
        self.w1 = nc.parameter(glorot(hidden, n_classes), "w1")
        self.b1 = nc.parameter(np.zeros(n_classes), "b1")

    @property
    def params(self) -> list[nc.Tensor]:
        return [self.w0, self.b0, self.w1, self.b1]

    def prepare(self, x: np.ndarray) -> np.ndarray:
        if not self.row_normalize:
            return x
        s = np.abs(x).sum(axis=1, keepdims=True)
        return np.divide(x, s, out=np.zeros_like(x), where=s > 0)

    def activation(self, h: nc.Tensor) -> nc.Tensor:
        return nc.relu(h) if self.arch == GCN else h

    def logits(self, adj, x: np.ndarray, dropout: float = 0.0, rng: nc.RngStream | None = None,
               activation=None) -> nc.Tensor:
        act = activation or self.activation
        x = self.prepare(x)
        if dropout > 0:
            x = x * (rng.uniform(x.shape) >= dropout) / (1.0 - dropout)
        h = act(nc.add(nc.spmm(adj, nc.Tensor(x) @ self.w0), self.b0))
        if dropout > 0:
            h = nc.mul(h, (rng.uniform(h.shape) >= dropout) / (1.0 - dropout))
        return nc.add(nc.spmm(adj, h @ self.w1), self.b1)

    def hidden_embeddings(self, adj, x: np.ndarray) -> np.ndarray:
        return self.activation(nc.add(nc.spmm(adj, nc.Tensor(self.prepare(x)) @ self.w0), self.b0)).data

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if state[p.name].shape != p.shape:
                raise ConfigError(f"shape mismatch for {p.name}")
            p.data = np.array(state[p.name], dtype=np.float64)
            p.zero_grad()


def gcn_forward(model: GcnModel, view, nodes) -> np.ndarray:
    """Log-probabilities [len(nodes), C] computed over the whole supplied view."""
    d = as_delta(view)
    if d.base.n_features != model.n_features:
        raise nc.DimensionError(f"model expects {model.n_features} features, graph has {d.base.n_features}")
    adj = normalize_adjacency(d, sparse=True)
    x = d.feature_rows(np.arange(d.n_total))
    out = nc.log_softmax(model.logits(adj, x)).data
    return out[np.asarray(nodes, dtype=np.int64)]


def _local_log_probs(model: GcnModel, d: GraphDelta, target: int) -> np.ndarray:
    """Exact two-layer output at ``target`` using only its 2-hop ball.

    Normalization uses degrees from the full applied graph, so the result
    matches :func:`gcn_forward` on the whole view.
    """
    sub = k_hop_subgraph(d, target, 2)
    nodes = sub.nodes
    deg = np.array([d.full_degree(int(v)) for v in nodes], dtype=np.float64) + 1.0
    rows, cols = induced_edges(d, nodes)
    loops = np.arange(nodes.size)
    rows, cols = np.concatenate([rows, loops]), np.concatenate([cols, loops])
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(nodes.size, nodes.size))
    return nc.log_softmax(model.logits(adj, d.feature_rows(nodes))).data[sub.center_local]


def accuracy(model: GcnModel, g: Graph, nodes) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        return float("nan")
    pred = gcn_forward(model, g, nodes).argmax(axis=1)
    return float((pred == g.labels[nodes]).mean())


def train_victim(g: Graph, split: SplitSpec, config: VictimConfig | None = None) -> tuple[GcnModel, dict]:
    """Full-batch Adam on train-node cross-entropy; keeps the best-validation weights."""
    cfg = config or VictimConfig()
    if split.train.size == 0:
        raise ConfigError("training split is empty")
    if g.labels is None or (g.labels[split.train] < 0).any():
        raise ConfigError("training nodes need labels")
    model = GcnModel(g.n_features, g.n_classes, cfg.hidden, cfg.arch, cfg.row_normalize, cfg.seed)
    rng = nc.RngStream(cfg.seed).spawn(1)
    opt = nc.Adam(model.params, lr=cfg.lr)
    adj = normalize_adjacency(g, sparse=True)
    x = g.features
    train, val = split.train, split.val
    y_train = g.labels[train]
    onehot = np.zeros((train.size, g.n_classes))
    onehot[np.arange(train.size), y_train] = 1.0

    best = (-1.0, np.inf)
    best_state, best_epoch, since = model.state(), 0, 0
    history = []
    for epoch in range(cfg.epochs):
        logp = nc.log_softmax(nc.take(model.logits(adj, x, cfg.dropout, rng), train))
        loss = nc.scale(nc.sum(nc.mul(logp, onehot)), -1.0 / train.size)
        if cfg.weight_decay:
            loss = nc.add(loss, nc.scale(nc.sum(nc.square(model.w0)), cfg.weight_decay / 2))
        nc.backward(loss)
        opt.step()

        eval_logp = nc.log_softmax(model.logits(adj, x)).data
        if val.size:
            val_acc = float((eval_logp[val].argmax(1) == g.labels[val]).mean())
            val_loss = float(-eval_logp[val, g.labels[val]].mean())
        else:
            val_acc, val_loss = float((eval_logp[train].argmax(1) == y_train).mean()), loss.item()
        history.append({"epoch": epoch, "loss": loss.item(), "val_acc": val_acc, "val_loss": val_loss})
        if (val_acc, -val_loss) > (best[0], -best[1]):
            best, best_state, best_epoch, since = (val_acc, val_loss), model.state(), epoch, 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    model.load_state(best_state)
    metrics = {
        "best_epoch": best_epoch,
        "epochs_run": len(history),
        "train_acc": accuracy(model, g, train),
        "val_acc": accuracy(model, g, val),
        "test_acc": accuracy(model, g, split.test),
    }
    metrics["test_misclassification"] = 1.0 - metrics["test_acc"]
    return model, {"metrics": metrics, "history": history, "config": asdict(cfg)}


def save_victim(path, model: GcnModel, config: VictimConfig | dict | None = None) -> None:
    cfg = asdict(config) if isinstance(config, VictimConfig) else (config or {})
    meta = {"arch": model.arch, "row_normalize": model.row_normalize, "n_features": model.n_features,
            "n_classes": model.n_classes, "hidden": model.hidden, "config": cfg}
    checkpoint.save(path, "victim", meta, model.state())


def load_victim(path) -> GcnModel:
    meta, tensors = checkpoint.load(path, "victim")
    model = GcnModel(meta["n_features"], meta["n_classes"], meta["hidden"], meta["arch"],
                     meta["row_normalize"])
    model.load_state(tensors)
    return model


class VictimOracle:
    """Query-only access to a trained victim over a fixed clean graph.

    Only class log-probabilities leave this object.  Hidden activations are
    available through :meth:`export_hidden` for offline diagnostics, which
    must be switched on explicitly and is refused while an attack runs.
    """

    def __init__(self, model: GcnModel, graph: Graph):
        if model.n_features != graph.n_features:
            raise nc.DimensionError("victim and graph disagree on feature width")
        self.__model = model
        self.graph = graph
        self.n_classes = model.n_classes
        self._count = 0
        self._lock = threading.Lock()
        self._clean: dict[int, np.ndarray] = {}
        self._diagnostics = False
        self._attack_active = 0

    @property
    def query_count(self) -> int:
        return self._count

    def query(self, target: int, delta: GraphDelta | None = None) -> np.ndarray:
        """Victim log-probabilities for ``target`` on base graph + ``delta``."""
        d = delta if delta is not None else GraphDelta(self.graph)
        if d.base is not self.graph:
            raise ValueError("delta was built on a different base graph")
        if not 0 <= int(target) < d.n_total:
            raise IndexError(f"target {target} outside graph")
        out = _local_log_probs(self.__model, d, int(target))
        with self._lock:
            self._count += 1
        out.setflags(write=False)
        return out

    def clean_log_probs(self, target: int) -> np.ndarray:
        """Clean-graph output for ``target``, queried once and cached."""
        target = int(target)
        if target not in self._clean:
            self._clean[target] = self.query(target)
        return self._clean[target]

    def clean_prediction(self, nodes) -> np.ndarray:
        return np.array([int(np.argmax(self.clean_log_probs(v))) for v in np.atleast_1d(nodes)])

    @contextlib.contextmanager
    def attack_session(self):
        self._attack_active += 1
        try:
            yield self
        finally:
            self._attack_active -= 1

    def enable_diagnostics(self, on: bool = True) -> None:
        self._diagnostics = on

    def export_hidden(self, nodes, delta: GraphDelta | None = None) -> np.ndarray:
        """First-layer victim embeddings (diagnostic only, never during an attack)."""
        if self._attack_active:
            raise SealError("embedding export refused while an attack is active")
        if not self._diagnostics:
            raise SealError("diagnostics are disabled on this oracle")
        d = delta if delta is not None else GraphDelta(self.graph)
        adj = normalize_adjacency(d, sparse=True)
        h = self.__model.hidden_embeddings(adj, d.feature_rows(np.arange(d.n_total)))
        return h[np.asarray(nodes, dtype=np.int64)]


def clean_prediction_cache(oracle: VictimOracle, nodes) -> np.ndarray:
    return oracle.clean_prediction(nodes)


def query(oracle: VictimOracle, target: int, delta: GraphDelta | None = None) -> np.ndarray:
    return oracle.query(target, delta)


# ---------------------------------------------------------------- oracle server


def handle_request(oracle: VictimOracle, request: dict) -> dict:
    """Answer one JSON oracle request (see :func:`serve_oracle`)."""
    target = int(request["target"])
    delta = GraphDelta(oracle.graph)
    pending = []
    for node in request.get("inject", []):
        k = delta.inject_node(np.asarray(node["features"], dtype=np.float64))
        pending.append((k, node.get("edges", [])))
    for k, peers in pending:
        for p in peers:
            if not delta.has_edge(delta.global_id(k), int(p)):
                delta.wire_edge(k, int(p))
    log_probs = oracle.query(target, delta)
    return {"log_probs": [float(v) for v in log_probs], "query_count": oracle.query_count}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            try:
                resp = handle_request(self.server.oracle, json.loads(line))
            except Exception as exc:  # report and keep serving
                resp = {"error": f"{type(exc).__name__}: {exc}"}
            self.wfile.write((json.dumps(resp) + "\n").encode("utf-8"))
            self.wfile.flush()


class OracleServer(socketserver.ThreadingTCPServer):
    """Line-delimited JSON oracle on a local TCP port.

    Request: ``{"target": id, "inject": [{"features": [...], "edges": [ids]}]}``
    Response: ``{"log_probs": [...], "query_count": n}`` or ``{"error": msg}``.
    Injected nodes get ids ``N, N+1, ...`` in request order.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, oracle: VictimOracle, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.oracle = oracle


def serve_oracle(oracle: VictimOracle, host: str = "127.0.0.1", port: int = 0) -> OracleServer:
    server = OracleServer(oracle, host, port)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server
