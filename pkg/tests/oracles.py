"""Shared fixtures and oracle stand-ins for the test suite."""
import ast
import contextlib
from pathlib import Path

import numpy as np

from nodeinject import graph as G
from nodeinject import victim as V
from nodeinject.numcore import RngStream


def delta_key(target, delta):
    if delta is None:
        return (int(target), (), ())
    feats = tuple(np.asarray(x).tobytes() for x in delta.injected_features)
    return (int(target), feats, tuple(delta.injected_edges))


class RecordingOracle:
    """Wraps a real oracle and remembers every answer it gave."""

    def __init__(self, oracle):
        self.inner = oracle
        self.graph = oracle.graph
        self.n_classes = oracle.n_classes
        self.table = {}
        self._clean = {}

    @property
    def query_count(self):
        return self.inner.query_count

    def query(self, target, delta=None):
        out = self.inner.query(target, delta)
        self.table[delta_key(target, delta)] = out.copy()
        return out

    def clean_log_probs(self, target):
        if int(target) not in self._clean:
            self._clean[int(target)] = self.query(target)
        return self._clean[int(target)]

    def clean_prediction(self, nodes):
        return np.array([int(np.argmax(self.clean_log_probs(v))) for v in np.atleast_1d(nodes)])

    def attack_session(self):
        return self.inner.attack_session()


class TableOracle:
    """Answers only from a recorded table; unknown queries are an error."""

    def __init__(self, graph, n_classes, table):
        self.graph = graph
        self.n_classes = n_classes
        self.table = dict(table)
        self.query_count = 0
        self._clean = {}

    def query(self, target, delta=None):
        self.query_count += 1
        out = self.table[delta_key(target, delta)].copy()
        out.setflags(write=False)
        return out

    def clean_log_probs(self, target):
        if int(target) not in self._clean:
            self._clean[int(target)] = self.query(target)
        return self._clean[int(target)]

    def clean_prediction(self, nodes):
        return np.array([int(np.argmax(self.clean_log_probs(v))) for v in np.atleast_1d(nodes)])

    @contextlib.contextmanager
    def attack_session(self):
        yield self


def small_world(n=60, k=3, F=12, seed=0, space=G.DISCRETE, epochs=60):
    """A trained victim on a small planted partition: (graph, split, oracle)."""
    feats = G.PlantedPartitionFeatures(n_features=F, p_topic=0.4, p_noise=0.05)
    g, split = G.generate_planted_partition(n, k, 0.2, 0.02, RngStream(seed), feats, space)
    model, _ = V.train_victim(g, split, V.VictimConfig(epochs=epochs, seed=seed))
    return g, split, V.VictimOracle(model, g)


SEALED_ATTRS = ("_VictimOracle__model", "w0", "w1", "b0", "b1", "hidden_embeddings")
SEALED_NAMES = ("GcnModel", "gcn_forward", "load_victim")


def seal_violations(files=("attacker.py", "a2c.py")):
    """Static scan of attacker-side modules for any route to victim internals."""
    import nodeinject
    src = Path(nodeinject.__file__).parent
    found = []
    for name in files:
        tree = ast.parse((src / name).read_text())
        for node in ast.walk(tree):
            if isinstance(node, ast.ImportFrom) and node.module and "victim" in node.module:
                found += [f"{name}: imports {a.name}" for a in node.names
                          if a.name not in ("VictimOracle", "ConfigError")]
            if isinstance(node, ast.Attribute) and node.attr in SEALED_ATTRS:
                found.append(f"{name}:{node.lineno}: .{node.attr}")
            if isinstance(node, ast.Name) and node.id in SEALED_NAMES:
                found.append(f"{name}:{node.lineno}: {node.id}")
    return found
