"""Dense float64 tensors with reverse-mode autodiff.

Every op returns a new :class:`Tensor` that remembers its parents and a
local gradient rule.  :func:`backward` records the reachable ops into a
:class:`ComputationTape` (reverse topological order) and replays it.
Arithmetic is delegated to numpy; the tape and gradient rules live here.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64
GUMBEL_CLAMP = 1e-10
SIGMA_FLOOR = 1e-4


class DimensionError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an op would commit NaN or Inf into a tensor."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def parameter(data, name: str | None = None) -> Tensor:
    t = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
    t.zero_grad()
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


def _make(data, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / b.data ** 2, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,), "square")


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: ((a.data > 0) * g,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(_softplus(a.data), (a,), lambda g: (g * s,), "softplus")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without forming the sigmoid."""
    a = as_tensor(a)
    s = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(-_softplus(-a.data), (a,), lambda g: (g * (1.0 - s),), "log_sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data.copy())


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient flows to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=DTYPE)
    if hard.shape != soft.shape:
        raise DimensionError(f"straight_through: {hard.shape} vs {soft.shape}")
    return _make(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), rule, "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def column_sum_readout(h) -> Tensor:
    """Graph readout: sum the rows of an [n, d] matrix into a [d] vector."""
    h = as_tensor(h)
    if h.data.ndim != 2:
        raise DimensionError(f"readout expects a matrix, got shape {h.shape}")
    return sum(h, axis=0)


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return _make(ad @ bd, (a, b), rule, "matmul")


def spmm(adj, x) -> Tensor:
    """Constant (dense or scipy-sparse) matrix times a tensor."""
    x = as_tensor(x)
    if adj.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm: {adj.shape} @ {x.shape}")
    out = adj @ x.data
    if sp.issparse(out):
        out = out.toarray()
    adj_t = adj.T
    return _make(np.asarray(out), (x,), lambda g: (np.asarray(adj_t @ g),), "spmm")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(data, ts, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def repeat_rows(x, n: int) -> Tensor:
    """Stack ``n`` copies of a vector into an [n, d] matrix."""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise DimensionError("repeat_rows expects a vector")
    return _make(np.tile(x.data, (n, 1)), (x,), lambda g: (g.sum(axis=0),), "repeat_rows")


def take(x, idx) -> Tensor:
    """Index along the leading axis (rows of a matrix, entries of a vector)."""
    x = as_tensor(x)
    idx_arr = np.asarray(idx)
    if idx_arr.dtype == bool or not np.issubdtype(idx_arr.dtype, np.integer):
        raise DimensionError("take expects integer indices")
    if idx_arr.size and (idx_arr.max() >= x.shape[0] or idx_arr.min() < -x.shape[0]):
        raise IndexError(f"index {idx} out of range for leading size {x.shape[0]}")

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx_arr, g)
        return (full,)

    return _make(x.data[idx_arr], (x,), rule, "take")


row_index = take


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ---------------------------------------------------------------- normalizers


def softmax(x, mask=None) -> Tensor:
    """Softmax over a vector; entries where ``mask`` is False are exactly 0."""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise DimensionError("softmax expects a vector")
    keep = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != x.shape:
        raise DimensionError(f"mask shape {keep.shape} != {x.shape}")
    if not keep.any():
        raise InvalidMaskError("softmax: every entry is masked")
    z = np.where(keep, x.data, -np.inf)
    z = z - z[keep].max()
    e = np.where(keep, np.exp(z), 0.0)
    s = e / e.sum()

    def rule(g):
        return (s * (g - np.dot(g, s)),)

    return _make(s, (x,), rule, "softmax")


def log_softmax(x) -> Tensor:
    """Log-softmax over the last axis (vector or row-wise matrix)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits, label: int) -> Tensor:
    """-log softmax(logits)[label]; accepts raw logits or log-probabilities."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1 or logits.shape[0] < 2:
        raise DimensionError("cross_entropy expects a vector with at least 2 classes")
    if not 0 <= int(label) < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    return neg(take(log_softmax(logits), int(label)))


def nll(log_probs, label: int) -> Tensor:
    """Negative log-likelihood of ``label`` under already-normalized log-probs."""
    log_probs = as_tensor(log_probs)
    if not 0 <= int(label) < log_probs.shape[-1]:
        raise IndexError(f"label {label} out of range")
    return neg(take(log_probs, int(label)))


# ---------------------------------------------------------------- sampling


@dataclass
class RngStream:
    """Seeded random stream (numpy PCG64)."""

    seed: int
    algorithm: str = field(default="PCG64", init=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, key: int | str) -> "RngStream":
        """Independent child stream derived from (seed, key); string keys are hashed."""
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
        ss = np.random.SeedSequence([self.seed, int(key)])
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def gumbel(self, size=None) -> np.ndarray:
        u = np.clip(self._gen.random(size), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
        return -np.log(-np.log(u))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def categorical(self, p: np.ndarray) -> int:
        c = np.cumsum(p)
        u = self._gen.random() * c[-1]
        i = int(np.searchsorted(c, u, side="right"))
        i = min(i, len(p) - 1)
        # never land on a zero-probability slot through rounding at the edge
        while p[i] <= 0.0:
            i -= 1
        return i

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


def gumbel_bernoulli_st(logits, tau: float, rng: RngStream) -> Tensor:
    """Binary-concrete sample, rounded in the forward pass (straight-through).

    The relaxed sample is ``sigmoid((logits + g1 - g2) / tau)`` with g1, g2
    iid Gumbel(0, 1), so ``P(out == 1) = sigmoid(logits)``.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    noise = rng.gumbel(logits.shape) - rng.gumbel(logits.shape)
    relaxed = sigmoid(scale(add(logits, noise), 1.0 / tau))
    hard = np.floor(relaxed.data + 0.5)
    return straight_through(hard, relaxed)


def positive(raw) -> Tensor:
    """softplus(raw) + SIGMA_FLOOR, used to keep Gaussian scales positive."""
    return add(softplus(raw), SIGMA_FLOOR)


def gaussian_sample(mu, sigma, rng: RngStream) -> Tensor:
    """Reparameterized draw mu + sigma * eps, eps ~ N(0, I)."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise DimensionError(f"gaussian_sample: {mu.shape} vs {sigma.shape}")
    if np.any(sigma.data <= 0):
        raise ParameterError("sigma must be strictly positive")
    eps = rng.normal(mu.shape)
    return add(mu, mul(sigma, eps))


def gaussian_log_density(x, mu, sigma) -> Tensor:
    """Elementwise log N(x; mu, sigma^2)."""
    x, mu, sigma = as_tensor(x), as_tensor(mu), as_tensor(sigma)
    z = div(sub(x, mu), sigma)
    return sub(scale(square(z), -0.5), add(log(sigma), 0.5 * np.log(2 * np.pi)))


# ---------------------------------------------------------------- autodiff


class ComputationTape:
    """Ops reachable from a root, stored in topological order."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def replay(self, root: Tensor, seed_grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed_grad}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if loss.data.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    ComputationTape.record(loss).replay(loss, np.ones((), dtype=DTYPE))


class Adam:
    """Adam with bias correction; zeroes gradients after each step."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise StateError(f"parameter {p.name or p.shape} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(m, dtype=DTYPE) for m in state["m"]]
        self.v = [np.array(v, dtype=DTYPE) for v in state["v"]]


def adam_step(opt: Adam) -> None:
    opt.step()


# ---------------------------------------------------------------- gradient checking


def numerical_grad(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` w.r.t. each parameter."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    numeric = numerical_grad(fn, params, h)
    for p in params:
        p.zero_grad()
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
