"""Dense-matrix reverse-mode automatic differentiation.

Small tape-style graphs of 2-D float64 matrices: enough ops for affine
layers, ReLU, max-pooling over points, pairwise embedding distances and
weighted cross entropy.  Values are computed eagerly at node creation;
``forward`` re-executes the whole tape (used after perturbing leaves),
``backward`` fills gradient accumulators in reverse topological order.

Conventions: ReLU and the sqrt inside pairwise distances use gradient 0 at
their kinks; column max-pooling breaks ties toward the lowest row index.
No broadcasting beyond the row-vector bias in ``affine``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Structural problem in a computation graph: bad shape, bad root, bad input."""


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Validate and convert a value to a finite 2-D float64 array."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise GraphError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GraphError(f"{name}: non-finite entries are not admitted into the graph")
    return arr


@dataclass
class Parameter:
    """A named, trainable matrix shared across graphs (and checkpoints)."""

    name: str
    value: np.ndarray

    def __post_init__(self):
        self.value = as_matrix(self.value, self.name)


class Node:
    """One tape entry: an op, its input nodes, its value and gradient."""

    __slots__ = ("graph", "idx", "op", "name", "inputs", "value", "grad",
                 "trainable", "_fwd", "_bwd", "_kink")

    def __init__(self, graph, op, name, inputs, value, trainable=False):
        self.graph = graph
        self.op = op
        self.name = name
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.trainable = trainable
        self._fwd = None
        self._bwd = None
        self._kink = None
        self.idx = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.idx}:{self.op}:{self.name}, shape={self.value.shape})"


class Graph:
    """An ordered tape of nodes; creation order is the topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name="leaf", trainable=False) -> Node:
        return Node(self, "leaf", name, [], as_matrix(value, name), trainable)

    def constant(self, value, name="const") -> Node:
        return self.leaf(value, name=name, trainable=False)

    def parameter(self, param: Parameter) -> Node:
        """Bind a Parameter's array as a trainable leaf (shares the buffer)."""
        return Node(self, "leaf", param.name, [], param.value, trainable=True)

    @property
    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.trainable]

    def zero_grad(self):
        for n in self.nodes:
            n.grad = None


def forward(graph: Graph) -> np.ndarray:
    """Re-execute every non-leaf node in order; returns the root (last) value."""
    if not graph.nodes:
        raise GraphError("forward: empty graph")
    for node in graph.nodes:
        if node._fwd is not None:
            node._fwd()
    return graph.nodes[-1].value


def backward(graph: Graph, root: Node | None = None) -> None:
    """Accumulate d(root)/d(node) into every node's ``grad``.

    Leaf gradients accumulate across calls; internal gradients are reset at
    the start of each pass.  The root must be a 1x1 scalar node.
    """
    if root is None:
        if not graph.nodes:
            raise GraphError("backward: empty graph")
        root = graph.nodes[-1]
    if root.value.shape != (1, 1):
        raise GraphError(
            f"backward: root {root.name!r} must be scalar (1x1), got {root.value.shape}")
    for node in graph.nodes:
        if node._fwd is not None:
            node.grad = np.zeros_like(node.value)
        elif node.grad is None:
            node.grad = np.zeros_like(node.value)
    root.grad = root.grad + np.ones((1, 1))
    for node in reversed(graph.nodes[: root.idx + 1]):
        if node._bwd is not None:
            node._bwd()


def kink_signature(graph: Graph) -> list[np.ndarray]:
    """Activation patterns of every non-smooth op, for kink detection."""
    sigs = []
    for node in graph.nodes:
        if node._kink is not None:
            sigs.append(node._kink())
    return sigs


def _same_signature(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# ops


def _check_same_shape(op, a: Node, b: Node):
    if a.value.shape != b.value.shape:
        raise GraphError(
            f"{op}: shape mismatch {a.value.shape} vs {b.value.shape} "
            f"(inputs {a.name!r}, {b.name!r})")


def add(a: Node, b: Node, name="add") -> Node:
    _check_same_shape("add", a, b)
    out = Node(a.graph, "add", name, [a, b], a.value + b.value)

    def fwd():
        out.value = a.value + b.value

    def bwd():
        a.grad += out.grad
        b.grad += out.grad

    out._fwd, out._bwd = fwd, bwd
    return out


def sub(a: Node, b: Node, name="sub") -> Node:
    _check_same_shape("sub", a, b)
    out = Node(a.graph, "sub", name, [a, b], a.value - b.value)

    def fwd():
        out.value = a.value - b.value

    def bwd():
        a.grad += out.grad
        b.grad -= out.grad

    out._fwd, out._bwd = fwd, bwd
    return out


def mul(a: Node, b: Node, name="mul") -> Node:
    """Elementwise product."""
    _check_same_shape("mul", a, b)
    out = Node(a.graph, "mul", name, [a, b], a.value * b.value)

    def fwd():
        out.value = a.value * b.value

    def bwd():
        a.grad += out.grad * b.value
        b.grad += out.grad * a.value

    out._fwd, out._bwd = fwd, bwd
    return out


def scale(x: Node, c: float, name="scale") -> Node:
    c = float(c)
    out = Node(x.graph, "scale", name, [x], x.value * c)

    def fwd():
        out.value = x.value * c

    def bwd():
        x.grad += out.grad * c

    out._fwd, out._bwd = fwd, bwd
    return out


def affine(x: Node, w: Node, b: Node, name="affine") -> Node:
    """x @ w + b, with b a 1xC row vector added to every row."""
    if x.value.shape[1] != w.value.shape[0]:
        raise GraphError(
            f"affine {name!r}: inner dims {x.value.shape} @ {w.value.shape} "
            f"(inputs {x.name!r}, {w.name!r})")
    if b.value.shape != (1, w.value.shape[1]):
        raise GraphError(
            f"affine {name!r}: bias must be 1x{w.value.shape[1]}, got {b.value.shape}")
    out = Node(x.graph, "affine", name, [x, w, b], x.value @ w.value + b.value)

    def fwd():
        out.value = x.value @ w.value + b.value

    def bwd():
        x.grad += out.grad @ w.value.T
        w.grad += x.value.T @ out.grad
        b.grad += out.grad.sum(axis=0, keepdims=True)

    out._fwd, out._bwd = fwd, bwd
    return out


def relu(x: Node, name="relu") -> Node:
    out = Node(x.graph, "relu", name, [x], np.maximum(x.value, 0.0))

    def fwd():
        out.value = np.maximum(x.value, 0.0)

    def bwd():
        x.grad += out.grad * (x.value > 0.0)

    out._fwd, out._bwd = fwd, bwd
    out._kink = lambda: x.value > 0.0
    return out


def maxpool_rows(x: Node, name="maxpool") -> Node:
    """Columnwise max over rows -> 1xC; ties break to the lowest row index."""
    out = Node(x.graph, "maxpool_rows", name, [x],
               x.value.max(axis=0, keepdims=True))

    def fwd():
        out.value = x.value.max(axis=0, keepdims=True)

    def bwd():
        idx = x.value.argmax(axis=0)
        cols = np.arange(x.value.shape[1])
        g = np.zeros_like(x.value)
        g[idx, cols] = out.grad[0]
        x.grad += g

    out._fwd, out._bwd = fwd, bwd
    out._kink = lambda: x.value.argmax(axis=0)
    return out


def tile_rows(x: Node, n: int, name="tile") -> Node:
    """Repeat a 1xC row n times -> nxC."""
    if x.value.shape[0] != 1:
        raise GraphError(f"tile_rows {name!r}: input must be 1xC, got {x.value.shape}")
    out = Node(x.graph, "tile_rows", name, [x], np.repeat(x.value, n, axis=0))

    def fwd():
        out.value = np.repeat(x.value, n, axis=0)

    def bwd():
        x.grad += out.grad.sum(axis=0, keepdims=True)

    out._fwd, out._bwd = fwd, bwd
    return out


def concat_cols(a: Node, b: Node, name="concat") -> Node:
    if a.value.shape[0] != b.value.shape[0]:
        raise GraphError(
            f"concat_cols {name!r}: row counts differ "
            f"{a.value.shape} vs {b.value.shape}")
    out = Node(a.graph, "concat_cols", name, [a, b],
               np.concatenate([a.value, b.value], axis=1))
    na = a.value.shape[1]

    def fwd():
        out.value = np.concatenate([a.value, b.value], axis=1)

    def bwd():
        a.grad += out.grad[:, :na]
        b.grad += out.grad[:, na:]

    out._fwd, out._bwd = fwd, bwd
    return out


def sum_all(x: Node, name="sum") -> Node:
    out = Node(x.graph, "sum_all", name, [x], np.array([[x.value.sum()]]))

    def fwd():
        out.value = np.array([[x.value.sum()]])

    def bwd():
        x.grad += np.full_like(x.value, out.grad[0, 0])

    out._fwd, out._bwd = fwd, bwd
    return out


def mean_all(x: Node, name="mean") -> Node:
    out = Node(x.graph, "mean_all", name, [x], np.array([[x.value.mean()]]))

    def fwd():
        out.value = np.array([[x.value.mean()]])

    def bwd():
        x.grad += np.full_like(x.value, out.grad[0, 0] / x.value.size)

    out._fwd, out._bwd = fwd, bwd
    return out


def _pairwise_sq(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    return sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)


def pairwise_distances(x: Node, name="pairwise") -> Node:
    """NxN matrix of L2 distances between the rows of x.

    Computed via the quadratic expansion with negative round-off clamped to
    0 before the sqrt; the diagonal is forced to exactly 0 and the gradient
    of sqrt at 0 is taken as 0.
    """

    def compute():
        d2 = np.maximum(_pairwise_sq(x.value), 0.0)
        s = np.sqrt(d2)
        np.fill_diagonal(s, 0.0)
        return s

    out = Node(x.graph, "pairwise_distances", name, [x], compute())

    def fwd():
        out.value = compute()

    def bwd():
        s = out.value
        w = out.grad + out.grad.T
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(s > 0.0, w / np.where(s > 0.0, s, 1.0), 0.0)
        x.grad += w.sum(axis=1, keepdims=True) * x.value - w @ x.value

    out._fwd, out._bwd = fwd, bwd
    out._kink = lambda: _pairwise_sq(x.value) <= 0.0
    return out


def weighted_cross_entropy(logits: Node, labels, weights, name="xent") -> Node:
    """Mean over rows of weights[label] * (-log softmax(row)[label]).

    ``labels`` and ``weights`` are fixed arrays, not graph nodes; the
    softmax is stabilized by per-row max subtraction.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    n, c = logits.value.shape
    if labels.shape[0] != n:
        raise GraphError(f"xent {name!r}: {labels.shape[0]} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise GraphError(f"xent {name!r}: labels must lie in [0, {c})")
    if weights.shape[0] != c or np.any(weights <= 0):
        raise GraphError(f"xent {name!r}: need {c} positive class weights")
    w_row = weights[labels]
    rows = np.arange(n)

    def compute():
        z = logits.value
        zmax = z.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
        nll = logsumexp[:, 0] - z[rows, labels]
        return np.array([[(w_row * nll).mean()]])

    out = Node(logits.graph, "weighted_cross_entropy", name, [logits], compute())

    def fwd():
        out.value = compute()

    def bwd():
        z = logits.value
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        p = e / e.sum(axis=1, keepdims=True)
        p[rows, labels] -= 1.0
        logits.grad += out.grad[0, 0] * (w_row[:, None] * p) / n

    out._fwd, out._bwd = fwd, bwd
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class ParamCheck:
    """Gradient-check outcome for one parameter."""

    max_rel_err: float
    n_checked: int
    n_excluded: int


@dataclass
class GradReport:
    """Central-difference check of every trainable leaf against backward."""

    step: float
    per_param: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        errs = [c.max_rel_err for c in self.per_param.values() if c.n_checked > 0]
        return max(errs) if errs else 0.0

    @property
    def n_excluded(self) -> int:
        return sum(c.n_excluded for c in self.per_param.values())


def check_gradients(graph: Graph, step: float, root: Node | None = None,
                    eps_abs: float = 1e-8) -> GradReport:
    """Compare analytic gradients with central differences at ``step``.

    Entries whose +/-step evaluations land on different activation patterns
    (a ReLU flip, a max-pool argmax change, a distance leaving 0) are flagged
    as non-differentiable and excluded from the per-parameter max.  Parameter
    values are restored on exit.
    """
    if step <= 0:
        raise GraphError(f"check_gradients: step must be positive, got {step}")
    if root is None:
        root = graph.nodes[-1]
    forward(graph)
    graph.zero_grad()
    backward(graph, root)
    analytic = {n.idx: n.grad.copy() for n in graph.parameters}

    report = GradReport(step=step)
    for leaf in graph.parameters:
        a = analytic[leaf.idx]
        max_err, n_checked, n_excluded = 0.0, 0, 0
        flat = leaf.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            forward(graph)
            f_plus = root.value[0, 0]
            sig_plus = kink_signature(graph)
            flat[k] = orig - step
            forward(graph)
            f_minus = root.value[0, 0]
            sig_minus = kink_signature(graph)
            flat[k] = orig
            if not _same_signature(sig_plus, sig_minus):
                n_excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a_k = a.reshape(-1)[k]
            err = abs(a_k - numeric) / max(abs(a_k), abs(numeric), eps_abs)
            max_err = max(max_err, err)
            n_checked += 1
        report.per_param[leaf.name] = ParamCheck(max_err, n_checked, n_excluded)
    forward(graph)
    return report


# ---------------------------------------------------------------------------
# checkpoint format: magic "SGW1", then per parameter
#   u32 name length, UTF-8 name, u32 rows, u32 cols, rows*cols little-endian f64

CHECKPOINT_MAGIC = b"SGW1"


def save_checkpoint(params: list[Parameter], path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            rows, cols = p.value.shape
            f.write(struct.pack("<II", rows, cols))
            f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> list[Parameter]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise GraphError(f"{path}: not a {CHECKPOINT_MAGIC.decode()} checkpoint")
    params, off = [], 4
    while off < len(blob):
        if off + 4 > len(blob):
            raise GraphError(f"{path}: truncated checkpoint")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        if off + 8 > len(blob):
            raise GraphError(f"{path}: truncated checkpoint after {name!r}")
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        nbytes = rows * cols * 8
        if off + nbytes > len(blob):
            raise GraphError(f"{path}: truncated values for {name!r}")
        value = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(rows, cols)
        off += nbytes
        params.append(Parameter(name, value.copy()))
    return params
