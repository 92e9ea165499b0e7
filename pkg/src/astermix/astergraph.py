"""Aster graphs: arrow families composed along a predecessor tree.

Every individual carries the same graph.  Vectors over the whole data set
are flattened individual-major: entry ``i * n_nodes + j`` belongs to node
``j`` of individual ``i``.

The conditional canonical parameters ``theta`` relate to the unconditional
(flat-family) canonical parameters ``phi`` by

    theta_j = phi_j + sum_{k : pred(k) = j} c_k(theta_k)

evaluated leaf to root, and the log likelihood is

    l(phi) = sum_j y_j theta_j - y_pred(j) c_j(theta_j)  =  y'phi - c(phi)

with the value at the constant root node equal to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import expfam
from .errors import DomainError, GraphSpecError, ResponseError
from .expfam import Family

__all__ = [
    "CONSTANT_ONE",
    "GraphSpec",
    "BlockDiag",
    "parse_graph",
    "read_graph",
    "validate_response",
    "theta_from_phi",
    "phi_from_theta",
    "joint_loglik",
    "joint_mean",
    "joint_variance",
    "simulate_graph",
]

CONSTANT_ONE = "1"


@dataclass(frozen=True)
class GraphSpec:
    """Predecessor tree of arrow families, replicated once per individual.

    Parameters
    ----------
    nodes : sequence of str
        Node names, in file order.
    preds : sequence of str
        Predecessor of each node, either another node name or ``"1"`` for
        the constant root.
    families : sequence of Family or str
        Arrow family of each node.
    """

    nodes: tuple
    preds: tuple
    families: tuple
    pred_index: tuple = field(init=False, repr=False, compare=False)
    order: tuple = field(init=False, repr=False, compare=False)
    successors: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = tuple(str(n) for n in self.nodes)
        preds = tuple(str(p) for p in self.preds)
        fams = tuple(f if isinstance(f, Family) else Family.parse(f) for f in self.families)
        if not nodes:
            raise GraphSpecError("graph has no nodes")
        if not (len(nodes) == len(preds) == len(fams)):
            raise GraphSpecError("nodes, preds and families must have equal length")
        if len(set(nodes)) != len(nodes):
            raise GraphSpecError("duplicate node names")
        if CONSTANT_ONE in nodes:
            raise GraphSpecError(f"node name {CONSTANT_ONE!r} is reserved for the root")
        index = {n: i for i, n in enumerate(nodes)}
        pidx = []
        for n, p in zip(nodes, preds):
            if p == CONSTANT_ONE:
                pidx.append(-1)
            elif p in index:
                pidx.append(index[p])
            else:
                raise GraphSpecError(f"node {n!r} has unknown predecessor {p!r}")
        succ = [[] for _ in nodes]
        for j, p in enumerate(pidx):
            if p >= 0:
                succ[p].append(j)
        # topological order by breadth-first search from the root
        order = [j for j, p in enumerate(pidx) if p < 0]
        pos = 0
        while pos < len(order):
            order.extend(succ[order[pos]])
            pos += 1
        if len(order) != len(nodes):
            raise GraphSpecError("predecessor relation contains a cycle")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "preds", preds)
        object.__setattr__(self, "families", fams)
        object.__setattr__(self, "pred_index", tuple(pidx))
        object.__setattr__(self, "order", tuple(order))
        object.__setattr__(self, "successors", tuple(tuple(s) for s in succ))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def index(self, node: str) -> int:
        try:
            return self.nodes.index(node)
        except ValueError:
            raise DomainError(f"unknown node {node!r}") from None

    @property
    def all_gaussian_roots(self) -> bool:
        return all(f is Family.GAUSSIAN for f in self.families) and all(
            p < 0 for p in self.pred_index
        )

    def to_text(self) -> str:
        lines = ["# name pred family"]
        for n, p, f in zip(self.nodes, self.preds, self.families):
            lines.append(f"{n} {p} {f.value}")
        return "\n".join(lines) + "\n"


def parse_graph(text: str) -> GraphSpec:
    """Parse a graph specification document.

    One node per line, in order, as three whitespace-separated fields::

        # name  pred  family
        y1      1     ber
        y2      y1    ztpois
        y3      y2    pois

    ``pred`` is a previously or later listed node name, or ``1`` for the
    constant root.  ``family`` is one of ``ber``, ``pois``, ``ztpois``,
    ``gauss``.  Fields may also be written ``key=value`` in any order.
    Blank lines and ``#`` comments are ignored.
    """
    nodes, preds, fams = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        rec = {}
        if any("=" in p for p in parts):
            for p in parts:
                if "=" not in p:
                    raise GraphSpecError("mixed positional and key=value fields", lineno)
                k, v = p.split("=", 1)
                if k not in ("name", "pred", "family"):
                    raise GraphSpecError(f"unknown key {k!r}", lineno, k)
                rec[k] = v
        else:
            if len(parts) != 3:
                raise GraphSpecError(f"expected 3 fields, found {len(parts)}", lineno)
            rec = dict(zip(("name", "pred", "family"), parts))
        for key in ("name", "pred", "family"):
            if not rec.get(key):
                raise GraphSpecError("missing value", lineno, key)
        if rec["name"] in nodes:
            raise GraphSpecError(f"duplicate node {rec['name']!r}", lineno, "name")
        try:
            fams.append(Family.parse(rec["family"]))
        except DomainError as exc:
            raise GraphSpecError(str(exc), lineno, "family") from None
        nodes.append(rec["name"])
        preds.append(rec["pred"])
    for j, p in enumerate(preds):
        if p != CONSTANT_ONE and p not in nodes:
            raise GraphSpecError(f"unknown predecessor {p!r}", _line_of(text, nodes[j]), "pred")
    return GraphSpec(tuple(nodes), tuple(preds), tuple(fams))


def _line_of(text, name):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if parts and (parts[0] == name or f"name={name}" in parts):
            return lineno
    return None


def read_graph(path) -> GraphSpec:
    return parse_graph(Path(path).read_text())


class BlockDiag:
    """Symmetric block-diagonal matrix with one dense block per individual.

    ``blocks`` has shape ``(n_individuals, n_nodes, n_nodes)``.
    """

    def __init__(self, blocks):
        blocks = np.asarray(blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise DomainError("blocks must have shape (n, k, k)")
        self.blocks = blocks

    @property
    def block_size(self) -> int:
        return self.blocks.shape[1]

    @property
    def shape(self):
        n = self.blocks.shape[0] * self.blocks.shape[1]
        return (n, n)

    @classmethod
    def identity(cls, n_individuals, n_nodes):
        return cls(np.broadcast_to(np.eye(n_nodes), (n_individuals, n_nodes, n_nodes)).copy())

    @classmethod
    def from_dense(cls, matrix, block_size):
        matrix = np.asarray(matrix, dtype=float)
        n = matrix.shape[0]
        if matrix.shape != (n, n) or n % block_size:
            raise DomainError("matrix shape incompatible with block size")
        m = n // block_size
        blocks = np.empty((m, block_size, block_size))
        mask = np.zeros((n, n), dtype=bool)
        for i in range(m):
            s = slice(i * block_size, (i + 1) * block_size)
            blocks[i] = matrix[s, s]
            mask[s, s] = True
        if np.any(matrix[~mask] != 0.0):
            raise DomainError("matrix is not block diagonal by individual")
        return cls(blocks)

    def matmul(self, x):
        x = np.asarray(x, dtype=float)
        n, k, _ = self.blocks.shape
        if x.ndim == 1:
            return np.einsum("ijk,ik->ij", self.blocks, x.reshape(n, k)).ravel()
        p = x.shape[1]
        return np.einsum("ijk,ikp->ijp", self.blocks, x.reshape(n, k, p)).reshape(n * k, p)

    def quad(self, x, y=None):
        """``x' W y`` for matrices (or vectors) with rows in flat order."""
        wy = self.matmul(x if y is None else y)
        return np.asarray(x).T @ wy

    def to_dense(self):
        n, k, _ = self.blocks.shape
        out = np.zeros((n * k, n * k))
        for i in range(n):
            out[i * k:(i + 1) * k, i * k:(i + 1) * k] = self.blocks[i]
        return out

    def to_sparse(self):
        return sp.block_diag(list(self.blocks), format="csr")

    def asymmetry(self) -> float:
        return float(np.max(np.abs(self.blocks - self.blocks.transpose(0, 2, 1)), initial=0.0))

    def __repr__(self):
        n, k, _ = self.blocks.shape
        return f"BlockDiag(n_individuals={n}, block_size={k})"


def _as_2d(graph: GraphSpec, v, what="vector"):
    v = np.asarray(v, dtype=float)
    k = graph.n_nodes
    if v.ndim != 1 or v.size % k:
        raise DomainError(f"{what} length {v.size} is not a multiple of {k} nodes")
    return v.reshape(-1, k)


def validate_response(graph: GraphSpec, y) -> np.ndarray:
    """Check the structural constraints on ``y``; return it as (n, k).

    Raises ResponseError naming the node and (1-based) individual.
    """
    y2 = _as_2d(graph, y, "response") if np.ndim(y) == 1 else np.asarray(y, dtype=float)
    for j in graph.order:
        node, fam, p = graph.nodes[j], graph.families[j], graph.pred_index[j]
        col = y2[:, j]
        bad = ~np.isfinite(col)
        if np.any(bad):
            _raise_resp(node, bad, "is not finite")
        if fam.integer_valued:
            bad = (col < 0) | (col != np.round(col))
            if np.any(bad):
                _raise_resp(node, bad, "must be a nonnegative integer")
        if p < 0:
            if fam is Family.BERNOULLI and np.any(col > 1):
                _raise_resp(node, col > 1, "Bernoulli value exceeds 1")
            if fam is Family.ZERO_TRUNCATED_POISSON and np.any(col < 1):
                _raise_resp(node, col < 1, "zero-truncated Poisson value below 1")
            continue
        parent = y2[:, p]
        pname = graph.nodes[p]
        bad = (parent < 0) | (parent != np.round(parent))
        if np.any(bad):
            _raise_resp(node, bad, f"predecessor {pname!r} is not a valid trial count")
        bad = (parent == 0) & (col != 0)
        if np.any(bad):
            _raise_resp(node, bad, f"is nonzero although predecessor {pname!r} is zero")
        if fam is Family.BERNOULLI and np.any(col > parent):
            _raise_resp(node, col > parent, f"Bernoulli count exceeds predecessor {pname!r}")
        if fam is Family.ZERO_TRUNCATED_POISSON and np.any(col < parent):
            _raise_resp(node, col < parent, f"zero-truncated Poisson sum below predecessor {pname!r}")
    return y2


def _raise_resp(node, mask, text):
    row = int(np.flatnonzero(mask)[0]) + 1
    raise ResponseError(f"row {row}: node {node!r} {text}", node=node, row=row)


def _theta2(graph: GraphSpec, phi2):
    theta = phi2.copy()
    for j in reversed(graph.order):
        for k in graph.successors[j]:
            theta[:, j] += expfam.cumulant(graph.families[k], theta[:, k])
    return theta


def theta_from_phi(graph: GraphSpec, phi) -> np.ndarray:
    """Conditional canonical parameters from unconditional ones."""
    phi2 = _as_2d(graph, phi, "phi")
    if not np.all(np.isfinite(phi2)):
        raise DomainError("phi must be finite")
    return _theta2(graph, phi2).ravel()


def phi_from_theta(graph: GraphSpec, theta) -> np.ndarray:
    """Inverse of :func:`theta_from_phi`."""
    th = _as_2d(graph, theta, "theta")
    phi = th.copy()
    for j in range(graph.n_nodes):
        for k in graph.successors[j]:
            phi[:, j] -= expfam.cumulant(graph.families[k], th[:, k])
    return phi.ravel()


def _trials(graph, y2):
    n = y2.shape[0]
    return np.column_stack(
        [np.ones(n) if p < 0 else y2[:, p] for p in graph.pred_index]
    ) if graph.n_nodes else np.empty((n, 0))


def _loglik2(graph, y2, theta):
    trials = _trials(graph, y2)
    total = np.sum(y2 * theta)
    for j, fam in enumerate(graph.families):
        total -= np.dot(trials[:, j], expfam.cumulant(fam, theta[:, j]))
    return float(total)


def joint_loglik(graph: GraphSpec, y, phi) -> float:
    """Log likelihood ``l(phi) = y'phi - c(phi)`` of the flat family."""
    y2 = validate_response(graph, y)
    phi2 = _as_2d(graph, phi, "phi")
    if phi2.shape != y2.shape:
        raise DomainError("y and phi have different lengths")
    if not np.all(np.isfinite(phi2)):
        raise DomainError("phi must be finite")
    return _loglik2(graph, y2, _theta2(graph, phi2))


def _mean2(graph, theta):
    mu = np.empty_like(theta)
    for j in graph.order:
        p = graph.pred_index[j]
        m = expfam.mean(graph.families[j], theta[:, j])
        mu[:, j] = m if p < 0 else mu[:, p] * m
    return mu


def joint_mean(graph: GraphSpec, phi) -> np.ndarray:
    """Unconditional mean value parameter ``mu(phi) = c'(phi)``."""
    phi2 = _as_2d(graph, phi, "phi")
    if not np.all(np.isfinite(phi2)):
        raise DomainError("phi must be finite")
    return _mean2(graph, _theta2(graph, phi2)).ravel()


def _variance_blocks(graph, theta):
    n, k = theta.shape
    # dtheta_j / dphi_m, leaf to root
    jt = np.zeros((n, k, k))
    for j in reversed(graph.order):
        jt[:, j, j] = 1.0
        for s in graph.successors[j]:
            jt[:, j, :] += expfam.mean(graph.families[s], theta[:, s])[:, None] * jt[:, s, :]
    # dmu_j / dphi_m, root to leaf
    mu = np.empty((n, k))
    jm = np.zeros((n, k, k))
    for j in graph.order:
        fam, p = graph.families[j], graph.pred_index[j]
        m = expfam.mean(fam, theta[:, j])
        v = expfam.variance(fam, theta[:, j])
        if p < 0:
            mu[:, j] = m
            jm[:, j, :] = v[:, None] * jt[:, j, :]
        else:
            mu[:, j] = mu[:, p] * m
            jm[:, j, :] = jm[:, p, :] * m[:, None] + (mu[:, p] * v)[:, None] * jt[:, j, :]
    return 0.5 * (jm + jm.transpose(0, 2, 1)), mu


def joint_variance(graph: GraphSpec, phi) -> BlockDiag:
    """Variance matrix ``W(phi) = c''(phi)``, block diagonal by individual."""
    phi2 = _as_2d(graph, phi, "phi")
    if not np.all(np.isfinite(phi2)):
        raise DomainError("phi must be finite")
    blocks, _ = _variance_blocks(graph, _theta2(graph, phi2))
    return BlockDiag(blocks)


def simulate_graph(graph: GraphSpec, phi, rng: np.random.Generator) -> np.ndarray:
    """Draw one response vector, root to leaf."""
    phi2 = _as_2d(graph, phi, "phi")
    theta = _theta2(graph, phi2)
    y = np.zeros_like(theta)
    for j in graph.order:
        p = graph.pred_index[j]
        trials = np.ones(theta.shape[0], dtype=np.int64) if p < 0 else y[:, p].astype(np.int64)
        y[:, j] = expfam._simulate(graph.families[j], theta[:, j], trials, rng)
    return y.ravel()
