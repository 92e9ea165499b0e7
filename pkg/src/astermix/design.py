"""Model designs: offset, fixed and random model matrices, and the map
from random effects to variance components.

Formulas use a small mixed-model language::

    formula := term ("+" term)*
    term    := "1" | "(" "1" "|" group ")" | product
    product := inter ("*" inter)*          # A*B expands to A + B + A:B
    inter   := name (":" name)*
    group   := name (":" name)*

Each ``(1 | G)`` declares one variance component with one random effect
per observed level of ``G`` (or of the ``G:H`` cross).

Every node of the graph gets its own intercept column.  All other fixed
columns, and the random-effect indicator columns, are multiplied by the
indicator of the fitness node so they only act on that layer of the
graph.
"""

from __future__ import annotations

import csv
import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .astergraph import GraphSpec, validate_response
from .errors import DesignError, DomainError, FormulaError, ResponseError

__all__ = [
    "Formula",
    "parse_formula",
    "Dataset",
    "read_dataset",
    "ModelDesign",
    "build_design",
    "design_from_matrices",
    "read_matrix_csv",
]

RANK_TOL = 1e-8


# --------------------------------------------------------------------- #
# Formula language
# --------------------------------------------------------------------- #


@dataclass(frozen=True)
class Formula:
    """Parsed formula: fixed terms and random (variance component) terms.

    Terms are tuples of covariate names; the empty tuple is the intercept.
    """

    text: str
    fixed: tuple = ()
    random: tuple = ()
    intercept: bool = False

    def __add__(self, other: "Formula") -> "Formula":
        fixed = _dedupe(self.fixed + other.fixed)
        random = _dedupe(self.random + other.random)
        return Formula(
            f"{self.text} + {other.text}", fixed, random, self.intercept or other.intercept
        )

    @property
    def variables(self) -> set:
        return {v for t in self.fixed + self.random for v in t}


_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<num>\d+)|(?P<op>[+:*()|]))")


def _tokenize(text):
    pos, out = 0, []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            bad = text[pos:].lstrip()
            raise FormulaError(f"unexpected character {bad[0]!r}", text, len(text) - len(bad))
        kind = m.lastgroup
        start = m.start(kind)
        out.append((kind, m.group(kind), start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


def _dedupe(terms):
    seen, out = set(), []
    for t in terms:
        key = frozenset(t)
        if key not in seen:
            seen.add(key)
            out.append(t)
    return tuple(out)


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind=None, value=None):
        tok = self.toks[self.i]
        if (kind and tok[0] != kind) or (value and tok[1] != value):
            want = value or kind
            got = tok[1] or "end of formula"
            raise FormulaError(f"expected {want!r}, found {got!r}", self.text, tok[2])
        self.i += 1
        return tok

    def parse(self):
        fixed, random, intercept = [], [], False
        while True:
            kind, val, pos = self.peek()
            if kind == "num":
                self.take()
                if val == "1":
                    intercept = True
                elif val == "0":
                    pass
                else:
                    raise FormulaError(f"unexpected number {val!r}", self.text, pos)
            elif kind == "op" and val == "(":
                random.append(self.random_term())
            elif kind == "name":
                fixed.extend(self.product())
            else:
                raise FormulaError(f"expected a term, found {val or 'end of formula'!r}", self.text, pos)
            kind, val, pos = self.peek()
            if kind == "end":
                break
            if kind == "op" and val == "+":
                self.take()
                continue
            raise FormulaError(f"unknown operator {val!r}", self.text, pos)
        return Formula(self.text, _dedupe(fixed), _dedupe(random), intercept)

    def inter(self):
        names = [self.take("name")[1]]
        while self.peek()[:2] == ("op", ":"):
            self.take()
            names.append(self.take("name")[1])
        if len(set(names)) != len(names):
            raise FormulaError("repeated variable in interaction", self.text, self.peek()[2])
        return tuple(names)

    def product(self):
        factors = [self.inter()]
        while self.peek()[:2] == ("op", "*"):
            self.take()
            factors.append(self.inter())
        if len(factors) == 1:
            return [factors[0]]
        out = []
        for r in range(1, len(factors) + 1):
            for combo in itertools.combinations(factors, r):
                term = tuple(dict.fromkeys(v for f in combo for v in f))
                out.append(term)
        return out

    def random_term(self):
        self.take("op", "(")
        tok = self.take("num")
        if tok[1] != "1":
            raise FormulaError("only random intercepts (1 | G) are supported", self.text, tok[2])
        self.take("op", "|")
        group = self.inter()
        self.take("op", ")")
        return group


def parse_formula(text: str) -> Formula:
    """Parse a formula string into a :class:`Formula`."""
    if not text or not text.strip():
        raise FormulaError("empty formula", text or "", 0)
    return _Parser(text).parse()


# --------------------------------------------------------------------- #
# Data
# --------------------------------------------------------------------- #


@dataclass
class Dataset:
    """One row per individual: node responses plus covariates.

    Categorical covariates are stored as arrays of str; numeric ones as
    float arrays.
    """

    responses: dict
    covariates: dict
    n: int

    def kind(self, name):
        if name not in self.covariates:
            raise DesignError(f"unknown covariate {name!r}")
        return "numeric" if self.covariates[name].dtype.kind == "f" else "categorical"

    def response_matrix(self, graph: GraphSpec) -> np.ndarray:
        return np.column_stack([self.responses[n] for n in graph.nodes])

    def y(self, graph: GraphSpec) -> np.ndarray:
        return self.response_matrix(graph).ravel()

    @classmethod
    def from_columns(cls, graph: GraphSpec, columns: dict) -> "Dataset":
        n = None
        for name, col in columns.items():
            if n is None:
                n = len(col)
            elif len(col) != n:
                raise DesignError(f"column {name!r} has length {len(col)}, expected {n}")
        for node in graph.nodes:
            if node not in columns:
                raise DesignError(f"missing response column {node!r}")
        responses = {node: np.asarray(columns[node], dtype=float) for node in graph.nodes}
        covs = {}
        for name, col in columns.items():
            if name in responses:
                continue
            arr = np.asarray(col)
            covs[name] = arr.astype(float) if arr.dtype.kind in "fiub" else arr.astype(str)
        ds = cls(responses, covs, int(n or 0))
        if ds.n:
            validate_response(graph, ds.response_matrix(graph))
        return ds


def _parse_number(s):
    try:
        return float(s)
    except ValueError:
        return None


def read_dataset(path, graph: GraphSpec) -> Dataset:
    """Read a CSV data file (header row, one row per individual).

    Lines beginning with ``#`` are skipped.  Response columns are the
    graph's node names.  Other columns are covariates: numeric if every
    entry parses as a number, otherwise categorical.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        # lines starting with '#' are provenance comments
        lines = [(i, ln) for i, ln in enumerate(fh, start=1) if not ln.startswith("#")]
    numbered = zip((i for i, _ in lines), csv.reader(ln for _, ln in lines))
    try:
        header = [h.strip() for h in next(numbered)[1]]
    except StopIteration:
        raise DesignError(f"{path}: no rows") from None
    rows = []
    for lineno, row in numbered:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DesignError(
                f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}"
            )
        rows.append((lineno, [c.strip() for c in row]))
    if len(set(header)) != len(header):
        raise DesignError(f"{path}: duplicate column names in header")
    if not rows:
        raise DesignError(f"{path}: no rows")
    for node in graph.nodes:
        if node not in header:
            raise DesignError(f"{path}: missing response column {node!r}")
    columns = {}
    for c, name in enumerate(header):
        raw = [r[c] for _, r in rows]
        if name in graph.nodes:
            vals = []
            for (lineno, _), s in zip(rows, raw):
                v = _parse_number(s)
                if v is None:
                    raise DesignError(f"{path}: line {lineno}, column {name!r}: unparseable cell {s!r}")
                vals.append(v)
            columns[name] = np.array(vals)
        else:
            if any(s == "" for s in raw):
                lineno = rows[[s == "" for s in raw].index(True)][0]
                raise DesignError(f"{path}: line {lineno}, column {name!r}: empty cell")
            nums = [_parse_number(s) for s in raw]
            columns[name] = np.array(nums, dtype=float) if all(v is not None for v in nums) else np.array(raw, dtype=str)
    try:
        return Dataset.from_columns(graph, columns)
    except ResponseError as exc:
        line = rows[exc.row - 1][0]
        raise ResponseError(
            f"{path}: data row {exc.row} (line {line}): {str(exc).split(': ', 1)[1]}",
            node=exc.node,
            row=exc.row,
        ) from None


# --------------------------------------------------------------------- #
# Designs
# --------------------------------------------------------------------- #


@dataclass
class _Coding:
    """How each model column is computed from one individual's covariates."""

    fixed: list = field(default_factory=list)  # (term, [(var, kind, levels)])
    random: list = field(default_factory=list)  # (term, levels)
    fitness_index: int = 0
    fitness_interaction: bool = True
    random_interaction: bool = True


@dataclass
class ModelDesign:
    """Canonical affine submodel ``phi = a + M alpha + Z b``.

    Attributes
    ----------
    graph : GraphSpec
    n_individuals : int
    a : ndarray, shape (N,)
    M : ndarray, shape (N, p)
    Z : ndarray, shape (N, q)
    kmap : ndarray of int, shape (q,)
        Variance component index of each random effect.
    alpha_names, nu_names, b_names : list of str
    """

    graph: GraphSpec
    n_individuals: int
    a: np.ndarray
    M: np.ndarray
    Z: np.ndarray
    kmap: np.ndarray
    alpha_names: list
    nu_names: list
    b_names: list
    coding: _Coding | None = None

    def __post_init__(self):
        n = self.n_individuals * self.graph.n_nodes
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        self.M = np.asarray(self.M, dtype=float).reshape(n, -1)
        self.Z = np.asarray(self.Z, dtype=float).reshape(n, -1)
        self.kmap = np.asarray(self.kmap, dtype=int).reshape(-1)
        if self.a.size != n:
            raise DesignError(f"offset has length {self.a.size}, expected {n}")
        if self.kmap.size != self.Z.shape[1]:
            raise DesignError("kmap length differs from number of Z columns")
        nvc = len(self.nu_names)
        if self.kmap.size and (self.kmap.min() < 0 or self.kmap.max() >= nvc):
            raise DesignError("kmap refers to a nonexistent variance component")
        used = np.bincount(self.kmap, minlength=nvc) if nvc else np.zeros(0, int)
        if np.any(used == 0):
            raise DesignError(
                f"variance component {self.nu_names[int(np.flatnonzero(used == 0)[0])]!r} has no random effects"
            )
        if len(self.alpha_names) != self.M.shape[1] or len(self.b_names) != self.Z.shape[1]:
            raise DesignError("column names do not match matrix dimensions")

    @property
    def n_alpha(self) -> int:
        return self.M.shape[1]

    @property
    def n_b(self) -> int:
        return self.Z.shape[1]

    @property
    def n_nu(self) -> int:
        return len(self.nu_names)

    def component(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < self.n_nu:
                raise DomainError(f"no variance component {name}")
            return int(name)
        try:
            return self.nu_names.index(name)
        except ValueError:
            raise DomainError(f"unknown variance component {name!r}") from None

    def effects_of(self, j) -> np.ndarray:
        return np.flatnonzero(self.kmap == j)

    def phi(self, alpha, b) -> np.ndarray:
        return self.a + self.M @ np.asarray(alpha, float) + self.Z @ np.asarray(b, float)

    def check_rank(self):
        _check_rank(self.M, self.alpha_names)

    def context_rows(self, context: dict):
        """Rows ``(a, M, Z)`` of a single hypothetical individual.

        ``context`` maps covariate names to values.  Covariates of the
        fixed part must all be present; random grouping factors may be
        omitted, in which case that individual has no level of the factor
        and its Z rows for that component are zero.
        """
        if self.coding is None:
            raise DesignError("design was built from explicit matrices; use an existing individual")
        c = self.coding
        k = self.graph.n_nodes
        cols = []
        for term, codes in c.fixed:
            val = np.ones(1)
            for var, kind, levels in codes:
                if var not in context:
                    raise DesignError(f"context does not give covariate {var!r}")
                val = np.kron(val, _code_value(var, kind, levels, context[var]))
            cols.extend(val)
        m = np.zeros((k, k + len(cols)))
        m[:, :k] = np.eye(k)
        if c.fitness_interaction:
            m[c.fitness_index, k:] = cols
        else:
            m[:, k:] = cols
        zcols = []
        for term, levels in c.random:
            key = _level_key(term, context)
            zcols.extend(1.0 if (key is not None and lev == key) else 0.0 for lev in levels)
        z = np.zeros((k, len(zcols)))
        if c.random_interaction:
            z[c.fitness_index] = zcols
        else:
            z[:] = zcols
        return np.zeros(k), m, z


def _level_key(term, context):
    if any(v not in context for v in term):
        return None
    return ":".join(str(_fmt_level(context[v])) for v in term)


def _fmt_level(v):
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return str(v)


def _code_value(var, kind, levels, value):
    if kind == "numeric":
        try:
            return np.array([float(value)])
        except (TypeError, ValueError):
            raise DesignError(f"covariate {var!r} needs a numeric value, got {value!r}") from None
    value = str(value)
    all_levels = levels[1]
    if value not in all_levels:
        raise DesignError(f"unknown level {value!r} of covariate {var!r}")
    coded = levels[0]
    return np.array([1.0 if value == lev else 0.0 for lev in coded])


def _levels(col):
    return list(dict.fromkeys(col.tolist()))


def _check_rank(M, names):
    if M.shape[1] == 0:
        return
    s = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(s > RANK_TOL * s[0])) if s[0] > 0 else 0
    if rank < M.shape[1]:
        # name a column that is dependent on the ones before it
        for j in range(1, M.shape[1] + 1):
            sj = np.linalg.svd(M[:, :j], compute_uv=False)
            if np.sum(sj > RANK_TOL * s[0]) < j:
                raise DesignError(
                    f"fixed-effect model matrix is rank deficient (rank {rank} < {M.shape[1]}); "
                    f"column {names[j - 1]!r} is linearly dependent on earlier columns"
                )
        raise DesignError(f"fixed-effect model matrix is rank deficient (rank {rank})")


def build_design(
    graph: GraphSpec,
    data: Dataset,
    fixed: Formula,
    random: Formula | None = None,
    fitness_node: str | None = None,
    fitness_interaction: bool = True,
    random_interaction: bool = True,
) -> ModelDesign:
    """Build the model design from data and formulas.

    Categorical covariates use treatment coding with the first observed
    level as reference; a factor inside an interaction is coded by
    contrasts when the term with that factor removed is also in the model
    (the intercept always counts as present, because every node layer has
    its own intercept), and by full indicators otherwise.

    Parameters
    ----------
    fitness_node : str, optional
        Node whose rows receive the non-intercept columns; defaults to the
        last node in the graph.
    fitness_interaction, random_interaction : bool
        Whether fixed and random columns are restricted to fitness-node
        rows.  Node-layer intercepts are never restricted.
    """
    if random is not None:
        fixed = fixed + random
    if fitness_node is None:
        fitness_node = graph.nodes[-1]
    if fitness_node not in graph.nodes:
        raise DesignError(f"unknown fitness node {fitness_node!r}")
    if data.n == 0:
        raise DesignError("no rows")
    for var in fixed.variables:
        data.kind(var)
    k, n = graph.n_nodes, data.n
    fit_idx = graph.nodes.index(fitness_node)
    coding = _Coding(
        fitness_index=fit_idx,
        fitness_interaction=fitness_interaction,
        random_interaction=random_interaction,
    )

    present = {frozenset()} | {frozenset(t) for t in fixed.fixed}
    cols, names = [], []
    for term in fixed.fixed:
        if not term:
            continue
        codes, blocks, labels = [], [], []
        for var in term:
            col = data.covariates[var]
            if data.kind(var) == "numeric":
                codes.append((var, "numeric", None))
                blocks.append(col[:, None].astype(float))
                labels.append([var])
                continue
            lev = _levels(col)
            use = lev[1:] if frozenset(term) - {var} in present else lev
            if not use:
                raise DesignError(f"factor {var!r} has a single level")
            codes.append((var, "categorical", (use, lev)))
            blocks.append(np.column_stack([(col == L).astype(float) for L in use]))
            labels.append([f"{var}[{L}]" for L in use])
        mat = blocks[0]
        for blk in blocks[1:]:
            mat = np.einsum("ia,ib->iab", mat, blk).reshape(n, -1)
        for lab, j in zip(itertools.product(*labels), range(mat.shape[1])):
            if not np.any(mat[:, j]):
                raise DesignError(f"empty factor level combination {':'.join(lab)}")
            names.append(":".join(lab))
        cols.append(mat)
        coding.fixed.append((term, codes))
    X = np.hstack(cols) if cols else np.zeros((n, 0))

    M = np.zeros((n, k, k + X.shape[1]))
    M[:, :, :k] = np.eye(k)
    if fitness_interaction:
        M[:, fit_idx, k:] = X
    else:
        M[:, :, k:] = X[:, None, :]
    M = M.reshape(n * k, -1)
    alpha_names = [f"(Intercept):{node}" for node in graph.nodes] + names
    _check_rank(M, alpha_names)

    zcols, kmap, b_names, nu_names = [], [], [], []
    for j, term in enumerate(fixed.random):
        for var in term:
            if var not in data.covariates:
                raise DesignError(f"unknown covariate {var!r}")
        keys = np.array(
            [":".join(_fmt_level(data.covariates[v][i]) for v in term) for i in range(n)]
        )
        lev = _levels(keys)
        for L in lev:
            zcols.append((keys == L).astype(float))
            kmap.append(j)
            b_names.append(f"{':'.join(term)}[{L}]")
        nu_names.append(":".join(term))
        coding.random.append((term, lev))
    G = np.column_stack(zcols) if zcols else np.zeros((n, 0))
    Z = np.zeros((n, k, G.shape[1]))
    if random_interaction:
        Z[:, fit_idx, :] = G
    else:
        Z[:, :, :] = G[:, None, :]
    Z = Z.reshape(n * k, -1)

    return ModelDesign(
        graph=graph,
        n_individuals=n,
        a=np.zeros(n * k),
        M=M,
        Z=Z,
        kmap=np.array(kmap, dtype=int),
        alpha_names=alpha_names,
        nu_names=nu_names,
        b_names=b_names,
        coding=coding,
    )


def read_matrix_csv(path) -> tuple[np.ndarray, list]:
    """Read a numeric matrix from CSV.  A non-numeric first row is a header."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DesignError(f"{path}: no rows")
    header = None
    if any(_parse_number(c) is None for c in rows[0]):
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    out = []
    for lineno, r in enumerate(rows, start=2 if header else 1):
        vals = [_parse_number(c) for c in r]
        if any(v is None for v in vals):
            raise DesignError(f"{path}: line {lineno}: unparseable cell")
        out.append(vals)
    if len({len(r) for r in out}) > 1:
        raise DesignError(f"{path}: ragged rows")
    return np.array(out, dtype=float), header


def design_from_matrices(graph: GraphSpec, M, Z, kmap, a=None, alpha_names=None,
                         nu_names=None, b_names=None) -> ModelDesign:
    """Wrap explicit matrices as a design (the formula-free escape hatch)."""
    M = np.asarray(M, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if Z.ndim == 1:
        Z = Z[:, None]
    N = M.shape[0]
    if N % graph.n_nodes:
        raise DesignError(f"M has {N} rows, not a multiple of {graph.n_nodes} nodes")
    if Z.shape[0] != N:
        raise DesignError("M and Z have different numbers of rows")
    kmap = np.asarray(kmap, dtype=int).reshape(-1)
    nvc = int(kmap.max()) + 1 if kmap.size else 0
    design = ModelDesign(
        graph=graph,
        n_individuals=N // graph.n_nodes,
        a=np.zeros(N) if a is None else a,
        M=M,
        Z=Z,
        kmap=kmap,
        alpha_names=alpha_names or [f"alpha{i + 1}" for i in range(M.shape[1])],
        nu_names=nu_names or [f"nu{j + 1}" for j in range(nvc)],
        b_names=b_names or [f"b{i + 1}" for i in range(Z.shape[1])],
    )
    design.check_rank()
    return design
