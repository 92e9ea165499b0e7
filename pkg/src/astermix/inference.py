"""Parametric bootstrap and mean-value-scale mapping of random effects."""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import astergraph
from .errors import AstermixError, ConvergenceError, DomainError
from .fitting import FitResult, fit

__all__ = [
    "ReplicateRecord",
    "BootstrapResult",
    "replicate_rng",
    "parametric_bootstrap",
    "mean_value_map",
]


@dataclass
class ReplicateRecord:
    index: int
    alpha: np.ndarray
    nu: np.ndarray
    boundary: np.ndarray
    converged: bool
    elapsed: float = field(default=0.0, compare=False)

    def __eq__(self, other):
        return (
            self.index == other.index
            and self.converged == other.converged
            and np.array_equal(self.alpha, other.alpha, equal_nan=True)
            and np.array_equal(self.nu, other.nu, equal_nan=True)
            and np.array_equal(self.boundary, other.boundary)
        )


@dataclass
class BootstrapResult:
    """Replicate estimates from a parametric bootstrap.

    Timings are kept for information only and never compared or written.
    """

    B: int
    seed: int
    alpha_names: list
    nu_names: list
    records: list
    estimate: np.ndarray
    elapsed: float = field(default=0.0, compare=False)

    def __eq__(self, other):
        return (
            self.B == other.B
            and self.seed == other.seed
            and self.alpha_names == other.alpha_names
            and self.nu_names == other.nu_names
            and self.records == other.records
            and np.array_equal(self.estimate, other.estimate)
        )

    @property
    def alpha(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    @property
    def nu(self) -> np.ndarray:
        return np.array([r.nu for r in self.records])

    @property
    def converged(self) -> np.ndarray:
        return np.array([r.converged for r in self.records])

    def boundary_fraction(self) -> np.ndarray:
        """Fraction of converged replicates with each component at zero."""
        ok = self.converged
        if not np.any(ok):
            return np.full(len(self.nu_names), np.nan)
        return np.array([r.boundary for r in self.records])[ok].mean(axis=0)

    def percentile_ci(self, level=0.95) -> dict:
        """Percentile intervals over converged replicates, by parameter name."""
        ok = self.converged
        tail = (1.0 - level) / 2.0
        draws = np.hstack([self.alpha[ok], self.nu[ok]])
        names = self.alpha_names + self.nu_names
        if draws.shape[0] == 0:
            return {n: (np.nan, np.nan) for n in names}
        lo = np.quantile(draws, tail, axis=0)
        hi = np.quantile(draws, 1.0 - tail, axis=0)
        return {n: (float(a), float(b)) for n, a, b in zip(names, lo, hi)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate"] + self.alpha_names + self.nu_names
                   + [f"zero:{n}" for n in self.nu_names] + ["converged"])
        for r in self.records:
            w.writerow([r.index] + [repr(float(v)) for v in r.alpha] + [repr(float(v)) for v in r.nu]
                       + [int(v) for v in r.boundary] + [int(r.converged)])
        return buf.getvalue()

    def summary(self, level=0.95) -> str:
        ci = self.percentile_ci(level)
        bf = self.boundary_fraction()
        lines = [
            f"replicates: {self.B}",
            f"seed: {self.seed}",
            f"converged: {int(self.converged.sum())}",
            f"interval: percentile {level:g}",
        ]
        names = self.alpha_names + self.nu_names
        for n, est in zip(names, self.estimate):
            lo, hi = ci[n]
            lines.append(f"ci {n} estimate={float(est)!r} lower={lo!r} upper={hi!r}")
        for n, f in zip(self.nu_names, bf):
            lines.append(f"boundary-fraction {n} {float(f)!r}")
        return "\n".join(lines) + "\n"


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    """Counter-based stream for replicate ``r``, independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(r)])))


def _simulate_data(fit_: FitResult, rng):
    design = fit_.design
    sd = np.sqrt(np.asarray(fit_.nu))[design.kmap]
    b = rng.standard_normal(design.n_b) * sd
    phi = design.a + design.M @ fit_.alpha + design.Z @ b
    return astergraph.simulate_graph(design.graph, phi, rng)


def _one(args):
    fit_, seed, r = args
    t0 = time.perf_counter()
    rng = replicate_rng(seed, r)
    y = _simulate_data(fit_, rng)
    opts = fit_.options
    nd = fit_.design.n_nu
    try:
        res = fit(fit_.design, y, opts, compute_fisher=False)
        alpha, nu, ok = res.alpha.copy(), res.nu.copy(), True
    except ConvergenceError as exc:
        part = exc.result
        if part is not None:
            alpha, nu = part.alpha.copy(), part.nu.copy()
        else:
            alpha, nu = np.full(fit_.design.n_alpha, np.nan), np.full(nd, np.nan)
        ok = False
    except (AstermixError, np.linalg.LinAlgError, FloatingPointError):
        alpha, nu, ok = np.full(fit_.design.n_alpha, np.nan), np.full(nd, np.nan), False
    return ReplicateRecord(r, alpha, nu, nu == 0, ok, time.perf_counter() - t0)


def parametric_bootstrap(fit_: FitResult, B: int, seed: int, n_jobs: int | None = None,
                         start: int = 0) -> BootstrapResult:
    """Simulate from the fitted model and refit ``B`` times.

    Replicate ``r`` (numbered from ``start``) draws random effects from
    ``N(0, D-hat)``, responses from the graph, and refits with the
    original options.  Records are identical whatever ``n_jobs`` is.
    """
    if B <= 0:
        raise DomainError("number of replicates must be positive")
    if n_jobs is None:
        n_jobs = int(os.environ.get("ASTERMIX_THREADS", "1"))
    t0 = time.perf_counter()
    tasks = [(fit_, seed, r) for r in range(start, start + B)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            records = list(ex.map(_one, tasks, chunksize=max(1, B // (4 * n_jobs))))
    else:
        records = [_one(t) for t in tasks]
    d = fit_.design
    return BootstrapResult(
        B=B, seed=seed, alpha_names=list(d.alpha_names), nu_names=list(d.nu_names),
        records=records, estimate=np.concatenate([fit_.alpha, fit_.nu]),
        elapsed=time.perf_counter() - t0,
    )


def mean_value_map(fit_: FitResult, component, effect_values, target_node: str, context) -> list:
    """Map values of one random effect to the mean value scale.

    For each ``s`` the context individual gets random effect ``s`` in
    ``component`` and zero for every other random effect; the result is
    the unconditional mean of ``target_node`` at
    ``phi = a + M alpha-hat + Z b``.

    ``context`` is either a dict of covariate values (a hypothetical
    individual) or an int selecting an existing individual.  If the
    context names no level of the component's grouping factor, the
    effect loads exactly as any level would.

    Returns a list of ``(s, mean)`` pairs.
    """
    design = fit_.design
    graph = design.graph
    j = design.component(component)
    node = graph.index(target_node)
    k = graph.n_nodes
    vals = np.asarray(effect_values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(vals)):
        raise DomainError("effect values must be finite")
    cols = design.effects_of(j)
    if isinstance(context, (int, np.integer)):
        i = int(context)
        if not 0 <= i < design.n_individuals:
            raise DomainError(f"no individual {i}")
        rows = slice(i * k, (i + 1) * k)
        a, M, Z = design.a[rows], design.M[rows], design.Z[rows]
    else:
        a, M, Z = design.context_rows(dict(context))
    zj = Z[:, cols]
    if np.any(zj):
        load = zj[:, np.flatnonzero(np.any(zj != 0, axis=0))[0]]
    else:
        # context has no level of this factor: use the common loading pattern
        Zall = design.Z[:, cols].reshape(design.n_individuals, k, -1)
        load = np.max(np.abs(Zall), axis=(0, 2))
    base = a + M @ fit_.alpha
    out = []
    for s in vals:
        mu = astergraph.joint_mean(graph, base + s * load)
        out.append((float(s), float(mu[node])))
    return out
