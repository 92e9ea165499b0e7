"""Approximate maximum likelihood fitting.

Each pass holds Ŵ fixed and minimizes the rooted objective jointly over
``(alpha, c, sigma)`` by BFGS, then polishes with Newton steps on the
profile ``q(alpha, nu)`` using the Schur-complement Hessian.  Components
estimated at zero are checked with the descent test; when a descent
direction exists the pass restarts from a point along it.  Between passes
Ŵ is replaced by ``W(a + M alpha + Z b)`` at the current estimate, until
the estimates stop moving.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

from .astergraph import BlockDiag
from .boundary import BoundaryReport, Decision, classify_state
from .calculus import FisherInfo, _blocks, _gradient, _schur, fisher_information
from .design import ModelDesign
from .errors import ConvergenceError, SingularityError
from .objective import Problem

__all__ = ["FitOptions", "FitResult", "fit", "fit_fixed"]

log = logging.getLogger(__name__)

SIGMA_SNAP = 1e-6
NU_BOUNDARY = float(np.sqrt(np.finfo(float).eps))


@dataclass(frozen=True)
class FitOptions:
    """Settings for :func:`fit`.

    Attributes
    ----------
    max_outer : int
        Maximum number of Ŵ updates.
    tol : float
        Relative change in ``(alpha, nu)`` between passes that counts as
        converged.
    init_sigma : float
        Starting square root of every free variance component.
    fixed_zero : tuple
        Variance components (names or indices) constrained to zero.
    analytic_gradient : bool
        Use the analytic gradient of the rooted objective; otherwise BFGS
        differences it numerically.
    max_reentry : int
        How many times a pass may restart from a descent direction.
    stationarity_tol : float
        Bound on the gradient infinity norm demanded at return.
    compute_fisher : bool
        Attach the approximate Fisher information to the result.
    """

    max_outer: int = 10
    tol: float = 1e-8
    init_sigma: float = 0.5
    fixed_zero: tuple = ()
    analytic_gradient: bool = True
    max_reentry: int = 5
    stationarity_tol: float = 1e-6
    compute_fisher: bool = True

    def fixed_zero_indices(self, design: ModelDesign):
        return sorted({design.component(j) for j in self.fixed_zero})

    def to_dict(self):
        d = self.__dict__.copy()
        d["fixed_zero"] = list(self.fixed_zero)
        return d


@dataclass(frozen=True)
class FitResult:
    """Fitted model.  Treat as immutable; arrays are read-only."""

    design: ModelDesign
    y: np.ndarray
    options: FitOptions
    alpha: np.ndarray
    nu: np.ndarray
    b: np.ndarray
    what: BlockDiag
    value: float
    converged: bool
    n_outer: int
    trace: tuple
    boundary: BoundaryReport | None = None
    fisher: FisherInfo | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("y", "alpha", "nu", "b"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def sigma(self):
        return np.sqrt(self.nu)

    @property
    def phi(self):
        return self.design.phi(self.alpha, self.b)

    def estimates(self) -> dict:
        out = dict(zip(self.design.alpha_names, self.alpha.tolist()))
        out.update(zip(self.design.nu_names, self.nu.tolist()))
        return out

    def se(self) -> dict:
        if self.fisher is None:
            return {}
        return dict(zip(self.fisher.names, self.fisher.se.tolist()))

    def at_boundary(self) -> list:
        return [self.design.nu_names[j] for j in np.flatnonzero(self.nu == 0)]


def fit_fixed(design: ModelDesign, y, alpha0=None, max_iter=50):
    """Fixed-effects-only fit (all variance components zero) by Newton."""
    prob = Problem(design, y, 1.0)
    M = design.M
    alpha = np.zeros(design.n_alpha) if alpha0 is None else np.asarray(alpha0, float).copy()
    zero_b = np.zeros(design.n_b)
    f = prob.nll(prob.phi(alpha, zero_b))
    for _ in range(max_iter):
        phi = prob.phi(alpha, zero_b)
        _, gphi = prob.nll_grad(phi)
        g = M.T @ gphi
        if np.max(np.abs(g), initial=0.0) <= 1e-10 * (1 + abs(f)):
            break
        Hm = prob.W(phi).quad(M)
        try:
            step = -linalg.solve(Hm, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = -np.linalg.lstsq(Hm, g, rcond=None)[0]
        t = 1.0
        for _ in range(50):
            fn = prob.nll(prob.phi(alpha + t * step, zero_b))
            if fn <= f + 1e-4 * t * float(g @ step):
                break
            t *= 0.5
        else:
            break
        alpha, f = alpha + t * step, fn
    return alpha


class _Pass:
    """One minimization with Ŵ held fixed."""

    def __init__(self, prob: Problem, options: FitOptions, forced, trace, npass):
        self.prob = prob
        self.opt = options
        d = prob.design
        self.d = d
        self.forced = set(forced)
        self.free = [j for j in range(d.n_nu) if j not in self.forced]
        self.free_eff = np.flatnonzero(np.isin(d.kmap, self.free))
        self.trace = trace
        self.npass = npass
        self.reentries = 0

    def record(self, stage, value):
        self.trace.append((self.npass, stage, float(value)))

    # -- BFGS on the rooted objective -------------------------------------

    def bfgs(self, alpha, c, sigma):
        d, p = self.d, self.d.n_alpha
        nf, ns = self.free_eff.size, len(self.free)

        def unpack(x):
            cc = np.zeros(d.n_b)
            cc[self.free_eff] = x[p:p + nf]
            ss = np.zeros(d.n_nu)
            ss[self.free] = x[p + nf:]
            return x[:p], cc, ss

        last = {}

        def fun(x):
            a, cc, ss = unpack(x)
            val, g = self.prob.sqrt_value_grad(a, cc, ss)
            last["x"], last["val"] = x.copy(), val
            if g is None:
                return np.inf, np.zeros_like(x)
            return val, np.concatenate([g[:p], g[p:p + d.n_b][self.free_eff], g[p + d.n_b:][self.free]])

        def value(x):
            return fun(x)[0]

        def cb(xk):
            # BFGS has just evaluated at xk; reuse that value
            same = "x" in last and np.array_equal(last["x"], xk)
            self.record("bfgs", last["val"] if same else value(xk))

        x0 = np.concatenate([alpha, c[self.free_eff], sigma[self.free]])
        self.record("bfgs", value(x0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if self.opt.analytic_gradient:
                res = optimize.minimize(fun, x0, jac=True, method="BFGS", callback=cb,
                                        options={"gtol": 1e-6, "maxiter": 5000})
            else:
                res = optimize.minimize(value, x0, method="BFGS", callback=cb,
                                        options={"gtol": 1e-6, "maxiter": 5000})
        x = res.x if np.isfinite(res.fun) and res.fun <= value(x0) else x0
        a, cc, ss = unpack(x)
        return a, cc, ss, res

    # -- Newton polish on the profile ---------------------------------------

    def polish(self, alpha, nu, b):
        prob, d = self.prob, self.d
        nu = nu.copy()
        b = prob.inner(alpha, nu, start=b)
        val = prob.penalized(alpha, b, nu)
        self.record("polish", val)
        gnorm = np.inf
        for _ in range(100):
            inner = [j for j in self.free if nu[j] > 0]
            g = _gradient(prob, alpha, b, nu, inner)
            gnorm = float(np.max(np.abs(g), initial=0.0))
            if gnorm <= 1e-10 * (1.0 + abs(val)):
                break
            blocks, _ = _blocks(prob, alpha, b, nu, inner)
            Hq, _ = _schur(blocks)
            step = _newton_step(Hq, g)
            p = d.n_alpha
            snu = step[p:]
            tmax, hit = 1.0, None
            for r, j in enumerate(inner):
                if snu[r] < 0 and -nu[j] / snu[r] <= tmax:
                    tmax, hit = -nu[j] / snu[r], j
            slope = float(g @ step)
            t = tmax
            accepted = False
            noise = -slope <= 1e-13 * (1.0 + abs(val))
            for _ in range(60):
                a_new = alpha + t * step[:p]
                nu_new = nu.copy()
                nu_new[inner] = nu[inner] + t * snu
                if hit is not None and t == tmax:
                    nu_new[hit] = 0.0
                nu_new = np.maximum(nu_new, 0.0)
                b_try = b.copy()
                b_try[nu_new[d.kmap] == 0] = 0.0
                try:
                    b_new = prob.inner(a_new, nu_new, start=b_try)
                except ConvergenceError:
                    t *= 0.5
                    continue
                v_new = prob.penalized(a_new, b_new, nu_new)
                if v_new <= val + 1e-4 * t * slope or (noise and np.isfinite(v_new)):
                    accepted = True
                    break
                if np.isfinite(v_new) and -t * slope <= 1e-9 * (1.0 + abs(val)):
                    # decrease hidden by cancellation in the objective
                    inner_new = [j for j in self.free if nu_new[j] > 0]
                    g_new = _gradient(prob, a_new, b_new, nu_new, inner_new)
                    if np.max(np.abs(g_new), initial=0.0) < gnorm:
                        accepted = True
                        break
                t *= 0.5
            if not accepted:
                break
            alpha, nu, b, val = a_new, nu_new, b_new, v_new
            self.record("polish", val)
        return alpha, nu, b, val, gnorm

    # -- descent out of the boundary ---------------------------------------

    def reenter(self, alpha, nu, b, report: BoundaryReport):
        prob = self.prob
        u = np.zeros(self.d.n_b)
        v = np.zeros(self.d.n_nu)
        for comp in report.descent_found:
            if comp.forced:
                continue
            uj, vj = comp.direction
            u += uj
            v[comp.index] = vj
        p0 = prob.penalized(alpha, b, nu)
        tau = 1.0
        for _ in range(60):
            p1 = prob.penalized(alpha, b + tau * u, nu + tau * v)
            if p1 < p0:
                break
            tau *= 0.5
        else:
            return None
        self.record("reentry", p1)
        return b + tau * u, nu + tau * v

    def run(self, alpha, c, sigma):
        d = self.d
        while True:
            alpha, c, sigma, _ = self.bfgs(alpha, c, sigma)
            sigma = np.where(np.abs(sigma) < SIGMA_SNAP, 0.0, np.abs(sigma))
            nu = sigma**2
            b = sigma[d.kmap] * c
            alpha, nu, b, val, gnorm = self.polish(alpha, nu, b)
            small = [j for j in self.free if 0 < nu[j] < NU_BOUNDARY]
            if small:
                nu[small] = 0.0
                b[np.isin(d.kmap, small)] = 0.0
                alpha, nu, b, val, gnorm = self.polish(alpha, nu, b)
            report = classify_state(self.prob, alpha, b, nu, tuple(self.forced),
                                    tol=self.opt.stationarity_tol)
            escape = [c_ for c_ in report.descent_found if not c_.forced]
            if not escape or self.reentries >= self.opt.max_reentry:
                return alpha, nu, b, val, gnorm, report
            self.reentries += 1
            moved = self.reenter(alpha, nu, b, report)
            if moved is None:
                return alpha, nu, b, val, gnorm, report
            b, nu = moved
            sigma = np.sqrt(nu)
            c = np.where(sigma[d.kmap] > 0, b / np.where(sigma[d.kmap] > 0, sigma[d.kmap], 1.0), 0.0)


def _newton_step(H, g):
    try:
        return -linalg.cho_solve(linalg.cho_factor(H, check_finite=False), g, check_finite=False)
    except linalg.LinAlgError:
        w, V = np.linalg.eigh(H)
        floor = 1e-8 * max(1.0, float(np.max(np.abs(w))))
        w = np.maximum(np.abs(w), floor)
        return -(V @ ((V.T @ g) / w))


def _rel_change(new, old):
    return float(np.max(np.abs(new - old) / (1.0 + np.abs(old)), initial=0.0))


def fit(design: ModelDesign, y, options: FitOptions | None = None, **kwargs) -> FitResult:
    """Approximate maximum likelihood estimates of ``(alpha, nu)``.

    Keyword arguments override fields of ``options``.

    Raises
    ------
    ConvergenceError
        When Ŵ updates do not settle within ``max_outer`` passes or the
        final point is not stationary; ``exc.result`` holds the last
        iterate and ``exc.trace`` the objective values.
    DesignError
        For rank-deficient fixed-effect matrices.
    """
    options = replace(options or FitOptions(), **kwargs)
    t0 = time.perf_counter()
    design.check_rank()
    y = np.asarray(y, dtype=float).reshape(-1)
    forced = options.fixed_zero_indices(design)

    alpha = fit_fixed(design, y)
    fixed_prob = Problem(design, y, 1.0)
    what = fixed_prob.W(fixed_prob.phi(alpha, np.zeros(design.n_b)))
    sigma = np.full(design.n_nu, float(options.init_sigma))
    sigma[forced] = 0.0
    c = np.zeros(design.n_b)

    trace = []
    prev = None
    converged = False
    events = []
    reentries = 0
    npass = 0
    for npass in range(1, options.max_outer + 1):
        prob = Problem(design, y, what)
        runner = _Pass(prob, options, forced, trace, npass)
        alpha, nu, b, val, gnorm, report = runner.run(alpha, c, sigma)
        events.extend(prob.events)
        reentries += runner.reentries
        cur = np.concatenate([alpha, nu])
        new_what = prob.W(prob.phi(alpha, b))
        same_what = np.array_equal(new_what.blocks, what.blocks)
        if prev is not None and _rel_change(cur, prev) < options.tol:
            converged = True
        elif same_what:
            converged = True
        log.debug("pass %d: q = %.12g, |grad| = %.3g", npass, val, gnorm)
        if converged:
            break
        prev = cur
        what = new_what
        sigma = np.sqrt(nu)
        c = np.where(sigma[design.kmap] > 0, b / np.where(sigma[design.kmap] > 0, sigma[design.kmap], 1.0), 0.0)

    res = report.residuals
    stationary = all(v <= options.stationarity_tol for v in res.values())
    diagnostics = {
        "elapsed": time.perf_counter() - t0,
        "gradient_inf_norm": gnorm,
        "stationarity_residuals": res,
        "reentries": reentries,
        "events": events,
        "what_pass": npass,
    }
    result = FitResult(
        design=design, y=y, options=options, alpha=alpha, nu=nu, b=b, what=what,
        value=val, converged=converged and stationary, n_outer=npass, trace=tuple(trace),
        boundary=report, diagnostics=diagnostics,
    )
    if not converged:
        raise ConvergenceError(
            f"Ŵ updates did not converge in {options.max_outer} passes",
            trace=tuple(trace), result=result,
        )
    if not stationary:
        raise ConvergenceError(
            "final point is not stationary: "
            + ", ".join(f"|p_{k}| = {v:.3g}" for k, v in res.items()),
            trace=tuple(trace), result=result, grad_norm=gnorm,
        )
    if options.compute_fisher and design.n_alpha + int(np.sum(nu > 0)):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                info = fisher_information(result)
            object.__setattr__(result, "fisher", info)
        except SingularityError as exc:
            diagnostics["fisher_error"] = str(exc)
    return result

