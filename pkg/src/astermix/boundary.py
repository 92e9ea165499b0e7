"""Optimality on the boundary where variance components are zero.

The penalized objective is extended-real valued and lower semicontinuous,
so at a point with ``nu_j = 0`` the usual gradient condition is replaced
by nonnegativity of all directional derivatives.  With ``pbar`` the smooth
part of the objective (everything except the ``h`` penalty), the only
directions that matter move ``nu_j`` and the effects ``b_i, k(i) = j``,
and a descent direction exists exactly when

    pbar_nu_j - 1/4 * sum_{i : k(i) = j} pbar_b_i ** 2  <  0.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import objective
from .calculus import _gradient
from .design import ModelDesign
from .errors import AstermixError, DomainError, PreconditionError
from .objective import Problem, _check_dims, _finite

__all__ = [
    "h",
    "smooth_part_gradient",
    "descent_test",
    "descent_direction",
    "directional_derivative",
    "Decision",
    "ComponentStatus",
    "BoundaryReport",
    "classify_boundary",
    "CAVEAT",
]

STATIONARITY_TOL = 1e-6

CAVEAT = (
    "A nonnegative descent-test value is only a necessary condition for the "
    "minimum to lie at zero and cannot confirm it; a negative value does "
    "prove the zero estimate is not a local minimum."
)


def h(b: float, nu: float) -> float:
    """``b**2 / nu`` for ``nu > 0``; 0 at ``(0, 0)``; ``+inf`` otherwise."""
    return float(objective.h(b, nu))


def _point(design, alpha, b, nu):
    alpha = _finite("alpha", alpha).reshape(-1)
    b = _finite("b", b).reshape(-1)
    nu = _finite("nu", nu).reshape(-1)
    _check_dims(design, alpha, b, nu)
    if np.any(nu < 0):
        raise DomainError("variance components must be nonnegative")
    return alpha, b, nu


def _smooth_grad(prob: Problem, alpha, b, nu):
    design = prob.design
    _, gphi = prob.nll_grad(prob.phi(alpha, b))
    if gphi is None:
        raise DomainError("canonical parameter overflow")
    _, K = prob.logdet(nu)
    grad_nu = 0.5 * np.bincount(design.kmap, weights=np.diag(K), minlength=design.n_nu)
    return design.M.T @ gphi, design.Z.T @ gphi, grad_nu


def smooth_part_gradient(design: ModelDesign, y, alpha, b, nu, what):
    """Gradient of ``pbar`` in ``b`` and ``nu`` (one-sided at ``nu_j = 0``)."""
    alpha, b, nu = _point(design, alpha, b, nu)
    _, gb, gnu = _smooth_grad(Problem(design, y, what), alpha, b, nu)
    return gb, gnu


def _residuals(prob, alpha, b, nu):
    """Stationarity residuals away from the boundary."""
    design = prob.design
    ga, gb, gnu = _smooth_grad(prob, alpha, b, nu)
    d = nu[design.kmap]
    act = d > 0
    res = {"alpha": float(np.max(np.abs(ga), initial=0.0))}
    pb = gb[act] + b[act] / d[act]
    res["b"] = float(np.max(np.abs(pb), initial=0.0))
    inner = [j for j in range(design.n_nu) if nu[j] > 0]
    if inner:
        full = _gradient(prob, alpha, b, nu, inner)[design.n_alpha:]
        res["nu"] = float(np.max(np.abs(full)))
    else:
        res["nu"] = 0.0
    return res, (ga, gb, gnu)


def _check_boundary(design, b, nu, j):
    if not 0 <= j < design.n_nu:
        raise DomainError(f"no variance component {j}")
    if nu[j] != 0:
        raise PreconditionError(f"variance component {design.nu_names[j]!r} is not zero")
    if np.any(b[design.kmap == j] != 0):
        raise PreconditionError(
            f"random effects of zero component {design.nu_names[j]!r} are not zero"
        )


def _test_value(gb, gnu, kmap, j):
    return float(gnu[j] - 0.25 * np.sum(gb[kmap == j] ** 2))


def descent_test(design: ModelDesign, y, alpha, b, nu, what, j, tol=STATIONARITY_TOL) -> float:
    """Descent-test statistic for a component estimated at zero.

    The point must be stationary in ``alpha`` and in every coordinate
    away from the boundary (to ``tol``); otherwise PreconditionError is
    raised listing the residuals.  Negative return value means a descent
    direction exists.
    """
    alpha, b, nu = _point(design, alpha, b, nu)
    j = design.component(j)
    _check_boundary(design, b, nu, j)
    prob = Problem(design, y, what)
    res, (_, gb, gnu) = _residuals(prob, alpha, b, nu)
    bad = {k: v for k, v in res.items() if v > tol}
    if bad:
        raise PreconditionError(
            "point is not stationary away from the boundary: "
            + ", ".join(f"|p_{k}| = {v:.3g}" for k, v in bad.items()),
            residuals=res,
        )
    return _test_value(gb, gnu, design.kmap, j)


def _solve_direction(gb_j, gnu_j, lam):
    """Root in ``v > 0`` of the Lagrangian's profiled derivative."""
    S = float(np.sum(gb_j**2))

    def g(v):
        return 2.0 * lam * v + gnu_j - S / (4.0 * (lam * v + 1.0) ** 2)

    if g(0.0) >= 0:
        raise PreconditionError("descent test is nonnegative; no descent direction")
    hi = 1.0
    while g(hi) <= 0:
        hi *= 2.0
    v = optimize.bisect(g, 0.0, hi, xtol=1e-10 * max(1.0, hi), rtol=1e-15, maxiter=500)
    u = -gb_j / (2.0 * (lam + 1.0 / v))
    return u, v


def directional_derivative(design: ModelDesign, y, alpha, b, nu, what, u, v) -> float:
    """Directional derivative of ``p`` in direction ``(0, u, v)``.

    Components with ``nu_j = 0`` contribute ``v_j pbar_nu_j +
    sum (u_i pbar_b_i + h(u_i, v_j) / 2)``, the halving coming from the
    factor on the penalty in ``p``; the others contribute ordinary
    gradient terms.

    The descent test drops that halving, so a negative test value
    always implies a negative derivative here, but not conversely.
    """
    alpha, b, nu = _point(design, alpha, b, nu)
    u = np.asarray(u, float).reshape(-1)
    v = np.asarray(v, float).reshape(-1)
    prob = Problem(design, y, what)
    _, gb, gnu = _smooth_grad(prob, alpha, b, nu)
    d = nu[design.kmap]
    total = 0.0
    for j in range(design.n_nu):
        ij = design.kmap == j
        if nu[j] == 0:
            total += v[j] * gnu[j] + float(np.sum(u[ij] * gb[ij] + 0.5 * objective.h(u[ij], v[j])))
        else:
            pb = gb[ij] + b[ij] / d[ij]
            pn = gnu[j] - 0.5 * np.sum(b[ij] ** 2) / nu[j] ** 2
            total += float(u[ij] @ pb) + v[j] * pn
    return total


def descent_direction(design: ModelDesign, y, alpha, b, nu, what, j, lam=1.0):
    """Descent direction ``(u, v_j)`` out of the boundary ``nu_j = 0``.

    Returns ``u`` as a full-length vector over all random effects (zero
    outside component ``j``) and the scalar ``v_j > 0``.  The pair is
    checked to decrease ``p`` along the ray before it is returned.
    """
    if lam <= 0:
        raise DomainError("Lagrange multiplier must be positive")
    alpha, b, nu = _point(design, alpha, b, nu)
    j = design.component(j)
    _check_boundary(design, b, nu, j)
    prob = Problem(design, y, what)
    _, gb, gnu = _smooth_grad(prob, alpha, b, nu)
    ij = design.kmap == j
    tv = _test_value(gb, gnu, design.kmap, j)
    if tv >= -_decision_tol(gnu[j]):
        raise PreconditionError(f"descent test is {tv:.6g}; no descent direction exists")
    uj, v = _solve_direction(gb[ij], gnu[j], lam)
    u = np.zeros(design.n_b)
    u[ij] = uj
    _verify(prob, alpha, b, nu, u, j, v)
    return u, v


def _verify(prob, alpha, b, nu, u, j, v):
    p0 = prob.penalized(alpha, b, nu)
    scale = 1.0 / max(1.0, float(np.sqrt(u @ u + v * v)))
    e = np.zeros(nu.size)
    e[j] = v
    for k in range(4):
        tau = 1e-3 * scale * 10.0**-k
        if prob.penalized(alpha, b + tau * u, nu + tau * e) < p0:
            return tau
    raise AstermixError(
        "internal error: computed descent direction does not decrease the objective"
    )


def _decision_tol(gnu_j):
    return 1e-8 * (1.0 + abs(gnu_j))


class Decision(str, enum.Enum):
    AT_BOUNDARY = "AT_BOUNDARY"
    DESCENT_FOUND = "DESCENT_FOUND"
    INTERIOR = "INTERIOR"


@dataclass
class ComponentStatus:
    name: str
    index: int
    nu: float
    decision: Decision
    test_value: float | None = None
    residual: float | None = None
    direction: tuple | None = None
    forced: bool = False
    precondition_ok: bool = True


@dataclass
class BoundaryReport:
    """Boundary classification of every variance component."""

    components: list = field(default_factory=list)
    residuals: dict = field(default_factory=dict)
    note: str = CAVEAT

    @property
    def boundary(self):
        return [c for c in self.components if c.decision is not Decision.INTERIOR]

    @property
    def descent_found(self):
        return [c for c in self.components if c.decision is Decision.DESCENT_FOUND]

    def __getitem__(self, name):
        for c in self.components:
            if c.name == name or c.index == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {
            "components": [
                {
                    "name": c.name,
                    "nu": c.nu,
                    "decision": c.decision.value,
                    "test_value": c.test_value,
                    "residual": c.residual,
                    "forced_zero": c.forced,
                    "precondition_ok": c.precondition_ok,
                }
                for c in self.components
            ],
            "residuals": self.residuals,
            "note": self.note,
        }


def classify_state(prob: Problem, alpha, b, nu, forced=(), lam=1.0, tol=STATIONARITY_TOL):
    design = prob.design
    res, (_, gb, gnu) = _residuals(prob, alpha, b, nu)
    ok = all(v <= tol for v in res.values())
    out = []
    inner = [j for j in range(design.n_nu) if nu[j] > 0]
    pnu = _gradient(prob, alpha, b, nu, inner)[design.n_alpha:] if inner else []
    resid = dict(zip(inner, np.abs(pnu)))
    for j in range(design.n_nu):
        name = design.nu_names[j]
        if nu[j] > 0:
            out.append(ComponentStatus(name, j, float(nu[j]), Decision.INTERIOR,
                                       residual=float(resid[j])))
            continue
        tv = _test_value(gb, gnu, design.kmap, j)
        status = ComponentStatus(name, j, 0.0, Decision.AT_BOUNDARY, test_value=tv,
                                 forced=j in forced, precondition_ok=ok)
        if tv < -_decision_tol(gnu[j]):
            status.decision = Decision.DESCENT_FOUND
            ij = design.kmap == j
            uj, v = _solve_direction(gb[ij], gnu[j], lam)
            u = np.zeros(design.n_b)
            u[ij] = uj
            status.direction = (u, v)
        out.append(status)
    return BoundaryReport(out, res)


def classify_boundary(fit) -> BoundaryReport:
    """Classify every variance component of a fitted model."""
    prob = Problem(fit.design, fit.y, fit.what)
    forced = tuple(fit.options.fixed_zero_indices(fit.design))
    return classify_state(prob, np.asarray(fit.alpha), np.asarray(fit.b), np.asarray(fit.nu), forced)
