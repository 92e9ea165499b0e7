"""Second derivatives of the penalized objective and the profile.

Writing ``psi = (alpha, nu)``, the Hessian of the profile is the Schur
complement

    q_psipsi = p_psipsi - p_psib p_bb^{-1} p_bpsi

evaluated at ``b = b*``.  The blocks of ``p`` use the live variance
``W(phi)`` in the likelihood part and the constant Ŵ in the log-determinant
part, so no third or fourth cumulant derivatives are needed.  ``E_k`` is
the diagonal indicator of the random effects belonging to component ``k``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .design import ModelDesign
from .errors import DomainError, SingularityError
from .objective import Problem, _check_dims, _finite

__all__ = ["PBlocks", "p_blocks", "q_gradient", "q_hessian", "FisherInfo", "fisher_information"]

COND_WARN = 1e12


@dataclass
class PBlocks:
    """Second-derivative blocks of ``p`` at one point."""

    p_aa: np.ndarray
    p_ab: np.ndarray
    p_bb: np.ndarray
    p_anu: np.ndarray
    p_bnu: np.ndarray
    p_nunu: np.ndarray

    def joint(self) -> np.ndarray:
        """Full Hessian of ``p`` in ``(alpha, b, nu)``."""
        return np.block(
            [
                [self.p_aa, self.p_ab, self.p_anu],
                [self.p_ab.T, self.p_bb, self.p_bnu],
                [self.p_anu.T, self.p_bnu.T, self.p_nunu],
            ]
        )

    def psi_psi(self) -> np.ndarray:
        return np.block([[self.p_aa, self.p_anu], [self.p_anu.T, self.p_nunu]])

    def psi_b(self) -> np.ndarray:
        return np.vstack([self.p_ab, self.p_bnu.T])


def _blocks(prob: Problem, alpha, b, nu, comps):
    """Blocks restricted to the components in ``comps`` (all with nu > 0)
    and to their random effects."""
    design = prob.design
    comps = np.asarray(comps, dtype=int)
    eff = np.flatnonzero(np.isin(design.kmap, comps))
    d = nu[design.kmap]
    phi = prob.phi(alpha, b)
    W = prob.W(phi)
    M, Za = design.M, design.Z[:, eff]
    p_aa = W.quad(M)
    p_ab = W.quad(M, Za)
    dinv = 1.0 / d[eff]
    p_bb = W.quad(Za) + np.diag(dinv)
    be = b[eff]
    keff = design.kmap[eff]
    p_bnu = np.zeros((eff.size, comps.size))
    for col, k in enumerate(comps):
        sel = keff == k
        p_bnu[sel, col] = -be[sel] * dinv[sel] ** 2
    _, K = prob.logdet(nu)
    p_nunu = np.zeros((comps.size, comps.size))
    for r, j in enumerate(comps):
        ij = design.kmap == j
        for s, k in enumerate(comps):
            ik = design.kmap == k
            tr = float(np.sum(K[np.ix_(ij, ik)] ** 2))
            quad = float(np.sum(b[ij] ** 2) / nu[j] ** 3) if j == k else 0.0
            p_nunu[r, s] = quad - 0.5 * tr
    return PBlocks(
        p_aa=0.5 * (p_aa + p_aa.T),
        p_ab=p_ab,
        p_bb=0.5 * (p_bb + p_bb.T),
        p_anu=np.zeros((M.shape[1], comps.size)),
        p_bnu=p_bnu,
        p_nunu=0.5 * (p_nunu + p_nunu.T),
    ), eff


def _gradient(prob: Problem, alpha, b, nu, comps):
    """(p_alpha, p_nu[comps]) at the given point."""
    design = prob.design
    _, gphi = prob.nll_grad(prob.phi(alpha, b))
    if gphi is None:
        raise DomainError("canonical parameter overflow")
    ga = design.M.T @ gphi
    _, K = prob.logdet(nu)
    diagK = np.diag(K)
    gn = np.empty(len(comps))
    for r, j in enumerate(comps):
        ij = design.kmap == j
        gn[r] = -0.5 * np.sum(b[ij] ** 2) / nu[j] ** 2 + 0.5 * np.sum(diagK[ij])
    return np.concatenate([ga, gn])


def _schur(blocks: PBlocks):
    pbb = blocks.p_bb
    try:
        cf = linalg.cho_factor(pbb, lower=True, check_finite=False)
    except linalg.LinAlgError:
        cond = np.linalg.cond(pbb)
        raise SingularityError(
            f"p_bb is not positive definite (condition estimate {cond:.3g})", condition=cond
        ) from None
    pb = blocks.psi_b()
    H = blocks.psi_psi() - pb @ linalg.cho_solve(cf, pb.T, check_finite=False)
    asym = float(np.max(np.abs(H - H.T), initial=0.0))
    return 0.5 * (H + H.T), asym


def _interior(design, alpha, nu):
    alpha = _finite("alpha", alpha).reshape(-1)
    nu = _finite("nu", nu).reshape(-1)
    _check_dims(design, alpha, None, nu)
    if np.any(nu <= 0):
        raise DomainError("all variance components must be strictly positive here")
    return alpha, nu


def p_blocks(design: ModelDesign, y, alpha, b, nu, what) -> PBlocks:
    """Second-derivative blocks of ``p`` at an interior point."""
    alpha, nu = _interior(design, alpha, nu)
    b = _finite("b", b).reshape(-1)
    _check_dims(design, None, b, None)
    prob = Problem(design, y, what)
    return _blocks(prob, alpha, b, nu, np.arange(design.n_nu))[0]


def q_gradient(design: ModelDesign, y, alpha, nu, what) -> np.ndarray:
    """Gradient ``(q_alpha, q_nu)`` of the profile, by the envelope theorem."""
    alpha, nu = _interior(design, alpha, nu)
    prob = Problem(design, y, what)
    b = prob.inner(alpha, nu)
    return _gradient(prob, alpha, b, nu, np.arange(design.n_nu))


def q_hessian(design: ModelDesign, y, alpha, nu, what) -> np.ndarray:
    """Hessian of the profile in ``psi = (alpha, nu)`` (Schur complement)."""
    alpha, nu = _interior(design, alpha, nu)
    prob = Problem(design, y, what)
    b = prob.inner(alpha, nu)
    blocks, _ = _blocks(prob, alpha, b, nu, np.arange(design.n_nu))
    return _schur(blocks)[0]


@dataclass
class FisherInfo:
    """Approximate observed Fisher information at a fit.

    Rows and columns cover the fixed effects and the variance components
    estimated away from zero; ``excluded`` lists the boundary components.
    """

    names: list
    information: np.ndarray
    covariance: np.ndarray
    se: np.ndarray
    excluded: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def se_of(self, name):
        return float(self.se[self.names.index(name)])


def fisher_information(fit) -> FisherInfo:
    """Hessian of ``q`` at the estimate, its inverse and standard errors.

    Variance components estimated as zero have no standard error and are
    left out, with a warning.
    """
    design = fit.design
    nu = np.asarray(fit.nu, dtype=float)
    comps = np.flatnonzero(nu > 0)
    excluded = [design.nu_names[j] for j in np.flatnonzero(nu <= 0)]
    if excluded:
        warnings.warn(
            f"variance components at zero excluded from Fisher information: {', '.join(excluded)}",
            stacklevel=2,
        )
    prob = Problem(design, fit.y, fit.what)
    b = prob.inner(fit.alpha, nu, start=fit.b)
    blocks, _ = _blocks(prob, fit.alpha, b, nu, comps)
    diag = {}
    try:
        cond_bb = float(np.linalg.cond(blocks.p_bb)) if blocks.p_bb.size else 1.0
    except np.linalg.LinAlgError:
        cond_bb = np.inf
    diag["p_bb_condition"] = cond_bb
    if cond_bb > COND_WARN:
        warnings.warn(f"p_bb is ill conditioned (condition {cond_bb:.3g})", stacklevel=2)
    info, asym = _schur(blocks)
    diag["max_asymmetry"] = asym
    try:
        cf = linalg.cho_factor(info, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise SingularityError(
            "approximate Fisher information is not positive definite; "
            "use the parametric bootstrap for inference"
        ) from None
    cov = linalg.cho_solve(cf, np.eye(info.shape[0]), check_finite=False)
    cov = 0.5 * (cov + cov.T)
    names = list(design.alpha_names) + [design.nu_names[j] for j in comps]
    return FisherInfo(names, info, cov, np.sqrt(np.diag(cov)), excluded, diag)
