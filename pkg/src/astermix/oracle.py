"""Independent verification backends.

Neither function is used when fitting.  ``gaussian_lmm_exact`` evaluates
the exact Gaussian mixed-model likelihood; ``integrated_loglik_quadrature``
integrates the random effects out numerically for up to three of them.

Constants: the exponential-family log likelihood ``l(phi) = y'phi - c(phi)``
omits the base measure.  For unit-variance Gaussian responses the exact
minus log likelihood (without the ``n/2 log(2 pi)`` term) therefore equals
the profile plus ``|y|^2 / 2``; see :func:`gaussian_constant`.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import linalg, optimize, special

from . import astergraph, expfam
from .design import ModelDesign
from .errors import DomainError

__all__ = ["gaussian_lmm_exact", "gaussian_constant", "integrated_loglik_quadrature"]


def gaussian_constant(y) -> float:
    """Offset between :func:`gaussian_lmm_exact` and the profile objective."""
    y = np.asarray(y, dtype=float)
    return 0.5 * float(y @ y)


def gaussian_lmm_exact(design: ModelDesign, y, alpha, nu) -> float:
    """Exact minus log likelihood of ``y ~ N(a + M alpha, I + Z D Z')``.

    Omits the additive constant ``(n/2) log(2 pi)``.
    """
    if not design.graph.all_gaussian_roots:
        raise DomainError("exact likelihood needs independent unit-variance Gaussian nodes")
    nu = np.asarray(nu, dtype=float)
    if np.any(nu < 0):
        raise DomainError("variance components must be nonnegative")
    y = np.asarray(y, dtype=float)
    r = y - design.a - design.M @ np.asarray(alpha, float)
    d = nu[design.kmap]
    V = np.eye(y.size) + (design.Z * d) @ design.Z.T
    cf = linalg.cho_factor(V, lower=True)
    return 0.5 * float(r @ linalg.cho_solve(cf, r)) + float(np.sum(np.log(np.diag(cf[0]))))


def _integrand_parts(design, y2, alpha, d, chunk_rows=1 << 20):
    graph = design.graph
    off = (design.a + design.M @ alpha).reshape(y2.shape)
    Zs = design.Z.reshape(y2.shape + (-1,))
    trials = astergraph._trials(graph, y2)

    def loglik_rows(bs):
        # phi for every (node, individual) pair at once
        phi = off[None] + np.einsum("inq,mq->min", Zs, bs)
        th = astergraph._theta2(graph, phi.reshape(-1, graph.n_nodes)).reshape(phi.shape)
        ll = np.einsum("in,min->m", y2, th)
        for j, fam in enumerate(graph.families):
            ll -= expfam.cumulant(fam, th[:, :, j]) @ trials[:, j]
        return ll

    def neg_log(bs):
        # bs: (m, q) -> -l(phi) + b'D^{-1}b/2 for each row
        step = max(1, chunk_rows // y2.size)
        ll = np.concatenate([loglik_rows(bs[i:i + step]) for i in range(0, bs.shape[0], step)])
        return -ll + 0.5 * np.sum(bs * bs / d, axis=1)

    return neg_log


def integrated_loglik_quadrature(design: ModelDesign, y, alpha, nu, nodes_per_dim=40) -> float:
    """Minus log of the integral of ``exp(l(a + M alpha + Z b)) N(b; 0, D) db``.

    Adaptive Gauss-Hermite: the grid is centred at the mode of the
    integrand and scaled by the Cholesky factor of the inverse curvature
    there.  At most three random effects.
    """
    q = design.n_b
    if q > 3:
        raise DomainError("quadrature oracle supports at most 3 random effects")
    if nodes_per_dim < 20:
        raise DomainError("need at least 20 nodes per dimension")
    nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 0):
        raise DomainError("variance components must be strictly positive")
    alpha = np.asarray(alpha, dtype=float)
    y2 = astergraph.validate_response(design.graph, np.asarray(y, float).reshape(-1, design.graph.n_nodes))
    yflat = y2.ravel()
    d = nu[design.kmap]
    neg_log = _integrand_parts(design, y2, alpha, d)

    def f(b):
        return float(neg_log(b[None, :])[0])

    def grad(b):
        phi = design.a + design.M @ alpha + design.Z @ b
        mu = astergraph.joint_mean(design.graph, phi)
        return design.Z.T @ (mu - yflat) + b / d

    mode = optimize.minimize(f, np.zeros(q), jac=grad, method="BFGS",
                             options={"gtol": 1e-12, "maxiter": 1000}).x
    phi = design.a + design.M @ alpha + design.Z @ mode
    W = astergraph.joint_variance(design.graph, phi)
    Hm = W.quad(design.Z) + np.diag(1.0 / d)
    L = linalg.cholesky(linalg.inv(Hm), lower=True)

    x, w = hermgauss(nodes_per_dim)
    grid = np.array(list(itertools.product(x, repeat=q)))
    logw = np.sum(np.log(np.array(list(itertools.product(w, repeat=q)))), axis=1)
    bs = mode + np.sqrt(2.0) * grid @ L.T
    vals = -neg_log(bs) + np.sum(grid**2, axis=1) + logw
    log_int = special.logsumexp(vals) + 0.5 * q * np.log(2.0) + np.sum(np.log(np.diag(L)))
    # normal prior: (2 pi)^{-q/2} det(D)^{-1/2}
    log_int += -0.5 * q * np.log(2 * np.pi) - 0.5 * float(np.sum(np.log(d)))
    return -float(log_int)
