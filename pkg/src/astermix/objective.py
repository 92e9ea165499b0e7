"""Penalized objective, inner random-effects solve, profile and the
square-root reparametrization.

With ``phi = a + M alpha + Z b``, ``D = diag(nu[kmap])`` and a constant
positive semidefinite matrix ``What`` standing in for ``W(phi)`` inside the
log determinant, the penalized objective is

    p(alpha, b, nu) = -l(phi) + 1/2 sum_i h(b_i, nu_k(i))
                      + 1/2 log det(Z' What Z D + I)

where ``h(b, nu) = b^2 / nu`` for ``nu > 0``, ``h(0, 0) = 0`` and ``+inf``
otherwise.  Its minimizer over ``b`` is ``b*(alpha, nu)`` and the profile
``q(alpha, nu) = p(alpha, b*, nu)`` is minus the log approximate integrated
likelihood.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from . import astergraph
from .astergraph import BlockDiag, validate_response
from .design import ModelDesign
from .errors import ConvergenceError, DomainError

__all__ = [
    "as_what",
    "penalized",
    "inner_solve",
    "profile",
    "sqrt_objective",
    "Problem",
]

JITTER = 1e-12


def as_what(what, design: ModelDesign) -> BlockDiag:
    """Coerce a Ŵ argument (BlockDiag, dense matrix, or scalar) to BlockDiag."""
    k, n = design.graph.n_nodes, design.n_individuals
    if isinstance(what, BlockDiag):
        if what.blocks.shape != (n, k, k):
            raise DomainError("Ŵ has the wrong dimensions for this design")
        return what
    arr = np.asarray(what, dtype=float)
    if arr.ndim == 0:
        return BlockDiag(arr * np.broadcast_to(np.eye(k), (n, k, k)))
    if arr.ndim == 3:
        return as_what(BlockDiag(arr), design)
    if arr.shape != (n * k, n * k):
        raise DomainError("Ŵ has the wrong dimensions for this design")
    return BlockDiag.from_dense(arr, k)


def h(b, nu):
    """Lower semicontinuous penalty ``h(b, nu)``, vectorized."""
    b = np.asarray(b, dtype=float)
    nu = np.asarray(nu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(nu > 0, b * b / np.where(nu > 0, nu, 1.0), np.inf)
    out = np.where((nu == 0) & (b == 0), 0.0, out)
    return out


class Problem:
    """Evaluator for one (design, data, Ŵ) triple.

    Caches ``H = Z' Ŵ Z``, which is all the log-determinant term needs.
    """

    def __init__(self, design: ModelDesign, y, what):
        self.design = design
        self.graph = design.graph
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != design.M.shape[0]:
            raise DomainError(f"y has length {y.size}, design has {design.M.shape[0]} rows")
        self.y2 = validate_response(self.graph, y.reshape(-1, self.graph.n_nodes))
        self.y = self.y2.ravel()
        self.what = as_what(what, design)
        H = self.what.quad(design.Z)
        self.H = 0.5 * (H + H.T)
        self.kmap = design.kmap
        self.events = []
        self._trials = astergraph._trials(self.graph, self.y2)

    # -- likelihood ------------------------------------------------------

    def phi(self, alpha, b):
        return self.design.a + self.design.M @ alpha + self.design.Z @ b

    def _theta(self, phi):
        if not np.all(np.isfinite(phi)):
            return None
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                th = astergraph._theta2(self.graph, phi.reshape(self.y2.shape))
            except DomainError:
                return None
        return th if np.all(np.isfinite(th)) else None

    def nll(self, phi) -> float:
        """Minus the log likelihood; ``+inf`` when ``phi`` overflows."""
        th = self._theta(phi)
        if th is None:
            return np.inf
        with np.errstate(over="ignore", invalid="ignore"):
            val = -astergraph._loglik2(self.graph, self.y2, th)
        return val if np.isfinite(val) else np.inf

    def nll_grad(self, phi):
        """(value, gradient in phi) of minus the log likelihood."""
        th = self._theta(phi)
        if th is None:
            return np.inf, None
        val = -astergraph._loglik2(self.graph, self.y2, th)
        mu = astergraph._mean2(self.graph, th).ravel()
        return val, mu - self.y

    def W(self, phi) -> BlockDiag:
        th = self._theta(phi)
        if th is None:
            raise DomainError("canonical parameter overflow")
        blocks, _ = astergraph._variance_blocks(self.graph, th)
        return BlockDiag(blocks)

    # -- log determinant ---------------------------------------------------

    def logdet(self, nu, need_k=True):
        """``log det(H D + I)`` and ``K = (H D + I)^{-1} H``.

        Uses the symmetric form ``I + D^{1/2} H D^{1/2}`` so the result is
        real and finite; ``K`` follows from the push-through identity.
        """
        d = np.asarray(nu, dtype=float)[self.kmap]
        q = d.size
        if q == 0:
            return 0.0, np.zeros((0, 0))
        a = np.sqrt(np.maximum(d, 0.0))
        S = np.eye(q) + a[:, None] * self.H * a[None, :]
        try:
            cf = linalg.cho_factor(S, lower=True, check_finite=False)
        except linalg.LinAlgError:
            self.events.append("jitter added to log-det factorization")
            cf = linalg.cho_factor(S + JITTER * np.eye(q), lower=True, check_finite=False)
        ld = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        if not need_k:
            return ld, None
        HA = self.H * a[None, :]
        K = self.H - HA @ linalg.cho_solve(cf, HA.T, check_finite=False)
        return ld, 0.5 * (K + K.T)

    # -- objectives ----------------------------------------------------------

    def penalized(self, alpha, b, nu) -> float:
        nu = np.asarray(nu, dtype=float)
        if np.any(nu < 0):
            return np.inf
        pen = h(b, nu[self.kmap])
        if np.any(np.isinf(pen)):
            return np.inf
        return self.nll(self.phi(alpha, b)) + 0.5 * float(np.sum(pen)) + 0.5 * self.logdet(nu, False)[0]

    def inner(self, alpha, nu, start=None, max_iter=100, tol=1e-10):
        """Damped Newton for ``b*``; effects with zero variance stay at 0."""
        d = np.asarray(nu, dtype=float)[self.kmap]
        act = d > 0
        b = np.zeros(d.size)
        if not np.any(act):
            return b
        if start is not None:
            b[act] = np.asarray(start, dtype=float)[act]
        Za = self.design.Z[:, act]
        dinv = 1.0 / d[act]
        off = self.design.a + self.design.M @ alpha
        x = b[act]

        def f(x):
            return self.nll(off + Za @ x) + 0.5 * float(np.sum(x * x * dinv))

        def grad_norm(x):
            _, gp = self.nll_grad(off + Za @ x)
            return np.inf if gp is None else float(np.max(np.abs(Za.T @ gp + x * dinv)))

        fx = f(x)
        if start is not None:
            # a start worse than zero can sit where the chained cumulants grow
            # doubly exponentially and Newton steps shrink; the minimizer is
            # unique, so begin from the better point
            f0 = f(np.zeros_like(x))
            if not fx <= f0:
                x, fx = np.zeros_like(x), f0
        gnorm = np.inf
        for _ in range(max_iter):
            phi = off + Za @ x
            val, gphi = self.nll_grad(phi)
            g = Za.T @ gphi + x * dinv
            gnorm = float(np.max(np.abs(g)))
            if gnorm <= tol * (1.0 + abs(fx)):
                b[act] = x
                return b
            Hb = self.W(phi).quad(Za) + np.diag(dinv)
            try:
                step = -linalg.cho_solve(linalg.cho_factor(Hb, check_finite=False), g, check_finite=False)
            except linalg.LinAlgError:
                step = -np.linalg.lstsq(Hb, g, rcond=None)[0]
            slope = float(g @ step)
            if -slope <= 1e-13 * (1.0 + abs(fx)):
                # predicted decrease is below the rounding error of f
                x = x + step
                fx = f(x)
                continue
            t = 1.0
            for _ in range(60):
                xn = x + t * step
                fn = f(xn)
                if fn <= fx + 1e-4 * t * slope:
                    break
                # f is a sum of many terms that can cancel, so a decrease
                # this small may be invisible in it; the gradient still shows it
                if -t * slope <= 1e-9 * (1.0 + abs(fx)) and grad_norm(xn) < gnorm:
                    break
                t *= 0.5
            else:
                # no decrease representable in floating point: at the noise floor
                if gnorm <= 1e-7 * (1.0 + abs(fx)):
                    b[act] = x
                    return b
                raise ConvergenceError(
                    "inner Newton line search failed", iterate=x.copy(), grad_norm=gnorm
                )
            x, fx = xn, fn
        raise ConvergenceError(
            f"inner Newton did not converge in {max_iter} iterations",
            iterate=x.copy(),
            grad_norm=gnorm,
        )

    def profile(self, alpha, nu, start=None):
        b = self.inner(alpha, nu, start)
        return self.penalized(alpha, b, nu), b

    def sqrt_value_grad(self, alpha, c, sigma):
        """Rooted objective and its gradient in (alpha, c, sigma)."""
        s = np.asarray(sigma, dtype=float)[self.kmap]
        b = s * c
        val, gphi = self.nll_grad(self.phi(alpha, b))
        if gphi is None:
            return np.inf, None
        nu = np.asarray(sigma, dtype=float) ** 2
        ld, K = self.logdet(nu)
        val += 0.5 * float(c @ c) + 0.5 * ld
        r = self.design.Z.T @ gphi
        ga = self.design.M.T @ gphi
        gc = s * r + c
        per_effect = c * r + s * np.diag(K)
        gs = np.bincount(self.kmap, weights=per_effect, minlength=len(sigma))
        return val, np.concatenate([ga, gc, gs])


def _finite(name, v):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} must be finite")
    return v


def _check_dims(design, alpha, b, nu):
    if alpha is not None and alpha.size != design.n_alpha:
        raise DomainError(f"alpha has length {alpha.size}, expected {design.n_alpha}")
    if b is not None and b.size != design.n_b:
        raise DomainError(f"b has length {b.size}, expected {design.n_b}")
    if nu is not None and nu.size != design.n_nu:
        raise DomainError(f"nu has length {nu.size}, expected {design.n_nu}")


def penalized(design: ModelDesign, y, alpha, b, nu, what) -> float:
    """Extended-real penalized objective ``p(alpha, b, nu)``.

    Returns ``+inf`` off the constraint set (some ``nu_j < 0``, or some
    ``b_i != 0`` with ``nu_k(i) = 0``).  Non-finite ``alpha`` or ``b`` is a
    domain error.
    """
    alpha = _finite("alpha", alpha).reshape(-1)
    b = _finite("b", b).reshape(-1)
    nu = np.asarray(nu, dtype=float).reshape(-1)
    _check_dims(design, alpha, b, nu)
    return Problem(design, y, what).penalized(alpha, b, nu)


def inner_solve(design: ModelDesign, y, alpha, nu, what, start=None, max_iter=100) -> np.ndarray:
    """Minimize ``p`` over ``b`` for fixed ``(alpha, nu)``.

    Effects whose variance component is zero are fixed at zero; the rest
    are found by damped Newton on the smooth, strictly convex restriction.
    """
    alpha = _finite("alpha", alpha).reshape(-1)
    nu = _finite("nu", nu).reshape(-1)
    _check_dims(design, alpha, None, nu)
    if np.any(nu < 0):
        raise DomainError("variance components must be nonnegative")
    if start is not None:
        start = _finite("start", start).reshape(-1)
        _check_dims(design, None, start, None)
    return Problem(design, y, what).inner(alpha, nu, start, max_iter=max_iter)


def profile(design: ModelDesign, y, alpha, nu, what) -> float:
    """``q(alpha, nu) = p(alpha, b*(alpha, nu), nu)``."""
    alpha = _finite("alpha", alpha).reshape(-1)
    nu = _finite("nu", nu).reshape(-1)
    _check_dims(design, alpha, None, nu)
    if np.any(nu < 0):
        raise DomainError("variance components must be nonnegative")
    return Problem(design, y, what).profile(alpha, nu)[0]


def sqrt_objective(design: ModelDesign, y, alpha, c, sigma, what) -> float:
    """Rooted objective with ``nu = sigma^2`` and ``b = A c``, ``A = diag(sigma[kmap])``.

    Defined for all real ``sigma`` (no constraints) and continuous at 0.
    """
    alpha = _finite("alpha", alpha).reshape(-1)
    c = _finite("c", c).reshape(-1)
    sigma = _finite("sigma", sigma).reshape(-1)
    _check_dims(design, alpha, c, sigma)
    prob = Problem(design, y, what)
    s = sigma[design.kmap]
    return (
        prob.nll(prob.phi(alpha, s * c))
        + 0.5 * float(c @ c)
        + 0.5 * prob.logdet(sigma**2, False)[0]
    )
