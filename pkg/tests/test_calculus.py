import warnings

import numpy as np
import pytest

import astermix as am
from astermix.design import design_from_matrices
from astermix.objective import Problem

from _fixtures import (
    bernoulli_fixture,
    central_diff,
    central_jacobian,
    chain_fixture,
    gaussian_data,
    gaussian_design,
    poisson_fixture,
)

GAUSS1 = design_from_matrices(am.parse_graph("y 1 gauss"), np.zeros((1, 0)), np.ones((1, 1)), [0])


def fixtures():
    rng = np.random.default_rng(21)
    return [bernoulli_fixture(rng), poisson_fixture(rng), chain_fixture(rng)]


def fixed_what(d, y, alpha):
    return Problem(d, y, 1.0).W(d.M @ alpha)


def lmm_hessian(design, y, alpha, nu):
    """Closed-form Hessian of the exact Gaussian minus log likelihood."""
    r = y - design.M @ alpha
    V = np.eye(y.size) + (design.Z * nu[design.kmap]) @ design.Z.T
    Vi = np.linalg.inv(V)
    G = [design.Z[:, design.kmap == j] @ design.Z[:, design.kmap == j].T for j in range(design.n_nu)]
    M = design.M
    p, m = M.shape[1], len(G)
    H = np.zeros((p + m, p + m))
    H[:p, :p] = M.T @ Vi @ M
    Vr = Vi @ r
    for j, Gj in enumerate(G):
        H[:p, p + j] = H[p + j, :p] = M.T @ Vi @ Gj @ Vr
        for k, Gk in enumerate(G):
            H[p + j, p + k] = Vr @ Gk @ Vi @ Gj @ Vr - 0.5 * np.trace(Vi @ Gk @ Vi @ Gj)
    return H


# -- hand example --------------------------------------------------------------------


def test_blocks_single_gaussian():
    blk = am.p_blocks(GAUSS1, [1.0], [], [0.5], [1.0], 1.0)
    assert blk.p_bb[0, 0] == pytest.approx(2.0)
    assert blk.p_bnu[0, 0] == pytest.approx(-0.5)
    assert blk.p_nunu[0, 0] == pytest.approx(0.125)
    assert am.q_gradient(GAUSS1, [1.0], [], [1.0], 1.0)[0] == pytest.approx(0.125)


def test_alpha_nu_block_is_zero():
    rng = np.random.default_rng(1)
    for d, y in fixtures():
        blk = am.p_blocks(d, y, rng.normal(size=d.n_alpha) * 0.2, rng.normal(size=d.n_b) * 0.3,
                          rng.uniform(0.3, 1, d.n_nu), 1.0)
        assert np.all(blk.p_anu == 0)


# -- finite differences --------------------------------------------------------------------


def test_p_blocks_match_differences():
    rng = np.random.default_rng(2)
    for d, y in fixtures():
        p, q = d.n_alpha, d.n_b
        for _ in range(10):
            alpha = rng.normal(size=p) * 0.2
            b = rng.normal(size=q) * 0.3
            nu = rng.uniform(0.3, 1.5, d.n_nu)
            what = fixed_what(d, y, alpha)
            x = np.concatenate([alpha, b, nu])

            def f(z):
                return am.penalized(d, y, z[:p], z[p:p + q], z[p + q:], what)

            H = central_jacobian(lambda z: central_diff(f, z, h=1e-4), x, h=1e-4)
            J = am.p_blocks(d, y, alpha, b, nu, what).joint()
            np.testing.assert_allclose(J, 0.5 * (H + H.T), rtol=1e-4, atol=1e-5 * np.max(np.abs(J)))


def test_q_gradient_matches_differences():
    rng = np.random.default_rng(3)
    for d, y in fixtures():
        p = d.n_alpha
        for _ in range(10):
            alpha = rng.normal(size=p) * 0.2
            nu = rng.uniform(0.3, 1.5, d.n_nu)
            what = fixed_what(d, y, alpha)
            x = np.concatenate([alpha, nu])
            fd = central_diff(lambda z: am.profile(d, y, z[:p], z[p:], what), x, h=1e-5)
            g = am.q_gradient(d, y, alpha, nu, what)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)


def test_q_hessian_matches_differences():
    rng = np.random.default_rng(4)
    for d, y in fixtures():
        p = d.n_alpha
        for _ in range(10):
            alpha = rng.normal(size=p) * 0.2
            nu = rng.uniform(0.3, 1.5, d.n_nu)
            what = fixed_what(d, y, alpha)
            x = np.concatenate([alpha, nu])
            H = central_jacobian(lambda z: am.q_gradient(d, y, z[:p], z[p:], what), x, h=1e-5)
            Hq = am.q_hessian(d, y, alpha, nu, what)
            np.testing.assert_allclose(Hq, 0.5 * (H + H.T), rtol=1e-4, atol=1e-6 * np.max(np.abs(Hq)))


def test_directional_second_difference():
    rng = np.random.default_rng(5)
    for d, y in fixtures():
        p = d.n_alpha
        alpha = rng.normal(size=p) * 0.2
        nu = rng.uniform(0.5, 1.5, d.n_nu)
        what = fixed_what(d, y, alpha)
        Hq = am.q_hessian(d, y, alpha, nu, what)
        for _ in range(5):
            v = rng.normal(size=p + d.n_nu)
            v /= np.linalg.norm(v)
            hh = 1e-3
            x = np.concatenate([alpha, nu])
            f = lambda z: am.profile(d, y, z[:p], z[p:], what)  # noqa: E731
            sd = (f(x + hh * v) - 2 * f(x) + f(x - hh * v)) / hh**2
            assert sd == pytest.approx(v @ Hq @ v, rel=1e-3)


# -- Schur complement ------------------------------------------------------------------------


def test_schur_identity_and_pd():
    rng = np.random.default_rng(6)
    for d, y in fixtures():
        for _ in range(5):
            alpha = rng.normal(size=d.n_alpha) * 0.2
            nu = rng.uniform(0.3, 1.5, d.n_nu)
            what = fixed_what(d, y, alpha)
            b = am.inner_solve(d, y, alpha, nu, what)
            blk = am.p_blocks(d, y, alpha, b, nu, what)
            J = blk.joint()
            p, q = d.n_alpha, d.n_b
            psi = np.r_[np.arange(p), p + q + np.arange(d.n_nu)]
            bi = p + np.arange(q)
            explicit = J[np.ix_(psi, psi)] - J[np.ix_(psi, bi)] @ np.linalg.solve(J[np.ix_(bi, bi)], J[np.ix_(bi, psi)])
            Hq = am.q_hessian(d, y, alpha, nu, what)
            np.testing.assert_allclose(Hq, explicit, atol=1e-10 * max(1.0, np.max(np.abs(Hq))))
            np.testing.assert_array_equal(Hq, Hq.T)
            try:
                np.linalg.cholesky(J)
            except np.linalg.LinAlgError:
                continue
            np.linalg.cholesky(Hq)


# -- Gaussian closed form -------------------------------------------------------------------------


def test_q_hessian_matches_lmm_closed_form():
    rng = np.random.default_rng(7)
    for _ in range(10):
        d = gaussian_design(rng, n=15)
        y = gaussian_data(d, rng)
        alpha, nu = rng.normal(size=d.n_alpha), rng.uniform(0.2, 2, d.n_nu)
        np.testing.assert_allclose(am.q_hessian(d, y, alpha, nu, 1.0), lmm_hessian(d, y, alpha, nu),
                                   rtol=1e-6, atol=1e-8)


def test_fisher_matches_lmm_information():
    rng = np.random.default_rng(8)
    d = gaussian_design(rng, n=40, sizes=(5, 6))
    y = gaussian_data(d, rng, alpha=[1.0, 0.5], nu=[1.0, 0.8])
    fit = am.fit(d, y)
    assert np.all(fit.nu > 0)
    cov = np.linalg.inv(lmm_hessian(d, y, fit.alpha, fit.nu))
    np.testing.assert_allclose(fit.fisher.se, np.sqrt(np.diag(cov)), rtol=1e-4)
    assert fit.fisher.names == d.alpha_names + d.nu_names
    assert fit.fisher.diagnostics["max_asymmetry"] < 1e-10


def test_fisher_excludes_boundary_components():
    rng = np.random.default_rng(9)
    d = gaussian_design(rng, n=40, sizes=(5, 6))
    y = gaussian_data(d, rng, alpha=[1.0, 0.5], nu=[1.0, 0.8])
    fit = am.fit(d, y, fixed_zero=(1,), compute_fisher=False)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        info = am.fisher_information(fit)
    assert any("excluded" in str(w.message) for w in rec)
    assert info.excluded == [d.nu_names[1]]
    assert d.nu_names[1] not in info.names and info.information.shape == (3, 3)


def test_interior_required():
    d, y = bernoulli_fixture(np.random.default_rng(0))
    with pytest.raises(am.DomainError):
        am.q_hessian(d, y, np.zeros(d.n_alpha), np.r_[0.0, 1.0], 1.0)
