"""Zero variance components: the rooted objective's gradient in sigma is
zero at sigma = 0 whether or not the zero is optimal, while the descent test
tells the two situations apart."""

import numpy as np

import astermix as am
from astermix.design import design_from_matrices
from astermix.objective import Problem


def poisson_model(rng, n, groups, nu):
    g = am.parse_graph("y 1 pois")
    M = np.column_stack([np.ones(n), rng.normal(size=n) * 0.5])
    Z = np.eye(groups)[rng.integers(0, groups, n)]
    d = design_from_matrices(g, M, Z, [0] * groups)
    b = rng.normal(size=groups) * np.sqrt(nu)
    y = am.simulate_graph(g, d.phi(np.array([0.2, 0.4]), b), rng)
    return d, y


def show(label, fit):
    d = fit.design
    state = (d, fit.y, fit.alpha, fit.b, fit.nu, fit.what)
    h = 1e-6
    zeros = np.zeros(d.n_b)
    sq = [am.sqrt_objective(d, fit.y, fit.alpha, zeros, [s], fit.what) for s in (h, -h)]
    test = am.descent_test(*state, 0)
    print(f"{label}: d/dsigma at 0 = {(sq[0] - sq[1]) / (2 * h):.1e}, descent test = {test:.3g}")
    if test < 0:
        u, v = am.descent_direction(*state, 0)
        prob = Problem(d, fit.y, fit.what)
        p0 = prob.penalized(fit.alpha, fit.b, fit.nu)
        for tau in (1e-2, 1e-3, 1e-4):
            dp = prob.penalized(fit.alpha, fit.b + tau * u, fit.nu + tau * np.array([v])) - p0
            print(f"    step {tau:g} along the descent direction changes p by {dp:.3g}")


rng = np.random.default_rng(1)
d, y = poisson_model(rng, 120, 12, nu=1.0)
show("true nu = 1, forced to 0", am.fit(d, y, fixed_zero=(0,), compute_fisher=False))
d, y = poisson_model(rng, 600, 60, nu=0.0)
show("true nu = 0, forced to 0", am.fit(d, y, fixed_zero=(0,), compute_fisher=False))
