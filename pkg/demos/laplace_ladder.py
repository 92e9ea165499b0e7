"""How the Laplace approximation error shrinks as each random effect is
informed by more observations (Bernoulli, two effects, quadrature reference)."""

import numpy as np

import astermix as am
from astermix.design import design_from_matrices
from astermix.objective import Problem


def error(seed, m, q=2, nu=1.0, alpha=0.3):
    rng = np.random.default_rng(seed)
    g = am.parse_graph("y 1 ber")
    d = design_from_matrices(g, np.ones((q * m, 1)), np.kron(np.eye(q), np.ones((m, 1))), [0] * q)
    a = np.array([alpha])
    y = am.simulate_graph(g, d.phi(a, rng.normal(size=q) * np.sqrt(nu)), rng)
    prob = Problem(d, y, 1.0)
    what = prob.W(d.M @ a)
    for _ in range(100):
        new = prob.W(d.phi(a, am.inner_solve(d, y, a, [nu], what)))
        if np.array_equal(new.blocks, what.blocks):
            break
        what = new
    return abs(am.profile(d, y, a, [nu], what) - am.integrated_loglik_quadrature(d, y, a, [nu]))


print(f"{'m':>5} {'error (seed 0)':>15} {'mean of 20':>12}")
for m in (5, 20, 80, 320):
    print(f"{m:>5} {error(0, m):>15.2e} {np.mean([error(s, m) for s in range(20)]):>12.2e}")
