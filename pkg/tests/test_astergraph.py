import math

import numpy as np
import pytest
from scipy import stats

import astermix as am
from astermix import BlockDiag, Family, GraphSpecError, ResponseError
from astermix.astergraph import CONSTANT_ONE

from _fixtures import central_diff, central_jacobian

CHAIN2 = am.parse_graph("y1 1 ber\ny2 y1 0-poi")
CHAIN3 = am.parse_graph("y1 1 ber\ny2 y1 0-poi\ny3 y2 pois")
BER_POI = am.parse_graph("y1 1 ber\ny2 y1 pois")
SINGLE_BER = am.parse_graph("y 1 ber")


def chain3_logpmf(y, phi):
    """Sum of log conditional pmfs along Ber -> 0-Poi -> Poi via scipy."""
    th = am.theta_from_phi(CHAIN3, phi)
    p = 1.0 / (1.0 + math.exp(-th[0]))
    out = stats.bernoulli.logpmf(y[0], p)
    if y[0] == 1:
        lam = math.exp(th[1])
        out += stats.poisson.logpmf(y[1], lam) - math.log1p(-stats.poisson.pmf(0, lam))
    out += stats.poisson.logpmf(y[2], y[1] * math.exp(th[2])) if y[1] > 0 else 0.0
    return out


# -- parsing ------------------------------------------------------------------


def test_parse_positional_and_keyword_forms():
    g = am.parse_graph("# comment\nflw 1 ber\n\nname=fr pred=flw family=ztpois  # trailing\n")
    assert g.nodes == ("flw", "fr")
    assert g.preds == (CONSTANT_ONE, "flw")
    assert g.families == (Family.BERNOULLI, Family.ZERO_TRUNCATED_POISSON)
    assert am.parse_graph(g.to_text()) == g


@pytest.mark.parametrize(
    "text, line, field",
    [
        ("a 1 ber\nb a gamma\n", 2, "family"),
        ("a 1 ber\nb zz pois\n", 2, "pred"),
        ("a 1 ber\na 1 ber\n", 2, "name"),
        ("a 1 ber\nname=b family=pois\n", 2, "pred"),
        ("a 1\n", 1, None),
    ],
)
def test_parse_errors_name_line_and_field(text, line, field):
    with pytest.raises(GraphSpecError) as ei:
        am.parse_graph(text)
    assert ei.value.line == line
    assert ei.value.field == field
    assert f"line {line}" in str(ei.value)


def test_cycle_rejected():
    with pytest.raises(GraphSpecError):
        am.parse_graph("a b ber\nb a ber\n")


def test_read_graph(tmp_path):
    p = tmp_path / "g.txt"
    p.write_text(CHAIN3.to_text())
    assert am.read_graph(p) == CHAIN3


# -- theta / phi ------------------------------------------------------------------


def test_theta_single_node_is_phi():
    phi = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(am.theta_from_phi(SINGLE_BER, phi), phi)


def test_theta_ber_poi_chain():
    np.testing.assert_allclose(am.theta_from_phi(BER_POI, [0.0, 0.0]), [1.0, 0.0], atol=1e-15)


def test_theta_ber_ztp_chain():
    th = am.theta_from_phi(CHAIN2, [0.0, 0.0])
    assert th[0] == pytest.approx(math.log(math.e - 1), abs=1e-12)
    assert th[0] == pytest.approx(0.541325, abs=1e-6)


def test_theta_phi_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        phi = rng.uniform(-2, 2, 3 * 5)
        back = am.phi_from_theta(CHAIN3, am.theta_from_phi(CHAIN3, phi))
        np.testing.assert_allclose(back, phi, atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(am.DomainError):
        am.theta_from_phi(CHAIN3, np.zeros(4))


# -- log likelihood -----------------------------------------------------------------


def test_loglik_single_bernoulli():
    assert am.joint_loglik(SINGLE_BER, [1.0], [0.0]) == pytest.approx(-math.log(2), abs=1e-15)
    assert am.joint_loglik(SINGLE_BER, [0.0], [0.0]) == pytest.approx(-math.log(2), abs=1e-15)


def test_loglik_ber_ztp_chain_matches_pmf_oracle():
    # l(phi) = log f(y) - log h(y), h(y) = 1/3! for three counts in one ZTP trial
    th1 = am.theta_from_phi(CHAIN2, [0.0, 0.0])[0]
    oracle = stats.bernoulli.logpmf(1, 1 / (1 + math.exp(-th1)))
    oracle += stats.poisson.logpmf(3, 1.0) - math.log1p(-math.exp(-1.0)) + math.log(6)
    val = am.joint_loglik(CHAIN2, [1.0, 3.0], [0.0, 0.0])
    assert val == pytest.approx(oracle, abs=1e-12)
    assert val == pytest.approx(-1.0, abs=1e-12)  # see ledger


def test_loglik_differences_match_pmf_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        y = am.simulate_graph(CHAIN3, rng.uniform(-1, 1, 3), rng)
        p1, p2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        d = am.joint_loglik(CHAIN3, y, p1) - am.joint_loglik(CHAIN3, y, p2)
        assert d == pytest.approx(chain3_logpmf(y, p1) - chain3_logpmf(y, p2), abs=1e-10)


def test_loglik_gradient_identity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        phi = rng.uniform(-1, 1, 3 * 2)
        y = am.simulate_graph(CHAIN3, phi + 0.3, rng)
        fd = central_diff(lambda p: am.joint_loglik(CHAIN3, y, p), phi)
        np.testing.assert_allclose(y - am.joint_mean(CHAIN3, phi), fd, rtol=1e-5, atol=1e-7)


def test_loglik_validates_response():
    with pytest.raises(ResponseError):
        am.joint_loglik(CHAIN2, [0.0, 2.0], [0.0, 0.0])


# -- mean and variance ------------------------------------------------------------------


def test_mean_examples():
    assert am.joint_mean(SINGLE_BER, [0.0])[0] == 0.5
    mu = am.joint_mean(BER_POI, [0.0, 0.0])
    np.testing.assert_allclose(mu, [math.e / (1 + math.e)] * 2, atol=1e-12)


def test_mean_is_gradient_of_cumulant():
    # c(phi) = y'phi - l(phi) for any valid y
    rng = np.random.default_rng(3)
    y = np.array([1.0, 2.0, 4.0])
    for _ in range(10):
        phi = rng.uniform(-1, 1, 3)
        c = lambda p: float(y @ p) - am.joint_loglik(CHAIN3, y, p)  # noqa: E731
        np.testing.assert_allclose(am.joint_mean(CHAIN3, phi), central_diff(c, phi), rtol=1e-5, atol=1e-8)


def test_variance_examples():
    np.testing.assert_allclose(am.joint_variance(SINGLE_BER, [0.0]).to_dense(), [[0.25]])
    g = am.parse_graph("y 1 gauss")
    np.testing.assert_array_equal(am.joint_variance(g, [3.7]).to_dense(), [[1.0]])


@pytest.mark.parametrize("graph", [CHAIN2, CHAIN3, BER_POI])
def test_variance_is_jacobian_of_mean(graph):
    rng = np.random.default_rng(4)
    for _ in range(5):
        phi = rng.uniform(-1, 1, graph.n_nodes * 3)
        W = am.joint_variance(graph, phi)
        J = central_jacobian(lambda p: am.joint_mean(graph, p), phi)
        np.testing.assert_allclose(W.to_dense(), J, rtol=1e-5, atol=1e-8)
        assert W.asymmetry() < 1e-12


def test_variance_chain_at_zero():
    J = central_jacobian(lambda p: am.joint_mean(CHAIN2, p), np.zeros(2))
    np.testing.assert_allclose(am.joint_variance(CHAIN2, [0.0, 0.0]).to_dense(), J, atol=1e-5)


def test_variance_is_negative_hessian_of_loglik():
    rng = np.random.default_rng(5)
    y = np.array([1.0, 3.0, 5.0])
    phi = rng.uniform(-0.5, 0.5, 3)
    g = lambda p: central_diff(lambda q: am.joint_loglik(CHAIN3, y, q), p, h=1e-4)  # noqa: E731
    Hfd = central_jacobian(g, phi, h=1e-4)
    np.testing.assert_allclose(am.joint_variance(CHAIN3, phi).to_dense(), -Hfd, rtol=1e-4, atol=1e-6)


# -- BlockDiag -----------------------------------------------------------------------


def test_blockdiag_operations():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(4, 3, 3))
    blocks = A @ A.transpose(0, 2, 1)
    W = BlockDiag(blocks)
    D = W.to_dense()
    x = rng.normal(size=(12, 2))
    y = rng.normal(size=(12, 5))
    np.testing.assert_allclose(W.matmul(x), D @ x)
    np.testing.assert_allclose(W.quad(x, y), x.T @ D @ y)
    np.testing.assert_allclose(W.to_sparse().toarray(), D)
    np.testing.assert_allclose(BlockDiag.from_dense(D, 3).blocks, blocks)
    np.testing.assert_array_equal(BlockDiag.identity(4, 3).to_dense(), np.eye(12))


# -- validation ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "graph, y, node, row",
    [
        (CHAIN2, [1, 2, 0, 5], "y2", 2),
        (CHAIN2, [2, 2], "y1", 1),
        (CHAIN2, [1, 0], "y2", 1),
        (CHAIN3, [1, 1, 0.5], "y3", 1),
        (SINGLE_BER, [np.nan], "y", 1),
        (BER_POI, [1, -1], "y2", 1),
    ],
)
def test_validate_response_errors(graph, y, node, row):
    with pytest.raises(ResponseError) as ei:
        am.validate_response(graph, np.asarray(y, float))
    assert ei.value.node == node and ei.value.row == row
    assert f"row {row}" in str(ei.value) and repr(node) in str(ei.value)


# -- simulation ----------------------------------------------------------------------------


def test_simulation_zero_propagation():
    rng = np.random.default_rng(7)
    y = am.simulate_graph(CHAIN3, np.tile([-40.0, 0.0, 0.0], 50), rng).reshape(50, 3)
    assert np.all(y == 0)
    y = am.simulate_graph(CHAIN3, rng.uniform(-1, 1, 3 * 2000), rng).reshape(-1, 3)
    assert np.all(y[y[:, 1] == 0, 2] == 0)
    am.validate_response(CHAIN3, y)


def test_simulation_mean_matches_joint_mean():
    rng = np.random.default_rng(8)
    n = 100_000
    y = am.simulate_graph(CHAIN2, np.zeros(2 * n), rng).reshape(n, 2)
    mu = am.joint_mean(CHAIN2, [0.0, 0.0])
    W = am.joint_variance(CHAIN2, [0.0, 0.0]).to_dense()
    se = np.sqrt(np.diag(W) / n)
    assert np.all(np.abs(y.mean(axis=0) - mu) < 4 * se)


def test_simulation_reproducible():
    a = am.simulate_graph(CHAIN3, np.zeros(30), np.random.default_rng(9))
    b = am.simulate_graph(CHAIN3, np.zeros(30), np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
