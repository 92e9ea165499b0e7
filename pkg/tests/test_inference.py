import csv
import dataclasses
import io

import numpy as np
import pytest

import astermix as am
from astermix.inference import replicate_rng

from _fixtures import chain_design, gaussian_data, gaussian_design, simulate


@pytest.fixture(scope="module")
def gauss_fit():
    rng = np.random.default_rng(0)
    d = gaussian_design(rng, n=30, sizes=(5,))
    y = gaussian_data(d, rng, alpha=[1.0, 0.5], nu=[0.8])
    return am.fit(d, y, compute_fisher=False)


@pytest.fixture(scope="module")
def chain_fit():
    rng = np.random.default_rng(1)
    d = chain_design(rng, n=60, sizes=(6,))
    y = simulate(d, rng, [0.5, 0.5, -0.5, 0.3], [0.3])
    return am.fit(d, y, compute_fisher=False)


# -- bootstrap ---------------------------------------------------------------------


def test_single_replicate_is_reproducible(gauss_fit):
    r1 = am.parametric_bootstrap(gauss_fit, 1, seed=7)
    r2 = am.parametric_bootstrap(gauss_fit, 1, seed=7)
    assert r1 == r2
    assert r1.records[0].alpha.tobytes() == r2.records[0].alpha.tobytes()


def test_bit_identical_and_seed_sensitive(gauss_fit):
    r1 = am.parametric_bootstrap(gauss_fit, 8, seed=3)
    r2 = am.parametric_bootstrap(gauss_fit, 8, seed=3)
    assert r1.alpha.tobytes() == r2.alpha.tobytes() and r1.nu.tobytes() == r2.nu.tobytes()
    assert r1.to_csv() == r2.to_csv()
    r3 = am.parametric_bootstrap(gauss_fit, 8, seed=4)
    assert not np.array_equal(r1.alpha, r3.alpha)


def test_split_runs_give_same_union(gauss_fit):
    whole = am.parametric_bootstrap(gauss_fit, 6, seed=11)
    first = am.parametric_bootstrap(gauss_fit, 3, seed=11)
    second = am.parametric_bootstrap(gauss_fit, 3, seed=11, start=3)
    assert whole.records == first.records + second.records


def test_parallel_matches_serial(gauss_fit):
    serial = am.parametric_bootstrap(gauss_fit, 4, seed=5, n_jobs=1)
    parallel = am.parametric_bootstrap(gauss_fit, 4, seed=5, n_jobs=2)
    assert serial.records == parallel.records


def test_replicate_streams_are_distinct():
    a = replicate_rng(1, 0).standard_normal(5)
    b = replicate_rng(1, 1).standard_normal(5)
    c = replicate_rng(2, 0).standard_normal(5)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    np.testing.assert_array_equal(a, replicate_rng(1, 0).standard_normal(5))


@pytest.mark.parametrize("B", [0, -3])
def test_nonpositive_B_rejected(gauss_fit, B):
    with pytest.raises(am.DomainError):
        am.parametric_bootstrap(gauss_fit, B, seed=0)


def test_boundary_component_held_at_zero():
    rng = np.random.default_rng(2)
    d = gaussian_design(rng, n=30, sizes=(5,))
    y = gaussian_data(d, rng, alpha=[1.0, 0.5], nu=[0.8])
    fit = am.fit(d, y, fixed_zero=(0,), compute_fisher=False)
    res = am.parametric_bootstrap(fit, 5, seed=0)
    assert np.all(res.nu == 0) and np.all(res.boundary_fraction() == 1.0)


def test_small_sample_point_mass_at_zero():
    rng = np.random.default_rng(6)
    d = gaussian_design(rng, n=15, sizes=(5,))
    y = gaussian_data(d, rng, alpha=[1.0, 0.5], nu=[0.2])
    fit = am.fit(d, y, compute_fisher=False)
    assert fit.nu[0] > 0
    res = am.parametric_bootstrap(fit, 100, seed=1)
    frac = res.boundary_fraction()[0]
    # a continuous distribution would put no mass exactly at zero
    assert 0.1 < frac < 0.9


def test_result_accessors_and_csv(gauss_fit):
    res = am.parametric_bootstrap(gauss_fit, 5, seed=9)
    assert res.alpha.shape == (5, gauss_fit.design.n_alpha)
    assert res.nu.shape == (5, gauss_fit.design.n_nu)
    assert res.converged.all()
    rows = list(csv.reader(io.StringIO(res.to_csv())))
    header = rows[0]
    assert header[0] == "replicate"
    for name in gauss_fit.design.alpha_names + gauss_fit.design.nu_names:
        assert name in header
    assert len(rows) == 6
    ci = res.percentile_ci(0.9)
    for name, (lo, hi) in ci.items():
        assert lo <= hi
    lo, hi = ci[gauss_fit.design.alpha_names[0]]
    vals = res.alpha[:, 0]
    assert lo == pytest.approx(np.quantile(vals, 0.05)) and hi == pytest.approx(np.quantile(vals, 0.95))
    assert "replicates" in res.summary()


def test_failed_replicates_are_recorded(gauss_fit):
    # an unreachable stationarity tolerance makes every refit fail
    strict = dataclasses.replace(gauss_fit, options=am.FitOptions(stationarity_tol=1e-300))
    res = am.parametric_bootstrap(strict, 3, seed=0)
    assert len(res.records) == 3
    assert not res.converged.all()


# -- mean value map ---------------------------------------------------------------------


def test_map_at_zero_is_baseline_mean(chain_fit):
    d = chain_fit.design
    for i in (0, 7):
        out = am.mean_value_map(chain_fit, 0, [0.0], "sd", i)
        rows = slice(3 * i, 3 * i + 3)
        base = am.joint_mean(d.graph, d.a[rows] + d.M[rows] @ chain_fit.alpha)
        assert out == [(0.0, base[2])]


def test_map_monotone_on_leaf(chain_fit):
    s = np.linspace(-2, 2, 41)
    out = am.mean_value_map(chain_fit, 0, s, "sd", 3)
    means = np.array([m for _, m in out])
    assert np.all(np.diff(means) > 0)
    # derivative by central differences of the mean map is positive too
    hh = 1e-6
    for s0 in (-1.0, 0.0, 1.0):
        up = am.mean_value_map(chain_fit, 0, [s0 + hh], "sd", 3)[0][1]
        dn = am.mean_value_map(chain_fit, 0, [s0 - hh], "sd", 3)[0][1]
        assert (up - dn) / (2 * hh) > 0


def test_map_loads_effect_on_context_rows(chain_fit):
    d = chain_fit.design
    out = am.mean_value_map(chain_fit, 0, [0.7], "sd", 3)
    rows = slice(9, 12)
    load = d.Z[rows][:, d.kmap == 0].sum(axis=1)
    ref = am.joint_mean(d.graph, d.a[rows] + d.M[rows] @ chain_fit.alpha + 0.7 * load)
    assert out[0][1] == pytest.approx(ref[2], rel=1e-14)


def test_map_with_fitted_effects(chain_fit):
    d = chain_fit.design
    bhat = chain_fit.b[d.kmap == 0]
    out = am.mean_value_map(chain_fit, 0, bhat, "sd", 0)
    assert [s for s, _ in out] == bhat.tolist()
    assert all(m > 0 for _, m in out)


def test_map_errors(chain_fit):
    with pytest.raises(am.AstermixError):
        am.mean_value_map(chain_fit, 0, [0.0], "nope", 0)
    with pytest.raises(am.AstermixError):
        am.mean_value_map(chain_fit, 5, [0.0], "sd", 0)
    with pytest.raises(am.DomainError):
        am.mean_value_map(chain_fit, 0, [np.nan], "sd", 0)
    with pytest.raises(am.DomainError):
        am.mean_value_map(chain_fit, 0, [0.0], "sd", 10_000)
