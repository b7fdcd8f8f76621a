import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trihedge import lattice, model
from trihedge.hedge import constant_strategy, lattice_optimal_strategy
from trihedge.lattice import (
    LatticeSizeError,
    VolFractionPolicy,
    dual_ce,
    dual_policy_bound,
    enumerate_ce,
    hedged_ce,
    primal_ce,
    primal_ce_numeric,
)
from trihedge.model import InputError, ModelParams


def P(p=0.5, sigma_bar=0.2, s0=1.0, ell=1.0, n=10):
    return ModelParams(p, sigma_bar, s0, ell, n)


# ---------------------------------------------------------------- oracles

def grid_search_one_step(prm, payoff, lo=-20.0, hi=20.0, step=1e-6, chunk=2_000_000):
    """Brute-force the one-step infimum over the hedge control ``a``."""
    N = prm.risk_aversion
    u, s0, p = prm.u, prm.s0, prm.p
    up, mid, down = (N * float(payoff(s0 * f)) for f in (1 + u, 1.0, 1 - u))
    c = prm.sigma_bar * s0
    best = math.inf
    count = int(round((hi - lo) / step)) + 1
    for start in range(0, count, chunk):
        a = lo + step * np.arange(start, min(start + chunk, count))
        obj = np.log(0.5 * p * (np.exp(up - a * c) + np.exp(down + a * c)) + (1 - p) * np.exp(mid))
        best = min(best, float(obj.min()))
    return best / N


def path_oracle(prm, path_functional):
    """Plain recursion over explicit paths of the ternary tree."""
    N, p, u = prm.risk_aversion, prm.p, prm.u

    def value(path):
        if len(path) == prm.n + 1:
            return path_functional(path)
        s = path[-1]
        up = value(path + [s * (1 + u)])
        mid = value(path + [s])
        down = value(path + [s * (1 - u)])
        m = 0.5 * (up + down)
        shift = max(m, mid)
        return shift + math.log(p * math.exp(N * (m - shift)) + (1 - p) * math.exp(N * (mid - shift))) / N

    return value([prm.s0])


MARKOVIAN = [model.log_affine(0.0, 1.0), model.power(2.0), model.smoothed_call(1.0, 0.05)]


# ---------------------------------------------------------------- geometry

def test_tri_index_matches_packing_order():
    for k in range(6):
        a, b = np.nonzero(lattice.tri_mask(k))
        np.testing.assert_array_equal(lattice.tri_index(k, a, b), np.arange(lattice.tri_size(k)))


def test_layer_spots():
    prm = P(sigma_bar=0.5, n=25)
    s = lattice.layer_spots(prm, 3)
    assert s[2, 1] == pytest.approx(1.1 ** 2 * 0.9)


# ---------------------------------------------------------------- primal

def test_one_step_square_closed_form():
    prm = P(p=0.5, sigma_bar=0.5, s0=1.0, ell=1.0, n=1)
    ce, _ = primal_ce(prm, model.power(2.0))
    assert ce == pytest.approx(math.log(0.5 * math.exp(1.25) + 0.5 * math.exp(1.0)), abs=1e-14)
    assert ce == pytest.approx(1.1327922393188983, abs=1e-12)


def test_one_step_square_against_grid_search():
    prm = P(p=0.5, sigma_bar=0.5, s0=1.0, ell=1.0, n=1)
    ce, _ = primal_ce(prm, model.power(2.0))
    assert ce == pytest.approx(grid_search_one_step(prm, model.power(2.0)), abs=1e-9)


@pytest.mark.parametrize("n", [1, 3, 17, 60])
def test_constant_payoff(n):
    ce, delta = primal_ce(P(n=n, p=0.3, sigma_bar=0.7), model.constant(2.5))
    assert ce == pytest.approx(2.5, abs=1e-13)
    for layer in delta.layers:
        np.testing.assert_allclose(layer, 0.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.1, 1.0), st.integers(1, 40),
       st.floats(-2, 2), st.floats(-2, 2))
def test_affine_payoff_replicated(p, sigma_bar, n, a, b):
    prm = P(p=p, sigma_bar=sigma_bar, s0=1.3, n=n)
    ce, delta = primal_ce(prm, model.linear(a, b))
    assert ce == pytest.approx(a + b * 1.3, abs=1e-11)
    for layer in delta.layers:
        np.testing.assert_allclose(layer, b, atol=1e-9)


def test_numeric_matches_closed_form_one_step():
    prm = P(p=0.5, sigma_bar=0.5, n=1)
    assert primal_ce_numeric(prm, model.power(2.0), tol=1e-10) == pytest.approx(
        primal_ce(prm, model.power(2.0))[0], abs=1e-9)


def test_numeric_linear():
    prm = P(n=3, s0=1.4)
    assert primal_ce_numeric(prm, model.linear(0.0, 1.0)) == pytest.approx(1.4, abs=1e-9)


def test_numeric_random_quadratic_against_enumeration():
    rng = np.random.default_rng(11)
    c0, c1 = rng.normal(size=2)
    c2 = rng.uniform(0.2, 2.0)
    pay = model.custom(lambda x: c0 + c1 * x + c2 * x * x)
    prm = P(p=0.4, sigma_bar=0.6, n=5, ell=1.5)
    assert primal_ce_numeric(prm, pay) == pytest.approx(enumerate_ce(prm, pay), abs=1e-8)


def test_numeric_rejects_bad_tol():
    with pytest.raises(InputError):
        primal_ce_numeric(P(), model.constant(), tol=0.0)


def test_inner_minimizer_random_nodes():
    rng = np.random.default_rng(5)
    size = 1000
    up, mid, down = rng.normal(scale=3.0, size=(3, size))
    c = rng.uniform(0.05, 2.0, size)
    p = rng.uniform(0.05, 0.95)
    exact, a_star = lattice.inner_closed_form(up, mid, down, c, p)
    value, a_min = lattice.inner_minimize(up, mid, down, c, p, tol=1e-12)
    np.testing.assert_allclose(value, exact, atol=1e-9)
    np.testing.assert_allclose(a_min, a_star, atol=1e-6)


def test_inner_tie_gives_zero_control():
    _, a_star = lattice.inner_closed_form(1.0, 0.3, 1.0, 0.5, 0.4)
    assert a_star == 0.0


def test_primal_rejects_path_payoff():
    with pytest.raises(InputError):
        primal_ce(P(n=3), model.running_max())


def test_large_n_is_finite():
    prm = P(n=600, ell=5.0)
    ce, _ = primal_ce(prm, model.power(2.0), return_delta=False)
    assert math.isfinite(ce)


# ---------------------------------------------------------------- dual

def test_dual_symmetric_node_gives_reference_mass():
    _, q = lattice.dual_node_update(np.array([1.0]), np.array([1.0]), np.array([1.0]), 5.0, 0.3)
    assert q[0] == pytest.approx(0.3, abs=1e-15)


def test_dual_one_step_square():
    prm = P(p=0.5, sigma_bar=0.5, n=1)
    assert dual_ce(prm, model.power(2.0))[0] == pytest.approx(1.1327922393188983, abs=1e-12)


def test_dual_linear():
    assert dual_ce(P(n=30, s0=0.8), model.linear())[0] == pytest.approx(0.8, abs=1e-12)


def test_duality_identity_random():
    rng = np.random.default_rng(21)
    for _ in range(60):
        prm = P(p=rng.uniform(0.05, 0.95), sigma_bar=rng.uniform(0.1, 1.0),
                ell=rng.uniform(0.1, 5.0), n=int(rng.integers(1, 51)))
        pay = MARKOVIAN[rng.integers(3)]
        a = primal_ce(prm, pay, return_delta=False)[0]
        b = dual_ce(prm, pay)[0]
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_qstar_strictly_inside():
    prm = P(n=40, ell=50.0, sigma_bar=0.9)
    _, q = dual_ce(prm, model.power(3.0))
    for layer in q.layers:
        assert np.all((layer > 0) & (layer < 1))


# ---------------------------------------------------------------- enumeration

@pytest.mark.parametrize("pay", MARKOVIAN, ids=lambda p: p.name)
@pytest.mark.parametrize("n", [1, 4, 8])
def test_enumeration_equals_lattice(pay, n):
    prm = P(p=0.35, sigma_bar=0.4, ell=2.0, n=n)
    assert enumerate_ce(prm, pay) == pytest.approx(primal_ce(prm, pay)[0], abs=1e-12)


def test_enumeration_constant():
    assert enumerate_ce(P(n=5), model.constant(0.7)) == pytest.approx(0.7, abs=1e-14)


def test_enumeration_cap():
    with pytest.raises(LatticeSizeError):
        enumerate_ce(P(n=10), model.constant())
    with pytest.raises(LatticeSizeError):
        enumerate_ce(P(n=5), model.constant(), max_n=4)


def test_running_max_against_path_oracle():
    prm = P(p=0.4, sigma_bar=0.3, ell=1.5, n=5)
    ours = enumerate_ce(prm, model.running_max())
    assert ours == pytest.approx(path_oracle(prm, max), abs=1e-12)


def test_path_average_against_path_oracle():
    prm = P(p=0.6, sigma_bar=0.5, ell=0.7, n=4)

    def average(path):
        z = np.array(path)
        return float(np.sum(0.5 * (z[1:] + z[:-1])) / (len(z) - 1))

    assert enumerate_ce(prm, model.path_average()) == pytest.approx(path_oracle(prm, average), abs=1e-12)


def test_running_max_non_decreasing_in_vol():
    vals = [enumerate_ce(P(sigma_bar=s, n=5), model.running_max()) for s in np.linspace(0.1, 0.9, 6)]
    assert np.all(np.diff(vals) >= -1e-12)


# ---------------------------------------------------------------- monotonicity / convexity

CONVEX = [model.power(2.0), model.call(1.0), model.exponential(1.0)]


@pytest.mark.parametrize("pay", CONVEX, ids=lambda p: p.name)
@pytest.mark.parametrize("n", [1, 4, 16])
def test_monotone_in_p_and_vol(pay, n):
    ps = np.linspace(0.05, 0.95, 5)
    sig = np.linspace(0.1, 0.9, 5)
    grid = np.array([[primal_ce(P(p=p, sigma_bar=s, n=n), pay, return_delta=False)[0] for s in sig]
                     for p in ps])
    assert np.all(np.diff(grid, axis=0) >= -1e-12)
    assert np.all(np.diff(grid, axis=1) >= -1e-12)


@pytest.mark.parametrize("pay", CONVEX, ids=lambda p: p.name)
def test_convex_in_spot(pay):
    s0 = np.linspace(0.6, 1.6, 21)
    vals = np.array([primal_ce(P(s0=s, n=12), pay, return_delta=False)[0] for s in s0])
    assert np.all(vals[:-2] + vals[2:] - 2 * vals[1:-1] >= -1e-12)


# ---------------------------------------------------------------- dual policies

def test_reference_policy_linear():
    prm = P(n=20, s0=1.2)
    assert dual_policy_bound(prm, model.linear(), VolFractionPolicy.constant(20, prm.p)) == \
        pytest.approx(1.2, abs=1e-12)


@pytest.mark.parametrize("pay", MARKOVIAN, ids=lambda p: p.name)
def test_qstar_policy_attains(pay):
    prm = P(p=0.3, sigma_bar=0.5, ell=3.0, n=30)
    ce = primal_ce(prm, pay, return_delta=False)[0]
    _, q = dual_ce(prm, pay)
    assert dual_policy_bound(prm, pay, VolFractionPolicy.from_table(q)) == pytest.approx(ce, abs=1e-10)


def test_qstar_policy_attains_on_full_tree():
    prm = P(p=0.3, sigma_bar=0.5, ell=3.0, n=6)
    pay = model.power(2.0)
    _, q = dual_ce(prm, pay)
    path_version = model.custom(lambda z: z[..., -1] ** 2, kind="path")
    assert dual_policy_bound(prm, path_version, VolFractionPolicy.from_table(q)) == \
        pytest.approx(primal_ce(prm, pay)[0], abs=1e-10)


def test_random_policies_weak_duality():
    rng = np.random.default_rng(8)
    for pay in MARKOVIAN + [model.running_max(), model.path_average()]:
        prm = P(p=rng.uniform(0.1, 0.9), sigma_bar=rng.uniform(0.1, 0.9), n=6)
        ce = enumerate_ce(prm, pay)
        for _ in range(5):
            assert dual_policy_bound(prm, pay, VolFractionPolicy.random(6, rng)) <= ce + 1e-10


def test_policy_validation():
    with pytest.raises(InputError):
        VolFractionPolicy.constant(3, 1.2)
    with pytest.raises(InputError):
        VolFractionPolicy(2, [np.array([0.5]), np.array([0.5, 0.5])])
    with pytest.raises(InputError):
        dual_policy_bound(P(n=4), model.linear(), VolFractionPolicy.constant(3, 0.5))


def test_policy_from_function_layout():
    pol = VolFractionPolicy.from_function(4, lambda k, a, b: 0.1 * a + 0.01 * b)
    assert pol.square(3)[2, 1] == pytest.approx(0.21)


# ---------------------------------------------------------------- hedged_ce

def test_zero_strategy_constant():
    assert hedged_ce(P(n=8), model.constant(1.5), constant_strategy(8, 0.0)) == pytest.approx(1.5)


@pytest.mark.parametrize("pay", MARKOVIAN, ids=lambda p: p.name)
def test_optimal_strategy_reproduces_ce(pay):
    prm = P(p=0.45, sigma_bar=0.3, ell=2.0, n=40)
    ce, delta = primal_ce(prm, pay)
    assert hedged_ce(prm, pay, lattice_optimal_strategy(delta)) == pytest.approx(ce, abs=1e-10)


def test_any_strategy_dominates():
    rng = np.random.default_rng(3)
    prm = P(n=15)
    pay = model.power(2.0)
    ce = primal_ce(prm, pay)[0]
    for _ in range(20):
        assert hedged_ce(prm, pay, constant_strategy(15, rng.normal(1.5, 1.0))) >= ce - 1e-12


def test_hedged_rejects_non_markovian_strategy():
    strat = constant_strategy(3, 0.0)
    strat.markovian = False
    with pytest.raises(InputError):
        hedged_ce(P(n=3), model.constant(), strat)


# ---------------------------------------------------------------- export

def test_table_csv(tmp_path):
    prm = P(n=3)
    _, delta = primal_ce(prm, model.power(2.0))
    path = tmp_path / "gamma.csv"
    delta.to_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "a", "b", "spot", "value"]
    assert len(rows) == 1 + sum(lattice.tri_size(k) for k in range(3))
    k, a, b = (int(v) for v in rows[-1][:3])
    assert float(rows[-1][4]) == delta.value(k, a, b)
    assert open(path).read().endswith("\n")


def test_table_value_bounds():
    _, delta = primal_ce(P(n=3), model.power(2.0))
    with pytest.raises(IndexError):
        delta.value(2, 2, 1)
