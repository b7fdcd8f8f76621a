import csv
import json
import math

import numpy as np
import pytest

from trihedge import hedge, lattice, model
from trihedge.hedge import (
    HedgeStrategy,
    build_delta_strategy,
    constant_strategy,
    evaluate_hedge,
    lattice_optimal_strategy,
    simulate_pnl,
)
from trihedge.model import InputError, ModelParams
from trihedge.pde import CoverageError, LogGrid, solve_hjb


def P(p=0.5, sigma_bar=0.2, s0=1.0, ell=1.0, n=10):
    return ModelParams(p, sigma_bar, s0, ell, n)


LOG = model.log_affine(0.0, 1.0)


def log_ce_exact(prm):
    """C_n for log x: every layer is log S plus a constant."""
    N, u, p = prm.risk_aversion, prm.u, prm.p
    return math.log(prm.s0) + math.log((1 - p) + p * (1 - u * u) ** (N / 2)) / prm.ell


def log_ce_inverse_spot_hedge(prm):
    """Hedged CE of log x under gamma = 1/x: each step contributes log(1+u xi) - u xi."""
    N, u, p = prm.risk_aversion, prm.u, prm.p
    inner = (1 - p) + 0.5 * p * ((1 + u) ** N * math.exp(-N * u) + (1 - u) ** N * math.exp(N * u))
    return math.log(prm.s0) + math.log(inner) / prm.ell


def inverse_spot(n):
    return HedgeStrategy(n, lambda i, a, b, spots: 1.0 / spots, "inverse-spot")


@pytest.fixture(scope="module")
def log_solution():
    prm = P()
    return solve_hjb(prm, LOG, LogGrid.for_lattice(prm, 400, dy=0.01))


# ---------------------------------------------------------------- closed-form oracles

@pytest.mark.parametrize("n", [1, 7, 50, 300])
def test_lattice_log_closed_form(n):
    prm = P(p=0.4, sigma_bar=0.3, ell=1.5, s0=1.1, n=n)
    assert lattice.primal_ce(prm, LOG, return_delta=False)[0] == pytest.approx(log_ce_exact(prm), abs=1e-12)


@pytest.mark.parametrize("n", [1, 7, 50, 300])
def test_hedged_inverse_spot_closed_form(n):
    prm = P(p=0.4, sigma_bar=0.3, ell=1.5, s0=1.1, n=n)
    assert lattice.hedged_ce(prm, LOG, inverse_spot(n)) == pytest.approx(
        log_ce_inverse_spot_hedge(prm), abs=1e-12)


# ---------------------------------------------------------------- delta strategy

def test_delta_log_is_inverse_spot(log_solution):
    n = 100
    strat = build_delta_strategy(log_solution, n)
    prm = P(n=n)
    for i in (0, 37, 99):
        mask = lattice.tri_mask(i)
        a, b = np.nonzero(mask)
        spots = lattice.layer_spots(prm, i)[mask]
        np.testing.assert_allclose(strat.positions(i, a, b, spots), 1.0 / spots, rtol=1e-9)


@pytest.mark.parametrize("pay,expected", [(model.constant(2.0), 0.0), (model.linear(), 1.0)])
def test_delta_trivial(pay, expected):
    prm = P()
    sol = solve_hjb(prm, pay, LogGrid.for_lattice(prm, 40, dy=0.01))
    strat = build_delta_strategy(sol, 40)
    mask = lattice.tri_mask(20)
    a, b = np.nonzero(mask)
    np.testing.assert_allclose(strat.positions(20, a, b, lattice.layer_spots(prm, 20)[mask]),
                               expected, atol=1e-3)


def test_delta_uses_next_time(log_solution):
    seen = []

    class Spy:
        def v_x(self, t, x):
            seen.append(t)
            return np.zeros_like(x)

    strat = build_delta_strategy(Spy(), 4)
    for i in range(4):
        strat.positions(i, [0], [0], [1.0])
    assert seen == [0.25, 0.5, 0.75, 1.0]


def test_delta_coverage_error():
    prm = P()
    sol = solve_hjb(prm, LOG, LogGrid.around(prm, dy=0.02, half_width=0.2))
    with pytest.raises(CoverageError):
        lattice.hedged_ce(prm.replace(n=400), LOG, build_delta_strategy(sol, 400))


def test_strategy_step_bounds():
    with pytest.raises(InputError):
        constant_strategy(3, 0.0).positions(3, [0], [0], [1.0])


# ---------------------------------------------------------------- gaps

@pytest.mark.parametrize("pay", [LOG, model.power(2.0), model.smoothed_call()], ids=lambda p: p.name)
def test_lattice_optimal_gap(pay):
    prm = P(p=0.3, n=60, ell=2.0)
    _, delta = lattice.primal_ce(prm, pay)
    _, gap = evaluate_hedge(prm, pay, lattice_optimal_strategy(delta))
    assert abs(gap) <= 1e-10


def test_zero_strategy_gap_positive():
    prm = P(n=30)
    _, gap = evaluate_hedge(prm, model.power(2.0), constant_strategy(30, 0.0))
    assert gap > 1e-4


def test_pde_delta_gap_shrinks(log_solution):
    gaps = []
    for n in (25, 50, 100, 200, 400):
        _, gap = evaluate_hedge(P(n=n), LOG, build_delta_strategy(log_solution, n))
        assert gap >= -1e-10
        gaps.append(gap)
    assert all(b <= 1.1 * a for a, b in zip(gaps[:-1], gaps[1:]))
    assert gaps[-1] <= 0.5 * gaps[0]


def test_gap_matches_closed_forms(log_solution):
    prm = P(n=200)
    ce_t, gap = evaluate_hedge(prm, LOG, build_delta_strategy(log_solution, 200))
    assert ce_t == pytest.approx(log_ce_inverse_spot_hedge(prm), abs=1e-9)
    assert gap == pytest.approx(log_ce_inverse_spot_hedge(prm) - log_ce_exact(prm), abs=1e-9)


def test_pde_delta_approaches_lattice_optimum(log_solution):
    diffs = []
    for n in (50, 100, 200):
        prm = P(n=n)
        _, delta = lattice.primal_ce(prm, LOG)
        k = n // 2
        mask = lattice.tri_mask(k)
        a, b = np.nonzero(mask)
        spots = lattice.layer_spots(prm, k)[mask]
        tilde = build_delta_strategy(log_solution, n).positions(k, a, b, spots)
        diffs.append(float(np.max(np.abs(tilde - lattice.layer_gammas(delta, k, a, b)))))
    assert diffs[0] > diffs[1] > diffs[2]


def test_evaluate_rejects_step_mismatch():
    with pytest.raises(InputError):
        evaluate_hedge(P(n=5), LOG, constant_strategy(4, 0.0))


# ---------------------------------------------------------------- Monte Carlo

def test_pnl_linear_replication():
    rep = simulate_pnl(P(n=20, s0=1.3), model.linear(), constant_strategy(20, 1.0), 5000, seed=1)
    assert rep.mean == pytest.approx(1.3, abs=1e-12)
    assert rep.std <= 1e-12
    assert sum(rep.counts) == 5000


def test_pnl_constant():
    rep = simulate_pnl(P(n=20), model.constant(0.4), constant_strategy(20, 0.0), 3000, seed=2)
    assert rep.mean == pytest.approx(0.4, abs=1e-14) and rep.std <= 1e-14
    assert rep.ce_estimate == pytest.approx(0.4, abs=1e-14)


def test_move_frequencies():
    rng = np.random.default_rng(0)
    xi = hedge.sample_moves(rng, 0.3, 200_000)
    freq = [np.mean(xi == v) for v in (1.0, 0.0, -1.0)]
    np.testing.assert_allclose(freq, [0.15, 0.7, 0.15], atol=5e-3)


def test_pnl_reproducible_and_thread_independent():
    prm = P(n=30)
    strat = constant_strategy(30, 0.5)
    r1 = simulate_pnl(prm, model.power(2.0), strat, 10_000, seed=42)
    r2 = simulate_pnl(prm, model.power(2.0), strat, 10_000, seed=42)
    r3 = simulate_pnl(prm, model.power(2.0), strat, 10_000, seed=42, threads=3)
    assert r1.to_dict() == r2.to_dict() == r3.to_dict()
    r4 = simulate_pnl(prm, model.power(2.0), strat, 10_000, seed=43)
    assert r4.mean != r1.mean


def test_pnl_path_payoff():
    prm = P(n=6)
    rep = simulate_pnl(prm, model.running_max(), constant_strategy(6, 0.0), 2000, seed=3)
    assert rep.mean >= prm.s0


def test_mc_ce_brackets_exact_value(log_solution):
    prm = P(n=100)
    strat = build_delta_strategy(log_solution, 100)
    exact = lattice.hedged_ce(prm, LOG, strat)
    rep = simulate_pnl(prm, LOG, strat, 100_000, seed=2024)
    lo, hi = rep.ce_ci
    assert lo <= exact <= hi
    assert not rep.heavy_tail


def test_heavy_tail_flag():
    prm = P(n=10, ell=200.0, sigma_bar=0.9)
    rep = simulate_pnl(prm, model.power(3.0), constant_strategy(10, 0.0), 5000, seed=5)
    assert rep.heavy_tail and rep.tail_share > 0.5


def test_pnl_exports(tmp_path):
    rep = simulate_pnl(P(n=5), LOG, constant_strategy(5, 1.0), 1000, seed=9, bins=10)
    rep.to_json(tmp_path / "r.json")
    rep.histogram_to_csv(tmp_path / "h.csv")
    data = json.load(open(tmp_path / "r.json"))
    assert data["paths"] == 1000
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["left", "right", "count"]
    assert sum(int(r[2]) for r in rows[1:]) == 1000


def test_pnl_rejects_no_paths():
    with pytest.raises(InputError):
        simulate_pnl(P(n=5), LOG, constant_strategy(5, 1.0), 0, seed=1)


def test_strategy_csv(tmp_path):
    prm = P(n=3)
    constant_strategy(3, 0.25).to_csv(tmp_path / "s.csv", prm)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["i", "spot", "gamma"]
    assert len(rows) == 1 + 1 + 3 + 6
