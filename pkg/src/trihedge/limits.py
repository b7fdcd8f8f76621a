"""Limit references, control-policy lower bounds and the convergence harness."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import hedge, lattice, pde
from .model import InputError, ModelParams, Payoff, bs_price, entropy_penalty
from .svg import line_plot

LATTICE_CAP = 600


@dataclass
class AlphaPolicy:
    """Volatility control with values in ``[0, sigma_bar]``.

    ``piecewise``: on ``[times[j], times[j+1])`` the control is ``values[j]``,
    either a number or a callable receiving the Brownian values at
    ``times[0..j]`` (array of shape ``(paths, j+1)``).
    ``feedback``: ``rule(t, x)`` evaluated on the simulated spot.
    """

    kind: str
    times: Optional[np.ndarray] = None
    values: Optional[Sequence] = None
    rule: Optional[Callable] = None

    def __post_init__(self):
        if self.kind == "piecewise":
            self.times = np.asarray(self.times, dtype=float)
            t = self.times
            if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or abs(t[-1] - 1.0) > 1e-12:
                raise InputError("partition must run from 0 to 1")
            if np.any(np.diff(t) <= 0):
                raise InputError("partition times must increase strictly")
            if len(self.values) != t.size - 1:
                raise InputError("need one control value per partition interval")
        elif self.kind == "feedback":
            if self.rule is None:
                raise InputError("feedback policy needs a rule")
        else:
            raise InputError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def constant(cls, alpha: float) -> "AlphaPolicy":
        return cls("piecewise", np.array([0.0, 1.0]), [float(alpha)])

    @classmethod
    def piecewise(cls, times, values) -> "AlphaPolicy":
        return cls("piecewise", np.asarray(times, dtype=float), list(values))

    @classmethod
    def feedback(cls, rule: Callable) -> "AlphaPolicy":
        return cls("feedback", rule=rule)


def _check_alpha(alpha: np.ndarray, sigma_bar: float) -> np.ndarray:
    if np.any(~np.isfinite(alpha)) or np.any(alpha < -1e-12) or np.any(alpha > sigma_bar + 1e-12):
        raise InputError(f"control values must lie in [0, {sigma_bar}]")
    return np.clip(alpha, 0.0, sigma_bar)


def _control_block(params: ModelParams, payoff: Payoff, policy: AlphaPolicy, size: int,
                   time_steps: int, rng: np.random.Generator) -> np.ndarray:
    h = 1.0 / time_steps
    sq = math.sqrt(h)
    log_s = np.full(size, math.log(params.s0))
    w = np.zeros(size)
    penalty = np.zeros(size)
    keep_path = not payoff.markovian
    path = np.empty((size, time_steps + 1)) if keep_path else None
    if keep_path:
        path[:, 0] = params.s0
    if policy.kind == "piecewise":
        marks = np.rint(policy.times * time_steps).astype(int)
        w_marks = np.zeros((size, marks.size))
        piece = -1
    for k in range(time_steps):
        if policy.kind == "piecewise":
            if piece + 1 < marks.size - 1 and k == marks[piece + 1]:
                piece += 1
                w_marks[:, piece] = w
                val = policy.values[piece]
                raw = val(w_marks[:, :piece + 1]) if callable(val) else val
                a = _check_alpha(np.broadcast_to(np.asarray(raw, dtype=float), (size,)),
                                 params.sigma_bar)
                pen = entropy_penalty(np.minimum(a ** 2 / params.lam, 1.0), params.p)
        else:
            # feedback control held over the step, read at its midpoint time
            a = _check_alpha(np.broadcast_to(np.asarray(
                policy.rule((k + 0.5) * h, np.exp(log_s)), dtype=float), (size,)), params.sigma_bar)
            pen = entropy_penalty(np.minimum(a ** 2 / params.lam, 1.0), params.p)
        z = rng.standard_normal(size)
        log_s = log_s + a * sq * z - 0.5 * a * a * h
        w = w + sq * z
        penalty = penalty + h * pen
        if keep_path:
            path[:, k + 1] = np.exp(log_s)
    values = payoff.on_path(path) if keep_path else payoff(np.exp(log_s))
    return values - penalty / params.ell


def mc_control_value(params: ModelParams, payoff: Payoff, policy: AlphaPolicy, paths: int,
                     time_steps: int, seed: int, block_size: int = hedge.BLOCK_SIZE,
                     threads: Optional[int] = None):
    """Estimate ``E[F(S^alpha) - (1/ell) int G_p(alpha_t**2 / sigma_bar**2) dt]``.

    The spot uses exact lognormal increments for the control held over each
    step.  Returns ``(estimate, standard_error)``; any fixed policy gives a
    lower bound on the supremum over controls.
    """
    if paths < 1 or time_steps < 1:
        raise InputError("paths and time_steps must be positive")
    if policy.kind == "piecewise":
        scaled = policy.times * time_steps
        if np.any(np.abs(scaled - np.rint(scaled)) > 1e-9):
            raise InputError("partition times must fall on the simulation step grid")
    sizes = hedge.block_sizes(paths, block_size)
    gens = hedge.block_generators(seed, len(sizes))

    def run(j):
        return _control_block(params, payoff, policy, sizes[j], time_steps, gens[j])

    if threads and threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(j) for j in range(len(sizes))]
    vals = np.concatenate(parts)
    se = float(np.std(vals, ddof=1) / math.sqrt(paths)) if paths > 1 else 0.0
    return float(np.mean(vals)), se


def limit_references(params: ModelParams, payoff: Payoff):
    """Black-Scholes prices at volatility ``sqrt(p) sigma_bar`` (small ell) and,
    for convex payoffs, at ``sigma_bar`` (large ell)."""
    small = bs_price(payoff, math.sqrt(params.p) * params.sigma_bar, params.s0)
    large = bs_price(payoff, params.sigma_bar, params.s0) if payoff.convex else None
    return small, large


@dataclass
class ConvergenceRow:
    n: int
    ce: float
    ce_tilde: float
    gap: float
    pde_value: float

    @property
    def error(self) -> float:
        return abs(self.ce - self.pde_value)


@dataclass
class ConvergenceTable:
    rows: list
    meta: dict = field(default_factory=dict)

    COLUMNS = ("n", "C_n", "C_tilde_n", "gap", "pde_value", "abs_C_n_minus_pde")

    def as_lists(self) -> list[list]:
        return [[r.n, r.ce, r.ce_tilde, r.gap, r.pde_value, r.error] for r in self.rows]

    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.rows])

    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for row in self.as_lists():
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def to_svg(self, path) -> None:
        ns = [r.n for r in self.rows]
        line_plot({"|C_n - v(0,s0)|": (ns, list(self.errors())),
                   "gap C~_n - C_n": (ns, list(self.gaps()))},
                  path, title=f"convergence ({self.meta.get('payoff', '')})",
                  xlabel="n", ylabel="error", logx=True, logy=True)


def non_increasing(values: Sequence[float], slack: float = 0.1, floor: float = 0.0) -> bool:
    """Each value is at most ``(1 + slack)`` times its predecessor (or below ``floor``)."""
    return all(b <= (1.0 + slack) * a or b <= floor for a, b in zip(values[:-1], values[1:]))


def convergence_study(params_base: ModelParams, payoff: Payoff, n_list: Sequence[int],
                      grid: Optional[pde.LogGrid] = None, dy: float = 0.01,
                      threads: Optional[int] = None,
                      cap: int = LATTICE_CAP) -> ConvergenceTable:
    """Rows ``(n, C_n, C~_n, gap, v(0, s0), |C_n - v(0, s0)|)`` over ``n_list``.

    ``C~_n`` uses the PDE delta.  The default grid covers the lattice at the
    largest ``n``.
    """
    if not payoff.markovian:
        raise InputError("convergence_study needs a Markovian payoff")
    ns = sorted(set(int(n) for n in n_list))
    if not ns:
        raise InputError("n_list is empty")
    if ns[-1] > cap:
        raise lattice.LatticeSizeError(f"n={ns[-1]} exceeds lattice cap {cap}")
    for n in ns:
        params_base.replace(n=n)
    if grid is None:
        grid = pde.LogGrid.for_lattice(params_base, ns[-1], dy=dy)
    sol = pde.solve_hjb(params_base, payoff, grid)
    v0 = float(sol.v(0.0, params_base.s0))

    def row(n):
        params = params_base.replace(n=n)
        ce, _ = lattice.primal_ce(params, payoff, return_delta=False)
        ce_tilde = lattice.hedged_ce(params, payoff, hedge.build_delta_strategy(sol, n))
        return ConvergenceRow(n, ce, ce_tilde, ce_tilde - ce, v0)

    if threads and threads > 1 and len(ns) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, ns))
    else:
        rows = [row(n) for n in ns]
    meta = {"params": params_base.to_dict(), "payoff": payoff.name,
            "grid": {"y_min": grid.y_min, "y_max": grid.y_max, "m": grid.m,
                     "t_steps": grid.t_steps}}
    return ConvergenceTable(sorted(rows, key=lambda r: r.n), meta)
