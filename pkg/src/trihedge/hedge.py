"""Delta hedging from the PDE solution and its discrete-time performance."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from . import lattice
from .model import InputError, ModelParams, Payoff
from .pde import PdeSolution

BLOCK_SIZE = 4096


@dataclass
class HedgeStrategy:
    """Share holdings ``rule(i, a, b, spots)`` for steps ``i = 0..n-1``.

    ``a`` and ``b`` are the up and down counts of the current node, so rules
    may key on the lattice node or only on the spot.
    """

    n: int
    rule: Callable
    provenance: str = "user"
    markovian: bool = True

    def positions(self, i: int, a, b, spots) -> np.ndarray:
        if not 0 <= i < self.n:
            raise InputError(f"step {i} outside 0..{self.n - 1}")
        spots = np.asarray(spots, dtype=float)
        gamma = np.broadcast_to(np.asarray(self.rule(i, a, b, spots), dtype=float), spots.shape)
        return np.array(gamma)

    def to_csv(self, path, params: ModelParams) -> None:
        """Rows ``(i, spot, gamma)`` over every lattice node of steps ``0..n-1``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["i", "spot", "gamma"])
            for i in range(self.n):
                mask = lattice.tri_mask(i)
                a, b = np.nonzero(mask)
                spots = lattice.layer_spots(params, i)[mask]
                for s, g in zip(spots, self.positions(i, a, b, spots)):
                    writer.writerow([i, repr(float(s)), repr(float(g))])


def build_delta_strategy(sol: PdeSolution, n: int) -> HedgeStrategy:
    """``gamma_i = v_x((i+1)/n, S_i)`` read off the PDE solution."""

    def rule(i, a, b, spots):
        return sol.v_x((i + 1) / n, spots)

    return HedgeStrategy(n, rule, "pde-delta")


def lattice_optimal_strategy(delta: lattice.LatticeTable) -> HedgeStrategy:
    """The per-node minimiser of the dynamic programme, from :func:`lattice.primal_ce`."""

    def rule(i, a, b, spots):
        return lattice.layer_gammas(delta, i, a, b)

    return HedgeStrategy(len(delta.layers), rule, "lattice-optimal")


def constant_strategy(n: int, gamma: float) -> HedgeStrategy:
    return HedgeStrategy(n, lambda i, a, b, spots: np.full(np.shape(spots), float(gamma)), "constant")


def evaluate_hedge(params: ModelParams, payoff: Payoff, strategy: HedgeStrategy):
    """Exact certainty equivalent of the hedged position and its excess over ``C_n``."""
    if strategy.n != params.n:
        raise InputError(f"strategy has {strategy.n} steps, model has {params.n}")
    ce_tilde = lattice.hedged_ce(params, payoff, strategy)
    ce, _ = lattice.primal_ce(params, payoff, return_delta=False)
    return ce_tilde, ce_tilde - ce


@dataclass
class PnlReport:
    paths: int
    mean: float
    std: float
    ce_estimate: float
    ce_ci: tuple
    tail_share: float
    heavy_tail: bool
    bin_edges: list
    counts: list

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ce_ci"] = list(self.ce_ci)
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def histogram_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["left", "right", "count"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def block_sizes(paths: int, block_size: int = BLOCK_SIZE) -> list[int]:
    full, rest = divmod(paths, block_size)
    return [block_size] * full + ([rest] if rest else [])


def block_generators(seed: int, n_blocks: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_blocks)]


def sample_moves(rng: np.random.Generator, p: float, shape) -> np.ndarray:
    """Draws of ``xi`` with masses ``(p/2, 1-p, p/2)`` on ``(+1, 0, -1)``."""
    u = rng.random(shape)
    return np.where(u < 0.5 * p, 1.0, np.where(u < p, -1.0, 0.0))


def _simulate_block(params: ModelParams, payoff: Payoff, strategy: HedgeStrategy,
                    size: int, rng: np.random.Generator) -> np.ndarray:
    n, u = params.n, params.u
    xi = sample_moves(rng, params.p, (size, n))
    spots = np.empty((size, n + 1))
    spots[:, 0] = params.s0
    a = np.zeros(size, dtype=int)
    b = np.zeros(size, dtype=int)
    gains = np.zeros(size)
    for i in range(n):
        gamma = strategy.positions(i, a, b, spots[:, i])
        step = spots[:, i] * u * xi[:, i]
        gains += gamma * step
        spots[:, i + 1] = spots[:, i] + step
        a += xi[:, i] > 0
        b += xi[:, i] < 0
    return payoff.on_path(spots) - gains


def exp_ce(pnl: np.ndarray, N: float) -> float:
    return float((logsumexp(N * pnl) - math.log(pnl.size)) / N)


def simulate_pnl(params: ModelParams, payoff: Payoff, strategy: HedgeStrategy, paths: int,
                 seed: int, bins: int = 50, bootstrap: int = 200,
                 block_size: int = BLOCK_SIZE, threads: Optional[int] = None) -> PnlReport:
    """Monte Carlo distribution of ``F - V^gamma`` under the reference measure.

    Paths are split into fixed-size blocks, each with its own child stream of
    ``seed``; blocks are merged in order so results do not depend on
    ``threads``.  The exponential certainty equivalent gets a bootstrap
    normal interval and a tail-concentration flag: heavy when the top 0.1%
    of the weights ``exp(n ell pnl)`` carry more than half the total.
    """
    if paths < 1:
        raise InputError("paths must be at least 1")
    if strategy.n != params.n:
        raise InputError(f"strategy has {strategy.n} steps, model has {params.n}")
    sizes = block_sizes(paths, block_size)
    gens = block_generators(seed, len(sizes) + 1)

    def run(j):
        return _simulate_block(params, payoff, strategy, sizes[j], gens[j])

    if threads and threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(j) for j in range(len(sizes))]
    pnl = np.concatenate(parts)

    N = params.risk_aversion
    est = exp_ce(pnl, N)
    boot_rng = gens[-1]
    if bootstrap > 0 and paths > 1:
        reps = np.array([exp_ce(pnl[boot_rng.integers(0, paths, paths)], N)
                         for _ in range(bootstrap)])
        half = 1.959963984540054 * float(np.std(reps, ddof=1))
    else:
        half = 0.0
    weights = np.exp(N * pnl - np.max(N * pnl))
    top = max(1, int(math.ceil(0.001 * paths)))
    tail_share = float(np.sum(np.sort(weights)[-top:]) / np.sum(weights))
    lo, hi = float(np.min(pnl)), float(np.max(pnl))
    if hi - lo <= 1e-9 * max(1.0, abs(lo)):
        # replicated claims: a unit-width window around the common value
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(pnl, bins=bins, range=(lo, hi))
    return PnlReport(
        paths=paths,
        mean=float(np.mean(pnl)),
        std=float(np.std(pnl, ddof=1)) if paths > 1 else 0.0,
        ce_estimate=est,
        ce_ci=(est - half, est + half),
        tail_share=tail_share,
        heavy_tail=tail_share > 0.5,
        bin_edges=[float(e) for e in edges],
        counts=[int(c) for c in counts],
    )
