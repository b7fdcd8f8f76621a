"""Exact computations on the n-step trinomial tree.

Node ``(k, a, b)`` is reached after ``a`` up moves and ``b`` down moves in
``k`` steps, so its spot is ``s0 (1+u)**a (1-u)**b``.  A layer is stored as a
square ``(k+1, k+1)`` array indexed ``[a, b]`` with entries ``a + b > k``
unused; tables returned to callers are packed row-major over ``a + b <= k``.

Values are kept on the certainty-equivalent scale ``V = U / (n ell)`` where
``U`` is the unit-risk-aversion value of the rescaled claim ``n ell F``.  In
that scale the one-step update of the dynamic programme reads

    V = mid + log((1-p) + p exp(N (m - mid))) / N,    m = (up + down) / 2,

with ``N = n ell``, which is the closed-form infimum over the hedge ratio.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .model import InputError, ModelParams, Payoff, entropy_penalty

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class LatticeSizeError(InputError):
    pass


# ---------------------------------------------------------------------------
# layer geometry

def tri_size(k: int) -> int:
    return (k + 1) * (k + 2) // 2


def tri_mask(k: int) -> np.ndarray:
    a = np.arange(k + 1)
    return (a[:, None] + a[None, :]) <= k


def tri_index(k: int, a, b):
    """Position of node (a, b) in the packed layer k."""
    a = np.asarray(a)
    return a * (k + 1) - a * (a - 1) // 2 + np.asarray(b)


def layer_spots(params: ModelParams, k: int) -> np.ndarray:
    a = np.arange(k + 1, dtype=float)
    log_up, log_down = math.log1p(params.u), math.log1p(-params.u)
    return params.s0 * np.exp(a[:, None] * log_up + a[None, :] * log_down)


def pack(square: np.ndarray, k: int) -> np.ndarray:
    return square[tri_mask(k)]


def unpack(packed: np.ndarray, k: int, fill: float = 0.0) -> np.ndarray:
    out = np.full((k + 1, k + 1), fill)
    out[tri_mask(k)] = packed
    return out


@dataclass
class LatticeTable:
    """Per-node quantities for steps ``k = 0..len(layers)-1``, packed per layer."""

    params: ModelParams
    layers: list
    label: str = "value"

    def square(self, k: int) -> np.ndarray:
        return unpack(self.layers[k], k, fill=np.nan)

    def value(self, k: int, a: int, b: int) -> float:
        if a < 0 or b < 0 or a + b > k:
            raise IndexError(f"node ({k}, {a}, {b}) outside the lattice")
        return float(self.layers[k][tri_index(k, a, b)])

    def rows(self):
        for k, packed in enumerate(self.layers):
            spots = pack(layer_spots(self.params, k), k)
            mask = tri_mask(k)
            aa, bb = np.nonzero(mask)
            for a, b, s, v in zip(aa, bb, spots, packed):
                yield k, int(a), int(b), float(s), float(v)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "a", "b", "spot", "value"])
            for k, a, b, s, v in self.rows():
                writer.writerow([k, a, b, repr(s), repr(v)])


# ---------------------------------------------------------------------------
# node updates

def node_update(up, mid, down, N: float, p: float):
    """Closed-form primal update on the certainty-equivalent scale."""
    m = 0.5 * (up + down)
    return mid + np.logaddexp(math.log1p(-p), math.log(p) + N * (m - mid)) / N


def dual_node_update(up, mid, down, N: float, p: float):
    """Dual update: value of ``q m + (1-q) mid - G_p(q)/N`` at its maximiser.

    Returns ``(value, q_star)``.
    """
    m = 0.5 * (up + down)
    logit_p = math.log(p) - math.log1p(-p)
    q = expit(N * (m - mid) + logit_p)
    # keep the maximiser inside the open interval (0, 1)
    q = np.clip(q, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    value = q * m + (1.0 - q) * mid - entropy_penalty(q, p) / N
    return value, q


def inner_objective(a, up, mid, down, c, p: float):
    """``log(p/2 (e^{up - a c} + e^{down + a c}) + (1-p) e^{mid})`` in stable form.

    Arguments are on the unit-risk-aversion scale; ``c = sigma_bar * z``.
    """
    half = math.log(0.5 * p)
    t1 = half + up - a * c
    t2 = half + down + a * c
    t3 = math.log1p(-p) + mid
    return np.logaddexp(np.logaddexp(t1, t2), t3)


def inner_closed_form(up, mid, down, c, p: float):
    """Minimum and minimiser of :func:`inner_objective` over ``a``.

    ``A e^{-ac} + B e^{ac}`` is minimised at ``a c = log(A/B)/2`` with value
    ``2 sqrt(AB)``.
    """
    a_star = (up - down) / (2.0 * c)
    value = np.logaddexp(math.log(p) + 0.5 * (up + down), math.log1p(-p) + mid)
    return value, a_star


def golden_section(objective: Callable, lo, hi, tol: float):
    """Vectorised golden-section search on ``[lo, hi]`` to bracket width ``tol * (hi - lo)``."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    iters = int(math.ceil(math.log(tol) / math.log(GOLDEN))) + 1
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = objective(x1), objective(x2)
    for _ in range(iters):
        left = f1 <= f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        new = np.where(left, hi - GOLDEN * (hi - lo), lo + GOLDEN * (hi - lo))
        f_new = objective(new)
        x1, x2 = np.where(left, new, x2), np.where(left, x1, new)
        f1, f2 = np.where(left, f_new, f2), np.where(left, f1, f_new)
    x = 0.5 * (lo + hi)
    return x, objective(x)


def inner_minimize(up, mid, down, c, p: float, tol: float = 1e-10,
                   width: Optional[np.ndarray] = None):
    """Numerical infimum of :func:`inner_objective` by golden-section search.

    The bracket is ``a* +- 10 width`` around the closed-form minimiser, with
    default width ``(1 + |up - down|) / c``.  The search compares only the
    ``a``-dependent part ``log(e^{up - ac} + e^{down + ac})``: the objective is
    increasing in it, and dropping the flat term keeps the comparison sharp
    near the minimum.
    """
    up, mid, down = (np.asarray(v, dtype=float) for v in (up, mid, down))
    _, a_star = inner_closed_form(up, mid, down, c, p)
    if width is None:
        width = (1.0 + np.abs(up - down)) / c
    lo, hi = a_star - 10.0 * width, a_star + 10.0 * width

    def moving_part(a):
        return np.logaddexp(up - a * c, down + a * c)

    a_min, _ = golden_section(moving_part, lo, hi, tol)
    span = hi - lo
    if np.any(np.abs(a_min - lo) < 1e-3 * span) or np.any(np.abs(hi - a_min) < 1e-3 * span):
        raise RuntimeError("inner line search converged to a bracket end")
    return inner_objective(a_min, up, mid, down, c, p), a_min


# ---------------------------------------------------------------------------
# primal and dual certainty equivalents

def _require_markovian(payoff: Payoff) -> None:
    if not payoff.markovian:
        raise InputError(f"payoff {payoff.name!r} is path-dependent; use enumerate_ce")


def _terminal(params: ModelParams, payoff: Payoff) -> np.ndarray:
    n = params.n
    values = payoff(layer_spots(params, n))
    values = np.where(tri_mask(n), values, 0.0)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"payoff {payoff.name!r} is not finite on the lattice")
    return values


def primal_ce(params: ModelParams, payoff: Payoff, return_delta: bool = True):
    """Certainty equivalent ``C_n`` and the per-node optimal share holdings.

    Returns ``(ce, delta)`` where ``delta`` is a :class:`LatticeTable` of
    ``gamma*(k, a, b) = (V_up - V_down) / (S_up - S_down)`` for ``k < n``, or
    None when ``return_delta`` is false.
    """
    _require_markovian(payoff)
    n, p, N = params.n, params.p, params.risk_aversion
    V = _terminal(params, payoff)
    deltas = [None] * n
    for k in range(n, 0, -1):
        up, mid, down = V[1:, :-1], V[:-1, :-1], V[:-1, 1:]
        if return_delta:
            spots = layer_spots(params, k - 1)
            deltas[k - 1] = pack((up - down) / (2.0 * params.u * spots), k - 1)
        V = node_update(up, mid, down, N, p)
    ce = float(V[0, 0])
    table = LatticeTable(params, deltas, "gamma") if return_delta else None
    return ce, table


def primal_ce_numeric(params: ModelParams, payoff: Payoff, tol: float = 1e-10) -> float:
    """Same recursion with the inner infimum found by golden-section search."""
    if tol <= 0:
        raise InputError("tol must be positive")
    _require_markovian(payoff)
    n, p, N = params.n, params.p, params.risk_aversion
    U = N * _terminal(params, payoff)
    for k in range(n, 0, -1):
        mask = tri_mask(k - 1)
        up, mid, down = U[1:, :-1], U[:-1, :-1], U[:-1, 1:]
        c = params.sigma_bar * layer_spots(params, k - 1)[mask]
        new = np.zeros_like(mid)
        new[mask], _ = inner_minimize(up[mask], mid[mask], down[mask], c, p, tol)
        U = new
    return float(U[0, 0]) / N


def dual_ce(params: ModelParams, payoff: Payoff):
    """Certainty equivalent through the node-wise dual representation.

    Returns ``(ce, qstar)`` with ``qstar`` the maximising total mass on the
    up and down moves at each node, as a :class:`LatticeTable`.
    """
    _require_markovian(payoff)
    n, p, N = params.n, params.p, params.risk_aversion
    V = _terminal(params, payoff)
    qs = [None] * n
    for k in range(n, 0, -1):
        V, q = dual_node_update(V[1:, :-1], V[:-1, :-1], V[:-1, 1:], N, p)
        qs[k - 1] = pack(q, k - 1)
    return float(V[0, 0]), LatticeTable(params, qs, "qstar")


# ---------------------------------------------------------------------------
# full (non-recombining) tree

MOVES = np.array([1.0, 0.0, -1.0])


def tree_paths(params: ModelParams, max_n: int = 9):
    """All ``3**n`` node paths, last step varying fastest in the order up, flat, down.

    Returns ``(xi, spots)`` with shapes ``(3**n, n)`` and ``(3**n, n+1)``.
    """
    n = params.n
    if n > max_n:
        raise LatticeSizeError(f"n={n} exceeds enumeration cap {max_n}")
    xi = np.array(list(itertools.product(MOVES, repeat=n)), dtype=float).reshape(-1, n)
    growth = 1.0 + params.u * xi
    spots = params.s0 * np.concatenate([np.ones((xi.shape[0], 1)), np.cumprod(growth, axis=1)], axis=1)
    return xi, spots


def enumerate_ce(params: ModelParams, payoff: Payoff, max_n: int = 9) -> float:
    """``C_n`` on the full ternary tree; supports path-dependent payoffs."""
    _, spots = tree_paths(params, max_n)
    V = payoff.on_path(spots)
    N, p = params.risk_aversion, params.p
    for _ in range(params.n):
        V = V.reshape(-1, 3)
        V = node_update(V[:, 0], V[:, 1], V[:, 2], N, p)
    return float(V[0])


# ---------------------------------------------------------------------------
# dual policies

@dataclass
class VolFractionPolicy:
    """Node-wise fraction ``phi`` in [0, 1] for steps ``k = 0..n-1``.

    From node ``(k, a, b)`` the induced martingale measure moves up and down
    with mass ``phi/2`` each and stays flat with mass ``1 - phi``.
    """

    n: int
    layers: list

    def __post_init__(self):
        if len(self.layers) != self.n:
            raise InputError("policy needs one layer per step")
        for k, layer in enumerate(self.layers):
            layer = np.asarray(layer, dtype=float)
            if layer.shape != (tri_size(k),):
                raise InputError(f"policy layer {k} has shape {layer.shape}")
            if np.any(~np.isfinite(layer)) or np.any((layer < 0.0) | (layer > 1.0)):
                raise InputError(f"policy values must lie in [0, 1] (layer {k})")
            self.layers[k] = layer

    @classmethod
    def constant(cls, n: int, phi: float) -> "VolFractionPolicy":
        return cls(n, [np.full(tri_size(k), float(phi)) for k in range(n)])

    @classmethod
    def from_function(cls, n: int, fn: Callable) -> "VolFractionPolicy":
        """``fn(k, a, b)`` evaluated on packed index arrays of each layer."""
        layers = []
        for k in range(n):
            a, b = np.nonzero(tri_mask(k))
            layers.append(np.broadcast_to(np.asarray(fn(k, a, b), dtype=float), a.shape).copy())
        return cls(n, layers)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "VolFractionPolicy":
        return cls(n, [rng.uniform(0.0, 1.0, tri_size(k)) for k in range(n)])

    @classmethod
    def from_table(cls, table: LatticeTable) -> "VolFractionPolicy":
        return cls(len(table.layers), [np.array(layer) for layer in table.layers])

    def square(self, k: int) -> np.ndarray:
        return unpack(self.layers[k], k)


def dual_policy_bound(params: ModelParams, payoff: Payoff, policy: VolFractionPolicy,
                      max_n: int = 9) -> float:
    """``E_Q[F_n] - (1/(n ell)) sum_k E_Q[G_p(phi_k)]`` for the policy's measure Q.

    Markovian payoffs use forward induction on the recombining lattice; path
    payoffs walk the full tree (``n <= max_n``).
    """
    if policy.n != params.n:
        raise InputError(f"policy has {policy.n} steps, model has {params.n}")
    N, p = params.risk_aversion, params.p
    if payoff.markovian:
        prob = np.ones((1, 1))
        penalty = 0.0
        for k in range(params.n):
            phi = policy.square(k)
            penalty += float(np.sum(prob * entropy_penalty(phi, p)))
            nxt = np.zeros((k + 2, k + 2))
            nxt[1:, :-1] += 0.5 * phi * prob
            nxt[:-1, :-1] += (1.0 - phi) * prob
            nxt[:-1, 1:] += 0.5 * phi * prob
            prob = nxt
        mask = tri_mask(params.n)
        expected = float(np.sum(np.where(mask, prob * _terminal(params, payoff), 0.0)))
        return expected - penalty / N

    xi, spots = tree_paths(params, max_n)
    n_paths = xi.shape[0]
    log_q = np.zeros(n_paths)
    pen = np.zeros(n_paths)
    ups = np.zeros(n_paths, dtype=int)
    downs = np.zeros(n_paths, dtype=int)
    for k in range(params.n):
        phi = policy.layers[k][tri_index(k, ups, downs)]
        move = xi[:, k]
        with np.errstate(divide="ignore"):
            step = np.where(move == 0.0, np.log1p(-phi), np.log(0.5 * phi))
        log_q += step
        pen += entropy_penalty(phi, p)
        ups += move > 0
        downs += move < 0
    q = np.exp(log_q)
    values = payoff.on_path(spots)
    return float(np.sum(q * values) - np.sum(q * pen) / N)


# ---------------------------------------------------------------------------
# fixed strategies

def hedged_ce(params: ModelParams, payoff: Payoff, strategy) -> float:
    """``(1/(n ell)) log E_P[exp(n ell (F(S_n) - sum gamma_i dS_i))]`` by backward induction.

    ``strategy`` must provide ``positions(i, a, b, spots)`` returning share
    holdings at the nodes of step ``i``, and be Markovian in the node.
    """
    _require_markovian(payoff)
    if not getattr(strategy, "markovian", True):
        raise InputError("hedged_ce needs a strategy that depends on the node only")
    n, p, N, u = params.n, params.p, params.risk_aversion, params.u
    log_half, log_flat = math.log(0.5 * p), math.log1p(-p)
    V = _terminal(params, payoff)
    for k in range(n, 0, -1):
        i = k - 1
        spots = layer_spots(params, i)
        mask = tri_mask(i)
        a, b = np.nonzero(mask)
        gamma = np.zeros((i + 1, i + 1))
        gamma[mask] = np.asarray(strategy.positions(i, a, b, spots[mask]), dtype=float)
        if not np.all(np.isfinite(gamma)):
            raise FloatingPointError(f"strategy not finite at step {i}")
        move = gamma * spots * u
        up = N * (V[1:, :-1] - move)
        mid = N * V[:-1, :-1]
        down = N * (V[:-1, 1:] + move)
        V = np.logaddexp(np.logaddexp(log_half + up, log_half + down), log_flat + mid) / N
    return float(V[0, 0])


def layer_gammas(table: LatticeTable, k: int, a: Sequence, b: Sequence) -> np.ndarray:
    return table.layers[k][tri_index(k, np.asarray(a), np.asarray(b))]
