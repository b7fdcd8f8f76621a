"""Explicit monotone finite differences for the limiting HJB equation.

The solver works with the forward log-space form

    u_t(t, y) = K(u_yy - u_y),   u(0, y) = f(y) = F(e^y),

so that ``v(t, x) = u(1 - t, log x)`` solves the terminal-value problem in
spot coordinates.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .model import InputError, ModelParams, Payoff, nonlinearity_K

CFL_SAFETY = 0.9


class ConfigError(InputError):
    pass


class NumericalFailure(RuntimeError):
    pass


class CoverageError(InputError):
    """A spot lies outside the grid of a PDE solution."""


@dataclass(frozen=True)
class LogGrid:
    y_min: float
    y_max: float
    m: int
    t_steps: int

    def __post_init__(self):
        if self.m < 3:
            raise ConfigError("LogGrid needs at least 3 spatial nodes")
        if not self.y_min < self.y_max:
            raise ConfigError("LogGrid needs y_min < y_max")
        if self.t_steps < 1:
            raise ConfigError("LogGrid needs t_steps >= 1")

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / (self.m - 1)

    @property
    def dt(self) -> float:
        return 1.0 / self.t_steps

    @property
    def y(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.m)

    @classmethod
    def around(cls, params: ModelParams, dy: float = 0.01, half_width: Optional[float] = None,
               center: Optional[float] = None) -> "LogGrid":
        """Grid of spacing ``dy`` centred on ``log s0`` with the largest stable time step.

        The default half-width is ``6 sigma_bar``.
        """
        if half_width is None:
            half_width = 6.0 * params.sigma_bar
        if center is None:
            center = math.log(params.s0)
        cells = int(math.ceil(half_width / dy))
        m = 2 * cells + 1
        y_min = center - cells * dy
        y_max = center + cells * dy
        t_steps = cfl_steps(dy, params)
        return cls(y_min, y_max, m, t_steps)

    @classmethod
    def for_lattice(cls, params: ModelParams, n_max: int, dy: float = 0.01,
                    margin: float = 0.25) -> "LogGrid":
        """Grid covering every spot the ``n_max``-step lattice can reach."""
        u = params.sigma_bar / math.sqrt(n_max)
        lo = n_max * math.log1p(-u)
        hi = n_max * math.log1p(u)
        half = max(-lo, hi) + margin
        half = max(half, 6.0 * params.sigma_bar)
        return cls.around(params, dy=dy, half_width=half)


def cfl_steps(dy: float, params: ModelParams) -> int:
    bound = CFL_SAFETY * dy * dy / (params.lam * (1.0 + 0.5 * dy))
    return int(math.ceil(1.0 / bound - 1e-12))


def cfl_dt(grid: LogGrid, params: ModelParams) -> float:
    """Largest ``dt = 1/t_steps`` with ``dt <= 0.9 dy**2 / (Lambda (1 + dy/2))``."""
    return 1.0 / cfl_steps(grid.dy, params)


def _max_stable_dt(grid: LogGrid, params: ModelParams) -> float:
    return grid.dy ** 2 / (params.lam * (1.0 + 0.5 * grid.dy))


def stencil_weights(dy: float, stencil: str = "fitted") -> tuple[float, float]:
    """Weights ``(r, l)`` with ``u_yy - u_y ~ r (u[i+1] - u[i]) + l (u[i-1] - u[i])``.

    ``central`` is ``D2 - D1``: ``1/dy**2 -+ 1/(2 dy)``.  ``fitted`` is the
    exponentially fitted variant, exact on ``1``, ``y`` and ``e^y`` (so
    log-affine and linear payoffs are stationary up to rounding); it agrees
    with ``central`` to ``O(1)`` in the weights, is second-order consistent,
    and its weights stay positive for every ``dy``.
    """
    if stencil == "central":
        return 1.0 / dy ** 2 - 0.5 / dy, 1.0 / dy ** 2 + 0.5 / dy
    if stencil == "fitted":
        r = 1.0 / (dy * math.expm1(dy))
        return r, r + 1.0 / dy
    raise ConfigError(f"unknown stencil {stencil!r}")


def discrete_w(values: np.ndarray, dy: float, stencil: str = "fitted") -> np.ndarray:
    """Approximation of ``u_yy - u_y`` at interior nodes."""
    r, l = stencil_weights(dy, stencil)
    mid = values[..., 1:-1]
    return r * (values[..., 2:] - mid) + l * (values[..., :-2] - mid)


@dataclass
class PdeSolution:
    params: ModelParams
    grid: LogGrid
    payoff_name: str
    layers: np.ndarray
    f: np.ndarray
    w0: np.ndarray
    m0: float
    M0: float
    mollified: bool = False
    stencil: str = "fitted"
    notes: list = field(default_factory=list)

    @property
    def y(self) -> np.ndarray:
        return self.grid.y

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid.t_steps + 1)

    def _locate(self, y):
        y = np.asarray(y, dtype=float)
        g = self.grid
        slack = 1e-9 * g.dy
        if np.any(y < g.y_min - slack) or np.any(y > g.y_max + slack):
            bad = y[(y < g.y_min - slack) | (y > g.y_max + slack)].ravel()[0]
            raise CoverageError(
                f"log-spot {bad:.6g} outside PDE grid [{g.y_min:.6g}, {g.y_max:.6g}]")
        return np.clip(y, g.y_min, g.y_max)

    def _time_blend(self, tau: float):
        if not -1e-12 <= tau <= 1.0 + 1e-12:
            raise CoverageError(f"time {tau} outside [0, 1]")
        pos = min(max(tau, 0.0), 1.0) * self.grid.t_steps
        j = min(int(math.floor(pos)), self.grid.t_steps - 1)
        return j, pos - j

    def u_bar(self, tau: float, y):
        """Forward-time solution at ``(tau, y)``, linear in both directions."""
        y = self._locate(y)
        j, w = self._time_blend(tau)
        row = (1.0 - w) * self.layers[j] + w * self.layers[j + 1]
        return np.interp(y, self.y, row)

    def u_bar_y(self, tau: float, y):
        y = self._locate(y)
        j, w = self._time_blend(tau)
        row = (1.0 - w) * self.layers[j] + w * self.layers[j + 1]
        return np.interp(y, self.y, np.gradient(row, self.grid.dy, edge_order=2))

    def v(self, t: float, x):
        """Value of the control problem at time ``t`` and spot ``x``."""
        return self.u_bar(1.0 - t, np.log(x))

    def v_x(self, t: float, x):
        x = np.asarray(x, dtype=float)
        return self.u_bar_y(1.0 - t, np.log(x)) / x

    def to_csv(self, path, t_stride: int = 1, y_stride: int = 1) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "y", "u_bar"])
            times, ys = self.times, self.y
            for j in range(0, len(times), t_stride):
                for i in range(0, len(ys), y_stride):
                    writer.writerow([repr(float(times[j])), repr(float(ys[i])),
                                     repr(float(self.layers[j, i]))])

    def delta_to_csv(self, path, t_stride: int = 1, y_stride: int = 1) -> None:
        """Rows ``(t, x, v_x)`` in backward (calendar) time."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "x", "v_x"])
            xs = np.exp(self.y)
            for j in range(0, self.grid.t_steps + 1, t_stride):
                grad = np.gradient(self.layers[j], self.grid.dy, edge_order=2) / xs
                t = 1.0 - j / self.grid.t_steps
                for i in range(0, len(xs), y_stride):
                    writer.writerow([repr(float(t)), repr(float(xs[i])), repr(float(grad[i]))])


def initial_data(payoff: Payoff, grid: LogGrid, mollify: Optional[bool] = None,
                 stencil: str = "fitted"):
    """``(f, w0, mollified)`` on the grid.

    Kinked payoffs are smoothed with a Gaussian of bandwidth ``2 dy`` unless
    ``mollify`` is False.  ``w0`` is analytic when the payoff declares F'' and
    it was not mollified; otherwise it comes from differences of ``f``.
    """
    y = grid.y
    f = np.asarray(payoff(np.exp(y)), dtype=float)
    if not np.all(np.isfinite(f)):
        raise NumericalFailure(f"payoff {payoff.name!r} not finite on the grid")
    if mollify is None:
        mollify = not payoff.smooth
    if not payoff.smooth:
        warnings.warn(f"payoff {payoff.name!r} is not C^2; hedging results are exploratory",
                      RuntimeWarning, stacklevel=3)
    if mollify:
        f = gaussian_filter1d(f, sigma=2.0, mode="nearest")
    w0 = None if mollify else payoff.w0(y)
    if w0 is None:
        inner = discrete_w(f, grid.dy, stencil)
        w0 = np.concatenate([[inner[0]], inner, [inner[-1]]])
    return f, np.asarray(w0, dtype=float), bool(mollify)


def solve_hjb(params: ModelParams, payoff: Payoff, grid: LogGrid,
              mollify: Optional[bool] = None, stencil: str = "fitted") -> PdeSolution:
    """March ``u_t = K(u_yy - u_y)`` from ``t = 0`` to ``t = 1`` explicitly.

    ``stencil`` selects the three-point approximation of ``u_yy - u_y`` (see
    :func:`stencil_weights`).  Boundary nodes follow ``f + t K(w0)``.
    """
    if not payoff.markovian:
        raise InputError("solve_hjb needs a Markovian payoff")
    dt, dy = grid.dt, grid.dy
    limit = _max_stable_dt(grid, params)
    if dt > limit:
        raise ConfigError(f"dt={dt:.6g} violates the stability bound {limit:.6g} for dy={dy:.6g}")
    r, l = stencil_weights(dy, stencil)
    if r < 0 or l < 0:
        raise ConfigError(f"dy={dy:.6g} too coarse for a monotone {stencil} stencil")
    f, w0, mollified = initial_data(payoff, grid, mollify, stencil)
    k_left, k_right = nonlinearity_K(w0[0], params), nonlinearity_K(w0[-1], params)

    layers = np.empty((grid.t_steps + 1, grid.m))
    layers[0] = f
    u = f.copy()
    for j in range(1, grid.t_steps + 1):
        rate = nonlinearity_K(discrete_w(u, dy, stencil), params)
        nxt = np.empty_like(u)
        nxt[1:-1] = u[1:-1] + dt * rate
        t = j * dt
        nxt[0] = f[0] + t * k_left
        nxt[-1] = f[-1] + t * k_right
        if not np.all(np.isfinite(nxt)):
            i = int(np.flatnonzero(~np.isfinite(nxt))[0])
            raise NumericalFailure(f"non-finite value at t={t:.6g}, y={grid.y[i]:.6g}")
        layers[j] = nxt
        u = nxt
    return PdeSolution(params, grid, payoff.name, layers, f, w0,
                       float(np.min(w0)), float(np.max(w0)), mollified, stencil)


def closed_form_log_payoff(alpha: float, beta: float, t, x, params: ModelParams):
    """Exact value for ``F(x) = alpha + beta log x``; its delta is ``beta / x``."""
    p, ell = params.p, params.ell
    drift = np.logaddexp(math.log1p(-p), math.log(p) - 0.5 * ell * params.lam * beta) / ell
    return alpha + beta * np.log(x) + (1.0 - np.asarray(t, dtype=float)) * drift


def default_tolerance(grid: LogGrid) -> float:
    return 5.0 * grid.dy ** 2 + 5.0 * grid.dt


def check_solution_properties(sol: PdeSolution, tol: Optional[float] = None) -> dict:
    """Band and time-slope checks plus Lipschitz diagnostics.

    The band is ``f + t K(m0) <= u <= f + t K(M0)``; the slope check bounds
    ``(u(t+dt) - u(t)) / dt`` by ``[K(m0), K(M0)]``.  Lipschitz constants of
    the discrete ``u_t`` and ``D2 u - D1 u`` are reported, not asserted.
    """
    if tol is None:
        tol = default_tolerance(sol.grid)
    params, grid = sol.params, sol.grid
    k_lo, k_hi = nonlinearity_K(sol.m0, params), nonlinearity_K(sol.M0, params)
    t = sol.times[:, None]
    lower = sol.f[None, :] + t * k_lo
    upper = sol.f[None, :] + t * k_hi
    below = lower - sol.layers
    above = sol.layers - upper
    worst = np.maximum(below, above)
    j, i = np.unravel_index(int(np.argmax(worst)), worst.shape)
    band_excess = float(worst[j, i])

    slope = np.diff(sol.layers, axis=0) / grid.dt
    slope_excess = float(max(np.max(k_lo - slope), np.max(slope - k_hi)))

    w = discrete_w(sol.layers, grid.dy, sol.stencil)
    lip_w_y = float(np.max(np.abs(np.diff(w, axis=1)))) / grid.dy if w.shape[1] > 1 else 0.0
    lip_w_t = float(np.max(np.abs(np.diff(w, axis=0)))) / grid.dt if w.shape[0] > 1 else 0.0
    lip_ut_y = float(np.max(np.abs(np.diff(slope, axis=1)))) / grid.dy
    lip_ut_t = float(np.max(np.abs(np.diff(slope, axis=0)))) / grid.dt if slope.shape[0] > 1 else 0.0

    return {
        "tolerance": tol,
        "m0": sol.m0,
        "M0": sol.M0,
        "K_m0": k_lo,
        "K_M0": k_hi,
        "band_excess": band_excess,
        "band_worst_at": {"t": float(sol.times[j]), "y": float(sol.y[i])},
        "band_ok": band_excess <= tol,
        "slope_excess": slope_excess,
        "slope_ok": slope_excess <= tol,
        "lipschitz": {
            "w_in_y": lip_w_y,
            "w_in_t": lip_w_t,
            "u_t_in_y": lip_ut_y,
            "u_t_in_t": lip_ut_t,
        },
        "ok": band_excess <= tol and slope_excess <= tol,
    }
