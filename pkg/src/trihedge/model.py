"""Market parameters, payoffs, the entropy penalty and the HJB nonlinearity.

The scaled trinomial market moves the spot by a factor ``1 + u*xi`` per step
with ``u = sigma_bar / sqrt(n)`` and ``xi`` drawn from ``{+1, 0, -1}`` with
masses ``(p/2, 1-p, p/2)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit, xlogy

MARKOVIAN = "markovian"
PATH_DEPENDENT = "path"


class InputError(ValueError):
    """Raised when a parameter or payoff violates a documented precondition."""


@dataclass(frozen=True)
class ModelParams:
    p: float
    sigma_bar: float
    s0: float
    ell: float
    n: int

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise InputError(f"p must lie in (0, 1), got {self.p}")
        if self.sigma_bar <= 0 or self.s0 <= 0 or self.ell <= 0:
            raise InputError("sigma_bar, s0 and ell must be positive")
        if int(self.n) != self.n or self.n < 1:
            raise InputError(f"n must be a positive integer, got {self.n}")
        # down factor 1 - sigma_bar/sqrt(n) must stay positive
        if self.n <= self.sigma_bar ** 2:
            raise InputError(
                f"n={self.n} too small: need n > sigma_bar**2 = {self.sigma_bar ** 2}"
            )

    @property
    def u(self) -> float:
        """Relative jump size sigma_bar / sqrt(n)."""
        return self.sigma_bar / math.sqrt(self.n)

    @property
    def lam(self) -> float:
        return self.sigma_bar ** 2

    @property
    def risk_aversion(self) -> float:
        """Absolute risk aversion n * ell of the discrete problem."""
        return self.n * self.ell

    def replace(self, **changes) -> "ModelParams":
        fields = dict(p=self.p, sigma_bar=self.sigma_bar, s0=self.s0, ell=self.ell, n=self.n)
        fields.update(changes)
        return ModelParams(**fields)

    def to_dict(self) -> dict:
        return dict(p=self.p, sigma_bar=self.sigma_bar, s0=self.s0, ell=self.ell, n=self.n)


@dataclass(frozen=True)
class Payoff:
    """A terminal payoff.

    Markovian payoffs map spot arrays to values elementwise.  Path-dependent
    payoffs map an array of node values ``(..., n+1)`` (the path sampled at
    ``0, 1/n, ..., 1``) to one value per path; the functional is understood on
    the linear interpolation of those nodes (see :func:`interpolate_path`).

    ``second_derivative`` (F'') is optional; when present it gives the
    log-space quantity ``w0(y) = f''(y) - f'(y) = x**2 F''(x)`` analytically.
    """

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    kind: str = MARKOVIAN
    params: dict = field(default_factory=dict)
    growth: Optional[tuple[float, float]] = (1.0, 1.0)
    second_derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None
    convex: bool = False
    smooth: bool = True
    kinks: tuple = ()

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.func(x), dtype=float)

    @property
    def markovian(self) -> bool:
        return self.kind == MARKOVIAN

    def w0(self, y) -> Optional[np.ndarray]:
        """Analytic ``f'' - f'`` at log-spots ``y``, or None if undeclared."""
        if self.second_derivative is None:
            return None
        x = np.exp(np.asarray(y, dtype=float))
        return x * x * np.asarray(self.second_derivative(x), dtype=float)

    def on_path(self, paths: np.ndarray) -> np.ndarray:
        """Evaluate on node paths of shape ``(..., n+1)``."""
        paths = np.asarray(paths, dtype=float)
        if self.markovian:
            return self(paths[..., -1])
        return self(paths)

    def to_record(self) -> dict:
        growth = None if self.growth is None else {"C": self.growth[0], "r": self.growth[1]}
        return {"kind": self.kind, "name": self.name, "params": dict(self.params), "growth": growth}

    @classmethod
    def from_record(cls, record: dict) -> "Payoff":
        unknown = set(record) - {"kind", "name", "params", "growth"}
        if unknown:
            raise InputError(f"unknown payoff fields: {sorted(unknown)}")
        name = record.get("name")
        if name not in CATALOGUE:
            raise InputError(f"unknown payoff {name!r}; choose from {sorted(CATALOGUE)}")
        try:
            payoff = CATALOGUE[name](**record.get("params", {}))
        except TypeError as exc:
            raise InputError(f"bad parameters for payoff {name!r}: {exc}") from None
        kind = record.get("kind", payoff.kind)
        if kind != payoff.kind:
            raise InputError(f"payoff {name!r} is {payoff.kind}, record says {kind}")
        return payoff


def constant(c: float = 0.0) -> Payoff:
    return Payoff("constant", lambda x: np.full_like(x, float(c)), params={"c": c},
                  growth=(abs(c), 1.0), second_derivative=lambda x: np.zeros_like(x),
                  convex=True)


def linear(a: float = 0.0, b: float = 1.0) -> Payoff:
    """F(x) = a + b x (replicable)."""
    return Payoff("linear", lambda x: a + b * x, params={"a": a, "b": b},
                  growth=(max(abs(a), abs(b), 1e-300), 1.0),
                  second_derivative=lambda x: np.zeros_like(x), convex=True)


def log_affine(alpha: float = 0.0, beta: float = 1.0) -> Payoff:
    """F(x) = alpha + beta log x; concave for beta > 0."""
    return Payoff("log_affine", lambda x: alpha + beta * np.log(x),
                  params={"alpha": alpha, "beta": beta},
                  growth=(max(abs(alpha), abs(beta), 1e-300), 1.0),
                  second_derivative=lambda x: -beta / (x * x), convex=beta <= 0)


def power(exponent: float = 2.0, scale: float = 1.0) -> Payoff:
    """F(x) = scale * x**exponent."""
    e = float(exponent)
    return Payoff("power", lambda x: scale * x ** e, params={"exponent": exponent, "scale": scale},
                  growth=(abs(scale), max(abs(e), 1e-12)),
                  second_derivative=lambda x: scale * e * (e - 1.0) * x ** (e - 2.0),
                  convex=scale * e * (e - 1.0) >= 0)


def exponential(rate: float = 1.0) -> Payoff:
    """F(x) = exp(rate x).  Grows faster than any power: no growth constants."""
    return Payoff("exponential", lambda x: np.exp(rate * x), params={"rate": rate},
                  growth=None, second_derivative=lambda x: rate * rate * np.exp(rate * x),
                  convex=True)


def call(strike: float = 1.0) -> Payoff:
    return Payoff("call", lambda x: np.maximum(x - strike, 0.0), params={"strike": strike},
                  growth=(max(1.0, strike), 1.0), convex=True, smooth=False,
                  kinks=(strike,))


def put(strike: float = 1.0) -> Payoff:
    return Payoff("put", lambda x: np.maximum(strike - x, 0.0), params={"strike": strike},
                  growth=(max(1.0, strike), 1.0), convex=True, smooth=False,
                  kinks=(strike,))


def smoothed_call(strike: float = 1.0, width: float = 0.05) -> Payoff:
    """Softplus call ``width * log(1 + exp((x - strike)/width))``; smooth and convex."""
    if width <= 0:
        raise InputError("smoothed_call width must be positive")

    def func(x):
        return width * np.logaddexp(0.0, (x - strike) / width)

    def second(x):
        s = expit((x - strike) / width)
        return s * (1.0 - s) / width

    return Payoff("smoothed_call", func, params={"strike": strike, "width": width},
                  growth=(max(1.0, strike + width * math.log(2.0)), 1.0),
                  second_derivative=second, convex=True, kinks=(strike,))


def running_max() -> Payoff:
    """Maximum of the interpolated path (attained at a node)."""
    return Payoff("running_max", lambda z: np.max(z, axis=-1), kind=PATH_DEPENDENT,
                  growth=(1.0, 1.0), convex=True)


def path_average() -> Payoff:
    """Time average of the interpolated path; the trapezoid rule is exact for it."""

    def func(z):
        n = z.shape[-1] - 1
        return (z.sum(axis=-1) - 0.5 * (z[..., 0] + z[..., -1])) / n

    return Payoff("path_average", func, kind=PATH_DEPENDENT, growth=(1.0, 1.0), convex=True)


def custom(func: Callable, name: str = "custom", kind: str = MARKOVIAN, **kw) -> Payoff:
    """Wrap a user evaluator.  Not serialisable through the CLI catalogue."""
    return Payoff(name, func, kind=kind, **kw)


CATALOGUE: dict[str, Callable[..., Payoff]] = {
    "constant": constant,
    "linear": linear,
    "log_affine": log_affine,
    "power": power,
    "exponential": exponential,
    "call": call,
    "put": put,
    "smoothed_call": smoothed_call,
    "running_max": running_max,
    "path_average": path_average,
}


def interpolate_path(z, t):
    """Linear interpolation of node values ``z_0..z_n`` at times ``t`` in [0, 1]."""
    z = np.asarray(z, dtype=float)
    n = z.shape[-1] - 1
    t = np.asarray(t, dtype=float)
    nt = n * t
    k = np.minimum(np.floor(nt).astype(int), n - 1)
    frac = nt - k
    return (1.0 - frac) * z[..., k] + frac * z[..., k + 1]


def check_growth(payoff: Payoff, samples: int = 2000, seed: int = 0) -> bool:
    """Sample the growth bound ``|F(y)| <= C (1 + sup(y^r + y^-r))``."""
    if payoff.growth is None:
        return False
    C, r = payoff.growth
    rng = np.random.default_rng(seed)
    if payoff.markovian:
        y = np.exp(rng.uniform(-5.0, 5.0, samples))
        bound = C * (1.0 + y ** r + y ** -r)
        return bool(np.all(np.abs(payoff(y)) <= bound * (1 + 1e-12)))
    paths = np.exp(np.cumsum(rng.normal(0.0, 0.3, (samples, 9)), axis=-1))
    sup = np.max(paths ** r + paths ** -r, axis=-1)
    return bool(np.all(np.abs(payoff.on_path(paths)) <= C * (1.0 + sup) * (1 + 1e-12)))


def entropy_penalty(x, p: float):
    """Bernoulli relative entropy ``x log(x/p) + (1-x) log((1-x)/(1-p))``.

    Uses ``0 log 0 = 0`` so the endpoints are ``-log(1-p)`` and ``-log p``.
    """
    if not 0.0 < p < 1.0:
        raise InputError(f"p must lie in (0, 1), got {p}")
    x = np.asarray(x, dtype=float)
    if np.any((x < 0.0) | (x > 1.0)) or np.any(np.isnan(x)):
        raise InputError("entropy_penalty argument must lie in [0, 1]")
    out = xlogy(x, x) - x * math.log(p) + xlogy(1.0 - x, 1.0 - x) - (1.0 - x) * math.log1p(-p)
    # rounding can leave tiny negatives next to x = p
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def nonlinearity_K(w, params: ModelParams):
    """``K(w) = (1/ell) log((1-p) + p exp(ell * Lambda * w / 2))`` in shifted form."""
    w = np.asarray(w, dtype=float)
    z = 0.5 * params.ell * params.lam * w
    out = np.logaddexp(math.log1p(-params.p), math.log(params.p) + z) / params.ell
    return out if out.ndim else float(out)


def nonlinearity_K_derivatives(w, params: ModelParams):
    """Analytic ``(K'(w), K''(w))``.

    With ``pi = p e^z / ((1-p) + p e^z)``, ``z = ell Lambda w / 2``:
    ``K' = Lambda pi / 2`` and ``K'' = ell Lambda**2 pi (1-pi) / 4``.
    """
    w = np.asarray(w, dtype=float)
    logit_p = math.log(params.p) - math.log1p(-params.p)
    z = 0.5 * params.ell * params.lam * w + logit_p
    pi, one_minus = expit(z), expit(-z)
    d1 = 0.5 * params.lam * pi
    d2 = 0.25 * params.ell * params.lam ** 2 * pi * one_minus
    if d1.ndim == 0:
        return float(d1), float(d2)
    return d1, d2


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_hermite(order: int):
    if order not in _GH_CACHE:
        x, w = hermegauss(order)
        _GH_CACHE[order] = (x, w / math.sqrt(2.0 * math.pi))
    return _GH_CACHE[order]


def _piecewise_legendre(payoff: Payoff, sigma: float, s0: float, order: int) -> float:
    """Normal expectation split at the payoff's kinks, Gauss-Legendre on each piece."""
    cuts = sorted((math.log(k / s0) + 0.5 * sigma * sigma) / sigma for k in payoff.kinks if k > 0)
    edges = [-Z_CUTOFF] + [c for c in cuts if -Z_CUTOFF < c < Z_CUTOFF] + [Z_CUTOFF]
    x, w = np.polynomial.legendre.leggauss(order)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        z = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        dens = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        vals = payoff(s0 * np.exp(sigma * z - 0.5 * sigma * sigma))
        total += 0.5 * (hi - lo) * float(np.dot(w, dens * vals))
    return total


Z_CUTOFF = 12.0


def bs_price(payoff: Payoff, sigma: float, s0: float, order: int = 64,
             tol: float = 1e-9, max_order: int = 256) -> float:
    """``E[F(s0 exp(sigma W_1 - sigma**2/2))]`` by Gaussian quadrature.

    Smooth payoffs use Gauss-Hermite, doubling the order from ``order`` until
    successive values agree to ``tol`` (numpy's nodes break down beyond 256).
    Payoffs with declared kinks (or sharp bends) are integrated piecewise with Gauss-Legendre
    on ``|z| <= 12`` split at the kinks, with the same doubling check.
    """
    if not payoff.markovian:
        raise InputError("bs_price needs a Markovian payoff")
    if sigma <= 0 or s0 <= 0:
        raise InputError("sigma and s0 must be positive")

    if payoff.kinks:
        def quad(m):
            return _piecewise_legendre(payoff, sigma, s0, m)
    else:
        def quad(m):
            z, w = _gauss_hermite(m)
            return float(np.dot(w, payoff(s0 * np.exp(sigma * z - 0.5 * sigma * sigma))))

    prev = quad(order)
    m = order
    while m < max_order:
        m *= 2
        cur = quad(m)
        if abs(cur - prev) <= tol * max(1.0, abs(cur)):
            return cur
        prev = cur
    warnings.warn(f"bs_price: quadrature not converged to {tol} at order {m} "
                  f"(payoff {payoff.name})", RuntimeWarning, stacklevel=2)
    return cur


def payoff_summary(payoff: Payoff) -> dict[str, Any]:
    return {**payoff.to_record(), "convex": payoff.convex, "smooth": payoff.smooth}
