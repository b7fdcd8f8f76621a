#!/usr/bin/env python3
"""PDE value v(0, s0) across risk aversion, bracketed by Black-Scholes prices.

For each ell the value should sit above the price at volatility
``sqrt(p) sigma_bar`` and, for convex payoffs, below the price at ``sigma_bar``.
"""
import argparse
import csv
import math
from pathlib import Path

import numpy as np

from trihedge import model
from trihedge.limits import limit_references
from trihedge.model import ModelParams
from trihedge.pde import LogGrid, default_tolerance, solve_hjb
from trihedge.svg import line_plot

PAYOFFS = {
    "log": model.log_affine(0.0, 1.0),
    "square": model.power(2.0),
    "smoothed_call": model.smoothed_call(1.0, 0.05),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/sandwich")
    ap.add_argument("--payoff", default="smoothed_call", choices=sorted(PAYOFFS))
    ap.add_argument("--p", type=float, default=0.5)
    ap.add_argument("--sigma-bar", type=float, default=0.2)
    ap.add_argument("--dy", type=float, default=0.01)
    ap.add_argument("--ells", type=float, nargs="+", default=list(np.logspace(-4, 3, 15)))
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pay = PAYOFFS[args.payoff]
    rows = []
    for ell in args.ells:
        prm = ModelParams(args.p, args.sigma_bar, 1.0, ell, 1)
        grid = LogGrid.around(prm, dy=args.dy)
        v0 = float(solve_hjb(prm, pay, grid).v(0.0, 1.0))
        lo, hi = limit_references(prm, pay)
        tol = default_tolerance(grid)
        inside = lo - tol <= v0 and (hi is None or v0 <= hi + tol)
        rows.append([ell, v0, lo, hi if hi is not None else math.nan, inside])
        print(f"ell={ell:10.4g}  v0={v0:.8f}  lower={lo:.8f}  upper={rows[-1][3]:.8f}  "
              f"{'ok' if inside else 'OUTSIDE'}")

    with open(out / f"{args.payoff}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ell", "v0", "bs_sqrt_p_sigma", "bs_sigma", "inside"])
        w.writerows(rows)
    ells = [r[0] for r in rows]
    series = {"v(0,s0)": (ells, [r[1] for r in rows]),
              "BS at sqrt(p) sigma": (ells, [r[2] for r in rows])}
    if pay.convex:
        series["BS at sigma"] = (ells, [r[3] for r in rows])
    line_plot(series, out / f"{args.payoff}.svg", title=f"limit sandwich ({args.payoff})",
              xlabel="ell", ylabel="value", logx=True)


if __name__ == "__main__":
    main()
