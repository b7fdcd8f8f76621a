"""Command-line front end.

    trihedge {price,pde,converge,hedge,dual-bound} --config run.json [--out DIR]
             [--seed N] [--threads N] [--format {csv,json}]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 a tolerance check failed.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__, hedge, lattice, limits, pde
from .model import InputError, ModelParams, Payoff

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4
THREADS_ENV = "TRIHEDGE_THREADS"

COMMAND_BLOCKS = {
    "price": {"cap": 600, "export_delta": True, "sweep": None},
    "pde": {"dy": 0.01, "half_width": None, "mollify": None, "t_stride": 1, "y_stride": 1,
            "compare_with": None},
    "converge": {"n_list": [25, 50, 100, 200, 400], "dy": 0.01, "slack": 0.1},
    "hedge": {"n_list": None, "dy": 0.01, "mc": None},
    "dual_bound": {"policies": [{"type": "optimal"}, {"type": "constant", "phi": None}],
                   "max_n": 9, "mc": None},
}
MC_HEDGE_KEYS = {"paths": 10000, "bins": 50, "bootstrap": 200, "block_size": hedge.BLOCK_SIZE}
MC_CONTROL_KEYS = {"paths": 10000, "time_steps": 50, "block_size": hedge.BLOCK_SIZE,
                   "policies": [{"type": "constant", "alpha": None}]}
TOP_KEYS = {"schema_version", "model", "payoff", "seed", "out", "threads", *COMMAND_BLOCKS}


class ConfigError(InputError):
    pass


class ToleranceFailure(RuntimeError):
    pass


def _merge(block: Optional[dict], defaults: dict, where: str) -> dict:
    block = {} if block is None else block
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(block) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return {**defaults, **block}


@dataclass
class RunConfig:
    params: ModelParams
    payoff: Payoff
    payoff_record: dict
    blocks: dict
    seed: int
    out: Path
    threads: int
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, command: str, seed: Optional[int] = None,
                  out: Optional[str] = None, threads: Optional[int] = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        model = raw.get("model")
        if not isinstance(model, dict):
            raise ConfigError("config needs a 'model' object")
        extra = set(model) - {"p", "sigma_bar", "s0", "ell", "n"}
        if extra:
            raise ConfigError(f"unknown keys in model: {sorted(extra)}")
        try:
            params = ModelParams(**model)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None
        except InputError as exc:
            raise ConfigError(f"model: {exc}") from None
        try:
            payoff = Payoff.from_record(raw.get("payoff", {}))
        except InputError as exc:
            raise ConfigError(f"payoff: {exc}") from None
        key = command.replace("-", "_")
        blocks = {key: _merge(raw.get(key), COMMAND_BLOCKS[key], key)}
        seed = raw.get("seed", 0) if seed is None else seed
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        out_dir = Path(out or raw.get("out") or "trihedge-out")
        n_threads = resolve_threads(threads if threads is not None else raw.get("threads"))
        cfg = cls(params, payoff, raw.get("payoff", {}), blocks, seed, out_dir, n_threads, raw)
        cfg.validate(key)
        return cfg

    def validate(self, key: str) -> None:
        """Check every precondition of the command before computing anything."""
        b = self.blocks[key]
        p = self.params
        if key in ("price", "pde", "converge", "hedge") and not self.payoff.markovian:
            raise ConfigError(f"command {key} needs a Markovian payoff")
        if key == "price":
            if p.n > b["cap"]:
                raise ConfigError(f"n={p.n} exceeds lattice cap {b['cap']}")
            sweep = b["sweep"]
            if sweep is not None:
                sweep = _merge(sweep, {"parameter": "p", "values": []}, "price.sweep")
                if sweep["parameter"] not in ("p", "sigma_bar", "ell", "s0"):
                    raise ConfigError("price.sweep.parameter must be p, sigma_bar, ell or s0")
                try:
                    for v in sweep["values"]:
                        p.replace(**{sweep["parameter"]: v})
                except InputError as exc:
                    raise ConfigError(f"price.sweep: {exc}") from None
                b["sweep"] = sweep
        if key in ("pde", "converge", "hedge"):
            if not b["dy"] or b["dy"] <= 0:
                raise ConfigError(f"{key}.dy must be positive")
        if key == "pde":
            if b["half_width"] is not None and b["half_width"] <= 0:
                raise ConfigError("pde.half_width must be positive")
            if b["compare_with"] is not None:
                try:
                    other = Payoff.from_record(b["compare_with"])
                except InputError as exc:
                    raise ConfigError(f"pde.compare_with: {exc}") from None
                if not other.markovian:
                    raise ConfigError("pde.compare_with must be Markovian")
        if key in ("converge", "hedge"):
            ns = b["n_list"] if b["n_list"] is not None else [p.n]
            if not ns or any(not isinstance(n, int) or n < 1 for n in ns):
                raise ConfigError(f"{key}.n_list must hold positive integers")
            for n in ns:
                if n > limits.LATTICE_CAP:
                    raise ConfigError(f"n={n} exceeds lattice cap {limits.LATTICE_CAP}")
                try:
                    p.replace(n=n)
                except InputError as exc:
                    raise ConfigError(f"{key}.n_list: {exc}") from None
            b["n_list"] = list(ns)
        if key == "hedge" and b["mc"] is not None:
            b["mc"] = _merge(b["mc"], MC_HEDGE_KEYS, "hedge.mc")
            if b["mc"]["paths"] < 1:
                raise ConfigError("hedge.mc.paths must be positive")
        if key == "dual_bound":
            if not self.payoff.markovian and p.n > b["max_n"]:
                raise ConfigError(f"path payoff needs n <= max_n={b['max_n']}")
            for spec in b["policies"]:
                _policy_check(spec, p)
            if b["mc"] is not None:
                b["mc"] = _merge(b["mc"], MC_CONTROL_KEYS, "dual_bound.mc")
                if b["mc"]["paths"] < 1 or b["mc"]["time_steps"] < 1:
                    raise ConfigError("dual_bound.mc paths and time_steps must be positive")
                for spec in b["mc"]["policies"]:
                    _alpha_policy(spec, p, b["mc"]["time_steps"])


def resolve_threads(flag: Optional[int]) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    elif flag is not None:
        value = flag
    else:
        value = os.cpu_count() or 1
    if not isinstance(value, int) or value < 1:
        raise ConfigError("thread count must be a positive integer")
    return value


def _policy_check(spec: dict, params: ModelParams) -> None:
    if not isinstance(spec, dict) or spec.get("type") not in ("optimal", "constant", "random"):
        raise ConfigError("dual_bound policy type must be optimal, constant or random")
    allowed = {"optimal": {"type"}, "constant": {"type", "phi"}, "random": {"type", "count"}}
    extra = set(spec) - allowed[spec["type"]]
    if extra:
        raise ConfigError(f"unknown keys in dual_bound policy: {sorted(extra)}")
    if spec["type"] == "constant":
        phi = spec.get("phi")
        if phi is not None and not 0.0 <= phi <= 1.0:
            raise ConfigError("policy phi must lie in [0, 1]")
    if spec["type"] == "random" and int(spec.get("count", 1)) < 1:
        raise ConfigError("random policy count must be positive")


def _alpha_policy(spec: dict, params: ModelParams, time_steps: int) -> limits.AlphaPolicy:
    kind = spec.get("type") if isinstance(spec, dict) else None
    try:
        if kind == "constant":
            extra = set(spec) - {"type", "alpha"}
            if extra:
                raise ConfigError(f"unknown keys in control policy: {sorted(extra)}")
            alpha = spec.get("alpha")
            alpha = math.sqrt(params.p) * params.sigma_bar if alpha is None else alpha
            if not 0.0 <= alpha <= params.sigma_bar:
                raise ConfigError(f"alpha must lie in [0, {params.sigma_bar}]")
            return limits.AlphaPolicy.constant(alpha)
        if kind == "piecewise":
            extra = set(spec) - {"type", "times", "values"}
            if extra:
                raise ConfigError(f"unknown keys in control policy: {sorted(extra)}")
            if any(not 0.0 <= v <= params.sigma_bar for v in spec["values"]):
                raise ConfigError(f"alpha values must lie in [0, {params.sigma_bar}]")
            pol = limits.AlphaPolicy.piecewise(spec["times"], spec["values"])
            scaled = np.asarray(spec["times"]) * time_steps
            if np.any(np.abs(scaled - np.rint(scaled)) > 1e-9):
                raise ConfigError("control partition must fall on the time-step grid")
            return pol
    except (KeyError, TypeError, InputError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"control policy: {exc}") from None
    raise ConfigError("control policy type must be constant or piecewise")


# ---------------------------------------------------------------------------
# run record

class Recorder:
    def __init__(self, cfg: RunConfig, command: str, fmt: str):
        self.cfg, self.command, self.fmt = cfg, command, fmt
        self.timings: dict[str, float] = {}
        self.outputs: dict[str, Any] = {}
        self.checks: list[dict] = []
        self.files: list[str] = []
        cfg.out.mkdir(parents=True, exist_ok=True)

    def stage(self, name: str):
        rec = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                rec.timings[name] = time.perf_counter() - self.t0
                return False

        return _Timer()

    def check(self, name: str, passed: bool, **detail) -> None:
        self.checks.append({"name": name, "passed": bool(passed), **_jsonable(detail)})

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.cfg.out / name

    def table(self, stem: str, header: list, rows: list) -> None:
        """Write rows as CSV or JSON depending on ``--format``."""
        if self.fmt == "json":
            with open(self.path(stem + ".json"), "w") as fh:
                json.dump({"columns": header, "rows": _jsonable(rows)}, fh, indent=1)
                fh.write("\n")
        else:
            import csv

            with open(self.path(stem + ".csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for row in rows:
                    w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def finish(self) -> dict:
        record = {
            "command": self.command,
            "artifact_version": __version__,
            "config": self.cfg.raw,
            "seed": self.cfg.seed,
            "threads": self.cfg.threads,
            "timing_seconds": self.timings,
            "outputs": _jsonable(self.outputs),
            "checks": self.checks,
            "files": sorted(self.files),
        }
        with open(self.cfg.out / "record.json", "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return record

    @property
    def failed(self) -> bool:
        return any(not c["passed"] for c in self.checks)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _table_rows(table: lattice.LatticeTable) -> list:
    return [[k, a, b, s, v] for k, a, b, s, v in table.rows()]


# ---------------------------------------------------------------------------
# commands

def cmd_price(cfg: RunConfig, rec: Recorder) -> None:
    b = cfg.blocks["price"]
    with rec.stage("primal"):
        ce, delta = lattice.primal_ce(cfg.params, cfg.payoff, return_delta=b["export_delta"])
    with rec.stage("dual"):
        ce_dual, _ = lattice.dual_ce(cfg.params, cfg.payoff)
    residual = abs(ce - ce_dual) / max(1.0, abs(ce))
    rec.outputs.update(ce=ce, ce_dual=ce_dual, duality_residual=residual)
    rec.check("duality_residual", residual <= 1e-12, value=residual, tolerance=1e-12)
    if delta is not None:
        rec.table("gamma_star", ["k", "a", "b", "spot", "value"], _table_rows(delta))
    sweep = b["sweep"]
    if sweep is not None and sweep["values"]:
        name = sweep["parameter"]
        values = list(sweep["values"])
        with rec.stage("sweep"):
            ces = [lattice.primal_ce(cfg.params.replace(**{name: v}), cfg.payoff,
                                     return_delta=False)[0] for v in values]
        rec.table("sweep", [name, "ce"], [[float(v), c] for v, c in zip(values, ces)])
        rec.outputs["sweep"] = {"parameter": name, "values": values, "ce": ces}
        if cfg.payoff.convex and name in ("p", "sigma_bar"):
            order = np.argsort(values)
            ordered = [ces[i] for i in order]
            worst = max([a - b for a, b in zip(ordered[:-1], ordered[1:])], default=0.0)
            rec.check(f"monotone_in_{name}", worst <= 1e-12, worst_decrease=worst)


def _grid(cfg: RunConfig, b: dict, n_max: Optional[int] = None) -> pde.LogGrid:
    if n_max is not None:
        return pde.LogGrid.for_lattice(cfg.params, n_max, dy=b["dy"])
    return pde.LogGrid.around(cfg.params, dy=b["dy"], half_width=b.get("half_width"))


def cmd_pde(cfg: RunConfig, rec: Recorder) -> None:
    b = cfg.blocks["pde"]
    grid = _grid(cfg, b)
    with rec.stage("solve"):
        sol = pde.solve_hjb(cfg.params, cfg.payoff, grid, mollify=b["mollify"])
    report = pde.check_solution_properties(sol)
    v0 = float(sol.v(0.0, cfg.params.s0))
    rec.outputs.update(v0=v0, grid={"y_min": grid.y_min, "y_max": grid.y_max, "m": grid.m,
                                    "t_steps": grid.t_steps}, properties=report)
    rec.check("band", report["band_ok"], excess=report["band_excess"], tolerance=report["tolerance"])
    rec.check("time_slope", report["slope_ok"], excess=report["slope_excess"])
    if cfg.payoff.name == "log_affine":
        prm = cfg.payoff.params
        exact = float(pde.closed_form_log_payoff(prm.get("alpha", 0.0), prm.get("beta", 1.0),
                                                 0.0, cfg.params.s0, cfg.params))
        tol = pde.default_tolerance(grid)
        rec.outputs["closed_form"] = exact
        rec.check("closed_form", abs(v0 - exact) <= tol, error=abs(v0 - exact), tolerance=tol)
    if b["compare_with"] is not None:
        other = Payoff.from_record(b["compare_with"])
        with rec.stage("solve_compare"):
            sol2 = pde.solve_hjb(cfg.params, other, grid, mollify=b["mollify"])
        if np.all(sol.f <= sol2.f):
            lo, hi = sol, sol2
        elif np.all(sol2.f <= sol.f):
            lo, hi = sol2, sol
        else:
            lo = hi = None
        if lo is None:
            rec.check("comparison", False, reason="payoffs are not ordered on the grid")
        else:
            excess = float(np.max(lo.layers - hi.layers))
            rec.check("comparison", excess <= 1e-12, excess=excess)
    rows = []
    for j in range(0, grid.t_steps + 1, b["t_stride"]):
        for i in range(0, grid.m, b["y_stride"]):
            rows.append([j / grid.t_steps, float(sol.y[i]), float(sol.layers[j, i])])
    rec.table("solution", ["t", "y", "u_bar"], rows)
    xs = np.exp(sol.y)
    drows = []
    for j in range(0, grid.t_steps + 1, b["t_stride"]):
        grad = np.gradient(sol.layers[j], grid.dy, edge_order=2) / xs
        for i in range(0, grid.m, b["y_stride"]):
            drows.append([1.0 - j / grid.t_steps, float(xs[i]), float(grad[i])])
    rec.table("delta", ["t", "x", "v_x"], drows)


def cmd_converge(cfg: RunConfig, rec: Recorder) -> None:
    b = cfg.blocks["converge"]
    with rec.stage("study"):
        table = limits.convergence_study(cfg.params, cfg.payoff, b["n_list"], dy=b["dy"],
                                         threads=cfg.threads)
    rec.table("convergence", list(table.COLUMNS), table.as_lists())
    table.to_svg(rec.path("convergence.svg"))
    errors = list(table.errors())
    rec.outputs.update(rows=table.as_lists(), meta=table.meta)
    rec.check("error_non_increasing", limits.non_increasing(errors, b["slack"], floor=1e-12),
              errors=errors, slack=b["slack"])
    rec.check("gap_nonnegative", bool(np.all(table.gaps() >= -1e-10)), gaps=list(table.gaps()))


def cmd_hedge(cfg: RunConfig, rec: Recorder) -> None:
    b = cfg.blocks["hedge"]
    ns = sorted(b["n_list"])
    n_cover = max(ns[-1], cfg.params.n) if b["mc"] is not None else ns[-1]
    grid = _grid(cfg, b, n_max=n_cover)
    with rec.stage("solve"):
        sol = pde.solve_hjb(cfg.params, cfg.payoff, grid)
    rows = []
    with rec.stage("exact"):
        for n in ns:
            params = cfg.params.replace(n=n)
            strat = hedge.build_delta_strategy(sol, n)
            ce_tilde, gap = hedge.evaluate_hedge(params, cfg.payoff, strat)
            rows.append([n, ce_tilde - gap, ce_tilde, gap])
    rec.table("hedge_gap", ["n", "C_n", "C_tilde_n", "gap"], rows)
    rec.outputs["gaps"] = rows
    rec.outputs["exploratory"] = not cfg.payoff.smooth
    rec.check("gap_nonnegative", all(r[3] >= -1e-10 for r in rows))
    mc = b["mc"]
    if mc is not None:
        params = cfg.params
        strat = hedge.build_delta_strategy(sol, params.n)
        with rec.stage("mc"):
            report = hedge.simulate_pnl(params, cfg.payoff, strat, mc["paths"], cfg.seed,
                                        bins=mc["bins"], bootstrap=mc["bootstrap"],
                                        block_size=mc["block_size"], threads=cfg.threads)
        report.to_json(rec.path("pnl.json"))
        report.histogram_to_csv(rec.path("pnl_histogram.csv"))
        rec.outputs["pnl"] = report.to_dict()
        strat.to_csv(rec.path("strategy.csv"), params)


def cmd_dual_bound(cfg: RunConfig, rec: Recorder) -> None:
    b = cfg.blocks["dual_bound"]
    params, payoff = cfg.params, cfg.payoff
    if payoff.markovian:
        ce, _ = lattice.primal_ce(params, payoff, return_delta=False)
        _, qstar = lattice.dual_ce(params, payoff)
    else:
        ce, qstar = lattice.enumerate_ce(params, payoff, b["max_n"]), None
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    rows = []
    with rec.stage("policies"):
        for spec in b["policies"]:
            if spec["type"] == "optimal":
                if qstar is None:
                    continue
                pols = [("optimal", lattice.VolFractionPolicy.from_table(qstar))]
            elif spec["type"] == "constant":
                phi = params.p if spec.get("phi") is None else spec["phi"]
                pols = [(f"constant_{phi}", lattice.VolFractionPolicy.constant(params.n, phi))]
            else:
                pols = [(f"random_{i}", lattice.VolFractionPolicy.random(params.n, rng))
                        for i in range(int(spec.get("count", 1)))]
            for name, pol in pols:
                bound = lattice.dual_policy_bound(params, payoff, pol, b["max_n"])
                rows.append([name, bound, ce, ce - bound])
    rec.table("dual_bounds", ["policy", "bound", "C_n", "slack"], rows)
    rec.outputs.update(ce=ce, bounds=rows)
    rec.check("weak_duality", all(r[1] <= ce + 1e-10 for r in rows))
    opt = [r for r in rows if r[0] == "optimal"]
    if opt:
        rec.check("optimal_attains", abs(opt[0][3]) <= 1e-10, slack=opt[0][3])
    mc = b["mc"]
    if mc is not None:
        v0 = None
        if payoff.markovian:
            grid = pde.LogGrid.around(params)
            v0 = float(pde.solve_hjb(params, payoff, grid).v(0.0, params.s0))
            rec.outputs["pde_value"] = v0
        mrows = []
        with rec.stage("control_mc"):
            for idx, spec in enumerate(mc["policies"]):
                pol = _alpha_policy(spec, params, mc["time_steps"])
                est, se = limits.mc_control_value(params, payoff, pol, mc["paths"], mc["time_steps"],
                                                  cfg.seed + idx, block_size=mc["block_size"],
                                                  threads=cfg.threads)
                mrows.append([idx, est, se])
        rec.table("control_values", ["policy", "estimate", "std_error"], mrows)
        rec.outputs["control_values"] = mrows
        if not payoff.markovian:
            # no computable supremum for path-dependent claims
            rec.outputs["supremum_gap"] = "unknown: control values are Monte Carlo lower bounds"
        if v0 is not None:
            rec.check("control_lower_bound", all(r[1] <= v0 + 3 * r[2] for r in mrows), pde_value=v0)


COMMANDS = {"price": cmd_price, "pde": cmd_pde, "converge": cmd_converge, "hedge": cmd_hedge,
            "dual-bound": cmd_dual_bound}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trihedge", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        cfg = RunConfig.from_dict(raw, args.command, seed=args.seed, out=args.out,
                                  threads=args.threads)
    except (OSError, json.JSONDecodeError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rec = Recorder(cfg, args.command, args.format)
    try:
        with np.errstate(over="raise", invalid="raise"):
            COMMANDS[args.command](cfg, rec)
    except InputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, pde.NumericalFailure, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    record = rec.finish()
    for c in record["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
    print(f"wrote {cfg.out}")
    return EXIT_TOLERANCE if rec.failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
