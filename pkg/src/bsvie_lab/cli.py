"""Command line front door.

Every subcommand accepts ``--config file.ini`` (sectioned key/value file with
a fixed typed schema), explicit flags and ``--set section.key=value``
overrides, in increasing priority.  With ``--out DIR`` a run directory is
written:

    DIR/config.echo     resolved config, re-runnable with ``bsvie-lab run``
    DIR/results.json    deterministic results (sorted keys, no timings)
    DIR/tables/*.csv    long format: run_id, statistic, t, s, value
    DIR/meta.json       versions, seed, timings

Exit codes: 0 success, 2 config/validation error (nothing written),
3 solver non-convergence.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import constants as C
from .analysis import (cadlag_report, compare_solutions, duality_gap, norm_Sp, partition_comparison,
                       regularity_estimate)
from .bsde import bsde_residual, solve_bsde
from .bsvie import (complete_M, m_solution_residual, monotone_picard, picard_type1, solve_sfie,
                    solve_type1, solve_type1_noY, solve_type2, upper_residual)
from .conditional import ExactTree, Regression
from .presets import PRESETS, build, list_presets

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV = 0, 2, 3


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"config key '{key}': {msg}")
        self.key = key


# ---------------------------------------------------------------- schema


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    s = str(s).strip()
    return [float(x) for x in s.split(",") if x.strip()] if s else []


def _ints(s):
    s = str(s).strip()
    return [int(x) for x in s.split(",") if x.strip()] if s else []


SCHEMA = {
    "run": {"command": str, "preset": str, "seed": int, "run_id": str},
    "world": {"kind": str, "T": float, "steps": int, "marks": _floats, "intensities": _floats,
              "extra_noise": _bool, "brownian": _bool, "n_paths": int, "quantization": int,
              "max_tree_steps": int},
    "data": {"mu": float, "c": float, "bound": float},
    "solver": {"method": str, "tol": float, "max_iter": int, "plan": _ints, "engine": str,
               "degree": int, "ridge": float, "R": int, "S": int},
    "analysis": {"beta": float, "frakf": float, "condition": str, "p": float, "draws": int,
                 "blocks": _ints, "jump_c": float, "continuous": _bool},
}

CHOICES = {
    "world.kind": ("tree", "ensemble", "deterministic"),
    "solver.method": ("picard", "direct", "noY"),
    "solver.engine": ("exact", "poly", "indicator"),
    "analysis.condition": ("type1", "type1_noY", "type2"),
}

COMMANDS = ("constants", "min-beta", "simulate", "solve-bsde", "solve-type1", "solve-type2", "sfie",
            "compare", "partition-compare", "duality", "regularity", "norms", "list-presets")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(section: str, key: str, raw):
    name = f"{section}.{key}"
    if section not in SCHEMA:
        raise ConfigError(name, f"unknown section '{section}'")
    if key not in SCHEMA[section]:
        raise ConfigError(name, "unknown key")
    try:
        val = SCHEMA[section][key](raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(name, f"bad value {raw!r} ({e})") from None
    if name in CHOICES and val not in CHOICES[name]:
        raise ConfigError(name, f"must be one of {', '.join(CHOICES[name])}")
    if name == "run.preset" and val not in PRESETS:
        raise ConfigError(name, f"unknown preset {val!r}")
    if name == "run.command" and val not in COMMANDS:
        raise ConfigError(name, f"unknown command {val!r}")
    return val


def read_config(path) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except configparser.Error as e:
        raise ConfigError("--config", f"unparsable file ({e.__class__.__name__})") from None
    cfg: dict = {}
    for sec in cp.sections():
        for key, raw in cp.items(sec):
            cfg[(sec, key)] = parse_value(sec, key, raw)
    return cfg


def echo_config(cfg: dict) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec in SCHEMA:
        keys = sorted(k for (s, k) in cfg if s == sec)
        if keys:
            cp[sec] = {k: _fmt(cfg[(sec, k)]) for k in keys}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------- helpers


def _get(cfg, key, default=None):
    sec, k = key.split(".")
    return cfg.get((sec, k), default)


def _preset_data(cfg, default_preset):
    name = _get(cfg, "run.preset", default_preset)
    opts = {k: v for (s, k), v in cfg.items() if s in ("world", "data")}
    if (("run", "seed")) in cfg:
        opts["seed"] = cfg[("run", "seed")]
    try:
        return build(name, opts)
    except (ValueError, KeyError) as e:
        raise ConfigError("world", str(e)) from None


def _engine(cfg, world):
    kind = _get(cfg, "solver.engine")
    if kind is None:
        return None
    if kind == "exact":
        return ExactTree()
    if world.kind != "ensemble":
        raise ConfigError("solver.engine", "regression engines need an ensemble world")
    return Regression(basis="poly" if kind == "poly" else "indicator",
                      degree=_get(cfg, "solver.degree", 2), ridge=_get(cfg, "solver.ridge", 1e-10))


def _world_summary(world) -> dict:
    d = world.describe()
    return {k: v for k, v in d.items() if not isinstance(v, (list, dict))}


def _exp_row(world, Y_levels, stat):
    return [(stat, float(world.times[i]), "", float(world.expect(Y_levels[i], i)))
            for i in range(len(Y_levels))]


class Result:
    def __init__(self):
        self.values: dict = {}
        self.tables: dict = {}
        self.converged = True

    def table(self, name, rows):
        self.tables.setdefault(name, []).extend(rows)


# ---------------------------------------------------------------- commands


def cmd_constants(cfg, res: Result):
    beta = _get(cfg, "analysis.beta")
    if beta is None:
        raise ConfigError("analysis.beta", "required")
    f = _get(cfg, "analysis.frakf", 0.0)
    try:
        c = C.check_type1(beta, f)
    except C.DomainError as e:
        raise ConfigError("analysis.beta", str(e)) from None
    res.values.update(c.to_dict())


def cmd_min_beta(cfg, res: Result):
    cond = _get(cfg, "analysis.condition", "type1")
    f = _get(cfg, "analysis.frakf", 0.0)
    try:
        r = C.min_beta(cond, f)
    except C.NeverAdmissible as e:
        raise ConfigError("analysis.frakf", str(e)) from None
    except C.ConvergenceError:
        res.converged = False
        res.values.update(condition=cond, frak_f=f, beta=None)
        return
    res.values.update(condition=cond, frak_f=f, beta=r.beta, monotone=r.monotone)
    res.table("scan", [("admissible", b, "", float(ok)) for b, ok in r.scan])


def cmd_simulate(cfg, res: Result, out: Path | None):
    cfg = dict(cfg)
    cfg.setdefault(("world", "kind"), "ensemble")
    cfg.setdefault(("world", "steps"), 16)
    data = _preset_data(cfg, "lipschitz-standard")
    w = data["world"]
    if w.kind != "ensemble":
        raise ConfigError("world.kind", "simulate needs kind = ensemble")
    N = w.N
    WT = w.state(N)["W"]
    res.values.update(n_paths=w.n_paths, steps=N, seed=w.seed, mean_W_T=float(WT.mean()),
                      var_W_T=float(WT.var()))
    if w.m:
        NT = w.state(N)["N"]
        res.values["mean_N_T"] = [float(x) for x in NT.mean(0)]
    res.table("moments", [("var_W", float(w.times[j]), "", float(w.state(j)["W"].var()))
                          for j in range(N + 1)])
    if out is not None:
        res.values["ensemble_file"] = "ensemble.bin"
        res._ensemble = w


def cmd_solve_bsde(cfg, res: Result):
    data = _preset_data(cfg, "girsanov-drift")
    w = data["world"]
    if "xi" not in data:
        raise ConfigError("run.preset", "preset has no terminal value for a BSDE")
    sol = solve_bsde(data["xi"], data["f"], w, _engine(cfg, w))
    res.values.update(Y0=sol.Y0, residual=bsde_residual(sol, data["f"]),
                      unconverged_steps=sol.meta["unconverged_steps"])
    if "exact" in data:
        res.values["oracle_Y0"] = data["exact"]["Y0"]
        res.values["oracle_error"] = abs(sol.Y0 - data["exact"]["Y0"])
    res.table("Y", _exp_row(w, sol.Y, "E_Y"))


def cmd_solve_type1(cfg, res: Result):
    data = _preset_data(cfg, "ode-exp")
    w = data["world"]
    eng = _engine(cfg, w)
    method = _get(cfg, "solver.method", "picard")
    tol = _get(cfg, "solver.tol", 1e-10)
    f = data["f"]
    if method == "picard":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sol, gaps = picard_type1(data["Phi"], f, w, eng, tol=tol, max_iter=_get(cfg, "solver.max_iter", 100))
        res.converged = bool(sol.meta["converged"])
        res.values.update(iterations=sol.meta["iterations"], final_gap=sol.meta["final_gap"])
        res.table("picard", [("gap", float(k + 1), "", float(g)) for k, g in enumerate(gaps)])
    elif method == "noY":
        sol = solve_type1_noY(data["Phi"], f, w, eng)
    else:
        sol = solve_type1(data["Phi"], f, w, eng)
    Y0 = float(w.expect(sol.Y[0], 0))
    res.values.update(method=method, Y0=Y0, residual=upper_residual(sol, data["Phi"], f))
    if "exact" in data:
        res.values.update(oracle_Y0=data["exact"]["Y0"], oracle_error=abs(Y0 - data["exact"]["Y0"]))
    res.table("Y", _exp_row(w, sol.Y, "E_Y"))
    if w.kind == "tree" and w.N <= 6:
        complete_M(sol)
        res.values["m_solution_residual"] = m_solution_residual(sol)
        res.values["max_abs_M"] = max(float(np.max(np.abs(sol.M[j]))) for j in range(w.N))


def cmd_solve_type2(cfg, res: Result):
    data = _preset_data(cfg, "type2-linear")
    w = data["world"]
    sol = solve_type2(data["Phi"], data["f"], w, _engine(cfg, w), interval_plan=_get(cfg, "solver.plan"),
                      tol=_get(cfg, "solver.tol", 1e-14), max_iter=_get(cfg, "solver.max_iter", 200))
    res.values.update(Y0=float(w.expect(sol.Y[0], 0)), splits=sol.meta["splits"],
                      plan=[int(x) for x in sol.meta["plan"]],
                      upper_residual=upper_residual(sol, data["Phi"], data["f"]),
                      m_solution_residual=m_solution_residual(sol))
    res.table("Y", _exp_row(w, sol.Y, "E_Y"))


def cmd_sfie(cfg, res: Result):
    data = _preset_data(cfg, "lipschitz-standard")
    w = data["world"]
    R = _get(cfg, "solver.R", 0)
    S = _get(cfg, "solver.S", max(1, w.N // 2))
    if not 0 <= R < S <= w.N:
        raise ConfigError("solver.S", f"need 0 <= R < S <= {w.N}")
    eng = _engine(cfg, w)
    # Y(s) for s >= S comes from a full solve
    full = (solve_type2 if data["f"].two_sided else solve_type1)(data["Phi"], data["f"], w, eng)
    psi, _ = solve_sfie(data["Phi"], data["f"], R, S, w, eng, sol=full.copy())
    rows = [("E_psi", float(w.times[R + k]), float(w.times[S]), float(w.expect(psi[k], S)))
            for k in range(S - R)]
    res.values.update(R=R, S=S, mean_psi=[r[3] for r in rows])
    res.table("psi", rows)


def cmd_compare(cfg, res: Result):
    data = _preset_data(cfg, "sandwich")
    if not {"f1", "f2", "f_bar"} <= set(data):
        raise ConfigError("run.preset", "compare needs a preset with drivers f1 <= f_bar <= f2")
    w = data["world"]
    from .bsvie import SandwichError
    try:
        _, rep = monotone_picard(data["Phi1"], data["Phi2"], data["f1"], data["f2"], data["f_bar"], w,
                                 _engine(cfg, w), tol=_get(cfg, "solver.tol", 1e-12),
                                 max_iter=_get(cfg, "solver.max_iter", 100))
    except SandwichError as e:
        raise ConfigError("run.preset", str(e)) from None
    c1 = compare_solutions(rep["Y1"], rep["Y_bar"])
    c2 = compare_solutions(rep["Y_bar"], rep["Y2"])
    res.converged = bool(rep["limits_gap"] <= 1e-8)
    res.values.update(violations=c1["violations"] + c2["violations"], monotone=rep["monotone"],
                      iterations_down=rep["iterations_down"], iterations_up=rep["iterations_up"],
                      limits_gap=rep["limits_gap"])
    for name in ("Y1", "Y_bar", "Y2"):
        res.table("Y", _exp_row(w, rep[name], f"E_{name}"))


def cmd_partition(cfg, res: Result):
    data = _preset_data(cfg, "comparison-partition")
    w = data["world"]
    blocks = tuple(_get(cfg, "analysis.blocks", [k for k in (1, 2, 4, 8) if k <= w.N]))
    rep = partition_comparison(data["Phi1"], data["Phi2"], data["g1"], data["g2"], w, _engine(cfg, w),
                               h=data["h"], kappa=data["kappa"], block_counts=blocks)
    res.values.update(all_nonnegative=rep["all_nonnegative"], error_decreasing=rep["error_decreasing"],
                      violations=rep["comparison"]["violations"],
                      linearisation_consistency=rep["linearisation_consistency"])
    res.table("partition", [("error", float(r["blocks"]), "", float(r["error"])) for r in rep["runs"]]
              + [("min_Y_pi", float(r["blocks"]), "", float(r["min_Y_pi"])) for r in rep["runs"]])


def cmd_duality(cfg, res: Result):
    from .analysis import FSVIECoefficients
    data = _preset_data(cfg, "duality-linear")
    w = data["world"]
    draws = _get(cfg, "analysis.draws", 1)
    rng = np.random.default_rng(_get(cfg, "run.seed", 0))
    gaps = []
    rows = []
    for d in range(draws):
        coeff = data["coeff"] if d == 0 else FSVIECoefficients.random(w, rng, data["options"].get("bound", 1.0))
        r = duality_gap(data["Psi"], data["Phi"], coeff, w, _engine(cfg, w),
                        continuous=_get(cfg, "analysis.continuous", False))
        gaps.append(abs(r["gap"]))
        rows.append(("gap", float(d), "", float(r["gap"])))
        rows.append(("se", float(d), "", float(r["se"])))
        if d == 0:
            res.values.update(lhs=r["lhs"], rhs=r["rhs"], se=r["se"])
            if "continuous_gap" in r:
                res.values["continuous_gap"] = r["continuous_gap"]
    res.values.update(draws=draws, max_abs_gap=max(gaps))
    res.table("duality", rows)


def cmd_regularity(cfg, res: Result):
    data = _preset_data(cfg, "holder-regularity")
    w = data["world"]
    eng = _engine(cfg, w)
    sol = solve_type1(data["Phi"], data["f"], w, eng)
    p = _get(cfg, "analysis.p", data["p"])
    try:
        est = regularity_estimate(sol.Y, w, p=p, alpha=data["alpha"])
    except ValueError as e:
        if w.kind != "tree":
            raise ConfigError("world.steps", str(e)) from None
        # small trees: too few scales for a fit, the jump check still applies
        res.values["exponent"] = None
    else:
        res.values.update({k: v for k, v in est.items() if not isinstance(v, (list, np.ndarray))})
        res.table("moments", [("moment", float(h), "", float(m)) for h, m in zip(est["h"], est["moments"])])
    if w.kind == "tree":
        cr = cadlag_report(sol.Y, w, eng, c=_get(cfg, "analysis.jump_c", 0.5))
        res.values.update(jumps=cr["jumps"], unmatched=cr["unmatched"], jump_times=cr["jump_times"], cadlag_ok=cr["ok"])


def cmd_norms(cfg, res: Result):
    data = _preset_data(cfg, "lipschitz-standard")
    w = data["world"]
    sol = solve_type1(data["Phi"], data["f"], w, _engine(cfg, w))
    complete_M(sol)
    rep = norm_Sp(sol, p=_get(cfg, "analysis.p", 2.0), beta=_get(cfg, "analysis.beta"))
    res.values.update({k: float(v) for k, v in rep.components.items()})
    res.values["total"] = float(rep.total)
    res.table("norms", [(k, "", "", float(v)) for k, v in sorted(rep.components.items())])


def cmd_list_presets(cfg, res: Result):
    res.values["presets"] = list_presets()


HANDLERS = {
    "constants": cmd_constants, "min-beta": cmd_min_beta, "solve-bsde": cmd_solve_bsde,
    "solve-type1": cmd_solve_type1, "solve-type2": cmd_solve_type2, "sfie": cmd_sfie,
    "compare": cmd_compare, "partition-compare": cmd_partition, "duality": cmd_duality,
    "regularity": cmd_regularity, "norms": cmd_norms, "list-presets": cmd_list_presets,
}


# ---------------------------------------------------------------- output


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    return x


def write_run(out: Path, cfg: dict, res: Result, run_id: str, timings: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(echo_config(cfg))
    (out / "results.json").write_text(json.dumps(_clean(res.values), sort_keys=True, indent=2) + "\n")
    tdir = out / "tables"
    tdir.mkdir(exist_ok=True)
    for name, rows in sorted(res.tables.items()):
        with open(tdir / f"{name}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["run_id", "statistic", "t", "s", "value"])
            for stat, t, s, v in rows:
                wr.writerow([run_id, stat, t if t == "" else repr(float(t)),
                             s if s == "" else repr(float(s)), repr(float(v))])
    ens = getattr(res, "_ensemble", None)
    if ens is not None:
        ens.save(out / "ensemble.bin")
    meta = {"version": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "seed": cfg.get(("run", "seed")), "run_id": run_id, "converged": res.converged,
            "timings": timings}
    (out / "meta.json").write_text(json.dumps(_clean(meta), sort_keys=True, indent=2) + "\n")


def execute(cfg: dict, out: Path | None = None, stream=None) -> int:
    stream = stream or sys.stdout
    command = cfg.get(("run", "command"))
    if command is None:
        raise ConfigError("run.command", "required")
    if ("run", "seed") not in cfg and os.environ.get("BSVIE_SEED"):
        try:
            cfg[("run", "seed")] = int(os.environ["BSVIE_SEED"])
        except ValueError:
            raise ConfigError("BSVIE_SEED", "must be an integer") from None
    run_id = cfg.get(("run", "run_id")) or hashlib.sha256(echo_config(cfg).encode()).hexdigest()[:12]
    res = Result()
    t0 = time.perf_counter()
    try:
        if command == "simulate":
            cmd_simulate(cfg, res, out)
        else:
            HANDLERS[command](cfg, res)
    except C.ConvergenceError as e:
        res.converged = False
        res.values["error"] = str(e)
    timings = {"total_s": time.perf_counter() - t0}
    res.values["converged"] = res.converged
    res.values["command"] = command
    stream.write(json.dumps(_clean(res.values), sort_keys=True) + "\n")
    if out is not None:
        write_run(out, cfg, res, run_id, timings)
    return EXIT_OK if res.converged else EXIT_NONCONV


# ---------------------------------------------------------------- argparse

FLAG_KEYS = {
    "preset": "run.preset", "seed": "run.seed", "kind": "world.kind", "T": "world.T",
    "steps": "world.steps", "paths": "world.n_paths", "beta": "analysis.beta",
    "frakf": "analysis.frakf", "condition": "analysis.condition", "p": "analysis.p",
    "tol": "solver.tol", "max_iter": "solver.max_iter", "engine": "solver.engine",
    "method": "solver.method", "draws": "analysis.draws",
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bsvie-lab", description="Discrete BSVIE solvers and diagnostics.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--out", help="write a run directory here")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        for flag in FLAG_KEYS:
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)

    for name in COMMANDS:
        common(sub.add_parser(name))
    rp = sub.add_parser("run", help="run a config file (command taken from [run] command)")
    rp.add_argument("config")
    rp.add_argument("--out")
    return ap


def resolve(args) -> dict:
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    if args.command != "run":
        cfg[("run", "command")] = args.command
        for flag, key in FLAG_KEYS.items():
            raw = getattr(args, flag, None)
            if raw is not None:
                sec, k = key.split(".")
                cfg[(sec, k)] = parse_value(sec, k, raw)
        for item in args.set:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(item, "expected SECTION.KEY=VALUE")
            key, raw = item.split("=", 1)
            sec, k = key.strip().split(".", 1)
            cfg[(sec, k)] = parse_value(sec, k, raw.strip())
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        out = Path(args.out) if args.out else None
        if out is not None and (out / "results.json").exists():
            raise ConfigError("--out", f"{out} already holds a run")
        return execute(cfg, out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
