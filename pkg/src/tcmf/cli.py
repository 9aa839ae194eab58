"""Command-line entry point: ``tcmf <subcommand> --config scenario.json``.

Exit codes: 0 ok, 2 configuration error, 3 no convergence, 4 explosion.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, _output
from .control import (
    ControlPath,
    assemble_adjoint,
    check_necessary,
    check_sufficient,
    estimate_objective,
    solve_adjoint,
    solve_controlled_forward,
)
from .errors import ExplosionError, InvalidArgument, RegressionError
from .mfbsde import LinearCoefficients, solve_linear
from .mfsde import picard_law_solve
from .noise import (
    IntensityModel,
    LevyGrid,
    MarkFunction,
    TimeGrid,
    discretize_levy,
    integrate,
    lambda_seminorm,
)
from .presets import scenario
from .regression import RegressionBasis
from .vasicek import VasicekScenario, chaos_study, run_example

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_EXPLOSION = 0, 2, 3, 4

DEFAULTS = {
    "grid": {"T": 1.0, "n_steps": 100},
    "x0": 1.0,
    "intensity": {"kind": "constant", "params": {"lamB": 1.0, "lamH": 0.0}, "iid": False},
    "levy": {"family": "none", "M": 1, "eps": 0.0, "params": {}},
    "coefficients": {"name": "vasicek", "params": {}},
    "costs": {"name": "vasicek", "params": {}},
    "control": {"kind": "constant", "value": 0.0, "perturb": 0.0, "feedback_iterations": 3},
    "bsde": {"A": 0.0, "B": 0.0, "C": 0.0, "D": 0.0, "E": 0.0,
             "terminal": {"kind": "constant", "value": 1.0, "slope": 0.0}},
    "solver": {"N": 1000, "tol": 1e-10, "max_iter": 50, "basis_degree": 2, "ridge": 1e-8,
               "bsde_tol": 1e-10, "u_grid": 101},
    "chaos": {"N_list": [100, 1000, 10000], "replications": 5, "N_ref": 100000},
    "seeds": {"master": 0},
    "output": {"dir": "tcmf-out", "formats": ["csv", "json"], "particles": 100},
}


class ConfigError(Exception):
    pass


class NonConvergence(Exception):
    pass


def _schema() -> dict:
    return json.loads(resources.files("tcmf").joinpath("config_schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("params",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None) -> tuple[dict, str]:
    """Validated config merged over the defaults, plus the raw text hashed
    into the manifest."""
    text = "{}"
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(raw, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    return _merge(DEFAULTS, raw), text


# ---------------------------------------------------------------------------
# building blocks from the config


def _grid(cfg) -> TimeGrid:
    return TimeGrid(float(cfg["grid"]["T"]), int(cfg["grid"]["n_steps"]))


def _intensity(cfg) -> IntensityModel:
    c = cfg["intensity"]
    if c["kind"] == "null":
        return IntensityModel.constant(0.0, 0.0)
    if c["kind"] == "constant":
        p = {"lamB": 1.0, "lamH": 0.0, **c.get("params", {})}
        return IntensityModel.constant(p["lamB"], p["lamH"])
    p = c.get("params", {})
    try:
        return IntensityModel.square_root(p["init"], p["rev"], p["level"], p["vol"],
                                          p.get("scaleB", 1.0), p.get("scaleH", 1.0))
    except KeyError as exc:
        raise ConfigError(f"sqrt intensity needs parameter {exc}") from None


def _levy(cfg) -> LevyGrid:
    c = cfg["levy"]
    if c["family"] == "none":
        return LevyGrid.empty()
    return discretize_levy(c["family"], int(c.get("M", 1)), float(c.get("eps", 0.0)), **c.get("params", {}))


def _U(cfg) -> tuple:
    c = cfg["control"]
    if "u_min" in c and "u_max" in c:
        return (float(c["u_min"]), float(c["u_max"]))
    p = cfg["coefficients"]["params"]
    theta = float(p.get("theta", 1.0))
    return (float(c.get("u_min", 0.0)),
            float(c.get("u_max", 10.0 * abs(cfg["x0"]) * theta * cfg["grid"]["T"])))


def _scenario(cfg, seed):
    return scenario(cfg["coefficients"]["name"], cfg["costs"]["name"], grid=_grid(cfg),
                    intensity=_intensity(cfg), levy=_levy(cfg), x0=float(cfg["x0"]),
                    N=int(cfg["solver"]["N"]), U=_U(cfg), seed=seed,
                    dyn_params=cfg["coefficients"]["params"], cost_params=cfg["costs"]["params"],
                    iid_intensity=bool(cfg["intensity"].get("iid", False)))


def _basis(cfg) -> RegressionBasis:
    return RegressionBasis(int(cfg["solver"]["basis_degree"]), float(cfg["solver"]["ridge"]))


def _vasicek(cfg, seed) -> VasicekScenario:
    if cfg["coefficients"]["name"] != "vasicek":
        raise ConfigError("this subcommand needs the vasicek coefficient preset")
    p = cfg["coefficients"]["params"]
    unknown = set(p) - {"theta", "sigma", "sigma_jump"}
    if unknown:
        raise ConfigError(f"unknown vasicek parameters {sorted(unknown)}")
    return VasicekScenario(theta=float(p.get("theta", 1.0)), sigma=float(p.get("sigma", 0.0)),
                           sigma_jump=float(p.get("sigma_jump", 0.0)), r0=float(cfg["x0"]),
                           intensity=_intensity(cfg), levy=_levy(cfg), T=float(cfg["grid"]["T"]),
                           n_steps=int(cfg["grid"]["n_steps"]), u_max=_U(cfg)[1], N=int(cfg["solver"]["N"]),
                           seed=seed, iid_intensity=bool(cfg["intensity"].get("iid", False)))


# ---------------------------------------------------------------------------
# manifest and output


@dataclass
class RunManifest:
    command: str
    config_sha256: str
    version: str
    seed: int
    threads: int
    stages: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    exit_code: int = 0

    def stage(self, name: str):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.stages[name] = time.perf_counter() - self.t0
                return False

        return _Timer()

    def to_dict(self) -> dict:
        return {"command": self.command, "config_sha256": self.config_sha256, "version": self.version,
                "master_seed": self.seed, "threads": self.threads, "stage_seconds": self.stages,
                "wall_clock_seconds": self.wall_clock, "exit_code": self.exit_code}


class Out:
    def __init__(self, directory: Path, formats):
        self.dir = directory
        self.formats = set(formats)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written = []

    def csv(self, name: str, writer) -> None:
        if "csv" in self.formats:
            path = self.dir / name
            writer(path)
            self.written.append(name)

    def json(self, name: str, obj) -> None:
        if "json" in self.formats:
            _output.write_json(obj, self.dir / name)
            self.written.append(name)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_output.fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate_noise(cfg, out: Out, seed: int, threads: int, args) -> int:
    s = _scenario(cfg, seed)
    noise = s.noise()
    cap = min(int(cfg["output"]["particles"]), noise.n_paths)
    S = noise.levy.M

    def write(path):
        rows = []
        knots = noise.grid.knots
        for p in range(cap):
            for i in range(noise.grid.n_steps):
                rows.append([p, i, float(knots[i]), float(noise.dG[p, i])] + [float(v) for v in noise.dJ[p, i]])
        _write_rows(path, ["particle", "step", "t", "dG"] + [f"dJ_{k + 1}" for k in range(S)], rows)

    out.csv("noise.csv", write)
    ones = MarkFunction(1.0, np.ones(S))
    I = integrate(ones, noise)
    lamB, lamH = noise.path_intensity()
    norm = np.sum(lambda_seminorm(ones, lamB[:, :-1], lamH[:, :-1], noise.levy) ** 2, axis=1) * noise.grid.dt
    denom = float(np.mean(norm))
    if denom > 0:
        ratio = float(np.mean(I ** 2) / denom)
        se = float(np.std(I ** 2 - ratio * norm, ddof=1) / np.sqrt(I.size) / denom)
    else:
        ratio, se = float("nan"), float("nan")
    out.json("isometry.json", {"integrand": "one", "ratio": ratio, "se": se,
                               "within_5se": bool(abs(ratio - 1) <= 5 * se) if denom > 0 else None,
                               "n_paths": noise.n_paths})
    return EXIT_OK


def cmd_solve_mfsde(cfg, out: Out, seed: int, threads: int, args) -> int:
    s = _scenario(cfg, seed)
    c = cfg["control"]
    u = ControlPath.constant(float(c["value"]), s.U, s.grid.n_knots)
    Q, ens, diag = picard_law_solve(s.dynamics.coefficient_set(), s.x0, s.noise(), tol=float(cfg["solver"]["tol"]),
                                    max_iter=int(cfg["solver"]["max_iter"]), u=u, threads=threads)
    out.csv("law_flow.csv", Q.to_csv)
    cap = min(int(cfg["output"]["particles"]), ens.N)
    out.csv("ensemble.csv", lambda p: _write_rows(
        p, ["particle", "knot", "value"],
        [[k, i, float(v)] for k in range(cap) for i, v in enumerate(ens.paths[k])]))
    out.csv("mean.csv", lambda p: _write_rows(
        p, ["knot", "t", "mean"], [[i, float(t), float(m)] for i, (t, m) in enumerate(zip(s.grid.knots, ens.mean()))]))
    out.json("picard_trace.json", {"iterations": diag.iterations, "converged": diag.converged, "tol": diag.tol,
                                   "distances": diag.distances, "ratios": diag.ratios})
    return EXIT_OK if diag.converged else EXIT_NONCONVERGENCE


def _terminal(cfg, ens) -> np.ndarray:
    t = cfg["bsde"]["terminal"]
    if t["kind"] == "constant":
        return np.full(ens.N, float(t.get("value", 0.0)))
    if t["kind"] == "affine-state":
        return float(t.get("value", 0.0)) + float(t.get("slope", 1.0)) * ens.paths[:, -1]
    return np.sum(ens.noise.dG, axis=1)


def cmd_solve_mfbsde(cfg, out: Out, seed: int, threads: int, args) -> int:
    s = _scenario(cfg, seed)
    u = ControlPath.constant(float(cfg["control"]["value"]), s.U, s.grid.n_knots)
    ens = solve_controlled_forward(s, u, s.noise(), threads=threads)
    cp = solve_controlled_forward(s, u, s.copy_noise(), threads=threads)
    b = cfg["bsde"]
    co = LinearCoefficients(A=b["A"], B=b["B"], C=b["C"], D=b["D"], E=b["E"])
    sol = solve_linear(co, _terminal(cfg, ens), ens, cp, _basis(cfg), beta=cfg["solver"].get("beta"),
                       tol=float(cfg["solver"]["bsde_tol"]), max_iter=int(cfg["solver"]["max_iter"]))
    cap = min(int(cfg["output"]["particles"]), ens.N)

    def write(path):
        n = s.grid.n_steps
        S = sol.Z.shape[-1]
        rows = []
        for p in range(cap):
            for i in range(n + 1):
                z = sol.Z[p, i] if i < n else np.zeros(S)
                rows.append([p, i, float(sol.Y[p, i])] + [float(v) for v in z])
        _write_rows(path, ["particle", "knot", "Y", "Z0"] + [f"Z{k}" for k in range(1, S)], rows)

    out.csv("bsde.csv", write)
    out.csv("bsde_mean.csv", lambda p: _write_rows(
        p, ["knot", "t", "mean_Y"], [[i, float(t), float(m)] for i, (t, m) in enumerate(zip(s.grid.knots, sol.Y.mean(0)))]))
    out.json("bsde_trace.json", {"beta": sol.beta, "iterations": sol.iterations, "converged": sol.converged,
                                 "beta_norm_differences": sol.trace, "ratios": sol.ratios,
                                 "terminal_residual": sol.terminal_residual})
    return EXIT_OK if sol.converged else EXIT_NONCONVERGENCE


def cmd_check_maxprinciple(cfg, out: Out, seed: int, threads: int, args) -> int:
    c = cfg["control"]
    G = int(cfg["solver"]["u_grid"])
    if c["kind"] == "candidate":
        vs = _vasicek(cfg, seed)
        rep = run_example(vs, n_fb_iter=int(c["feedback_iterations"]), basis=_basis(cfg), n_perturb=0,
                          G=G, threads=threads)
        if float(c.get("perturb", 0.0)) == 0.0:
            out.json("necessary.json", rep.necessary)
            out.json("sufficient.json", rep.sufficient)
            return EXIT_OK
        u0 = np.clip(rep.u_hat + float(c["perturb"]), 0.0, vs.U[1])
        s = _scenario(cfg, seed)
        u = ControlPath.deterministic(u0, s.U)
    else:
        s = _scenario(cfg, seed)
        value = np.clip(float(c["value"]) + float(c.get("perturb", 0.0)), *s.U)
        u = ControlPath.constant(value, s.U, s.grid.n_knots)
    ens = solve_controlled_forward(s, u, s.noise(), threads=threads)
    cp = solve_controlled_forward(s, u, s.copy_noise(), threads=threads)
    adj = solve_adjoint(assemble_adjoint(s, ens, cp), ens, cp, _basis(cfg), tol=float(cfg["solver"]["bsde_tol"]))
    nec = check_necessary(s, ens, adj, G=G)
    suf = check_sufficient(s, ens, adj, G=G, seed=seed)
    out.json("necessary.json", nec.to_dict())
    out.json("sufficient.json", suf.to_dict())
    out.csv("dH_du.csv", nec.write_dH_csv)
    out.json("objective.json", {"J": estimate_objective(s, ens)})
    return EXIT_OK if adj.bsde.converged else EXIT_NONCONVERGENCE


def cmd_run_vasicek(cfg, out: Out, seed: int, threads: int, args) -> int:
    vs = _vasicek(cfg, seed)
    rep = run_example(vs, n_fb_iter=int(cfg["control"]["feedback_iterations"]), basis=_basis(cfg),
                      G=int(cfg["solver"]["u_grid"]), threads=threads)
    out.json("report.json", rep.to_dict())
    out.csv("timeseries.csv", rep.to_csv)
    return EXIT_OK


def cmd_chaos_study(cfg, out: Out, seed: int, threads: int, args) -> int:
    vs = _vasicek(cfg, seed)
    ch = cfg["chaos"]
    res = chaos_study(vs, ch["N_list"], int(ch["replications"]), int(ch["N_ref"]),
                      paper_averaging=args.paper_averaging, threads=threads)
    out.csv("chaos.csv", res.to_csv)
    out.json("chaos.json", {"rows": [list(r) for r in res.rows], "slope": res.slope,
                            "averaging": "1/sqrt(N)" if args.paper_averaging else "1/N"})
    return EXIT_OK


COMMANDS = {
    "simulate-noise": cmd_simulate_noise,
    "solve-mfsde": cmd_solve_mfsde,
    "solve-mfbsde": cmd_solve_mfbsde,
    "check-maxprinciple": cmd_check_maxprinciple,
    "run-vasicek": cmd_run_vasicek,
    "chaos-study": cmd_chaos_study,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcmf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tcmf {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="scenario JSON (defaults apply to missing keys)")
        sp.add_argument("--seed", type=int, help="master seed, overrides seeds.master")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        sp.add_argument("--out", help="output directory, overrides output.dir")
        sp.add_argument("--paper-averaging", action="store_true",
                        help="couple the N-sector system through sum/sqrt(N) instead of the mean")
        sp.add_argument("--format", choices=["csv", "json"], help="emit only this format")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg, text = load_config(args.config)
        seed = int(cfg["seeds"]["master"] if args.seed is None else args.seed)
        if seed < 0:
            raise ConfigError("seed must be nonnegative")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        directory = Path(args.out or cfg["output"]["dir"])
        formats = [args.format] if args.format else cfg["output"]["formats"]
    except ConfigError as exc:
        print(f"tcmf: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = RunManifest(args.command, hashlib.sha256(text.encode("utf-8")).hexdigest(), __version__,
                           seed, args.threads)
    out = Out(directory, formats)
    try:
        with manifest.stage(args.command):
            code = COMMANDS[args.command](cfg, out, seed, args.threads, args)
    except (ConfigError, InvalidArgument, RegressionError) as exc:
        print(f"tcmf: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except ExplosionError as exc:
        print(f"tcmf: {exc}", file=sys.stderr)
        code = EXIT_EXPLOSION
    if code == EXIT_NONCONVERGENCE:
        print("tcmf: iteration did not converge", file=sys.stderr)
    manifest.wall_clock = time.perf_counter() - t0
    manifest.exit_code = code
    _output.write_json(manifest.to_dict(), directory / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
