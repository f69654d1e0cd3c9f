"""Command-line front end.

Subcommands: ``run`` (solve one problem and write CSV/figure artifacts),
``certify`` (acuteness and monotonicity certificates only), ``study``
(convergence study over a mesh hierarchy), ``dump-operators`` (triplet
dumps of the assembled matrices).

Configuration can come from flags, from an INI-style config file with
sections [problem], [mesh] and [run], or from the metadata.json written by
a previous run (which makes runs reproducible from their metadata alone).
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, asdict

import numpy as np

from . import __version__
from .assembly import assemble, dump_operators
from .experiments import build_experiment, Experiment
from .mesh import load_mesh, certify_acuteness
from .problem import validate_problem
from .solver import solve_parabolic, write_solution_csv, SolverError
from .verify import check_monotone_structure, convergence_study, error_norms


class ConfigError(ValueError):
    pass


_PROBLEM_IDS = ("experiment1", "experiment2", "experiment3a", "experiment3b",
                "experiment4", "heat", "manufactured")


@dataclass
class RunConfig:
    """Resolved options of one invocation."""

    problem: str = "experiment1"
    mesh_file: str | None = None
    level: int | None = None
    dx: float | None = None
    h: float | None = None
    tol: float = 1e-12
    controls: int | None = None
    splitting: str | None = None
    levels: int = 4
    steps: str = "final"
    out: str = "out"
    figures: bool = True

    def validate(self):
        key = self.problem.lower()
        if key not in _PROBLEM_IDS:
            raise ConfigError(f"unknown problem {self.problem!r}; "
                              f"choose from {', '.join(_PROBLEM_IDS)}")
        if self.h is not None and self.h <= 0:
            raise ConfigError(f"nonpositive time step h = {self.h:g}")
        if self.tol <= 0:
            raise ConfigError("tolerance must be positive")
        if self.dx is not None and self.dx <= 0:
            raise ConfigError("dx must be positive")
        if self.level is not None and self.level < 0:
            raise ConfigError("level must be non-negative")
        if self.levels < 1:
            raise ConfigError("study needs at least one level")
        if self.splitting not in (None, "implicit", "imex"):
            raise ConfigError("splitting must be 'implicit' or 'imex'")
        if self.steps not in ("final", "all"):
            raise ConfigError("steps must be 'final' or 'all'")
        if self.mesh_file is not None and not os.path.exists(self.mesh_file):
            raise ConfigError(f"mesh file {self.mesh_file!r} does not exist")
        if self.controls is not None and self.controls < 1:
            raise ConfigError("control sample size must be at least 1")
        return self


def _load_config_file(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return data.get("config", data)
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as ex:
        raise ConfigError(f"config parse error in {path}: {ex}") from ex
    out = {}
    mapping = {
        ("problem", "id"): ("problem", str),
        ("mesh", "source"): ("mesh_file", str),
        ("mesh", "level"): ("level", int),
        ("mesh", "dx"): ("dx", float),
        ("run", "h"): ("h", float),
        ("run", "tol"): ("tol", float),
        ("run", "controls"): ("controls", int),
        ("run", "splitting"): ("splitting", str),
        ("run", "levels"): ("levels", int),
        ("run", "steps"): ("steps", str),
        ("run", "out"): ("out", str),
        ("run", "figures"): ("figures", lambda s: s.lower() in ("1", "true", "yes")),
    }
    for (section, key), (field, conv) in mapping.items():
        if parser.has_option(section, key):
            try:
                out[field] = conv(parser.get(section, key))
            except ValueError as ex:
                raise ConfigError(
                    f"bad value for [{section}] {key} in {path}: {ex}") from ex
    return out


def _resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(_load_config_file(args.config))
    for field in ("problem", "mesh_file", "level", "dx", "h", "tol", "controls",
                  "splitting", "levels", "steps", "out", "figures"):
        v = getattr(args, field, None)
        if v is not None:
            values[field] = v
    cfg = RunConfig(**values)
    return cfg.validate()


def _experiment_for(cfg: RunConfig) -> Experiment:
    key = cfg.problem.lower()
    if key == "manufactured":
        key = "heat"
    exp = build_experiment(key, n_controls=cfg.controls, splitting=cfg.splitting)
    if cfg.mesh_file is not None:
        if key != "heat":
            raise ConfigError(
                "external mesh files are supported for the manufactured (heat) "
                "problem only; the experiments fix their own boundary regions")
        exp.base_mesh = load_mesh(cfg.mesh_file)
        exp._meshes.clear()
    return exp


def _pick_mesh(exp: Experiment, cfg: RunConfig):
    if cfg.dx is not None:
        return exp.mesh_for_dx(cfg.dx)
    level = cfg.level if cfg.level is not None else 0
    return exp.mesh(level), level


def _choose_h(cfg: RunConfig, ops, T: float) -> float:
    if cfg.h is not None:
        K = round(T / cfg.h)
        if K < 1 or abs(K * cfg.h - T) > 1e-9 * max(1.0, T):
            raise ConfigError(f"h = {cfg.h:g} does not divide the horizon T = {T:g}")
        if cfg.h > ops.h_max:
            raise ConfigError(f"h = {cfg.h:g} exceeds the monotone bound "
                              f"h_max = {ops.h_max:g}")
        return cfg.h
    target = min(ops.mesh.dx, ops.h_max)
    return T / int(np.ceil(T / target))


def _write_metadata(path, cfg: RunConfig, extra: dict) -> None:
    payload = {"config": asdict(cfg), "version": __version__}
    payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    os.makedirs(cfg.out, exist_ok=True)
    exp = _experiment_for(cfg)
    mesh, level = _pick_mesh(exp, cfg)
    report = validate_problem(exp.problem, exp.splitting, mesh)
    if not report.passed:
        print(report, file=sys.stderr)
        return 1
    ops = assemble(mesh, exp.problem, exp.splitting, validate=False)
    h = _choose_h(cfg, ops, exp.problem.T)
    cert = check_monotone_structure(ops, h)
    sol = solve_parabolic(mesh, exp.problem, exp.splitting, h, tol=cfg.tol, ops=ops)

    artifacts = []
    steps = range(sol.n_steps + 1) if cfg.steps == "all" else [0]
    for k in steps:
        path = os.path.join(cfg.out, f"solution_step{k:04d}.csv")
        write_solution_csv(sol, path, k)
        artifacts.append(path)
    with open(os.path.join(cfg.out, "certificate.txt"), "w", encoding="utf-8") as fh:
        acute = mesh.acuteness()
        fh.write(f"acuteness: {'PASS' if acute.ok else 'FAIL'} "
                 f"sin(theta)={acute.sin_theta:.6g}\n{cert}\n")
    with open(os.path.join(cfg.out, "certificate.json"), "w", encoding="utf-8") as fh:
        json.dump({"acuteness_ok": bool(mesh.acuteness().ok),
                   "monotone_ok": bool(cert.ok),
                   "sin_theta": float(mesh.acuteness().sin_theta),
                   "h": h, "h_max": float(ops.h_max)}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    errors = None
    if exp.exact is not None:
        errs = error_norms(mesh, sol.values[0], exp.exact, t=0.0)
        errors = {"Linf": errs.linf, "L2": errs.l2, "H1": errs.h1,
                  "H1semi": errs.h1_semi}
        with open(os.path.join(cfg.out, "errors.csv"), "w", encoding="utf-8") as fh:
            fh.write("dx,h,Linf,L2,H1,rate_Linf,rate_L2,rate_H1,H1semi\n")
            fh.write(f"{mesh.dx!r},{h!r},{errs.linf!r},{errs.l2!r},{errs.h1!r}"
                     f",,,,{errs.h1_semi!r}\n")

    if cfg.figures:
        from .plots import plot_solution
        fig_path = os.path.join(cfg.out, "solution.png")
        plot_solution(mesh, sol.values[0], fig_path,
                      title=f"{exp.name} at t=0 (dx={mesh.dx:.4g})")
        artifacts.append(fig_path)

    meta = {
        "problem": exp.name, "level": level, "dx": mesh.dx, "h": h,
        "h_max": float(ops.h_max), "mesh_hash": mesh.hash(),
        "sin_theta": float(ops.sin_theta),
        "controls": [float(a) for a in ops.controls],
        "splitting": exp.splitting.describe(),
        "steps": sol.n_steps,
        "max_howard_iterations": sol.max_howard_iterations(),
        "monotone_certificate": bool(cert.ok),
        "errors_at_t0": errors,
        "notes": exp.notes,
    }
    _write_metadata(os.path.join(cfg.out, "metadata.json"), cfg, meta)
    print(f"{exp.name}: {mesh.n_nodes} nodes, {sol.n_steps} steps, "
          f"max Howard iterations {sol.max_howard_iterations()}")
    if errors:
        print(f"errors at t=0: Linf={errors['Linf']:.4e} "
              f"L2={errors['L2']:.4e} H1={errors['H1']:.4e}")
    print(f"artifacts in {cfg.out}/")
    return 0 if cert.ok else 1


def cmd_certify(args) -> int:
    cfg = _resolve_config(args)
    os.makedirs(cfg.out, exist_ok=True)
    exp = _experiment_for(cfg)
    mesh, level = _pick_mesh(exp, cfg)
    acute = certify_acuteness(mesh)
    report = validate_problem(exp.problem, exp.splitting, mesh)
    ops = assemble(mesh, exp.problem, exp.splitting, validate=False)
    h = _choose_h(cfg, ops, exp.problem.T)
    cert = check_monotone_structure(ops, h)
    ok = acute.ok and report.passed and cert.ok
    lines = [
        f"mesh: {mesh!r}",
        f"acuteness: {'PASS' if acute.ok else 'FAIL'} sin(theta)={acute.sin_theta:.6g}"
        f" theta={np.degrees(acute.theta):.3f} deg",
        str(report),
        str(cert),
        f"h_max = {ops.h_max:g} (certified at h = {h:g})",
    ]
    text = "\n".join(lines) + "\n"
    with open(os.path.join(cfg.out, "certificate.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(cfg.out, "certificate.json"), "w", encoding="utf-8") as fh:
        json.dump({"acuteness_ok": bool(acute.ok), "validation_ok": report.passed,
                   "monotone_ok": bool(cert.ok), "h": h,
                   "h_max": float(ops.h_max),
                   "sin_theta": float(acute.sin_theta)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(text, end="")
    return 0 if ok else 1


def cmd_study(args) -> int:
    cfg = _resolve_config(args)
    os.makedirs(cfg.out, exist_ok=True)
    exp = _experiment_for(cfg)
    if cfg.level:
        base = exp.mesh(cfg.level)
        shifted = Experiment(name=exp.name, problem=exp.problem,
                             splitting=exp.splitting, base_mesh=base,
                             exact=exp.exact, notes=exp.notes)
        exp = shifted
    csv_path = os.path.join(cfg.out, "errors.csv")
    report = convergence_study(exp, cfg.levels, h0=cfg.h, tol=cfg.tol,
                               csv_path=csv_path)
    print(report)
    if cfg.figures:
        from .plots import plot_convergence
        plot_convergence(report, os.path.join(cfg.out, "convergence.png"))
    meta = {
        "problem": exp.name,
        "levels": [{"dx": r.dx, "h": r.h, "Linf": r.errors.linf,
                    "L2": r.errors.l2, "H1": r.errors.h1} for r in report.rows],
        "rates": {k: report.rates(k) for k in ("linf", "l2", "h1")},
        "notes": exp.notes,
    }
    _write_metadata(os.path.join(cfg.out, "metadata.json"), cfg, meta)
    print(f"artifacts in {cfg.out}/")
    return 0


def cmd_dump_operators(args) -> int:
    cfg = _resolve_config(args)
    os.makedirs(cfg.out, exist_ok=True)
    exp = _experiment_for(cfg)
    mesh, level = _pick_mesh(exp, cfg)
    ops = assemble(mesh, exp.problem, exp.splitting)
    paths = dump_operators(ops, cfg.out)
    meta = {"problem": exp.name, "level": level, "dx": mesh.dx,
            "mesh_hash": mesh.hash(), "files": [os.path.basename(p) for p in paths]}
    _write_metadata(os.path.join(cfg.out, "metadata.json"), cfg, meta)
    print(f"wrote {len(paths)} operator dumps to {cfg.out}/")
    return 0


def _add_common(p):
    p.add_argument("problem", nargs="?", default=None,
                   help="problem id (experiment1..4, experiment3a/3b, heat) "
                        "or use --config")
    p.add_argument("--config", help="INI config file or metadata.json of a past run")
    p.add_argument("--mesh", dest="mesh_file", help="external mesh file (heat only)")
    p.add_argument("--level", type=int, help="refinement level of the built-in mesh")
    p.add_argument("--dx", type=float, help="pick the hierarchy level closest to dx")
    p.add_argument("--h", type=float, help="time step (must divide the horizon)")
    p.add_argument("--tol", type=float, help="Howard residual tolerance")
    p.add_argument("--controls", type=int, help="control sample size (interval sets)")
    p.add_argument("--splitting", choices=("implicit", "imex"),
                   help="force fully implicit or the experiment's IMEX scheme")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--no-figures", dest="figures", action="store_false",
                   default=None, help="skip figure rendering")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hjbfem",
        description="Monotone P1 FEM solver for HJB equations with mixed "
                    "boundary conditions")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve a problem and write artifacts")
    _add_common(p_run)
    p_run.add_argument("--steps", choices=("final", "all"),
                       help="which time steps to dump as CSV")

    p_cert = sub.add_parser("certify", help="monotonicity certificates only")
    _add_common(p_cert)

    p_study = sub.add_parser("study", help="convergence study")
    _add_common(p_study)
    p_study.add_argument("--levels", type=int, help="number of refinement levels")

    p_dump = sub.add_parser("dump-operators", help="write operator triplet dumps")
    _add_common(p_dump)

    args = parser.parse_args(argv)
    if getattr(args, "problem", None) is None and not getattr(args, "config", None):
        parser.error("a problem id or --config is required")

    handlers = {"run": cmd_run, "certify": cmd_certify, "study": cmd_study,
                "dump-operators": cmd_dump_operators}
    try:
        return handlers[args.command](args)
    except (ConfigError, SolverError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
