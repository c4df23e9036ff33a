"""Batch front-end: scenario configs in, CSV and JSON reports out.

The five subcommands mirror the library layers.  ``constants`` prints the
closed-form report for a model, ``simulate`` and ``stabilize`` run the time
integrator (the latter insisting on boundary feedback and fitting the decay),
``verify`` replays a homogeneous run through the identity and inequality
checks, and ``control`` synthesizes a null control and certifies it with a
fresh forward run.  General steering targets reduce to null control: the
target is propagated backward through the free dynamics and the difference
data is controlled to rest, so the same boundary input drives the original
data onto the target.

Configs are TOML.  A file holds either one scenario at the top level or a
``[[scenarios]]`` array; each scenario's task must agree with the subcommand.
Outputs are deterministic: identical configs give byte-identical CSV files,
floats are written in shortest round-trip form, and every JSON report embeds
the resolved scenario plus a schema version.  Validation failures exit with
code 2 and a machine-readable JSON listing one violation per field path.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy.linalg

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from timolab.analysis import (
    decay_bound_report,
    decay_fit,
    direct_inequality,
    equipartition_residual,
    inverse_inequality,
    multiplier_residual,
)
from timolab.coefficients import make_power_poly_profile, make_power_profile
from timolab.constants import BeamModel, BoundaryType, Feedback, constants_report
from timolab.discretization import Mesh, assemble, build_mesh
from timolab.dynamics import (
    State,
    _resolve_steps,
    default_timestep,
    energies,
    simulate,
    simulate_backward,
)
from timolab.hum import HumProblem, control_cost, solve_null_control

SCHEMA_VERSION = 1
TASKS = ("constants", "simulate", "stabilize", "verify", "control")
TRAJECTORY_HEADER = "t,E,E_gd,w_l,psi_l,wt_l,psit_l,flux_w,flux_psi"
CHECKS_HEADER = "check,lhs,rhs,ratio,pass"
CONTROLS_HEADER = "t,f1,f2"

_IDENTITY_TOLERANCE = 0.05
_CONSERVATION_TOLERANCE = 1e-8
_MONOTONE_TOLERANCE = 1e-12


class ConfigError(Exception):
    """Invalid scenario configuration, carrying one entry per field path."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [{"path": "", "message": violations}]
        self.violations = list(violations)
        text = "; ".join(
            f"{v['path']}: {v['message']}" if v["path"] else v["message"]
            for v in self.violations
        )
        super().__init__(text)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


class _Checker:
    """Collects schema violations as (field path, message) pairs."""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self.violations: list[dict] = []

    def add(self, path: str, message: str):
        full = f"{self.prefix}{path}" if path else self.prefix.rstrip(".")
        self.violations.append({"path": full, "message": message})

    def table(self, parent: dict, key: str, required: bool) -> dict | None:
        if key not in parent:
            if required:
                self.add(key, "required block is missing")
            return None
        value = parent[key]
        if not isinstance(value, dict):
            self.add(key, "expected a table")
            return None
        return value

    def keys(self, table: dict, path: str, allowed: tuple):
        for key in sorted(table):
            if key not in allowed:
                where = f"{path}.{key}" if path else key
                self.add(where, "unknown field")

    def number(self, table: dict, path: str, key: str, required: bool,
               default=None, positive: bool = False):
        if key not in table:
            if required:
                self.add(f"{path}.{key}" if path else key, "required field is missing")
            return default
        value = table[key]
        where = f"{path}.{key}" if path else key
        if not _is_number(value):
            self.add(where, "expected a number")
            return default
        if positive and value <= 0:
            self.add(where, f"must be positive, got {value}")
            return default
        return float(value)

    def integer(self, table: dict, path: str, key: str, required: bool,
                default=None, minimum=None):
        if key not in table:
            if required:
                self.add(f"{path}.{key}" if path else key, "required field is missing")
            return default
        value = table[key]
        where = f"{path}.{key}" if path else key
        if not _is_int(value):
            self.add(where, "expected an integer")
            return default
        if minimum is not None and value < minimum:
            self.add(where, f"must be at least {minimum}, got {value}")
            return default
        return int(value)

    def string(self, table: dict, path: str, key: str, required: bool,
               default=None, choices=None):
        if key not in table:
            if required:
                self.add(f"{path}.{key}" if path else key, "required field is missing")
            return default
        value = table[key]
        where = f"{path}.{key}" if path else key
        if not isinstance(value, str):
            self.add(where, "expected a string")
            return default
        if choices is not None and value not in choices:
            self.add(where, f"expected one of {sorted(choices)}, got {value!r}")
            return default
        return value

    def boolean(self, table: dict, path: str, key: str, default=None):
        if key not in table:
            return default
        value = table[key]
        if not isinstance(value, bool):
            self.add(f"{path}.{key}" if path else key, "expected a boolean")
            return default
        return value

    def number_list(self, table: dict, path: str, key: str, default=None):
        if key not in table:
            return default
        value = table[key]
        where = f"{path}.{key}" if path else key
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            self.add(where, "expected an array of numbers")
            return default
        return [float(v) for v in value]


def _check_profile(checker: _Checker, spec, path: str) -> dict | None:
    if not isinstance(spec, dict):
        checker.add(path, "expected a table with a 'type' field")
        return None
    kind = checker.string(spec, path, "type", required=True,
                          choices=("power", "power_poly"))
    allowed = ("type", "theta", "scale") if kind != "power_poly" else (
        "type", "theta", "scale", "coeffs")
    checker.keys(spec, path, allowed)
    out = {
        "type": kind,
        "theta": checker.number(spec, path, "theta", required=True),
        "scale": checker.number(spec, path, "scale", required=False,
                                default=1.0, positive=True),
    }
    if kind == "power_poly":
        coeffs = checker.number_list(spec, path, "coeffs")
        if coeffs is None:
            checker.add(f"{path}.coeffs", "required field is missing")
        out["coeffs"] = coeffs
    return out


def _check_data_spec(checker: _Checker, table: dict, path: str) -> dict | None:
    """Validate one named-family state spec (used by initial and target)."""
    family = checker.string(table, path, "family", required=True,
                            choices=("eigenmode", "polynomial", "random"))
    if family == "eigenmode":
        checker.keys(table, path, ("family", "index"))
        return {
            "family": family,
            "index": checker.integer(table, path, "index", required=False,
                                     default=0, minimum=0),
        }
    if family == "random":
        checker.keys(table, path, ("family", "seed"))
        return {
            "family": family,
            "seed": checker.integer(table, path, "seed", required=True, minimum=0),
        }
    if family == "polynomial":
        checker.keys(table, path, ("family", "w", "psi", "w_t", "psi_t"))
        return {
            "family": family,
            "w": checker.number_list(table, path, "w", default=[]),
            "psi": checker.number_list(table, path, "psi", default=[]),
            "w_t": checker.number_list(table, path, "w_t", default=[]),
            "psi_t": checker.number_list(table, path, "psi_t", default=[]),
        }
    return None


def _validate_scenario(raw: dict, task: str, prefix: str = "") -> dict:
    """Walk one scenario table; returns the resolved scenario dict.

    Raises ConfigError with every violation found, each tagged by the path
    of the offending field.  The resolved dict has all defaults filled and
    is what the JSON reports embed.
    """
    checker = _Checker(prefix)
    if not isinstance(raw, dict):
        checker.add("", "scenario must be a table")
        raise ConfigError(checker.violations)

    top_allowed = ["task", "name", "model", "output"]
    if task != "constants":
        top_allowed += ["mesh", "time", "initial"]
    if task == "control":
        top_allowed += ["control", "target"]
    if task == "verify":
        top_allowed += ["verify"]
    checker.keys(raw, "", tuple(top_allowed))

    stated = checker.string(raw, "", "task", required=False, choices=TASKS)
    if stated is not None and stated != task:
        checker.add("task", f"config names task {stated!r} but the "
                            f"{task!r} subcommand was invoked")
    name = checker.string(raw, "", "name", required=False)

    resolved: dict = {"task": task}
    if name is not None:
        resolved["name"] = name

    model_block = checker.table(raw, "model", required=True)
    if model_block is not None:
        checker.keys(model_block, "model",
                     ("rho", "i_rho", "ell", "K", "EI", "boundary",
                      "gamma", "delta", "feedback"))
        ell = checker.number(model_block, "model", "ell", required=False,
                             default=1.0, positive=True)
        model_cfg = {
            "rho": checker.number(model_block, "model", "rho", required=True),
            "i_rho": checker.number(model_block, "model", "i_rho",
                                    required=False, default=1.0),
            "ell": ell,
            "boundary": checker.string(model_block, "model", "boundary",
                                       required=False, default="dirichlet",
                                       choices=tuple(b.value for b in BoundaryType)),
            "gamma": checker.number(model_block, "model", "gamma",
                                    required=False, default=0.0),
            "delta": checker.number(model_block, "model", "delta",
                                    required=False, default=0.0),
        }
        for coeff in ("K", "EI"):
            if coeff not in model_block:
                checker.add(f"model.{coeff}", "required field is missing")
            else:
                model_cfg[coeff] = _check_profile(
                    checker, model_block[coeff], f"model.{coeff}")
        fb = checker.table(model_block, "feedback", required=False)
        if fb is not None:
            checker.keys(fb, "model.feedback", ("alpha", "beta"))
            model_cfg["feedback"] = {
                "alpha": checker.number(fb, "model.feedback", "alpha", required=True),
                "beta": checker.number(fb, "model.feedback", "beta", required=True),
            }
        if task == "stabilize" and fb is None:
            checker.add("model.feedback", "stabilize requires boundary feedback gains")
        if task == "control" and fb is not None:
            checker.add("model.feedback",
                        "control synthesis requires an undamped plant")
        resolved["model"] = model_cfg

    if task != "constants":
        mesh_block = checker.table(raw, "mesh", required=True)
        if mesh_block is not None:
            checker.keys(mesh_block, "mesh", ("n", "grading"))
            resolved["mesh"] = {
                "n": checker.integer(mesh_block, "mesh", "n", required=True,
                                     minimum=2),
                "grading": checker.number(mesh_block, "mesh", "grading",
                                          required=False, positive=True),
            }
        time_block = checker.table(raw, "time", required=True)
        if time_block is not None:
            checker.keys(time_block, "time", ("T", "dt"))
            resolved["time"] = {
                "T": checker.number(time_block, "time", "T", required=True,
                                    positive=True),
                "dt": checker.number(time_block, "time", "dt", required=False,
                                     positive=True),
            }
        initial_block = checker.table(raw, "initial", required=True)
        if initial_block is not None:
            resolved["initial"] = _check_data_spec(checker, initial_block, "initial")

    if task == "control":
        control_block = checker.table(raw, "control", required=False)
        control_cfg = {"tolerance": 1e-8, "max_iterations": 500,
                       "mass_preconditioner": False}
        if control_block is not None:
            checker.keys(control_block, "control",
                         ("tolerance", "max_iterations", "mass_preconditioner"))
            control_cfg = {
                "tolerance": checker.number(control_block, "control", "tolerance",
                                            required=False, default=1e-8,
                                            positive=True),
                "max_iterations": checker.integer(control_block, "control",
                                                  "max_iterations", required=False,
                                                  default=500, minimum=1),
                "mass_preconditioner": checker.boolean(control_block, "control",
                                                       "mass_preconditioner",
                                                       default=False),
            }
        resolved["control"] = control_cfg
        target_block = checker.table(raw, "target", required=False)
        if target_block is not None:
            resolved["target"] = _check_data_spec(checker, target_block, "target")

    if task == "verify":
        verify_block = checker.table(raw, "verify", required=False)
        verify_cfg = {"identity_tolerance": _IDENTITY_TOLERANCE}
        if verify_block is not None:
            checker.keys(verify_block, "verify",
                         ("identity_tolerance", "window", "horizon"))
            verify_cfg["identity_tolerance"] = checker.number(
                verify_block, "verify", "identity_tolerance", required=False,
                default=_IDENTITY_TOLERANCE, positive=True)
            window = checker.number_list(verify_block, "verify", "window")
            if window is not None:
                if len(window) != 2:
                    checker.add("verify.window", "expected [start, end]")
                else:
                    verify_cfg["window"] = window
            horizon = checker.number(verify_block, "verify", "horizon",
                                     required=False, positive=True)
            if horizon is not None:
                verify_cfg["horizon"] = horizon
        resolved["verify"] = verify_cfg

    output_block = checker.table(raw, "output", required=False)
    if output_block is not None:
        checker.keys(output_block, "output", ("directory",))
        directory = checker.string(output_block, "output", "directory",
                                   required=True)
        if directory is not None:
            resolved["output"] = {"directory": directory}

    if checker.violations:
        raise ConfigError(checker.violations)
    return resolved


def _profile_from_config(spec: dict, ell: float):
    if spec["type"] == "power":
        return make_power_profile(spec["theta"], scale=spec["scale"], ell=ell)
    return make_power_poly_profile(spec["theta"], spec["scale"],
                                   spec["coeffs"], ell=ell)


def _model_from_config(cfg: dict, prefix: str = "") -> BeamModel:
    """Build the model, surfacing invariant violations as config errors."""
    try:
        feedback = None
        if "feedback" in cfg:
            feedback = Feedback(alpha=cfg["feedback"]["alpha"],
                                beta=cfg["feedback"]["beta"])
        return BeamModel(
            rho=cfg["rho"],
            i_rho=cfg["i_rho"],
            ell=cfg["ell"],
            K=_profile_from_config(cfg["K"], cfg["ell"]),
            EI=_profile_from_config(cfg["EI"], cfg["ell"]),
            bc=BoundaryType(cfg["boundary"]),
            gamma=cfg["gamma"],
            delta=cfg["delta"],
            feedback=feedback,
        )
    except ValueError as err:
        raise ConfigError([{"path": f"{prefix}model", "message": str(err)}]) from err


def _mesh_from_config(cfg: dict, model: BeamModel, prefix: str = "") -> Mesh:
    try:
        if cfg.get("grading") is not None:
            p = cfg["grading"]
            nodes = model.ell * (np.arange(cfg["n"] + 1) / cfg["n"]) ** p
            return Mesh(nodes=nodes, p=p)
        return build_mesh(model.ell, cfg["n"], model.mu)
    except ValueError as err:
        raise ConfigError([{"path": f"{prefix}mesh", "message": str(err)}]) from err


def _eigenmode(disc, index: int, prefix: str, path: str) -> np.ndarray:
    free = disc.free_dofs
    stiff = disc.stiffness[np.ix_(free, free)]
    mass = disc.mass[np.ix_(free, free)]
    if index >= free.size:
        raise ConfigError([{
            "path": f"{prefix}{path}.index",
            "message": f"mode index {index} exceeds the {free.size} free dofs",
        }])
    _, vectors = scipy.linalg.eigh(stiff, mass)
    mode = vectors[:, index]
    peak = int(np.argmax(np.abs(mode)))
    if mode[peak] < 0.0:
        mode = -mode
    return mode


def _poly_field(w_coeffs, psi_coeffs, disc) -> np.ndarray:
    nodes = disc.mesh.nodes
    full = np.zeros(disc.ndofs)
    if w_coeffs:
        full[disc.w_dofs] = np.polynomial.polynomial.polyval(
            nodes, np.asarray(w_coeffs, dtype=float))
    if psi_coeffs:
        full[disc.psi_dofs] = np.polynomial.polynomial.polyval(
            nodes, np.asarray(psi_coeffs, dtype=float))
    return full[disc.free_dofs]


def _build_state(spec: dict, disc, t: float, prefix: str, path: str) -> State:
    """Realize one named data family on the free dofs.

    Polynomial fields are sampled at the nodes and restricted to the free
    dofs, so essential boundary values are fixed by the boundary condition
    regardless of the polynomial's endpoint value.
    """
    nfree = disc.free_dofs.size
    if spec["family"] == "eigenmode":
        u = _eigenmode(disc, spec["index"], prefix, path)
        v = np.zeros(nfree)
    elif spec["family"] == "random":
        rng = np.random.default_rng(spec["seed"])
        draw = rng.uniform(-1.0, 1.0, size=2 * nfree)
        u, v = draw[:nfree].copy(), draw[nfree:].copy()
        level = energies(disc, State(u=u, v=v))[1]
        u /= np.sqrt(level)
        v /= np.sqrt(level)
    else:
        u = _poly_field(spec["w"], spec["psi"], disc)
        v = _poly_field(spec["w_t"], spec["psi_t"], disc)
    return State(u=u, v=v, t=t)


def _jsonable(value):
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not np.isfinite(value):
            return str(value)
        return value
    return value


def _flat(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return "; ".join(str(v) for v in value)
    return str(value)


def _write_json(path: Path, scenario: dict, payload: dict):
    body = {"schema_version": SCHEMA_VERSION, "config": _jsonable(scenario)}
    body.update(_jsonable(payload))
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: str, columns):
    rows = zip(*columns)
    lines = [header]
    lines.extend(",".join(cell for cell in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _fmt(values) -> list:
    return [repr(float(v)) for v in values]


def _write_trajectory(path: Path, traj):
    _write_csv(path, TRAJECTORY_HEADER, [
        _fmt(traj.times), _fmt(traj.energy), _fmt(traj.energy_gd),
        _fmt(traj.w_ell), _fmt(traj.psi_ell),
        _fmt(traj.wt_ell), _fmt(traj.psit_ell),
        _fmt(traj.flux_w), _fmt(traj.flux_psi),
    ])


def _dump_matrices(outdir: Path, disc):
    nodes = disc.mesh.nodes
    _write_csv(outdir / "mesh.csv", "node,x",
               [[str(i) for i in range(nodes.size)], _fmt(nodes)])
    for label in ("mass", "stiffness", "damping"):
        matrix = getattr(disc, label)
        rows, cols = np.nonzero(matrix)
        _write_csv(outdir / f"{label}.csv", "row,col,value", [
            [str(int(r)) for r in rows],
            [str(int(c)) for c in cols],
            _fmt(matrix[rows, cols]),
        ])


def _build_problem(scenario: dict, prefix: str):
    model = _model_from_config(scenario["model"], prefix)
    disc = assemble(model, _mesh_from_config(scenario["mesh"], model, prefix))
    initial = _build_state(scenario["initial"], disc, 0.0, prefix, "initial")
    T = scenario["time"]["T"]
    dt = scenario["time"]["dt"]
    if dt is None:
        dt = default_timestep(model, disc.mesh)
    _, dt = _resolve_steps(T, dt)
    return model, disc, initial, T, dt


def _run_constants(scenario: dict, outdir: Path, prefix: str, dump: bool):
    model = _model_from_config(scenario["model"], prefix)
    report = constants_report(model)
    payload = {}
    lines = []
    for field in dataclasses.fields(report):
        value = getattr(report, field.name)
        payload[field.name] = _jsonable(value)
        lines.append(f"{field.name}={_flat(value)}")
    (outdir / "constants.txt").write_text("\n".join(lines) + "\n")
    _write_json(outdir / "constants.json", scenario, {"report": payload})


def _run_simulate(scenario: dict, outdir: Path, prefix: str, dump: bool):
    model, disc, initial, T, dt = _build_problem(scenario, prefix)
    traj = simulate(model, disc, initial, T=T, dt=dt)
    _write_trajectory(outdir / "trajectory.csv", traj)
    if dump:
        _dump_matrices(outdir, disc)
    initial_energy = float(traj.energy_gd[0])
    summary = {
        "dt": traj.dt,
        "steps": traj.steps,
        "initial_energy": initial_energy,
        "final_energy": float(traj.energy_gd[-1]),
        "max_drift": float(np.max(np.abs(traj.energy_gd - initial_energy))),
    }
    _write_json(outdir / "summary.json", scenario, {"result": summary})


def _run_stabilize(scenario: dict, outdir: Path, prefix: str, dump: bool):
    model, disc, initial, T, dt = _build_problem(scenario, prefix)
    traj = simulate(model, disc, initial, T=T, dt=dt)
    _write_trajectory(outdir / "trajectory.csv", traj)
    if dump:
        _dump_matrices(outdir, disc)
    report = constants_report(model)
    rate, intercept = decay_fit(traj)
    initial_energy = float(traj.energy_gd[0])
    rise = float(np.max(np.diff(traj.energy_gd), initial=0.0))
    rise = max(rise, 0.0)
    summary = {
        "dt": traj.dt,
        "steps": traj.steps,
        "initial_energy": initial_energy,
        "final_energy": float(traj.energy_gd[-1]),
        "kappa": report.kappa,
        "fit_rate": rate,
        "fit_intercept": intercept,
        "max_energy_increase": rise,
        "monotone": rise <= _MONOTONE_TOLERANCE * initial_energy,
        "notes": list(report.notes),
    }
    if report.kappa is not None and traj.times[-1] >= 1.0 / report.kappa:
        bound = decay_bound_report(traj, report.kappa)
        summary["bound"] = {"lhs": bound.lhs, "rhs": bound.rhs,
                            "ratio": bound.ratio, "passed": bound.passed}
    else:
        summary["bound"] = None
    _write_json(outdir / "summary.json", scenario, {"result": summary})


def _run_verify(scenario: dict, outdir: Path, prefix: str, dump: bool):
    model, disc, initial, T, dt = _build_problem(scenario, prefix)
    traj = simulate(model, disc, initial, T=T, dt=dt)
    if dump:
        _dump_matrices(outdir, disc)
    report = constants_report(model)
    opts = scenario["verify"]
    tol = opts["identity_tolerance"]
    t0, t1 = float(traj.times[0]), float(traj.times[-1])
    window = opts.get("window", [t0, t1])

    rows = []
    notes = {}
    initial_energy = float(traj.energy_gd[0])
    if model.feedback is None:
        drift = float(np.max(np.abs(traj.energy_gd - initial_energy)))
        budget = _CONSERVATION_TOLERANCE * initial_energy
        ratio = drift / budget if budget > 0.0 else 0.0
        rows.append(("conservation", drift, budget, ratio, drift <= budget))
    else:
        rise = max(float(np.max(np.diff(traj.energy_gd), initial=0.0)), 0.0)
        budget = _MONOTONE_TOLERANCE * initial_energy
        ratio = rise / budget if budget > 0.0 else 0.0
        rows.append(("monotone_energy", rise, budget, ratio, rise <= budget))

    ident = multiplier_residual(model, disc, traj, S=window[0], T=window[1])
    rows.append(("multiplier_identity", ident.lhs, ident.rhs,
                 ident.relative_residual, ident.relative_residual <= tol))

    if model.feedback is None:
        ident = equipartition_residual(model, disc, traj, S=window[0], T=window[1])
        rows.append(("equipartition_identity", ident.lhs, ident.rhs,
                     ident.relative_residual, ident.relative_residual <= tol))
        margin = direct_inequality(model, traj, report)
        rows.append((margin.check, margin.lhs, margin.rhs,
                     margin.ratio, margin.passed))
        if model.bc is not BoundaryType.NEUMANN:
            margin = inverse_inequality(model, traj, report,
                                        T=opts.get("horizon", t1 - t0))
            rows.append((margin.check, margin.lhs, margin.rhs,
                         margin.ratio, margin.passed))
            if margin.note:
                notes[margin.check] = margin.note

    _write_csv(outdir / "checks.csv", CHECKS_HEADER, [
        [row[0] for row in rows],
        _fmt(row[1] for row in rows),
        _fmt(row[2] for row in rows),
        _fmt(row[3] for row in rows),
        ["true" if row[4] else "false" for row in rows],
    ])
    summary = {
        "dt": traj.dt,
        "steps": traj.steps,
        "checks": [{"check": row[0], "lhs": row[1], "rhs": row[2],
                    "ratio": row[3], "pass": row[4]} for row in rows],
        "notes": notes,
        "all_passed": all(row[4] for row in rows),
    }
    _write_json(outdir / "summary.json", scenario, {"result": summary})


def _run_control(scenario: dict, outdir: Path, prefix: str, dump: bool):
    model, disc, initial, T, dt = _build_problem(scenario, prefix)
    if dump:
        _dump_matrices(outdir, disc)
    opts = scenario["control"]
    data = initial
    target_used = False
    if "target" in scenario:
        target = _build_state(scenario["target"], disc, T, prefix, "target")
        back = simulate_backward(model, disc, target, T=T, dt=dt)
        data = State(u=initial.u - back.displacements[0],
                     v=initial.v - back.velocities[0], t=0.0)
        target_used = True

    problem = HumProblem(
        model=model, disc=disc, initial=data, T=T, dt=dt,
        tolerance=opts["tolerance"],
        max_iterations=opts["max_iterations"],
        use_mass_preconditioner=opts["mass_preconditioner"],
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = solve_null_control(problem)

    steps = result.controls.f1.size
    mid_times = (np.arange(steps) + 0.5) * result.dt
    _write_csv(outdir / "controls.csv", CONTROLS_HEADER, [
        _fmt(mid_times), _fmt(result.controls.f1), _fmt(result.controls.f2)])
    summary = {
        "dt": result.dt,
        "steps": steps,
        "flavor": problem.flavor,
        "iterations": result.iterations,
        "converged": result.converged,
        "stagnated": result.stagnated,
        "residual": result.residual,
        "final_energy_ratio": result.final_energy_ratio,
        "rayleigh_min": result.rayleigh_min,
        "rayleigh_max": result.rayleigh_max,
        "control_cost": control_cost(problem, result.controls),
        "data_energy": float(energies(disc, data)[1]),
        "target_used": target_used,
        "warnings": sorted(str(w.message) for w in caught),
    }
    _write_json(outdir / "summary.json", scenario, {"result": summary})


_RUNNERS = {
    "constants": _run_constants,
    "simulate": _run_simulate,
    "stabilize": _run_stabilize,
    "verify": _run_verify,
    "control": _run_control,
}


def _scenario_directory(scenario: dict, out_flag, batch: bool) -> Path:
    base = Path(out_flag) if out_flag else Path(
        scenario.get("output", {}).get("directory", "."))
    if batch:
        return base / scenario["name"]
    return base


def _run_scenario(scenario: dict, task: str, out_flag, batch: bool,
                  dump: bool, prefix: str) -> dict:
    outdir = _scenario_directory(scenario, out_flag, batch)
    outdir.mkdir(parents=True, exist_ok=True)
    _RUNNERS[task](scenario, outdir, prefix, dump)
    return {"name": scenario.get("name", ""), "directory": str(outdir)}


def _load_scenarios(path: Path, task: str) -> tuple[list, bool]:
    """Parse and validate the config; returns (resolved scenarios, batch?)."""
    try:
        with open(path, "rb") as handle:
            raw = tomllib.load(handle)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config is not valid TOML: {err}") from err

    if "scenarios" in raw:
        extra = sorted(set(raw) - {"scenarios"})
        violations = [{"path": key, "message":
                       "a batch config holds only the scenarios array"}
                      for key in extra]
        entries = raw["scenarios"]
        if not isinstance(entries, list) or not entries:
            violations.append({"path": "scenarios",
                               "message": "expected a non-empty array of tables"})
            raise ConfigError(violations)
        scenarios = []
        for i, entry in enumerate(entries):
            prefix = f"scenarios[{i}]."
            try:
                resolved = _validate_scenario(entry, task, prefix)
            except ConfigError as err:
                violations.extend(err.violations)
                continue
            resolved.setdefault("name", f"scenario-{i + 1:03d}")
            scenarios.append(resolved)
        names = [s["name"] for s in scenarios]
        for name in sorted(set(names)):
            if names.count(name) > 1:
                violations.append({"path": "scenarios",
                                   "message": f"duplicate scenario name {name!r}"})
        if violations:
            raise ConfigError(violations)
        return scenarios, True
    return [_validate_scenario(raw, task)], False


def _emit(body: dict):
    print(json.dumps(body, indent=2, sort_keys=True))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="timolab",
        description="Degenerate beam laboratory: constants, runs, checks, controls.",
    )
    sub = parser.add_subparsers(dest="task", required=True)
    for task in TASKS:
        p = sub.add_parser(task, help=f"run the {task} task on a scenario config")
        p.add_argument("--config", required=True, help="TOML scenario file")
        p.add_argument("--out", default=None,
                       help="output directory (overrides output.directory)")
        p.add_argument("--jobs", type=int, default=1,
                       help="threads for batch scenario fan-out")
        p.add_argument("--dump-matrices", action="store_true",
                       help="also write mesh and assembled matrices as CSV")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        scenarios, batch = _load_scenarios(Path(args.config), args.task)
    except ConfigError as err:
        _emit({"schema_version": SCHEMA_VERSION, "status": "error",
               "errors": [{"code": "config", "violations": err.violations}]})
        return 2

    jobs = max(1, args.jobs)
    outcomes = []

    def run_one(indexed):
        i, scenario = indexed
        prefix = f"scenarios[{i}]." if batch else ""
        try:
            return _run_scenario(scenario, args.task, args.out, batch,
                                 args.dump_matrices, prefix), None
        except ConfigError as err:
            return None, {"scenario": scenario.get("name", ""),
                          "code": "config", "violations": err.violations}
        except Exception as err:
            return None, {"scenario": scenario.get("name", ""),
                          "code": "runtime", "message": f"{type(err).__name__}: {err}"}

    if jobs == 1 or len(scenarios) == 1:
        outcomes = [run_one(pair) for pair in enumerate(scenarios)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_one, enumerate(scenarios)))

    errors = [err for _, err in outcomes if err is not None]
    if errors:
        _emit({"schema_version": SCHEMA_VERSION, "status": "error",
               "errors": errors})
        return 2 if any(e["code"] == "config" for e in errors) else 1
    _emit({"schema_version": SCHEMA_VERSION, "status": "ok",
           "scenarios": [done for done, _ in outcomes]})
    return 0


if __name__ == "__main__":
    sys.exit(main())
