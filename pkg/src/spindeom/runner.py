"""Run orchestration: configs, presets, the bath->fit->propagate pipeline.

A run configuration is a nested key/value document (YAML on disk).  The
unit system is fixed by the tunneling splitting: every frequency and
rate is a ratio to it and times are in its inverse.  ``run`` executes
the full pipeline and persists three artifacts per run: the trajectory
CSV, a JSON sidecar with the complete configuration and conservation
stats, and the fit JSON with terms, errors and the sampled exact TCF.
"""

from __future__ import annotations

import concurrent.futures
import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__
from .bath import BathSpec, QuadratureSpec
from .deom import HierarchyParams, SystemSpec, propagate
from .expfit import ExponentialSeries, FitStrategy, TCFFit, fit_bath, fit_to_json
from .observables import (
    SIGMA_X,
    SIGMA_Z,
    Trajectory,
    read_trajectory_csv,
    write_trajectory_csv,
)


class ConfigError(ValueError):
    """Configuration invalid; ``problems`` lists every violation."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


class ExpensiveRunError(RuntimeError):
    """Cost-guarded preset invoked without --allow-expensive."""


_SECTION_DEFAULTS: dict = {
    "system": {
        "epsilon": 0.0,
        "delta": 1.0,
        "coupling_op": "sigma_z",
        "initial_state": "up",
    },
    "bath": {
        "enabled": True,
        "family": "ohmic-exponential",
        "kind": "spin",
        "alpha": 0.5,
        "omega_c": 1.0,
        "beta": "inf",
        "spin_s": 0.5,
    },
    "fit": {
        "k_real": 5,
        "k_imag": 5,
        "plateau_time": 40.0,
        "dt_sample": 0.01,
        "refine": True,
    },
    "quadrature": {
        "omega_max": None,
        "n_points": None,
        "rule": "adaptive",
        "rtol": 1e-9,
    },
    "hierarchy": {
        "tier": 20,
        "dt": 0.0025,
        "t_final": 10.0,
        "filter_tol": 5e-7,
        "record_stride": 4,
        "max_keys": 5_000_000,
    },
    "output": {
        "directory": "runs/out",
        "basename": "run",
    },
}

_INITIAL_STATES = {
    "up": np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex),
    "down": np.array([[0.0, 0.0], [0.0, 1.0]], dtype=complex),
    "plus": np.array([[0.5, 0.5], [0.5, 0.5]], dtype=complex),
    "mixed": np.array([[0.5, 0.0], [0.0, 0.5]], dtype=complex),
}

_COUPLING_OPS = {"sigma_z": SIGMA_Z, "sigma_x": SIGMA_X}


def _as_beta(value) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", ".inf", "infinity"):
            return math.inf
        return float(value)
    return float(value)


@dataclass
class RunConfig:
    """Validated-on-demand nested run description."""

    system: dict = field(default_factory=dict)
    bath: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    quadrature: dict = field(default_factory=dict)
    hierarchy: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    sweep: list | None = None
    expensive: bool = False
    label: str = ""

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        problems = []
        sections = {}
        known_top = set(_SECTION_DEFAULTS) | {"sweep", "expensive", "label"}
        for key in data:
            if key not in known_top:
                problems.append(f"{key}: unknown section (known: {sorted(known_top)})")
        for name, defaults in _SECTION_DEFAULTS.items():
            merged = dict(defaults)
            given = data.get(name, {}) or {}
            if not isinstance(given, dict):
                problems.append(f"{name}: must be a mapping")
                given = {}
            for k, v in given.items():
                if k not in defaults:
                    problems.append(
                        f"{name}.{k}: unknown field (known: {sorted(defaults)})"
                    )
                else:
                    merged[k] = v
            sections[name] = merged
        if problems:
            raise ConfigError(problems)
        return cls(
            **sections,
            sweep=copy.deepcopy(data.get("sweep")),
            expensive=bool(data.get("expensive", False)),
            label=str(data.get("label", "")),
        )

    def to_dict(self) -> dict:
        out = {
            name: copy.deepcopy(getattr(self, name)) for name in _SECTION_DEFAULTS
        }
        out["expensive"] = self.expensive
        out["label"] = self.label
        if self.sweep is not None:
            out["sweep"] = copy.deepcopy(self.sweep)
        return out

    # -- typed builders ------------------------------------------------
    def build_system(self) -> SystemSpec:
        s = self.system
        q = s["coupling_op"]
        q_op = _COUPLING_OPS[q].copy() if isinstance(q, str) else np.asarray(q, complex)
        r = s["initial_state"]
        rho0 = _INITIAL_STATES[r].copy() if isinstance(r, str) else np.asarray(r, complex)
        return SystemSpec(
            epsilon=float(s["epsilon"]), delta=float(s["delta"]),
            q_op=q_op, rho0=rho0,
        )

    def build_bath(self) -> BathSpec | None:
        b = self.bath
        if not b["enabled"]:
            return None
        return BathSpec(
            alpha=float(b["alpha"]), omega_c=float(b["omega_c"]),
            beta=_as_beta(b["beta"]), spin_s=float(b["spin_s"]),
            family=b["family"], kind=b["kind"],
        )

    def build_fit(self) -> FitStrategy:
        f = self.fit
        return FitStrategy(
            k_real=int(f["k_real"]), k_imag=int(f["k_imag"]),
            plateau_time=float(f["plateau_time"]),
            dt_sample=float(f["dt_sample"]), refine=bool(f["refine"]),
        )

    def build_quadrature(self) -> QuadratureSpec:
        q = self.quadrature
        return QuadratureSpec(
            omega_max=None if q["omega_max"] is None else float(q["omega_max"]),
            n_points=None if q["n_points"] is None else int(q["n_points"]),
            rule=q["rule"], rtol=float(q["rtol"]),
        )

    def build_hierarchy(self) -> HierarchyParams:
        h = self.hierarchy
        tol = h["filter_tol"]
        return HierarchyParams(
            tier=int(h["tier"]), t_final=float(h["t_final"]), dt=float(h["dt"]),
            filter_tol=None if tol in (None, 0, 0.0) else float(tol),
            record_stride=int(h["record_stride"]), max_keys=int(h["max_keys"]),
        )

    def validate(self) -> list[str]:
        """Every violated invariant, prefixed with its field path."""
        problems = []
        s = self.system
        if isinstance(s["coupling_op"], str) and s["coupling_op"] not in _COUPLING_OPS:
            problems.append(
                f"system.coupling_op: unknown name {s['coupling_op']!r} "
                f"(known: {sorted(_COUPLING_OPS)})"
            )
        if isinstance(s["initial_state"], str) and s["initial_state"] not in _INITIAL_STATES:
            problems.append(
                f"system.initial_state: unknown name {s['initial_state']!r} "
                f"(known: {sorted(_INITIAL_STATES)})"
            )
        try:
            sys_spec = self.build_system()
            problems += [f"system.{p}" for p in sys_spec.problems()]
        except Exception as exc:
            problems.append(f"system: {exc}")
        try:
            bath_spec = self.build_bath()
        except ValueError as exc:
            problems.append(f"bath: {exc}")
            bath_spec = None
        if self.bath["enabled"]:
            try:
                strategy = self.build_fit()
                problems += [f"fit.{p}" for p in strategy.problems()]
            except Exception as exc:
                problems.append(f"fit: {exc}")
            try:
                quad = self.build_quadrature()
                omega_c = bath_spec.omega_c if bath_spec else None
                problems += [f"quadrature.{p}" for p in quad.problems(omega_c)]
            except Exception as exc:
                problems.append(f"quadrature: {exc}")
        try:
            params = self.build_hierarchy()
            problems += [f"hierarchy.{p}" for p in params.problems()]
        except Exception as exc:
            problems.append(f"hierarchy: {exc}")
        if not isinstance(self.output.get("directory"), str):
            problems.append("output.directory: must be a path string")
        if not isinstance(self.output.get("basename"), str):
            problems.append("output.basename: must be a string")
        if self.sweep is not None:
            if not isinstance(self.sweep, list) or not all(
                isinstance(m, dict) for m in self.sweep
            ):
                problems.append("sweep: must be a list of override mappings")
        return problems

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return RunConfig.from_dict(data)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """New config with dotted-path overrides applied, e.g. hierarchy.tier=16."""
    data = config.to_dict()
    problems = []
    for path, value in overrides.items():
        parts = path.split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                problems.append(f"override {path}: no such field")
                break
            node = node[p]
        else:
            if not isinstance(node, dict) or parts[-1] not in node:
                problems.append(f"override {path}: no such field")
            else:
                node[parts[-1]] = value
    if problems:
        raise ConfigError(problems)
    return RunConfig.from_dict(data)


@dataclass
class RunResult:
    config: RunConfig
    trajectory: Trajectory
    fit: TCFFit | None
    paths: dict


def _sidecar(config: RunConfig, traj: Trajectory, fit: TCFFit | None) -> dict:
    return {
        "schema": "spindeom-run-1",
        "version": __version__,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "fit_errors": fit.report.to_dict() if fit else None,
        "stats": traj.stats,
        "n_records": int(traj.times.size),
    }


def run(config: RunConfig, allow_expensive: bool = False,
        out_dir: str | None = None) -> RunResult:
    """Validate, fit, propagate, persist; deterministic for a fixed config."""
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
    if config.expensive and not allow_expensive:
        raise ExpensiveRunError(
            f"preset {config.label or '(unnamed)'} is cost-guarded; "
            "pass --allow-expensive to run it"
        )
    directory = out_dir or config.output["directory"]
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, config.output["basename"])

    bath_spec = config.build_bath()
    if bath_spec is not None:
        fit = fit_bath(bath_spec, config.build_fit(), config.build_quadrature())
        series = fit.series
    else:
        fit = None
        series = ExponentialSeries.empty()

    metadata = {"config": config.to_dict(), "config_hash": config.config_hash()}
    traj = propagate(config.build_system(), series, config.build_hierarchy(),
                     metadata=metadata)

    paths = {"csv": base + ".csv", "sidecar": base + ".json"}
    write_trajectory_csv(traj, paths["csv"])
    with open(paths["sidecar"], "w") as fh:
        json.dump(_sidecar(config, traj, fit), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if fit is not None:
        paths["fit"] = base + ".fit.json"
        doc = fit_to_json(fit)
        doc["bath"] = config.bath
        doc["strategy"] = config.fit
        with open(paths["fit"], "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")
    return RunResult(config, traj, fit, paths)


def fit_only(config: RunConfig, out_dir: str | None = None) -> dict:
    """Fit the bath TCF and write the fit JSON; no propagation."""
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
    if not config.bath["enabled"]:
        raise ConfigError(["bath.enabled: fit-only requires an enabled bath"])
    directory = out_dir or config.output["directory"]
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, config.output["basename"])
    fit = fit_bath(config.build_bath(), config.build_fit(), config.build_quadrature())
    doc = fit_to_json(fit)
    doc["bath"] = config.bath
    doc["strategy"] = config.fit
    path = base + ".fit.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    return {"path": path, "errors": fit.report.to_dict()}


def _run_member(args):
    config_dict, overrides, directory, allow_expensive = args
    member = apply_overrides(RunConfig.from_dict(config_dict), overrides)
    member.output["directory"] = directory
    result = run(member, allow_expensive=allow_expensive)
    return result.paths


def sweep(config: RunConfig, allow_expensive: bool = False,
          jobs: int = 1) -> dict:
    """Execute every sweep member and summarize pairwise P(t) deviations."""
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
    if not config.sweep:
        raise ConfigError(["sweep: config has no sweep members"])
    base_dir = config.output["directory"]
    base_dict = config.to_dict()
    base_dict.pop("sweep", None)
    members = []
    for i, overrides in enumerate(config.sweep):
        slug = "-".join(
            f"{path.split('.')[-1]}={value}" for path, value in sorted(overrides.items())
        ) or f"member{i}"
        slug = slug.replace("/", "_").replace(" ", "")
        directory = os.path.join(base_dir, f"sweep_{i:02d}_{slug}")
        members.append((base_dict, overrides, directory, allow_expensive))

    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            all_paths = list(pool.map(_run_member, members))
    else:
        all_paths = [_run_member(m) for m in members]

    trajectories = [read_trajectory_csv(paths["csv"]) for paths in all_paths]
    n = len(trajectories)
    dev = np.zeros((n, n))
    comparable = all(
        t.times.size == trajectories[0].times.size
        and np.allclose(t.times, trajectories[0].times)
        for t in trajectories
    )
    if comparable:
        for i in range(n):
            for j in range(i + 1, n):
                dev[i, j] = dev[j, i] = float(
                    np.max(np.abs(trajectories[i].population - trajectories[j].population))
                )
    summary = {
        "schema": "spindeom-sweep-1",
        "members": [m[2] for m in members],
        "overrides": [m[1] for m in members],
        "comparable_grids": comparable,
        "max_pairwise_dP": dev.tolist() if comparable else None,
    }
    os.makedirs(base_dir, exist_ok=True)
    summary_path = os.path.join(base_dir, "sweep_summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    summary["path"] = summary_path
    return summary


# ---------------------------------------------------------------------------
# preset catalog


def _preset_dict(name: str) -> dict:
    base = {
        "label": name,
        "system": {"epsilon": 0.0, "delta": 1.0, "initial_state": "up"},
        "bath": {"alpha": 0.5, "omega_c": 1.0, "beta": "inf", "kind": "spin"},
        "fit": {"k_real": 5, "k_imag": 5},
        "hierarchy": {"tier": 20, "t_final": 10.0, "filter_tol": 5e-7},
        "output": {"directory": f"runs/{name}", "basename": name},
    }
    zero_t = {"beta": "inf"}

    if name == "fig1a":
        base["bath"].update(alpha=0.5, omega_c=1.0, **zero_t)
        base["hierarchy"].update(t_final=15.0)
    elif name == "fig1b":
        base["bath"].update(alpha=0.1, omega_c=6.0, **zero_t)
    elif name == "fig1c":
        base["bath"].update(alpha=0.2, omega_c=10.0, **zero_t)
    elif name == "fig1d":
        base["bath"].update(alpha=0.5, omega_c=10.0, **zero_t)
    elif name == "fig1e":
        base["bath"].update(alpha=0.75, omega_c=10.0, **zero_t)
        base["fit"].update(k_real=6, k_imag=5)
        base["hierarchy"].update(filter_tol=1e-6)
    elif name == "fig1f":
        base["bath"].update(alpha=0.5, omega_c=40.0, **zero_t)
        # the bath cutoff sets the fastest hierarchy rates; the step must
        # resolve them or the high tiers destabilize
        base["hierarchy"].update(dt=0.0005, t_final=5.0)
    elif name == "fig2":
        base["bath"].update(alpha=10.0, omega_c=1.0, **zero_t)
        base["fit"].update(k_real=2, k_imag=2)
        base["hierarchy"].update(tier=25, filter_tol=None)
        base["expensive"] = True
    elif name == "fig3a":
        base["bath"].update(alpha=0.5, omega_c=6.0)
        base["sweep"] = [{"bath.beta": b} for b in ("inf", 5.0, 2.0, 1.0)]
    elif name == "fig3b":
        base["bath"].update(alpha=0.75, omega_c=10.0)
        base["fit"].update(k_real=6, k_imag=5)
        base["hierarchy"].update(filter_tol=1e-6)
        base["sweep"] = [{"bath.beta": b} for b in ("inf", 10.0, 6.0, 2.0)]
    elif name == "fig3c":
        base["bath"].update(alpha=10.0, omega_c=1.0)
        base["fit"].update(k_real=4, k_imag=4)
        base["hierarchy"].update(tier=25, filter_tol=None)
        base["sweep"] = [{"bath.beta": b} for b in (5.0, 2.0, 1.0, 0.5)]
        base["expensive"] = True
    elif name in ("fig5a", "fig5b", "fig5c"):
        beta = {"fig5a": 0.25, "fig5b": 1.0, "fig5c": 5.0}[name]
        omega_c = {"fig5a": 1.0, "fig5b": 2.0, "fig5c": 2.0}[name]
        base["system"].update(epsilon=1.0)
        base["bath"].update(alpha=0.4, omega_c=omega_c, beta=beta)
        base["hierarchy"].update(tier=16, t_final=5.0)
    elif name == "dephasing":
        base["system"].update(epsilon=1.0, delta=0.0, initial_state="plus")
        base["bath"].update(alpha=0.1, omega_c=1.0, **zero_t)
        base["fit"].update(k_real=6, k_imag=6)
        base["hierarchy"].update(tier=12)
    elif name == "rabi":
        base["bath"] = {"enabled": False}
        base["hierarchy"].update(tier=0, filter_tol=None)
    else:
        raise KeyError(name)
    return base


PRESET_NAMES = (
    "fig1a", "fig1b", "fig1c", "fig1d", "fig1e", "fig1f",
    "fig2", "fig3a", "fig3b", "fig3c",
    "fig5a", "fig5b", "fig5c",
    "dephasing", "rabi",
)


def preset(name: str) -> RunConfig:
    """A named run configuration from the documented catalog."""
    try:
        data = _preset_dict(name)
    except KeyError:
        raise ConfigError(
            [f"preset: unknown name {name!r}; catalog: {', '.join(PRESET_NAMES)}"]
        ) from None
    return RunConfig.from_dict(data)
