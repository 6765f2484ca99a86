"""Command-line front end: ``taskalloc {design,simulate,agents,verify}``.

Exit codes: 0 success, 2 infeasible design, 3 configuration error,
4 integration instability, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from taskalloc.agents import AgentSimConfig, simulate_agents
from taskalloc.closed_loop import DENSE, DIAGONAL, NEIGHBOR_SHARED, PayoffMatrix, SimConfig, simulate, equilibrium_residual
from taskalloc.design import (
    MAX_NORM,
    SUM_OF_SQUARES,
    CostFunction,
    design_G,
    evaluate_cost,
    optimal_equilibrium,
    sample_constraints,
    verify_conditions,
)
from taskalloc.errors import (
    ConfigurationError,
    DesignInfeasibleError,
    InfeasibilityError,
    IntegrationInstabilityError,
    SamplingError,
)
from taskalloc.model import (
    HETEROGENEOUS_SENSING,
    RESOURCE_COLLECTION,
    WATER_DISTRIBUTION,
    RateFamily,
    StationaryPair,
)
from taskalloc.passivity import lyapunov_monitor
from taskalloc.protocol import ProtocolParams

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_CONFIG = 3
EXIT_UNSTABLE = 4
EXIT_VERIFY_FAIL = 5

_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_num_or_vec = {"oneOf": [_num, _vec]}
_matrix = {"type": "array", "items": _vec, "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["family", "w"],
    "properties": {
        "family": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": [RESOURCE_COLLECTION, HETEROGENEOUS_SENSING, WATER_DISTRIBUTION]},
                "m": {"type": "integer", "minimum": 1},
                "n": {"type": "integer", "minimum": 1},
                "R": _num_or_vec,
                "alpha": _num_or_vec,
                "beta": _num_or_vec,
                "neighbors": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 1}}},
                "max_levels": _vec,
            },
        },
        "w": _vec,
        "M": {"type": "number", "exclusiveMinimum": 0},
        "cost": {"enum": [SUM_OF_SQUARES, MAX_NORM]},
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eta": {"type": "number", "exclusiveMinimum": 0},
                "theta": {"oneOf": [{"const": "optimal"}, {"const": "uniform"}, _vec]},
                "eta_schedule": {"type": "array", "items": {"type": "array", "items": _num,
                                                            "minItems": 2, "maxItems": 2}},
            },
        },
        "G": {
            "oneOf": [
                {"enum": ["design", "identity"]},
                _matrix,
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["entries"],
                    "properties": {"entries": _matrix, "structure": {"enum": [DIAGONAL, NEIGHBOR_SHARED, DENSE]}},
                },
            ]
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": {"type": "number", "exclusiveMinimum": 0},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "stride": {"type": "integer", "minimum": 1},
                "q0": {"oneOf": [{"enum": ["optimal", "zero"]}, _vec]},
                "x0": {"oneOf": [{"enum": ["optimal", "uniform"]}, _vec]},
                "pin_x": {"type": "boolean"},
                "antistorage": {"type": "boolean"},
            },
        },
        "design": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "structure": {"enum": [DIAGONAL, NEIGHBOR_SHARED, DENSE]},
                "n_starts": {"type": "integer", "minimum": 1},
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "q_max": {"type": "number", "exclusiveMinimum": 0},
                "budget_factor": {"type": "integer", "minimum": 1},
            },
        },
        "agents": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "N": {"type": "integer", "minimum": 1},
                "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                "T": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output": {"type": "string"},
    },
}

DEFAULTS = {
    "M": 1.0,
    "cost": SUM_OF_SQUARES,
    "protocol": {"eta": 1e-4, "theta": "optimal", "eta_schedule": []},
    "G": "design",
    "simulation": {"T": 100.0, "dt": 1e-3, "stride": 100, "q0": "optimal", "x0": "uniform",
                   "pin_x": False, "antistorage": True},
    "design": {"n_starts": 20},
    "sampler": {"count": 5000, "seed": 0, "q_max": 200.0, "budget_factor": 10},
    "agents": {"N": 10000, "seeds": [0, 1, 2, 3, 4]},
    "output": "out",
}


def resolve_config(raw, seed=None, out=None):
    """Validate ``raw`` against the schema and fill defaults; returns a new dict."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config invalid at {path}: {exc.message}") from None
    cfg = json.loads(json.dumps(raw))
    for key, val in DEFAULTS.items():
        if isinstance(val, dict):
            merged = dict(val)
            merged.update(cfg.get(key, {}))
            cfg[key] = merged
        else:
            cfg.setdefault(key, val)
    if seed is not None:
        cfg["sampler"]["seed"] = int(seed)
        cfg["agents"]["seeds"] = [int(seed)]
    if out is not None:
        cfg["output"] = str(out)
    return cfg


def build_family(spec) -> RateFamily:
    kind = spec["kind"]
    if kind == RESOURCE_COLLECTION:
        return RateFamily.resource_collection(spec.get("R", 1.0), spec.get("alpha", 1.0),
                                              spec.get("beta", 1.0), m=spec.get("m"))
    if kind == HETEROGENEOUS_SENSING:
        if "neighbors" not in spec or "n" not in spec:
            raise ConfigurationError("heterogeneous_sensing needs 'neighbors' and 'n'")
        return RateFamily.heterogeneous_sensing(spec["neighbors"], spec["n"], spec.get("R", 1.0),
                                                spec.get("alpha", 1.0), spec.get("beta", 1.0), one_based=True)
    if "max_levels" not in spec:
        raise ConfigurationError("water_distribution needs 'max_levels'")
    return RateFamily.water_distribution(spec["max_levels"])


def _default_structure(family):
    if family.kind == HETEROGENEOUS_SENSING:
        return NEIGHBOR_SHARED
    return DIAGONAL


def parse_matrix(spec, family) -> PayoffMatrix:
    if isinstance(spec, dict):
        structure = spec.get("structure", _default_structure(family))
        entries = spec["entries"]
    else:
        structure, entries = _default_structure(family), spec
    entries = np.array(entries, dtype=float)
    if entries.shape != (family.n, family.m):
        raise ConfigurationError(f"G has shape {entries.shape}, expected ({family.n}, {family.m})")
    nb = family.neighbors if structure == NEIGHBOR_SHARED else None
    return PayoffMatrix(entries, structure, nb)


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Experiment:
    """Resolved configuration with lazily computed equilibrium and design."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.family = build_family(cfg["family"])
        self.w = np.array(cfg["w"], dtype=float)
        if self.w.shape != (self.family.m,) or np.any(self.w < 0):
            raise ConfigurationError("w must be a non-negative vector with one entry per task")
        self.M = float(cfg["M"])
        self.cost = CostFunction(cfg["cost"])
        self.out = Path(cfg["output"])
        self._pair = None
        self._samples = None
        self._design = None

    def write_config(self):
        self.out.mkdir(parents=True, exist_ok=True)
        _dump(self.out / "resolved_config.json", self.cfg)

    @property
    def pair(self) -> StationaryPair:
        if self._pair is None:
            self._pair = optimal_equilibrium(self.family, self.w, self.M, self.cost,
                                             n_starts=self.cfg["design"]["n_starts"])
        return self._pair

    @property
    def samples(self):
        if self._samples is None:
            s = self.cfg["sampler"]
            self._samples = sample_constraints(self.family, self.w, self.M, s["count"], s["seed"],
                                               q_max=s["q_max"], budget_factor=s["budget_factor"])
        return self._samples

    @property
    def structure(self):
        return self.cfg["design"].get("structure", _default_structure(self.family))

    def design(self):
        if self._design is None:
            self._design = design_G(self.samples, self.structure, self.pair, self.family, self.w)
        return self._design

    def supplied_G(self):
        spec = self.cfg["G"]
        if spec == "design":
            return None
        if spec == "identity":
            if self.family.n != self.family.m:
                raise ConfigurationError("identity G needs as many strategies as tasks")
            return PayoffMatrix(np.eye(self.family.n), DIAGONAL)
        return parse_matrix(spec, self.family)

    def G(self):
        G = self.supplied_G()
        return self.design().G if G is None else G

    def theta(self):
        spec = self.cfg["protocol"]["theta"]
        if spec == "optimal":
            return self.pair.x
        if spec == "uniform":
            return np.full(self.family.n, self.M / self.family.n)
        return np.array(spec, dtype=float)

    def sim_config(self, T=None) -> SimConfig:
        sim = self.cfg["simulation"]
        q0 = sim["q0"]
        q0 = self.pair.q if q0 == "optimal" else np.zeros(self.family.m) if q0 == "zero" else np.array(q0)
        x0 = sim["x0"]
        x0 = (self.pair.x if x0 == "optimal" else np.full(self.family.n, self.M / self.family.n)
              if x0 == "uniform" else np.array(x0))
        theta = self.theta()
        if abs(theta.sum() - self.M) > 1e-9:
            raise ConfigurationError("theta must have mass M")
        prm = ProtocolParams(theta, self.cfg["protocol"]["eta"])
        return SimConfig(self.family, self.w, self.G(), prm, q0, x0, T=sim["T"] if T is None else T,
                         dt=sim["dt"], stride=sim["stride"], eta_schedule=self.cfg["protocol"]["eta_schedule"],
                         pin_x=sim["pin_x"])


def cmd_design(exp: Experiment):
    exp.write_config()
    pair = exp.pair
    _dump(exp.out / "equilibrium.json", pair.to_dict())
    if not np.any(exp.w > 0):
        _dump(exp.out / "design_report.json", {
            "degenerate": True,
            "diagnostic": "w = 0: q* = 0 is stationary for every x and any G; no design needed",
            "cost_optimal": 0.0,
        })
        print("degenerate game (w = 0): q* = 0, design skipped")
        return EXIT_OK
    report = exp.design()
    out = report.to_dict()
    supplied = exp.supplied_G()
    if supplied is not None:
        out["supplied_G_verification"] = verify_conditions(supplied, exp.family, exp.w, exp.M,
                                                           exp.samples, pair).to_dict()
    _dump(exp.out / "design_report.json", out)
    print(f"designed G: margin {report.margin:.3e}, verdicts {report.verdicts}")
    return EXIT_OK


def cmd_simulate(exp: Experiment):
    exp.write_config()
    config = exp.sim_config()
    traj = simulate(config, antistorage=exp.cfg["simulation"]["antistorage"])
    traj.write(exp.out)
    summary = _summary(exp, config, traj)
    _dump(exp.out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _summary(exp, config, traj):
    q_end, x_end = traj.q[-1], traj.x[-1]
    c_end, c_opt = evaluate_cost(exp.cost, q_end), exp.pair.cost
    s = {
        "terminal_time": float(traj.times[-1]),
        "terminal_q": q_end.tolist(),
        "terminal_x": x_end.tolist(),
        "terminal_residual": equilibrium_residual((q_end, x_end), config),
        "terminal_cost": c_end,
        "cost_optimal": c_opt,
        "relative_cost_gap": (c_end - c_opt) / c_opt if c_opt > 0 else None,
        "x_distance_to_optimal": float(np.max(np.abs(x_end - exp.pair.x))),
    }
    if traj.L is not None:
        s["lyapunov_monitor"] = lyapunov_monitor(traj, config.G, exp.family, exp.w, config.protocol).to_dict()
    return s


def cmd_agents(exp: Experiment):
    exp.write_config()
    a = exp.cfg["agents"]
    config = exp.sim_config(T=a.get("T"))
    ode = simulate(config)
    ode.write(exp.out, "ode")
    rows = []
    for seed in a["seeds"]:
        traj = simulate_agents(AgentSimConfig(config, a["N"], seed))
        traj.write(exp.out, f"agents_seed{seed}")
        rows.append({"seed": seed, "sup_deviation": float(np.max(np.abs(traj.x - ode.x))),
                     "events": traj.metadata["events"]})
    summary = {"N": a["N"], "horizon": config.T, "per_seed": rows,
               "median_sup_deviation": float(np.median([r["sup_deviation"] for r in rows]))}
    _dump(exp.out / "deviation_summary.json", summary)
    print(f"median sup deviation {summary['median_sup_deviation']:.4f} over {len(rows)} seeds")
    return EXIT_OK


def cmd_verify(exp: Experiment, matrix_path=None):
    exp.write_config()
    if matrix_path is not None:
        try:
            spec = json.loads(Path(matrix_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read G file: {exc}") from None
        G = parse_matrix(spec, exp.family)
    else:
        G = exp.supplied_G()
        if G is None:
            raise ConfigurationError("verify needs --matrix or an explicit G in the config")
    report = verify_conditions(G, exp.family, exp.w, exp.M, exp.samples, exp.pair)
    report.to_json(exp.out / "verification_report.json")
    print(f"verdicts {report.verdicts}: {'pass' if report.passed else 'fail'}")
    return EXIT_OK if report.passed else EXIT_VERIFY_FAIL


def build_parser():
    ap = argparse.ArgumentParser(prog="taskalloc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (("design", "compute q*, x* and a certified G"),
                      ("simulate", "integrate the closed loop"),
                      ("agents", "finite-population runs versus the mean-field ODE"),
                      ("verify", "check the convergence conditions for a given G")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="override sampler and agent seeds")
        if name == "verify":
            p.add_argument("--matrix", help="JSON file with G (nested list or {entries, structure})")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config: {exc}") from None
        exp = Experiment(resolve_config(raw, args.seed, args.out))
        if args.command == "design":
            return cmd_design(exp)
        if args.command == "simulate":
            return cmd_simulate(exp)
        if args.command == "agents":
            return cmd_agents(exp)
        return cmd_verify(exp, args.matrix)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DesignInfeasibleError, InfeasibilityError, SamplingError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except IntegrationInstabilityError as exc:
        print(f"integration instability: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
