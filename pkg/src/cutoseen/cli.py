"""Configuration-driven runs: ``cutoseen run <config> [--out DIR] [--quiet]``.

The configuration is an INI file (``key = value`` lines grouped under
``[section]`` headers). Unknown sections or keys are rejected. Every
run writes ``summary.json`` echoing the parsed configuration; steady
cases also write ``convergence.csv`` (and ``sweep.csv`` when offsets are
given), the transient cavity writes ``timeseries.csv``.

Exit status: 0 on success, 2 for configuration errors, 1 for failed solves.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cut_geometry import LevelSet
from .forms import StabilizationConfig
from .mesh import build_structured_mesh, write_vtk
from .verification import (
    ERROR_FIELDS,
    cut_sweep,
    patch_case,
    run_convergence,
    taylor_case,
)

CASES = ("taylor", "patch", "custom-level-set", "transient-cavity")

# section -> key -> (parser, default); None marks a required key
SCHEMA = {
    "run": {
        "case": (str, None),
        "k": (int, "1"),
        "N": ("ints", "10, 20, 40, 80"),
        "subdivision": ("optint", "auto"),
        "condition_estimate": ("bool", "false"),
        "emit_vtk": ("bool", "false"),
    },
    "physics": {
        "mu": (float, "0.1"),
        "sigma": (float, "1.0"),
        "beta": ("floats", "1.0, 0.5"),
        "dt": (float, "0.01"),
        "theta": (float, "0.5"),
        "steps": (int, "100"),
        "ramp_time": ("optfloat", "none"),
        "lid_speed": (float, "1.0"),
        "picard_tol": (float, "1e-8"),
        "picard_max": (int, "50"),
    },
    "stabilization": {
        "gamma": (float, "30.0"),
        "gamma_beta": (float, "0.05"),
        "gamma_p": (float, "0.05"),
        "gamma_u": ("optfloat", "auto"),
        "gamma_mu": (float, "0.05"),
        "gamma_sigma": (float, "0.001"),
        "c_u": (float, str(1.0 / 6.0)),
        "c_sigma": (float, str(1.0 / 12.0)),
        "use_simplified_gbeta": ("optbool", "auto"),
        "ghost_terms": ("words", "beta, u, p, sigma, mu"),
    },
    "geometry": {
        "center": ("floats", "0.5, 0.5"),
        "radius": (float, "0.45"),
        "offset": ("floats", "0.0, 0.0"),
        "half_width": (float, "0.4"),
        "expression": (str, ""),
        "sweep_N": (int, "40"),
        "sweep_offsets": ("floats", ""),
    },
    "output": {
        "directory": (str, "cutoseen-out"),
        "vtk_stride": (int, "0"),
    },
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


@dataclass
class RunConfig:
    values: dict
    raw: dict

    def __getitem__(self, item):
        section, key = item.split(".")
        return self.values[section][key]

    def stabilization(self) -> StabilizationConfig:
        s = self.values["stabilization"]
        try:
            return StabilizationConfig(
                gamma=s["gamma"],
                gamma_beta=s["gamma_beta"],
                gamma_p=s["gamma_p"],
                gamma_u=s["gamma_u"],
                gamma_mu=s["gamma_mu"],
                gamma_sigma=s["gamma_sigma"],
                c_u=s["c_u"],
                c_sigma=s["c_sigma"],
                use_simplified_gbeta=s["use_simplified_gbeta"],
                ghost_terms=tuple(s["ghost_terms"]),
            )
        except ValueError as exc:
            raise ConfigError("stabilization", str(exc)) from exc


_AUTO = ("auto", "none", "")


def _parse(kind, text: str, key: str):
    t = text.strip()
    try:
        if kind is str:
            return t
        if kind in (int, float):
            return kind(t)
        if kind == "ints":
            return [int(v) for v in t.split(",") if v.strip()]
        if kind == "floats":
            return [float(v) for v in t.split(",") if v.strip()]
        if kind == "words":
            return [v.strip() for v in t.split(",") if v.strip()]
        if kind == "bool":
            return _bool(t)
        if kind == "optbool":
            return None if t.lower() in _AUTO else _bool(t)
        if kind == "optint":
            return None if t.lower() in _AUTO else int(t)
        if kind == "optfloat":
            return None if t.lower() in _AUTO else float(t)
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {text!r}: {exc}") from exc
    raise AssertionError(kind)


def _bool(t: str) -> bool:
    low = t.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {t!r}")


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed file: {exc}") from exc
    raw = {sec: dict(parser.items(sec)) for sec in parser.sections()}
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    for sec, items in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(sec, "unknown section")
        for key in items:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{sec}.{key}", "unknown key")
    values = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (kind, default) in keys.items():
            text = raw.get(sec, {}).get(key, default)
            if text is None:
                raise ConfigError(f"{sec}.{key}", "missing required key")
            values[sec][key] = _parse(kind, text, f"{sec}.{key}")
    cfg = RunConfig(values, raw)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    if v["run"]["case"] not in CASES:
        raise ConfigError("run.case", f"must be one of {', '.join(CASES)}")
    if v["run"]["k"] not in (1, 2):
        raise ConfigError("run.k", "polynomial order must be 1 or 2")
    Ns = v["run"]["N"]
    if not Ns or any(n < 1 for n in Ns) or any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ConfigError("run.N", "need a strictly increasing list of positive integers")
    if not v["physics"]["mu"] > 0.0:
        raise ConfigError("physics.mu", "viscosity must be positive")
    if v["physics"]["sigma"] < 0.0:
        raise ConfigError("physics.sigma", "must be non-negative")
    if not 0.0 < v["physics"]["theta"] <= 1.0:
        raise ConfigError("physics.theta", "must lie in (0, 1]")
    if not v["physics"]["dt"] > 0.0:
        raise ConfigError("physics.dt", "must be positive")
    if v["output"]["vtk_stride"] < 0:
        raise ConfigError("output.vtk_stride", "must be non-negative")
    for key, n in (("center", 2), ("offset", 2)):
        if len(v["geometry"][key]) != n:
            raise ConfigError(f"geometry.{key}", f"expected {n} comma-separated numbers")
    if len(v["physics"]["beta"]) != 2:
        raise ConfigError("physics.beta", "expected 2 comma-separated numbers")
    if not v["geometry"]["radius"] > 0.0:
        raise ConfigError("geometry.radius", "must be positive")
    if v["run"]["case"] == "custom-level-set" and not v["geometry"]["expression"]:
        raise ConfigError("geometry.expression", "required for the custom-level-set case")
    cfg.stabilization()


_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sqrt", "abs", "sin", "cos", "tan", "exp", "log", "minimum", "maximum", "hypot", "arctan2", "pi")
}


def expression_level_set(expression: str):
    """Level set from a numpy expression in ``x`` and ``y``."""
    code = compile(expression, "<geometry.expression>", "eval")
    allowed = set(_EXPR_NAMESPACE) | {"x", "y"}
    unknown = set(code.co_names) - allowed
    if unknown:
        raise ConfigError("geometry.expression", f"unknown names {sorted(unknown)}")

    def func(p):
        p = np.atleast_2d(p)
        env = dict(_EXPR_NAMESPACE, x=p[:, 0], y=p[:, 1])
        return np.broadcast_to(np.asarray(eval(code, {"__builtins__": {}}, env), dtype=float), (len(p),)).copy()

    return lambda mesh: LevelSet.on_mesh(mesh, func)


# ---------------------------------------------------------------------------


def _log(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg, file=sys.stderr, flush=True)


def _vertex_fields(disc, sol):
    mesh = disc.mesh
    nv = mesh.n_vertices
    u = np.zeros((nv, 2))
    p = np.zeros(nv)
    act = disc.topo.active
    verts = mesh.triangles[act].ravel()
    dofs = disc.space.cell_dofs[act, :3].ravel()
    u[verts] = sol.velocity[dofs]
    p[verts] = sol.pressure[dofs]
    return u, p


def _steady(cfg: RunConfig, out: Path, quiet: bool) -> dict:
    run, phys, geo = cfg.values["run"], cfg.values["physics"], cfg.values["geometry"]
    case_name = run["case"]
    center = tuple(np.add(geo["center"], geo["offset"]))
    if case_name == "patch":
        case = patch_case(phys["mu"], phys["sigma"], phys["beta"], center, geo["radius"])
    else:
        case = taylor_case(phys["mu"], phys["sigma"], center, geo["radius"])
    levelset = expression_level_set(geo["expression"]) if case_name == "custom-level-set" else None
    stab = cfg.stabilization()
    k = run["k"]
    conds = {}

    def after(N, disc, system, sol):
        _log(quiet, f"N={N}: {disc.space.n_dofs} scalar dofs, residual {sol.residual:.2e}")
        if run["condition_estimate"]:
            from .solver import estimate_condition

            conds[N] = estimate_condition(system)
        if run["emit_vtk"]:
            u, p = _vertex_fields(disc, sol)
            write_vtk(
                out / f"fields_N{N}.vtk",
                disc.mesh,
                cells=disc.topo.active,
                cell_data={"label": disc.topo.labels.astype(float)},
                point_data={"velocity": u, "pressure": p},
            )

    table = run_convergence(case, k, run["N"], stab, run["subdivision"], after, levelset)
    table.to_csv(out / "convergence.csv")
    eocs = table.eocs()
    residuals = [r.residual for r in table.rows if r.errors is not None]
    result = {
        "rows": [
            {
                "N": r.N,
                "h": r.h,
                "errors": None if r.errors is None else dict(zip(ERROR_FIELDS, r.errors.values().tolist())),
                "note": r.note,
            }
            for r in table.rows
        ],
        "last_eoc": {k_: _finite(eocs[-1, j]) for j, k_ in enumerate(ERROR_FIELDS)} if len(table.rows) > 1 else {},
        "max_residual": max(residuals) if residuals else None,
        "failed_rows": sum(r.errors is None for r in table.rows),
    }
    if conds:
        result["condition_estimates"] = {str(k_): v for k_, v in conds.items()}
    if geo["sweep_offsets"] and levelset is None:
        N = geo["sweep_N"]
        offsets = [o / N for o in geo["sweep_offsets"]]
        rep = cut_sweep(case, k, N, offsets, stab, condition=True)
        rep.to_csv(out / "sweep.csv")
        result["sweep"] = {
            "N": N,
            "energy_error_ratio": rep.energy_ratio,
            "condition_ratio": rep.condition_ratio,
            "velocity_L2_ratio": rep.velocity_ratio,
        }
    return result


def _finite(x):
    return float(x) if math.isfinite(x) else None


def _transient(cfg: RunConfig, out: Path, quiet: bool) -> dict:
    from .forms import discretize
    from .navier_stokes import FlowProblem, cavity_lid, run_transient, square_level_set

    run, phys, geo = cfg.values["run"], cfg.values["physics"], cfg.values["geometry"]
    N = run["N"][-1]
    center = tuple(np.add(geo["center"], geo["offset"]))
    mesh = build_structured_mesh(N, N)
    disc = discretize(mesh, square_level_set(mesh, center, geo["half_width"]), run["k"], run["subdivision"])
    problem = FlowProblem(
        disc,
        mu=phys["mu"],
        g=cavity_lid(center, geo["half_width"], phys["lid_speed"]),
        ramp_time=phys["ramp_time"],
    )
    stride = cfg["output.vtk_stride"]
    path = out / "timeseries.csv"
    fh = path.open("w", newline="")
    fh.write("step,time,picard_iterations,residual,mass_imbalance\n")

    def after(state, rep):
        step = int(round(rep.time / phys["dt"]))
        fh.write(f"{step},{rep.time:.10e},{rep.picard_iterations},{rep.residual:.10e},{rep.mass_imbalance:.10e}\n")
        if step % 10 == 0:
            _log(quiet, f"t={rep.time:.3f}: {rep.picard_iterations} Picard iterations")
        if run["emit_vtk"] and stride > 0 and step % stride == 0:
            u, p = _vertex_fields(disc, state.solution)
            cells = disc.topo.active
            write_vtk(out / f"fields_N{N}_step{step:05d}.vtk", mesh, cells=cells, point_data={"velocity": u, "pressure": p})

    try:
        state, reports = run_transient(
            problem,
            phys["dt"],
            phys["steps"],
            phys["theta"],
            cfg.stabilization(),
            tol=phys["picard_tol"],
            max_picard=phys["picard_max"],
            callback=after,
        )
    finally:
        fh.close()
    if run["emit_vtk"]:
        u, p = _vertex_fields(disc, state.solution)
        write_vtk(out / f"fields_N{N}.vtk", mesh, cells=disc.topo.active, point_data={"velocity": u, "pressure": p})
    return {
        "N": N,
        "reynolds": phys["lid_speed"] * 2 * geo["half_width"] / phys["mu"],
        "steps": len(reports),
        "max_picard_iterations": max(r.picard_iterations for r in reports),
        "max_residual": max(r.residual for r in reports),
        "max_mass_imbalance": max(r.mass_imbalance for r in reports),
    }


def run(config_path, out=None, quiet: bool = False) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        _error_record("config", exc.key, exc.message)
        return 2
    outdir = Path(out if out is not None else cfg["output.directory"])
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        if cfg["run.case"] == "transient-cavity":
            result = _transient(cfg, outdir, quiet)
        else:
            result = _steady(cfg, outdir, quiet)
    except ConfigError as exc:
        _error_record("config", exc.key, exc.message, outdir)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable record
        _error_record("solve", type(exc).__name__, str(exc), outdir)
        return 1
    summary = {
        "config": cfg.raw,
        "case": cfg["run.case"],
        "result": result,
        "wall_time_seconds": time.perf_counter() - start,
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _log(quiet, f"wrote {outdir}")
    return 0


def _error_record(kind: str, key: str, message: str, outdir: Path | None = None) -> None:
    record = json.dumps({"error": kind, "key": key, "message": message})
    print(record, file=sys.stderr)
    if outdir is not None:
        (outdir / "error.json").write_text(record + "\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cutoseen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a config file")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory (overrides [output] directory)")
    p_run.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)
    return run(args.config, args.out, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
