"""Command line interface: run, verify, describe.

Configs are single JSON documents validated against a strict schema (unknown
keys are rejected). Exit codes: 0 success, 1 configuration or usage errors,
2 solver non-convergence. The environment variable DD_LOG_LEVEL
(error | info | debug) controls diagnostic logging.
"""

from __future__ import annotations

import argparse
import ast
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import jsonschema
except ImportError:                                   # pragma: no cover
    jsonschema = None

from . import __version__
from .mesh import build_partition_1d, build_partition_2d_strips, merge_partition
from .oracle import (
    energy_distance,
    kt_point,
    monolithic_obstacle,
    monolithic_plaplacian,
    monolithic_poisson,
)
from .problems import (
    ProblemSpec,
    build,
    complementarity_report,
    dual_flux_report,
    glue,
)
from .splitting import AlgorithmParams, run as run_algorithm

log = logging.getLogger("ddsplit")


class ConfigError(ValueError):
    """Configuration file is invalid; message names the offending field."""


# --- field expressions -----------------------------------------------------------

_FUNCS = {"sin": math.sin, "cos": math.cos, "exp": math.exp}
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


def parse_field_expression(text: str, dim: int):
    """Compile an arithmetic expression over x (and y in 2D).

    Allowed: numbers, the coordinate names, + - * / ^, sin, cos, exp.
    """
    allowed_names = {"x"} if dim == 1 else {"x", "y"}
    src = text.replace("^", "**")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from exc
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Constant, ast.Load)):
            if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
                raise ConfigError(f"non-numeric constant in expression {text!r}")
        elif isinstance(node, ast.BinOp) and isinstance(node.op, _BINOPS):
            pass
        elif isinstance(node, (ast.UnaryOp)) and isinstance(node.op, (ast.UAdd, ast.USub)):
            pass
        elif isinstance(node, tuple(_BINOPS) + (ast.UAdd, ast.USub)):
            pass
        elif isinstance(node, ast.Name):
            if node.id not in allowed_names:
                raise ConfigError(
                    f"unknown name {node.id!r} in expression {text!r}; "
                    f"allowed: {sorted(allowed_names | set(_FUNCS))}"
                )
        elif isinstance(node, ast.Call):
            if not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
                raise ConfigError(f"only {sorted(_FUNCS)} calls are allowed, in {text!r}")
            if node.keywords or len(node.args) != 1:
                raise ConfigError(f"bad call arguments in expression {text!r}")
        else:
            raise ConfigError(
                f"disallowed syntax ({type(node).__name__}) in expression {text!r}"
            )
    code = compile(tree, "<field>", "eval")

    def field(*coords):
        env = dict(zip(("x", "y"), coords))
        env.update(_FUNCS)
        return float(eval(code, {"__builtins__": {}}, env))

    return field


# --- config schema ------------------------------------------------------------------

_NUM = {"type": "number"}
_IFACE_KEY = "^[0-9]+,[0-9]+$"

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "geometry"],
    "properties": {
        "kind": {"enum": ["poisson", "plaplacian", "obstacle", "unilateral", "membrane"]},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": ["interval", "strips"]},
                "length": {"type": "number", "exclusiveMinimum": 0},
                "width": {"type": "number", "exclusiveMinimum": 0},
                "height": {"type": "number", "exclusiveMinimum": 0},
                "cuts": {"type": "array", "items": _NUM, "minItems": 1},
                "elements": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 2},
                    "minItems": 2,
                },
                "resolution": {"type": "array"},
            },
        },
        "allow_floating": {"type": "boolean"},
        "f": {
            "anyOf": [
                _NUM,
                {"type": "string"},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["csv"],
                    "properties": {"csv": {"type": "string"}},
                },
            ]
        },
        "p": {"anyOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 1}]},
        "obstacle": {"anyOf": [_NUM, {"type": "string"}]},
        "orientations": {
            "type": "object",
            "additionalProperties": False,
            "patternProperties": {_IFACE_KEY: {"enum": [1, -1]}},
        },
        "permeabilities": {
            "type": "object",
            "additionalProperties": False,
            "patternProperties": {_IFACE_KEY: {"type": "number", "minimum": 0}},
        },
        "algorithm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "gamma": {"anyOf": [_NUM, {"type": "array", "items": _NUM}]},
                "mu": {"anyOf": [_NUM, {"type": "array", "items": _NUM}]},
                "lambda": {"anyOf": [_NUM, {"type": "array", "items": _NUM}]},
                "max_iters": {"type": "integer", "minimum": 0},
                "stop_tol": {"type": "number", "minimum": 0},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "energy_tol": {"type": "number", "exclusiveMinimum": 0},
                "flux_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
        "seed": {"type": "integer"},
    },
}


def load_config(path: str | Path) -> dict:
    """Read and schema-validate a run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config {path} is not valid JSON (line {exc.lineno}, column {exc.colno}): "
            f"{exc.msg}"
        ) from exc
    if jsonschema is not None:
        validator = jsonschema.Draft202012Validator(SCHEMA)
        errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            where = "/".join(str(p) for p in err.absolute_path) or "(top level)"
            raise ConfigError(f"config field {where}: {err.message}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _iface_key(text: str, keys) -> tuple[int, int]:
    i, j = (int(t) for t in text.split(","))
    key = (i - 1, j - 1)
    if key not in keys:
        raise ConfigError(
            f"interface '{text}' does not exist; available: "
            + ", ".join(f"{a+1},{b+1}" for a, b in keys)
        )
    return key


def _load_csv_field(path: str, partition):
    """Nodal source from a CSV of rows x[,y],value (matched to 1e-9)."""
    try:
        raw = np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as exc:
        raise ConfigError(f"cannot read source CSV {path}: {exc}") from exc
    dim = partition.subdomains[0].dim
    if raw.shape[1] != dim + 1:
        raise ConfigError(
            f"source CSV {path} has {raw.shape[1]} columns, expected {dim + 1}"
        )
    table = {tuple(np.round(row[:dim], 9)): row[dim] for row in raw}
    fields = []
    for grid in partition.subdomains:
        vals = np.empty(grid.n_nodes)
        for ell, pt in enumerate(grid.nodes):
            key = tuple(np.round(pt, 9))
            if key not in table:
                raise ConfigError(
                    f"source CSV {path} is missing a value for node {tuple(pt)}"
                )
            vals[ell] = table[key]
        fields.append(vals)
    return fields


def build_problem(cfg: dict):
    """Config dict -> (ProblemSpec, AlgorithmParams, verify tolerances)."""
    geo = cfg["geometry"]
    gtype = geo["type"]
    if gtype == "interval":
        for fieldname in ("length", "cuts", "elements"):
            if fieldname not in geo:
                raise ConfigError(f"geometry/{fieldname} is required for intervals")
        try:
            partition = build_partition_1d(
                geo["length"],
                geo["cuts"],
                geo["elements"],
                allow_floating=bool(cfg.get("allow_floating", False)),
            )
        except ValueError as exc:
            raise ConfigError(f"geometry: {exc}") from exc
        dim = 1
    else:
        for fieldname in ("width", "height", "cuts", "resolution"):
            if fieldname not in geo:
                raise ConfigError(f"geometry/{fieldname} is required for strips")
        try:
            partition = build_partition_2d_strips(
                geo["width"], geo["height"], geo["cuts"], geo["resolution"]
            )
        except ValueError as exc:
            raise ConfigError(f"geometry: {exc}") from exc
        dim = 2

    f = cfg.get("f", 0.0)
    if isinstance(f, str):
        f = parse_field_expression(f, dim)
    elif isinstance(f, dict):
        f = _load_csv_field(f["csv"], partition)

    obstacle = cfg.get("obstacle")
    if isinstance(obstacle, str):
        obstacle = parse_field_expression(obstacle, dim)

    keys = sorted(partition.interfaces)
    orientations = {
        _iface_key(k, keys): v for k, v in cfg.get("orientations", {}).items()
    }
    permeabilities = {
        _iface_key(k, keys): float(v)
        for k, v in cfg.get("permeabilities", {}).items()
    }

    try:
        spec = ProblemSpec(
            partition=partition,
            kind=cfg["kind"],
            f=f,
            p=cfg.get("p", 2.0),
            obstacle=obstacle,
            orientations=orientations,
            permeabilities=permeabilities,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    alg = cfg.get("algorithm", {})
    try:
        params = AlgorithmParams(
            epsilon=alg.get("epsilon", 0.01),
            gamma=alg.get("gamma", 1.0),
            mu_step=alg.get("mu", 1.0),
            relax=alg.get("lambda", 1.0),
            max_iters=alg.get("max_iters", 5000),
            stop_tol=alg.get("stop_tol", 1e-8),
        )
    except ValueError as exc:
        raise ConfigError(f"algorithm: {exc}") from exc

    verify_cfg = cfg.get("verify", {})
    tols = {
        "energy_tol": float(verify_cfg.get("energy_tol", 1e-6)),
        "flux_tol": float(verify_cfg.get("flux_tol", 0.05)),
    }
    return spec, params, tols


# --- output writers --------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def write_trace_csv(path: Path, reports) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("n,residual,branch,theta,dist0,chi,rho\n")
        for r in reports:
            fh.write(
                f"{r.n},{_fmt(r.kt_residual)},{r.branch},{_fmt(r.theta)},"
                f"{_fmt(r.dist0_sq)},{_fmt(r.chi)},{_fmt(r.rho)}\n"
            )


def write_solution_csv(path: Path, glued) -> None:
    grid = glued.merged.grid
    coords = grid.nodes
    order = np.lexsort(tuple(coords[:, d] for d in range(coords.shape[1] - 1, -1, -1)))
    header = ("x,u" if grid.dim == 1 else "x,y,u") + "\n"
    with open(path, "w", newline="\n") as fh:
        fh.write(header)
        for idx in order:
            cols = [_fmt(c) for c in coords[idx]] + [_fmt(glued.values[idx])]
            fh.write(",".join(cols) + "\n")


def write_dual_csvs(outdir: Path, partition, point) -> list[Path]:
    paths = []
    for idx, key in enumerate(partition.keys):
        i, j = key
        iface = partition.interfaces[key]
        path = outdir / f"dual_{i + 1}_{j + 1}.csv"
        header = ("x,g" if iface.coords.shape[1] == 1 else "x,y,g") + "\n"
        with open(path, "w", newline="\n") as fh:
            fh.write(header)
            for r in range(iface.n_nodes):
                cols = [_fmt(c) for c in iface.coords[r]] + [_fmt(point.dual[idx][r])]
                fh.write(",".join(cols) + "\n")
        paths.append(path)
    return paths


# --- commands ------------------------------------------------------------------------------


def _outdir(cfg: dict, args, config_path: Path) -> Path:
    if args.out:
        out = Path(args.out)
    elif "output" in cfg and "dir" in cfg["output"]:
        out = Path(cfg["output"]["dir"])
    else:
        out = config_path.parent / f"{config_path.stem}_out"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_with_overrides(args):
    cfg = load_config(args.config)
    spec, params, tols = build_problem(cfg)
    if args.max_iters is not None:
        params.max_iters = int(args.max_iters)
    if args.tol is not None:
        params.stop_tol = float(args.tol)
    return cfg, spec, params, tols


def cmd_run(args) -> int:
    cfg, spec, params, _ = _build_with_overrides(args)
    outdir = _outdir(cfg, args, Path(args.config))
    pool = ThreadPoolExecutor(max_workers=args.threads) if args.threads > 1 else None
    try:
        oracles, x0 = build(spec, pool=pool)
        ndofs = sum(g.n_dofs for g in spec.partition.subdomains)
        log.info("built %s problem: %d subdomains, %d dofs", spec.kind, spec.partition.m, ndofs)
        t0 = time.perf_counter()
        result = run_algorithm(x0, oracles, params)
        wall = time.perf_counter() - t0
    finally:
        if pool is not None:
            pool.shutdown()

    glued = glue(spec.partition, result.point)
    write_trace_csv(outdir / "trace.csv", result.reports)
    write_solution_csv(outdir / "solution.csv", glued)
    dual_paths = write_dual_csvs(outdir, spec.partition, result.point)

    branch_counts: dict[str, int] = {}
    for r in result.reports:
        branch_counts[r.branch] = branch_counts.get(r.branch, 0) + 1
    summary = {
        "version": __version__,
        "kind": spec.kind,
        "geometry": cfg["geometry"]["type"],
        "subdomains": spec.partition.m,
        "interfaces": [f"{i + 1},{j + 1}" for i, j in spec.partition.keys],
        "seed": cfg.get("seed", 0),
        "threads": args.threads,
        "converged": result.converged,
        "iterations": result.iterations,
        "initial_residual": result.reports[0].kt_residual if result.reports else 0.0,
        "final_residual": result.final_residual,
        "max_interface_jump": glued.max_jump,
        "branch_counts": branch_counts,
        "wall_time_s": wall,
        "outputs": [str(outdir / "trace.csv"), str(outdir / "solution.csv")]
        + [str(p) for p in dual_paths],
    }
    with open(outdir / "summary.json", "w", newline="\n") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")

    status = "converged" if result.converged else "NOT converged"
    print(
        f"{spec.kind}: {status} after {result.iterations} iterations, "
        f"residual {result.final_residual:.3e}, wall {wall:.2f}s -> {outdir}"
    )
    return 0 if result.converged else 2


def cmd_verify(args) -> int:
    cfg, spec, params, tols = _build_with_overrides(args)
    pool = ThreadPoolExecutor(max_workers=args.threads) if args.threads > 1 else None
    try:
        oracles, x0 = build(spec, pool=pool)
        result = run_algorithm(x0, oracles, params)
    finally:
        if pool is not None:
            pool.shutdown()
    if not result.converged:
        print(
            f"solver did not converge in {params.max_iters} iterations "
            f"(residual {result.final_residual:.3e})"
        )
        return 2

    glued = glue(spec.partition, result.point)
    merged = glued.merged
    ok = True

    if spec.kind in ("poisson", "obstacle", "plaplacian"):
        from .oracle import _merged_source

        source = _merged_source(oracles, merged)
        if spec.kind == "poisson":
            u_ref = monolithic_poisson(merged.grid, source)
        elif spec.kind == "obstacle":
            u_ref = monolithic_obstacle(merged.grid, source, spec.obstacle)
        else:
            u_ref = monolithic_plaplacian(merged.grid, source, spec.p_for(0))
        disc = energy_distance(merged.grid, glued.free_values(), u_ref)
        print(f"energy discrepancy vs monolithic: {disc:.6e} (tol {tols['energy_tol']:g})")
        ok &= disc <= tols["energy_tol"]
    else:
        z = kt_point(oracles)
        disc = math.sqrt(
            sum(
                oracles.space.energy_norm_sq(i, result.point.primal[i] - z.primal[i])
                for i in range(spec.partition.m)
            )
        )
        print(
            f"energy discrepancy vs branch-enumeration oracle: {disc:.6e} "
            f"(tol {tols['energy_tol']:g})"
        )
        ok &= disc <= tols["energy_tol"]

    print(f"max interface jump: {glued.max_jump:.6e}")

    if spec.kind == "poisson":
        flux = dual_flux_report(spec.partition, result.point, glued)
        print(
            f"dual flux vs normal-derivative estimate: max diff "
            f"{flux.max_abs_diff:.6e} (tol {tols['flux_tol']:g})"
        )
        ok &= flux.max_abs_diff <= tols["flux_tol"]
    if spec.kind == "obstacle":
        comp = complementarity_report(oracles, result.point)
        print(
            "complementarity: min multiplier "
            f"{comp.min_multiplier:.3e}, max infeasibility {comp.max_infeasibility:.3e}, "
            f"max violation {comp.max_violation:.3e}"
        )
        ok &= comp.max_violation <= 1e-6 and comp.max_infeasibility <= 1e-8

    print("verification PASSED" if ok else "verification FAILED")
    return 0 if ok else 1


def cmd_describe(args) -> int:
    cfg = load_config(args.config)
    spec, params, _ = build_problem(cfg)
    part = spec.partition
    print(f"kind: {spec.kind}")
    print(f"subdomains: {part.m}")
    total = 0
    for i, grid in enumerate(part.subdomains):
        tag = " (floating)" if grid.floating else ""
        plus = ",".join(str(j + 1) for j in part.j_plus(i)) or "-"
        minus = ",".join(str(j + 1) for j in part.j_minus(i)) or "-"
        print(
            f"  subdomain {i + 1}: {grid.n_nodes} nodes, {grid.n_dofs} dofs, "
            f"J+ = {{{plus}}}, J- = {{{minus}}}{tag}"
        )
        total += grid.n_dofs
    print(f"total dofs: {total}")
    kset = " ".join(f"({i + 1},{j + 1})" for i, j in part.keys)
    print(f"interfaces K = {kset}")
    for key in part.keys:
        iface = part.interfaces[key]
        if iface.coords.shape[1] == 1:
            where = f"x = {iface.coords[0, 0]:g}"
        else:
            where = (
                f"x = {iface.coords[0, 0]:g}, y in "
                f"[{iface.coords[:, 1].min():g}, {iface.coords[:, 1].max():g}]"
            )
        print(
            f"  interface ({key[0] + 1},{key[1] + 1}): {iface.n_nodes} shared nodes, {where}"
        )
    print(
        f"algorithm: gamma={params.gamma}, mu={params.mu_step}, lambda={params.relax}, "
        f"epsilon={params.epsilon}, max_iters={params.max_iters}, stop_tol={params.stop_tol:g}"
    )
    return 0


# --- entry point ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ddsplit",
        description="Nonoverlapping domain decomposition by strongly convergent "
        "primal-dual proximal splitting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("verify", cmd_verify), ("describe", cmd_describe)):
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a JSON run configuration")
        p.add_argument("--threads", type=int, default=1, help="subdomain solve threads")
        p.add_argument("--out", default=None, help="output directory (run only)")
        p.add_argument("--max-iters", type=int, default=None, dest="max_iters")
        p.add_argument("--tol", type=float, default=None, help="relative stop tolerance")
        p.set_defaults(fn=fn)
    return parser


def _setup_logging():
    level = os.environ.get("DD_LOG_LEVEL", "error").lower()
    mapping = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=mapping.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:                          # solver/internal failures
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":                            # pragma: no cover
    sys.exit(main())
