"""Command-line driver.

``sparsesem solve|converge|lshape|timestep|bench|mesh``. Tables are CSV, run
reports are YAML, and coefficient dumps carry 17 significant digits. Exit code
2 means a configuration error and 3 a solver error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from . import problems
from .config import ConfigError, ProblemConfig, builtin_config, dump_config, load_config, make_field
from .geometry import GeometryError
from .hps import Hierarchy, HPSError, InterfaceResidualWarning, Solution, timestep_backward_euler
from .leaf import LeafSingularError
from .mesh import Mesh, MeshError, make_rectangle, read_mesh, refine_uniform, write_mesh

EXIT_CONFIG = 2
EXIT_SOLVER = 3

DEFAULT_CONFIG = {"solve": "helmholtz", "converge": "converge", "lshape": "lshape",
                  "timestep": "convection_diffusion", "bench": "bench", "mesh": "helmholtz"}


@dataclass
class RunReport:
    """What a run did: stage times, problem size, errors and files written."""

    command: str
    n_dof: int = 0
    n_elem: int = 0
    times: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        return yaml.safe_dump(_py(asdict(self)), sort_keys=False)


def _py(v):
    if isinstance(v, dict):
        return {str(k): _py(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_py(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


# ---------------------------------------------------------------------------
# output helpers


def write_csv(path: str, header, rows) -> str:
    # csv's default dialect quotes as needed and ends records with CRLF
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def format_coefficients(sol: Solution) -> str:
    """Element coefficient matrices, one row of ``X`` per line, 17 significant digits."""
    cplx = any(np.iscomplexobj(X) and np.any(np.imag(X)) for X in sol.coeffs)
    lines = ["# sparsesem coefficients: u = sum X[i, j] T_i(s) T_j(r)"]
    for k, X in enumerate(sol.coeffs):
        lines.append(f"element {k} order {X.shape[0] - 1}")
        for row in X:
            if cplx:
                lines.append(" ".join(f"{z.real:.16e}{z.imag:+.16e}j" for z in row))
            else:
                lines.append(" ".join(f"{float(np.real(z)):.16e}" for z in row))
    return "\n".join(lines) + "\n"


def write_solution_csv(path: str, sol: Solution, nx: int, ny: int) -> str:
    X, Y, U = sol.sample_grid(nx, ny)
    cplx = np.iscomplexobj(U) and np.any(np.imag(U[np.isfinite(U)]))
    header = ["x", "y", "u_re", "u_im"] if cplx else ["x", "y", "u"]
    rows = []
    for x, y, u in zip(X.ravel(), Y.ravel(), U.ravel()):
        if not np.isfinite(u):
            continue  # outside the domain
        rows.append([x, y, float(u.real), float(u.imag)] if cplx else [x, y, float(np.real(u))])
    return write_csv(path, header, rows)


def _grid(args, cfg: ProblemConfig):
    if args.grid:
        try:
            nx, ny = (int(v) for v in args.grid.lower().split("x"))
        except ValueError:
            raise ConfigError(f"--grid expects NxM, got {args.grid!r}") from None
        if nx < 2 or ny < 2:
            raise ConfigError("--grid needs at least 2 points per direction")
        return nx, ny
    return tuple(cfg.sample["grid"])


def _out(args, *parts) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, *parts)


def _config(args) -> ProblemConfig:
    cfg = load_config(args.config) if args.config else builtin_config(DEFAULT_CONFIG[args.command])
    if getattr(args, "storage", None):
        cfg.solver["storage"] = args.storage
    if getattr(args, "threads", None):
        cfg.solver["threads"] = args.threads
    cfg.validate()
    return cfg


def _mesh(args, cfg: ProblemConfig, p: int | None = None) -> Mesh:
    p = p if p is not None else args.p
    if args.mesh:
        try:
            mesh = read_mesh(args.mesh)
        except (OSError, MeshError) as exc:
            raise ConfigError(f"--mesh: {exc}") from exc
        return mesh.with_orders(cfg.orders(mesh, p))
    return cfg.build_mesh(p)


def _hierarchy(cfg: ProblemConfig, mesh: Mesh, f=None) -> Hierarchy:
    opts = cfg.solver_options()
    return Hierarchy(mesh, cfg.build_pdo(), cfg.rhs_field() if f is None else f, storage=opts["storage"],
                     threads=opts["threads"], max_rank=opts["max_rank"], strict=opts["strict"],
                     residual_tol=opts["residual_tol"])


def _solve(cfg: ProblemConfig, mesh: Mesh):
    h = _hierarchy(cfg, mesh).build()
    sol = h.solve(cfg.boundary_field())
    return h, sol


def _errors(cfg: ProblemConfig, sol: Solution, nx: int, ny: int) -> dict:
    ex = cfg.exact_solution()
    if ex is None:
        return {}
    X, Y, U = sol.sample_grid(nx, ny)
    ok = np.isfinite(U)
    ue = ex.u(X[ok], Y[ok])
    return {"l2_relative": sol.l2_error(ex.u), "max_abs_sampled": float(np.max(np.abs(U[ok] - ue)))}


def _finish(args, report: RunReport) -> RunReport:
    path = _out(args, f"{report.command}_report.yaml")
    report.outputs.append(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    if not args.quiet:
        sys.stdout.write(report.to_text())
    return report


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> RunReport:
    cfg = _config(args)
    mesh = _mesh(args, cfg)
    h, sol = _solve(cfg, mesh)
    nx, ny = _grid(args, cfg)
    rep = RunReport("solve", h.n_dof, mesh.n_elem, dict(h.timings), _errors(cfg, sol, nx, ny))
    coef = _out(args, "coefficients.txt")
    with open(coef, "w", encoding="utf-8") as fh:
        fh.write(format_coefficients(sol))
    rep.outputs += [coef, write_solution_csv(_out(args, "solution.csv"), sol, nx, ny)]
    return _finish(args, rep)


def cmd_converge(args) -> RunReport:
    cfg = _config(args)
    ex = cfg.exact_solution()
    if ex is None:
        raise ConfigError("converge needs an exact section")
    sweep = cfg.sweep or {"kind": "h", "values": [2, 4, 8, 16]}
    if sweep["kind"] == "h" and cfg.mesh["type"] != "rectangle":
        raise ConfigError("an h sweep needs a rectangle mesh")
    rows, logs = [], []
    for v in sweep["values"]:
        if sweep["kind"] == "h":
            b = cfg.mesh.get("bounds", [0, 1, 0, 1])
            mesh = make_rectangle(tuple(b), v, v)
            mesh = mesh.with_orders(cfg.orders(mesh, args.p))
            key = (b[1] - b[0]) / v
        else:
            mesh = _mesh(args, cfg, p=v)
            key = v
        h, sol = _solve(cfg, mesh)
        err = sol.l2_error(ex.u)
        rows.append([key, h.n_dof, err, h.timings["local"], h.timings["global"], h.timings["solve"]])
        logs.append((key, err))
    col = "h" if sweep["kind"] == "h" else "p"
    path = write_csv(_out(args, "convergence.csv"), [col, "N", "l2_relative_error", "t_local", "t_global", "t_solve"], rows)
    rep = RunReport("converge", rows[-1][1], 0, errors={"final": rows[-1][2]}, outputs=[path])
    if sweep["kind"] == "h" and len(logs) > 1:
        hs, es = np.array(logs).T
        ok = es > 0
        rep.extra["slope"] = float(np.polyfit(np.log(hs[ok]), np.log(es[ok]), 1)[0]) if ok.sum() > 1 else None
    return _finish(args, rep)


def cmd_lshape(args) -> RunReport:
    cfg = _config(args)
    opts = cfg.lshape_options()
    tols = args.tol or opts["tolerances"]
    t0 = time.perf_counter()
    met, history, mesh = problems.lshape_hp(tols, p0=opts["p0"], p_max=opts["p_max"],
                                            max_levels=opts["max_levels"], max_dof=opts["max_dof"])
    elapsed = time.perf_counter() - t0
    out = write_csv(_out(args, "lshape.csv"), ["tolerance", "N", "error"], met)
    hist = write_csv(_out(args, "lshape_history.csv"), ["pass", "N", "error", "levels", "p_min", "p_max", "n_elem"],
                     [[i, s.n_dof, s.error, s.levels, s.p_min, s.p_max, s.n_elem] for i, s in enumerate(history)])
    rep = RunReport("lshape", history[-1].n_dof, mesh.n_elem, {"total": elapsed},
                    {"final": history[-1].error}, [out, hist],
                    {"levels": history[-1].levels, "p_range": [history[-1].p_min, history[-1].p_max],
                     "met": [float(t) for t, _, _ in met]})
    _finish(args, rep)
    missing = sorted(set(map(float, tols)) - {float(t) for t, _, _ in met}, reverse=True)
    if missing:
        raise HPSError(f"tolerances {missing} not reached within the level and N caps")
    return rep


def cmd_timestep(args) -> RunReport:
    cfg = _config(args)
    ts = cfg.timestep_options()
    mesh = _mesh(args, cfg)
    vel, div = cfg.velocity()
    opts = cfg.solver_options()
    modes = ["rebuild"] if args.no_update else ["update"]
    if args.compare and not args.no_update:
        modes.append("rebuild")
    timing, sol, snaps = [], None, {}
    for mode in modes:
        t0 = time.perf_counter()
        s, sn, _ = timestep_backward_euler(mesh, make_field(ts["u0"]), ts["kappa"], vel, ts["dt"], ts["t_final"],
                                           div_velocity=div, use_update=(mode == "update"),
                                           snapshot_times=ts["snapshots"], storage=opts["storage"],
                                           threads=opts["threads"])
        timing.append([mode, time.perf_counter() - t0])
        if sol is None:
            sol, snaps = s, sn
    nx, ny = _grid(args, cfg)
    outs = [write_csv(_out(args, "timing.csv"), ["mode", "seconds"], timing)]
    for t, snap in sorted(snaps.items()):
        outs.append(write_solution_csv(_out(args, f"snapshot_t{t:g}.csv"), snap, nx, ny))
    outs.append(write_solution_csv(_out(args, "final.csv"), sol, nx, ny))
    n = sum((q + 1) ** 2 for q in mesh.orders)
    rep = RunReport("timestep", n, mesh.n_elem, {m: t for m, t in timing}, outputs=outs,
                    extra={"mass_final": sol.integral(), "steps": int(round(ts["t_final"] / ts["dt"]))})
    if len(timing) == 2:
        rep.extra["speedup"] = timing[1][1] / timing[0][1]
    return _finish(args, rep)


def cmd_bench(args) -> RunReport:
    cfg = _config(args)
    sweep = cfg.sweep or {"kind": "h", "values": [2, 4, 8, 16]}
    rows = []
    for v in sweep["values"]:
        if sweep["kind"] == "h":
            mesh = make_rectangle(tuple(cfg.mesh.get("bounds", [0, 1, 0, 1])), v, v)
            mesh = mesh.with_orders(cfg.orders(mesh, args.p))
        else:
            mesh = _mesh(args, cfg, p=v)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", InterfaceResidualWarning)
            h, _ = _solve(cfg, mesh)
        rows.append([v, h.n_dof, h.timings["local"], h.timings["global"], h.timings["solve"]])
    col = "n" if sweep["kind"] == "h" else "p"
    path = write_csv(_out(args, "bench.csv"), [col, "N", "t_local", "t_global", "t_solve"], rows)
    return _finish(args, RunReport("bench", rows[-1][1], 0, outputs=[path]))


def cmd_mesh(args) -> RunReport:
    if args.mesh:
        try:
            mesh = read_mesh(args.mesh)
        except (OSError, MeshError) as exc:
            raise ConfigError(f"--mesh: {exc}") from exc
        if args.p:
            mesh = mesh.with_orders([args.p] * mesh.n_elem)
    else:
        mesh = _config(args).build_mesh(args.p)
    for _ in range(args.refine):
        mesh = refine_uniform(mesh)
    outs = []
    if args.write:
        outs.append(_out(args, args.write))
        write_mesh(mesh, outs[-1])
    orders = [q for q in mesh.orders if q is not None]
    info = {"vertices": len(mesh.vertices), "quads": sum(len(e) == 4 for e in mesh.elements),
            "triangles": sum(len(e) == 3 for e in mesh.elements), "edges": len(mesh.edges),
            "boundary_edges": len(mesh.boundary_edges), "h": float(mesh.h), "area": float(mesh.area),
            "bbox": [float(v) for v in mesh.bbox]}
    if orders:
        info["p_range"] = [min(orders), max(orders)]
    n = sum((q + 1) ** 2 for q in orders) if len(orders) == mesh.n_elem else 0
    return _finish(args, RunReport("mesh", n, mesh.n_elem, outputs=outs, extra=info))


def cmd_config(args) -> RunReport:
    cfg = _config(args)
    sys.stdout.write(dump_config(cfg))
    return RunReport("config")


COMMANDS = {"solve": cmd_solve, "converge": cmd_converge, "lshape": cmd_lshape, "timestep": cmd_timestep,
            "bench": cmd_bench, "mesh": cmd_mesh, "config": cmd_config}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file, or builtin:NAME")
    common.add_argument("--mesh", help="mesh file replacing the config's mesh")
    common.add_argument("--p", type=int, help="polynomial order for every element")
    common.add_argument("--out", default="sparsesem_out", help="output directory")
    common.add_argument("--grid", help="sampling grid NxM for CSV output")
    common.add_argument("--threads", type=int, help="worker threads (1 is deterministic)")
    common.add_argument("--storage", choices=("full", "lean"), help="operator storage mode")
    common.add_argument("--quiet", action="store_true", help="do not echo the run report")
    ap = argparse.ArgumentParser(prog="sparsesem", description="Sparse spectral element solver with HPS merging.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="build and solve one problem")
    sub.add_parser("converge", parents=[common], help="error table over an h or p sweep")
    ls = sub.add_parser("lshape", parents=[common], help="hp refinement toward the L-shape corner")
    ls.add_argument("--tol", type=float, nargs="+", help="tolerances to reach")
    ts = sub.add_parser("timestep", parents=[common], help="backward Euler run")
    ts.add_argument("--no-update", action="store_true", help="rebuild the solver every step")
    ts.add_argument("--compare", action="store_true", help="also time the rebuild mode")
    sub.add_parser("bench", parents=[common], help="stage timings over a sweep")
    ms = sub.add_parser("mesh", parents=[common], help="generate or inspect a mesh file")
    ms.add_argument("--refine", type=int, default=0, help="uniform refinements")
    ms.add_argument("--write", metavar="NAME", help="write the mesh to NAME inside --out")
    sub.add_parser("config", parents=[common], help="print the normalized config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, MeshError, GeometryError) as exc:
        print(f"sparsesem: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HPSError, LeafSingularError, np.linalg.LinAlgError) as exc:
        print(f"sparsesem: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return 0


if __name__ == "__main__":
    sys.exit(main())
