"""Command line interface: ``evacontrol simulate|optimize|check|mesh``.

Exit codes: 0 success, 1 solver error, 2 configuration error, 3 check failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .forward import ForwardError
from .linalg import SolveError
from .mesh import EXIT, Exit, MeshError, RoomSpec, cfl_max_tau, compute_geometry, generate_room
from .optimize import ProjectionError
from .scenario import ConfigError, build_mesh, load_config

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2, 3

logger = logging.getLogger("evacontrol")


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "allow_cfl_violation", False):
        cfg.allow_cfl_violation = True
    return cfg


def cmd_simulate(args):
    from .app import run_simulate

    summary = run_simulate(_load(args), args.output_dir, snapshot_stride=args.snapshot_stride)
    print(f"simulated {summary['name']}: J = {summary['objective']:.8g}, "
          f"rho in [{summary['rho_min']:.3e}, {summary['rho_max']:.6f}], output in {args.output_dir}")
    return EXIT_OK


def cmd_optimize(args):
    from .app import run_optimize

    summary = run_optimize(_load(args), args.output_dir, snapshot_stride=args.snapshot_stride,
                           max_iter=args.max_iters, tol=args.tol)
    print(f"optimized {summary['name']}: {summary['status']} after {summary['iterations']} iterations, "
          f"J {summary['objective_initial']:.8g} -> {summary['objective']:.8g}, output in {args.output_dir}")
    return EXIT_OK


def cmd_check(args):
    from .checks import run_check

    cfg = _load(args) if args.config else None
    report = run_check(cfg, inject=args.inject, seed=args.seed)
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_CHECK


def _parse_exit(text):
    try:
        side, start, end = text.split(":")
        return Exit(side, float(start), float(end))
    except ValueError:
        raise argparse.ArgumentTypeError(f"exit must be side:start:end, got {text!r}") from None


def _parse_wall(text):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"wall must be x0,y0,x1,y1, got {text!r}")
    return vals


def cmd_mesh_gen(args):
    from .io import write_mesh

    if args.config:
        mesh = build_mesh(load_config(args.config))
    else:
        if args.width is None or args.height is None:
            raise ConfigError("either a config or both --width and --height are required", "mesh gen")
        mesh = generate_room(RoomSpec(args.width, args.height, args.h, exits=args.exit or [],
                                      walls=args.wall or []))
    write_mesh(args.output, mesh)
    print(f"wrote {args.output}: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles")
    return EXIT_OK


def mesh_info(mesh) -> dict:
    geom = compute_geometry(mesh)
    tags, counts = np.unique(mesh.bface_tags, return_counts=True)
    return {
        "vertices": int(mesh.n_vertices),
        "triangles": int(mesh.n_triangles),
        "boundary_faces": {("exit" if t == EXIT else "wall"): int(n) for t, n in zip(tags, counts)},
        "h_max": float(geom.h),
        "h_min": float(geom.diameter.min()),
        "kappa": float(geom.kappa),
        "area": float(geom.area.sum()),
        "tau_bound": cfl_max_tau(geom),
    }


def cmd_mesh_info(args):
    from .io import read_mesh

    path = Path(args.source)
    is_mesh = path.exists() and path.suffix not in (".yaml", ".yml")
    mesh = read_mesh(path) if is_mesh else build_mesh(load_config(args.source))
    print(json.dumps(mesh_info(mesh), indent=2))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="evacontrol", description="Crowd evacuation simulation and optimal control.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_cmd(name, help_text, func):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("config", help="scenario YAML file or preset name (example1, example2, example3)")
        s.add_argument("--output-dir", default=f"out_{name}")
        s.add_argument("--snapshot-stride", type=int, default=None)
        s.add_argument("--allow-cfl-violation", action="store_true")
        s.set_defaults(func=func)
        return s

    scenario_cmd("simulate", "run the forward model with the configured controls", cmd_simulate)
    s = scenario_cmd("optimize", "optimize the agent controls", cmd_optimize)
    s.add_argument("--max-iters", type=int, default=None)
    s.add_argument("--tol", type=float, default=None)

    s = sub.add_parser("check", help="run the invariant checks")
    s.add_argument("config", nargs="?", default=None, help="scenario (default: built-in coarse room)")
    s.add_argument("--allow-cfl-violation", action="store_true")
    s.add_argument("--report", default=None, help="also write the JSON report here")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject", choices=("box", "adjoint_sign"), default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_check)

    m = sub.add_parser("mesh", help="generate or inspect meshes")
    msub = m.add_subparsers(dest="mesh_command", required=True)
    g = msub.add_parser("gen", help="mesh a rectangular room")
    g.add_argument("config", nargs="?", default=None, help="take the geometry from this scenario")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--width", type=float)
    g.add_argument("--height", type=float)
    g.add_argument("--h", type=float, default=1.0, help="target edge length")
    g.add_argument("--exit", type=_parse_exit, action="append", help="side:start:end (repeatable)")
    g.add_argument("--wall", type=_parse_wall, action="append", help="x0,y0,x1,y1 block (repeatable)")
    g.set_defaults(func=cmd_mesh_gen)
    i = msub.add_parser("info", help="print mesh statistics")
    i.add_argument("source", help="mesh file, scenario file or preset")
    i.set_defaults(func=cmd_mesh_info)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MeshError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ForwardError, ProjectionError, SolveError) as exc:
        step = getattr(exc, "step", None)
        where = f" at time step {step}" if step is not None else ""
        print(f"solver error{where}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
