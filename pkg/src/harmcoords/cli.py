"""Command line: run, sweep, converge, mesh gen, mesh check."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, HarmError
from .mesh import generate_ball_mesh, load_mesh, mesh_summary, save_mesh
from .pipeline import (RunConfig, check_eps_list, convergence_study, dumps, epsilon_sweep, exit_code,
                       run_pipeline)

EXIT_OK, EXIT_VERDICT, EXIT_STAGE, EXIT_CONFIG = 0, 2, 3, 4


def _eps_list(text):
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad epsilon list {text!r}") from exc


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the config-error code instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="YAML or JSON run config")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--mesh", metavar="PATH", help="tet mesh file (native or .mesh)")
    src.add_argument("--gen-h", type=float, metavar="H", help="generate a unit-ball mesh with this edge length")
    p.add_argument("--family", help="metric family: flat, conformal or bump-tensor")
    p.add_argument("--eps", type=_eps_list, metavar="LIST",
                   help="perturbation size; a comma list for sweep")
    p.add_argument("--levels", type=int, metavar="N")
    p.add_argument("--jobs", type=int, metavar="N")
    p.add_argument("--out", metavar="PATH", help="write the JSON report here instead of stdout")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--tol", type=float, metavar="X")


def build_parser():
    ap = _Parser(prog="harmcoords", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="full pipeline on one metric")
    _common(run)
    run.add_argument("--csv", metavar="PATH", help="write vertex coordinates as CSV")
    run.add_argument("--flip", type=int, choices=(0, 1, 2), metavar="I", help="negate coordinate I (testing)")
    _common(sub.add_parser("sweep", help="epsilon sweep with log-log fits"))
    _common(sub.add_parser("converge", help="observed orders under refinement"))
    mesh = sub.add_parser("mesh", help="mesh utilities")
    msub = mesh.add_subparsers(dest="mesh_verb", required=True, parser_class=_Parser)
    gen = msub.add_parser("gen", help="generate a ball mesh")
    gen.add_argument("--h", type=float, required=True)
    gen.add_argument("--radius", type=float, default=1.0)
    gen.add_argument("--format", default="native-ascii", choices=("native-ascii", "medit-mesh"))
    gen.add_argument("--out", required=True, metavar="PATH")
    chk = msub.add_parser("check", help="load a mesh and print its summary")
    chk.add_argument("path")
    return ap


def config_from_args(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    kw = {"family": args.family, "levels": args.levels, "jobs": args.jobs, "seed": args.seed, "tol": args.tol,
          "out": args.out}
    if args.mesh:
        kw.update(mesh=args.mesh, gen_h=None)
    elif args.gen_h is not None:
        kw.update(gen_h=args.gen_h, mesh=None)
    if args.eps is not None:
        if args.verb == "sweep":
            kw["eps_list"] = check_eps_list(args.eps)
        elif len(args.eps) != 1:
            raise ConfigError("--eps takes a single value outside sweep")
        else:
            kw["eps"] = args.eps[0]
    if args.verb == "run":
        kw.update(csv=args.csv, flip_coordinate=args.flip)
    return cfg.override(**kw)


def _emit(text, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _mesh_verb(args):
    try:
        if args.mesh_verb == "gen":
            m = generate_ball_mesh(args.h, radius=args.radius)
            save_mesh(m, args.out, format=args.format)
        else:
            m = load_mesh(args.path)
    except (HarmError, ValueError, OSError) as exc:
        print(f"harmcoords: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps(mesh_summary(m), indent=2))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verb == "mesh":
        return _mesh_verb(args)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"harmcoords: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.verb == "run":
        report = run_pipeline(cfg)
        _emit(dumps(report), cfg.out)
        if report["status"] != "ok":
            print(f"harmcoords: {report['failed_stage']}: {report['error']}", file=sys.stderr)
        return exit_code(report)
    try:
        rep = epsilon_sweep(cfg) if args.verb == "sweep" else convergence_study(cfg)
    except ConfigError as exc:
        print(f"harmcoords: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit(dumps(rep), cfg.out)
    rows = rep["rows"] if args.verb == "sweep" else rep["levels"]
    return EXIT_OK if all("error" not in r for r in rows) else EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
