"""Command-line entry point: ``debulk <subcommand> ...``.

Configuration is layered: defaults, then ``--config FILE`` (nested JSON as
written by ``PipelineConfig.save``), then individual flags. The worker
count can also come from the ``DEBULK_WORKERS`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import io as dio
from .meshing import mesh_patch
from .net import PlyNet
from .optimizer import solve
from .pipeline import (
    EXIT_INCONCLUSIVE,
    PipelineConfig,
    compare,
    prepare_heightmap,
    resolve_workers,
    run_patches,
    segment_heightmap,
)
from .postprocess import DebulkReport
from .segmentation import load_patches, save_patches
from .synth import Pocket, SceneSpec, debulked_cloud, graded_scene_spec, generate
from .wrinkle2d import tent_chain, simulate_2d

EXIT_IO = 4

# flag, config section (None = top level), key, type, scale to config units, help
_CONFIG_FLAGS = [
    ("--cut-height", "segmentation", "cut_height", float, 1.0, "heightmap cut for pocket detection, mm"),
    ("--area-tol", "segmentation", "area_tol", float, 1.0, "minimum pocket area, cm^2"),
    ("--peak-tol", "segmentation", "peak_tol", float, 1.0, "minimum pocket peak height, mm"),
    ("--target-nodes", "mesh", "target_node_count", int, 1.0, "target node count per pocket"),
    ("--ply-boundary-tol", "mesh", "ply_boundary_tol", float, 1.0, "rim nodes this close to the ply outline slide, mm"),
    ("--mold-contact-tol", "mesh", "mold_contact_tol", float, 1.0, "ply-to-mold gap counted as contact, mm"),
    ("--thickness", "material", "t", float, 1e-3, "nominal ply thickness, mm"),
    ("--youngs-modulus", "material", "E", float, 1.0, "bending modulus, Pa"),
    ("--shear-modulus", "material", "G", float, 1.0, "in-plane shear modulus, Pa"),
    ("--density", "material", "rho", float, 1.0, "ply density, kg/m^3"),
    ("--friction", "material", "mu", float, 1.0, "ply-mold friction coefficient"),
    ("--bulk-factor", "material", "beta", float, 1.0, "uncompacted over consolidated thickness"),
    ("--pressure", "material", "P", float, 1.0, "vacuum pressure, Pa"),
    ("--gravity", "material", "g", float, 1.0, "gravitational acceleration, m/s^2"),
    ("--max-iterations", "solver", "max_iterations", int, 1.0, "outer augmented Lagrangian iterations"),
    ("--max-inner", "solver", "max_inner", int, 1.0, "inner iterations per outer step"),
    ("--constraint-tol", "solver", "constraint_tol", float, 1.0, "constraint tolerance, m"),
    ("--stationarity-tol", "solver", "stationarity_tol", float, 1.0, "scaled Lagrangian gradient tolerance"),
    ("--rho0", "solver", "rho0", float, 1.0, "initial penalty"),
    ("--rho-growth", "solver", "rho_growth", float, 1.0, "penalty growth factor"),
    ("--rho-max", "solver", "rho_max", float, 1.0, "penalty cap"),
    ("--load-steps", "solver", "load_steps", int, 1.0, "vacuum load steps"),
    ("--warm-start-iterations", "solver", "warm_start_iterations", int, 1.0, "SLSQP iterations before the certificate check"),
    ("--denoise-k", "scan", "denoise_k", int, 1.0, "neighbors for outlier removal"),
    ("--median-window", "scan", "median_window", int, 1.0, "median filter window, pixels (odd)"),
    ("--grid-spacing", "scan", "grid_spacing", float, 1.0, "heightmap cell size, mm"),
    ("--output-dir", "io", "output_dir", str, None, "directory for reports and heightfields"),
    ("--threshold", None, "threshold", float, 1.0, "RMS cease/crease threshold, mm"),
    ("--margin", None, "margin", float, 1.0, "patch margin around each pocket, mm"),
]

# on/off switches: flag, section, key, value when given
_SWITCHES = [
    ("--no-denoise", "scan", "denoise", False, "skip statistical outlier removal"),
    ("--no-warm-start", "solver", "warm_start", False, "go straight to the augmented Lagrangian"),
    ("--no-median", "scan", "median", False, "skip the median filter"),
    ("--no-heightfields", "io", "save_heightfields", False, "do not write per-pocket heightfield reports"),
    ("--save-nets", "io", "save_nets", True, "write solved nets"),
    ("--solver-logs", "io", "solver_logs", True, "write per-pocket solver iteration logs"),
]


def _dest(flag: str) -> str:
    return "cfg_" + flag.lstrip("-").replace("-", "_")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="JSON config file (nested sections)")
    for flag, _, _, typ, _, hlp in _CONFIG_FLAGS:
        g.add_argument(flag, dest=_dest(flag), type=typ, default=None, help=hlp)
    g.add_argument("--fiber-angles", dest="cfg_fiber_angles", type=float, nargs=2, metavar=("A", "B"), help="fiber directions, degrees")
    for flag, _, _, _, hlp in _SWITCHES:
        g.add_argument(flag, dest=_dest(flag), action="store_true", help=hlp)
    g.add_argument("--workers", type=int, default=None, help="parallel pocket workers (else DEBULK_WORKERS, else config)")


def config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    over: dict = {}
    for flag, sec, key, _, scale, _ in _CONFIG_FLAGS:
        v = getattr(args, _dest(flag), None)
        if v is None:
            continue
        if scale not in (None, 1.0):
            v = v * scale
        (over.setdefault(sec, {}) if sec else over)[key] = v
    for flag, sec, key, val, _ in _SWITCHES:
        if getattr(args, _dest(flag), False):
            over.setdefault(sec, {})[key] = val
    if getattr(args, "cfg_fiber_angles", None):
        over.setdefault("mesh", {})["fiber_angles"] = tuple(args.cfg_fiber_angles)
    return cfg.updated(over)


def _cmd_synth(args) -> int:
    if args.spec:
        spec = SceneSpec.load(args.spec)
    elif args.scene == "graded":
        spec = graded_scene_spec(args.noise, args.outliers)
    else:
        n = int(round(2 * (args.radius + 40)))
        spec = SceneSpec(
            width=n,
            height=n,
            mold=args.mold,
            pockets=[Pocket((n / 2, n / 2), (args.radius, args.radius), args.peak)],
            noise_sigma=args.noise,
            outlier_fraction=args.outliers,
        )
    scene = generate(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dio.write_cloud(out / "ply.npz", scene.ply)
    dio.write_surface(out / "reference.json", scene.ref)
    dio.write_cloud(out / "debulked.npz", debulked_cloud(spec))
    spec.save(out / "scene.json")
    truth = [{"members": t.members, "area_cm2": t.area, "peak_mm": t.peak, "excess_mm": list(t.excess)} for t in scene.truth]
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    print(f"wrote {len(spec.pockets)} pockets to {out}")
    return 0


def _cmd_segment(args) -> int:
    cfg = config_from_args(args)
    ref = dio.read_surface(args.reference)
    hm = prepare_heightmap(dio.read_cloud(args.ply), ref, cfg.scan)
    patches = segment_heightmap(hm, ref, cfg)
    save_patches(args.out, patches)
    if args.heightmap:
        dio.write_heightmap(args.heightmap, hm)
    for p in patches:
        print(f"pocket {p.id}: area {p.area:.2f} cm^2, peak {p.peak:.2f} mm, margin {p.margin:.1f} mm")
    print(f"{len(patches)} pockets -> {args.out}")
    return 0


def _cmd_mesh(args) -> int:
    cfg = config_from_args(args)
    patches = load_patches(args.patches)
    if args.pocket is not None:
        patches = [p for p in patches if p.id == args.pocket]
        if not patches:
            print(f"no pocket {args.pocket}", file=sys.stderr)
            return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in patches:
        net = mesh_patch(p, cfg.mesh)
        net.save(out / f"pocket_{p.id:02d}_net.json")
        print(f"pocket {p.id}: {net.n_nodes} nodes, delta {net.delta:.2f} mm")
    return 0


def _cmd_solve(args) -> int:
    cfg = config_from_args(args)
    net = PlyNet.load(args.net)
    ref = dio.read_surface(args.reference)
    res = solve(net, cfg.material, ref, cfg.solver, log_path=args.log)
    Path(args.out).write_text(json.dumps(res.to_dict(), indent=1))
    print(
        f"converged={res.converged} nfev={res.function_evaluations} pi={res.pi_final:.6e} J "
        f"eq={res.max_equality_residual:.1e} m pen={res.max_penetration:.1e} m time={res.wall_time:.2f} s"
    )
    return 0 if res.converged else EXIT_INCONCLUSIVE


def _cmd_predict(args) -> int:
    cfg = config_from_args(args)
    ref = dio.read_surface(args.reference)
    hm = prepare_heightmap(dio.read_cloud(args.ply), ref, cfg.scan)
    patches = segment_heightmap(hm, ref, cfg)
    result = run_patches(patches, hm, cfg, resolve_workers(cfg.workers, args.workers))
    if cfg.io.output_dir:
        dio.write_heightmap(Path(cfg.io.output_dir) / "heightmap.json", hm)
        save_patches(Path(cfg.io.output_dir) / "patches.json", patches)
        cfg.save(Path(cfg.io.output_dir) / "config.json")
    print(result.table())
    return result.status


def _cmd_compare(args) -> int:
    reports = [DebulkReport.load(p) for p in sorted(Path(args.reports).glob("pocket_*_report.json"))]
    if not reports:
        print(f"no pocket reports in {args.reports}", file=sys.stderr)
        return EXIT_IO
    ref = dio.read_surface(args.reference)
    cfg = config_from_args(args)
    res = compare(reports, dio.read_cloud(args.debulked), ref, cfg.threshold)
    print(res.table())
    if args.out:
        Path(args.out).write_text(json.dumps(res.to_dict(), indent=1))
    return 0


def _cmd_wrinkle2d(args) -> int:
    base = config_from_args(args).material
    ply = tent_chain(args.delta, args.apex, args.segments)
    res = simulate_2d(ply, base, steps=args.steps, bending=args.bending, symmetric=args.symmetric)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["step", "node", "x_mm", "z_mm"])
        for k, x in enumerate(ply.nodes):
            w.writerow([0, k, repr(float(x[0])), repr(float(x[1]))])
        for s, nodes in enumerate(res.steps, start=1):
            for k, x in enumerate(nodes):
                w.writerow([s, k, repr(float(x[0])), repr(float(x[1]))])
    finally:
        if args.out:
            out.close()
    print(
        f"apex {res.apex_height():.4f} mm, length error {res.length_error:.1e}, "
        f"converged {all(res.converged)}, folded {res.folded}",
        file=sys.stderr,
    )
    return 0 if all(res.converged) else EXIT_INCONCLUSIVE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="debulk", description="Predict whether air pockets in a draped ply cease or crease under vacuum debulking.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic draped-ply scene")
    s.add_argument("out", help="output directory")
    s.add_argument("--scene", choices=("single", "graded"), default="single", help="single bump, or fourteen pockets of graded size")
    s.add_argument("--spec", type=Path, help="scene description JSON (overrides --scene)")
    s.add_argument("--peak", type=float, default=5.0, help="single pocket peak height, mm")
    s.add_argument("--radius", type=float, default=60.0, help="single pocket footprint radius, mm")
    s.add_argument("--mold", choices=("flat", "cylinder", "doubly"), default="flat")
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian z noise, mm")
    s.add_argument("--outliers", type=float, default=0.0, help="fraction of outlier pixels")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("segment", help="clean, grid and segment a ply scan")
    s.add_argument("ply", help="ply scan (.opc, .csv or .npz)")
    s.add_argument("reference", help="reference surface (grid .json or cloud)")
    s.add_argument("-o", "--out", default="patches.json")
    s.add_argument("--heightmap", help="also write the heightmap grid here")
    _add_config_flags(s)
    s.set_defaults(func=_cmd_segment)

    s = sub.add_parser("mesh", help="build ply nets for segmented pockets")
    s.add_argument("patches", help="patches JSON from 'segment'")
    s.add_argument("-o", "--out", default="nets")
    s.add_argument("--pocket", type=int, help="only this pocket id")
    _add_config_flags(s)
    s.set_defaults(func=_cmd_mesh)

    s = sub.add_parser("solve", help="solve one net under vacuum")
    s.add_argument("net", help="net JSON from 'mesh'")
    s.add_argument("reference", help="reference surface")
    s.add_argument("-o", "--out", default="solution.json")
    s.add_argument("--log", help="solver iteration log file")
    _add_config_flags(s)
    s.set_defaults(func=_cmd_solve)

    s = sub.add_parser("predict", help="full pipeline: scan to per-pocket verdicts")
    s.add_argument("ply")
    s.add_argument("reference")
    _add_config_flags(s)
    s.set_defaults(func=_cmd_predict)

    s = sub.add_parser("compare", help="score predictions against a post-debulk scan")
    s.add_argument("reports", help="output directory of 'predict'")
    s.add_argument("debulked", help="post-debulk scan")
    s.add_argument("reference", help="reference surface")
    s.add_argument("-o", "--out", help="write the comparison as JSON")
    _add_config_flags(s)
    s.set_defaults(func=_cmd_compare)

    s = sub.add_parser("wrinkle2d", help="fine 2D chain debulk of a two-segment tent; CSV of every load step")
    s.add_argument("--delta", type=float, default=9.3, help="tent segment length, mm")
    s.add_argument("--apex", type=float, default=3.2, help="tent apex height, mm")
    s.add_argument("--segments", type=int, default=200)
    s.add_argument("--steps", type=int, default=5)
    s.add_argument("--bending", choices=("nodal", "continuum"), default="nodal")
    s.add_argument("--symmetric", action="store_true", help="restrict to mirror-symmetric shapes")
    s.add_argument("-o", "--out", help="CSV path (default stdout)")
    _add_config_flags(s)
    s.set_defaults(func=_cmd_wrinkle2d)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
