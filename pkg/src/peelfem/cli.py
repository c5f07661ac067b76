"""Command-line entry point ``peelfem``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import io
from .exceptions import ConfigError, MeshError, NumericalError
from .experiment import ExperimentConfig, SUMMARY_HEADER, _write_csv, compare_forward, run_study, summarize
from .forward import SensorArray, assemble_system, compose_leadfield, compute_transfer, fibonacci_sensors
from .mesh import refine_compartments
from .peeling import PeelConfig, effective_depth, peel, peel_exhaustive
from .sources import build_interpolation_pbo, enumerate_hdiv_dipoles, place_sources
from .sphere import ShellSpec, generate_sphere_mesh

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_mesh_sphere(a) -> None:
    spec = ShellSpec.ary() if a.radii is None else ShellSpec(tuple(_floats(a.radii)), tuple(_floats(a.conductivities)))
    mesh = generate_sphere_mesh(spec, a.edge_mm)
    io.write_mesh(a.out, mesh)
    print(f"{a.out}: {mesh.n_nodes} nodes, {mesh.n_tetra} tetra")
    if a.sensors_out:
        pos = fibonacci_sensors(spec.outer_radius, a.sensor_count, a.z_min)
        io.write_sensors(a.sensors_out, [f"E{i + 1:03d}" for i in range(len(pos))], pos)


def cmd_refine(a) -> None:
    mesh = refine_compartments(io.read_mesh(a.mesh), _ints(a.compartments), a.rounds)
    io.write_mesh(a.out, mesh)
    print(f"{a.out}: {mesh.n_nodes} nodes, {mesh.n_tetra} tetra")


def cmd_peel(a) -> None:
    mesh = io.read_mesh(a.mesh)
    cfg = PeelConfig(a.depth_mm, _ints(a.compartments))
    res = (peel_exhaustive if a.exhaustive else peel)(mesh, cfg)
    io.write_peel(a.out, res)
    depth, ok = effective_depth(mesh, res)
    print(f"{a.out}: kept {res.n_kept}, removed {len(res.removed_tetra)}, "
          f"effective depth {depth:.4g} mm" if ok else f"{a.out}: nothing kept")


def cmd_leadfield(a) -> None:
    mesh = io.read_mesh(a.mesh)
    labels, pos = io.read_sensors(a.sensors)
    sensors = SensorArray.attach(mesh, pos, labels)
    res = io.read_peel(a.peel)
    if res.n_kept == 0:
        raise ValueError("peeled source space is empty")
    src = place_sources(mesh, res, a.sources)
    D = build_interpolation_pbo(mesh, enumerate_hdiv_dipoles(mesh, res.kept_tetra), src)
    T = compute_transfer(assemble_system(mesh), sensors, tol=a.tol, preconditioner=a.preconditioner,
                         boundary_nodes=mesh.boundary_nodes)
    L = compose_leadfield(T, D)
    io.write_leadfield(a.out, L)
    if a.source_space_out:
        io.write_source_space(a.source_space_out, src)
    if a.dmat_out:
        io.write_dmat(a.dmat_out, D)
    print(f"{a.out}: {L.shape[0]} sensors x {L.shape[1]} columns ({len(src)} sources)")


def cmd_analytic_compare(a) -> None:
    cfg = ExperimentConfig.from_yaml(a.config)
    cmp = compare_forward(cfg, a.out)
    rdm, mag = cmp.medians()
    print(f"median RDM {rdm:.4f}, median MAG {mag:.4f} over {len(cmp.rdm)} sources")


def cmd_study(a) -> None:
    cfg = ExperimentConfig.from_yaml(a.config)
    report = run_study(cfg, a.out, threads=a.threads)
    for row in report.summary:
        method, snr, depth, n, mu, sd = row[:6]
        print(f"{method:12s} snr={snr:5.1f} depth={depth:4.2f} n={n:6d} mu={mu:8.4f} sigma={sd:8.4f}")


def cmd_stats(a) -> None:
    rows = []
    with open(a.localisation, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["source_id"]), float(r["snr_db"]), float(r["depth_mm"]), r["method"],
                         int(r["trial"]), float(r["delta_mm_scaled"]), float(r["delta_mm_raw"])))
    summary = summarize(rows)
    if a.out:
        _write_csv(Path(a.out), SUMMARY_HEADER, summary)
    for row in summary:
        print(",".join(str(v) for v in row))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peelfem", description="FEM EEG lead fields and localisation studies")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mesh-sphere", help="tetrahedralize a multilayer sphere")
    s.add_argument("--radii", help="comma-separated shell radii in mm (default 87,92,100)")
    s.add_argument("--conductivities", help="comma-separated conductivities in S/m")
    s.add_argument("--edge-mm", type=float, default=4.0)
    s.add_argument("--out", required=True)
    s.add_argument("--sensors-out")
    s.add_argument("--sensor-count", type=int, default=64)
    s.add_argument("--z-min", type=float, default=-0.2)
    s.set_defaults(func=cmd_mesh_sphere)

    s = sub.add_parser("refine", help="refine compartments conformingly")
    s.add_argument("--mesh", required=True)
    s.add_argument("--compartments", required=True)
    s.add_argument("--rounds", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("peel", help="remove source elements near compartment surfaces")
    s.add_argument("--mesh", required=True)
    s.add_argument("--compartments", required=True)
    s.add_argument("--depth-mm", type=float, required=True)
    s.add_argument("--exhaustive", action="store_true", help="use the brute-force distance scan")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_peel)

    s = sub.add_parser("leadfield", help="compute a lead field for a peeled source space")
    s.add_argument("--mesh", required=True)
    s.add_argument("--sensors", required=True)
    s.add_argument("--peel", required=True)
    s.add_argument("--sources", type=int, default=500)
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--preconditioner", choices=("jacobi", "amg"), default="jacobi")
    s.add_argument("--out", required=True)
    s.add_argument("--source-space-out")
    s.add_argument("--dmat-out")
    s.set_defaults(func=cmd_leadfield)

    s = sub.add_parser("analytic-compare", help="RDM/MAG against the analytic sphere")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analytic_compare)

    s = sub.add_parser("study", help="run a localisation study")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, help="worker count (default: LEADFIELD_THREADS or all cores)")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("stats", help="recompute summary statistics from localisation.csv")
    s.add_argument("--localisation", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, MeshError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
