"""Command-line scenario runner and benchmark harness.

`grainforge run <scenario.toml>` executes a declarative scenario and writes
frames; `grainforge bench <name>` reproduces the validation experiments at
desk scale and emits machine-readable result tables.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _write_csv(path, rows, fieldnames=None):
    if not rows:
        with open(path, "w", newline="") as fh:
            fh.write("")
        return
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in fieldnames})


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _apply_threads(n):
    if n is not None:
        os.environ["NUMBA_NUM_THREADS"] = str(n)


def _apply_sync(args):
    if getattr(args, "sync", False):
        from .engine import Simulator
        Simulator.default_sync = True


def cmd_run(args) -> int:
    from .io import ScenarioConfig, run_scenario

    config = ScenarioConfig.load(args.config)
    summary = run_scenario(config, args.out, sync=args.sync)
    summary["seed"] = args.seed
    _write_json(os.path.join(args.out, "summary.json"), summary)
    print(f"{config.name}: {summary['frames']} frames, "
          f"{summary['sim_time']:.3f} s simulated in {summary['wall_time']:.1f} s wall")
    return 0


def cmd_bench_incline(args) -> int:
    from . import scenarios as S

    alphas = args.alpha_grid or list(np.arange(1.0, 31.0, 1.0))
    crs = args.cr_grid or [0.0, 0.05, 0.10, 0.15, 0.20, 0.25]
    rows = []
    for cr in crs:
        for alpha in alphas:
            row = S.run_incline_cell(args.mu, cr, float(alpha))
            rows.append(row)
            mark = "ok" if row["mode"] == row["expected"] else "MISMATCH"
            print(f"Cr={cr:4.2f} alpha={alpha:5.1f} -> {row['mode']:16s} [{mark}]")
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "incline_modes.csv"), rows)
    boundaries = [
        {"cr": cr, "stationary_deg": S.incline_boundary_degrees(args.mu, args.mu, cr)[0],
         "rolling_deg": S.incline_boundary_degrees(args.mu, args.mu, cr)[1]}
        for cr in crs
    ]
    _write_csv(os.path.join(args.out, "incline_boundaries.csv"), boundaries)
    return 0


def cmd_bench_stacking(args) -> int:
    from . import scenarios as S

    rows = []
    for cr in (args.cr_grid or [0.0, 0.1, 0.2]):
        for gap in (args.gap_grid or [0.01, 0.03, 0.05]):
            m2 = S.find_critical_mass(cr, gap, m_hi=args.max_mass)
            rows.append({"cr": cr, "gap": gap, "critical_mass": m2})
            print(f"Cr={cr:4.2f} gap={gap:5.3f} -> critical mass {m2}")
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "stacking_critical_mass.csv"), rows)
    return 0


def cmd_bench_crater(args) -> int:
    from . import scenarios as S

    result = S.run_crater_bench(
        density_grid=args.density_grid or (2.2, 3.8, 7.8, 15.0),
        height_grid=[hcm / 100.0 for hcm in (args.height_grid or (5.0, 10.0, 20.0))],
        seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "crater_runs.csv"), result["rows"])
    _write_json(os.path.join(args.out, "crater_summary.json"),
                {"slope": result["slope"],
                 "bed_bulk_density": result["bed_bulk_density"]})
    print(f"bed bulk density {result['bed_bulk_density']:.0f} kg/m3, "
          f"fitted slope {result['slope']:.4f} (reference 0.123, C=0.14)")
    return 0


def cmd_bench_drum(args) -> int:
    from . import scenarios as S

    rows = []
    for mu in (args.mu_grid or [0.0, 0.3, 0.6]):
        for cr in (args.cr_grid or [0.0]):
            row = S.run_drum_case(args.setup, mu, cr, spin_up=args.spin_up,
                                  measure=args.measure)
            rows.append(row)
            print(f"{args.setup} mu_i={mu:4.2f} Cr={cr:4.2f} -> "
                  f"angle {row['angle_deg']:.2f} deg (n={row['n_clumps']})")
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, f"drum_{args.setup}.csv"), rows)
    return 0


def cmd_bench_hopper(args) -> int:
    from . import scenarios as S

    result = S.run_hopper(args.test_id, orifice=args.orifice,
                          fill_scale=args.fill_scale,
                          discharge_time=args.duration)
    os.makedirs(args.out, exist_ok=True)
    rows = [{"time": t, "discharged_fraction": f} for t, f in result["curve"]]
    _write_csv(os.path.join(args.out, f"hopper_test{args.test_id}.csv"), rows)
    final = result["curve"][-1][1]
    print(f"test {args.test_id}: {result['n_clumps']} clumps, "
          f"final discharged fraction {final:.3f}")
    return 0


def cmd_bench_breakage(args) -> int:
    from . import scenarios as S

    os.makedirs(args.out, exist_ok=True)
    if args.full:
        stats = S.bond_count_stats(args.gamma_int)
        _write_json(os.path.join(args.out, "bond_stats.json"), stats)
        print(f"gamma_int={args.gamma_int}: {stats['n_spheres']} spheres, "
              f"{stats['count']} bonds, modal per-particle {stats['modal_assigned']}"
              f" (degree mode {stats['modal_degree']})")
        return 0
    result = S.run_breakage_compression(args.gamma_int)
    _write_csv(os.path.join(args.out, "stress_strain.csv"), result["rows"])
    _write_json(os.path.join(args.out, "breakage_summary.json"),
                {"bond_stats": result["bond_stats"],
                 "oracle_modulus": result["oracle_modulus"],
                 "n_spheres": result["n_spheres"]})
    peak = max(r["stress"] for r in result["rows"])
    print(f"gamma_int={args.gamma_int}: {result['n_spheres']} spheres, "
          f"peak stress {peak/1e6:.1f} MPa, oracle modulus "
          f"{result['oracle_modulus']/1e9:.2f} GPa")
    return 0


def cmd_bench_mixer(args) -> int:
    from . import scenarios as S

    targets = args.n or [10000, 20000, 40000, 80000]
    rows = []
    for n in targets:
        row = S.run_mixer_timing(int(n), clump=args.clump,
                                 measure_steps=args.steps)
        rep = row.pop("report")
        row["phase_sum"] = sum(rep[k] for k in
                               ("dyn_force", "dyn_integrate", "dyn_transfer",
                                "dyn_wait"))
        rows.append(row)
        print(f"N={row['n_spheres']:7d} spheres: "
              f"{row['wall_per_step']*1e3:.3f} ms/step")
    if len(rows) >= 2:
        x = np.log([r["n_spheres"] for r in rows])
        y = np.log([r["wall_per_step"] for r in rows])
        exponent = float(np.polyfit(x, y, 1)[0])
    else:
        exponent = float("nan")
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "mixer_scaling.csv"), rows)
    _write_json(os.path.join(args.out, "mixer_summary.json"),
                {"exponent": exponent})
    print(f"scaling exponent {exponent:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="grainforge",
        description="CPU-parallel DEM engine: scenario runner and benchmarks",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=7)
        sp.add_argument("--threads", type=_positive_int, default=None)
        sp.add_argument("--sync", action="store_true",
                        help="force lookahead n_max = 1 (synchronous detection)")

    run = sub.add_parser("run", help="execute a scenario file")
    run.add_argument("config")
    common(run)
    run.set_defaults(fn=cmd_run)

    bench = sub.add_parser("bench", help="validation benchmarks")
    bsub = bench.add_subparsers(dest="bench", required=True)

    b = bsub.add_parser("incline", help="rolling-mode map on an incline")
    b.add_argument("--mu", type=float, default=0.25)
    b.add_argument("--cr-grid", type=_float_list, default=None)
    b.add_argument("--alpha-grid", type=_float_list, default=None)
    common(b)
    b.set_defaults(fn=cmd_bench_incline)

    b = bsub.add_parser("stacking", help="three-sphere stacking critical mass")
    b.add_argument("--cr-grid", type=_float_list, default=None)
    b.add_argument("--gap-grid", type=_float_list, default=None)
    b.add_argument("--max-mass", type=float, default=3.0)
    common(b)
    b.set_defaults(fn=cmd_bench_stacking)

    b = bsub.add_parser("crater", help="ball-impact penetration depth law")
    b.add_argument("--density-grid", type=_float_list, default=None,
                   help="projectile densities in g/cm^3")
    b.add_argument("--height-grid", type=_float_list, default=None,
                   help="drop heights in cm")
    common(b)
    b.set_defaults(fn=cmd_bench_crater)

    b = bsub.add_parser("drum", help="rotating-drum angle of repose")
    b.add_argument("--setup", choices=("PS", "PC", "WS", "WC"), default="PS")
    b.add_argument("--mu-grid", type=_float_list, default=None)
    b.add_argument("--cr-grid", type=_float_list, default=None)
    b.add_argument("--spin-up", type=float, default=2.0)
    b.add_argument("--measure", type=float, default=3.0)
    common(b)
    b.set_defaults(fn=cmd_bench_drum)

    b = bsub.add_parser("hopper", help="flat-bottom hopper discharge")
    b.add_argument("--test-id", type=int, choices=(1, 2, 3, 4), default=1)
    b.add_argument("--orifice", type=float, default=0.04)
    b.add_argument("--fill-scale", type=float, default=1.0)
    b.add_argument("--duration", type=float, default=7.5)
    common(b)
    b.set_defaults(fn=cmd_bench_hopper)

    b = bsub.add_parser("breakage", help="bonded-block uniaxial compression")
    b.add_argument("--gamma-int", type=float, default=1.1)
    b.add_argument("--full", action="store_true",
                   help="full-size lattice, bond counting only")
    common(b)
    b.set_defaults(fn=cmd_bench_breakage)

    b = bsub.add_parser("mixer", help="mixer wall-time scaling")
    b.add_argument("--clump", choices=("spheres", "3sph", "6sph"), default="3sph")
    b.add_argument("--n", type=_float_list, default=None,
                   help="component-sphere count targets")
    b.add_argument("--steps", type=int, default=400)
    common(b)
    b.set_defaults(fn=cmd_bench_mixer)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(getattr(args, "threads", None))
    _apply_sync(args)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
