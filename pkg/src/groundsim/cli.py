"""Command line entry point: ``groundsim simulate|bench|diff-heightmaps``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import io as gio
from .deformation import MaterialError
from .geometry import MeshError, TrajectoryError
from .scenario import ScenarioError, bench, export, load_scenario, report_timing, run, write_trace


def _simulate(args) -> int:
    scn = load_scenario(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.frames_every is not None:
        changes["frames_every"] = args.frames_every
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.transport is not None:
        changes["transport"] = args.transport
    if changes:
        scn = replace(scn, **changes)
    out = run(scn)
    files = export(out, scn, args.out)
    timing_path = Path(args.timing) if args.timing else Path(args.out) / "timing.txt"
    report_timing(out.timing, timing_path)
    if args.trace and out.result is not None:
        write_trace(out.result.trace, args.trace)
    t = out.timing
    print(f"{t.n_steps} steps, {len(out.frames)} frames, {len(files)} files in {args.out}; "
          f"wall clock {t.wall_clock:.2f} s")
    return 0


def _bench(args) -> int:
    res = bench(args.characters, args.duration, args.repeats, args.workers, args.transport,
                parallel=not args.serial_only)
    for n, t in zip(res["characters"], res["serial"]):
        print(f"serial  characters={n}  time={t:.4f} s")
    print(f"linear fit: slope={res['slope']:.4f} s/character  intercept={res['intercept']:.4f} s  "
          f"R^2={res['r2']:.4f}")
    if "parallel_2" in res:
        ratio = res["parallel_2"] / res["serial_2"]
        print(f"2 characters, {args.workers} workers: {res['parallel_2']:.4f} s ({ratio:.2f}x serial)")
    return 0


def _diff(args) -> int:
    a, _ = gio.load_heightmap(args.a)
    b, _ = gio.load_heightmap(args.b)
    mx, mean = gio.diff_heightmaps(a, b)
    print(f"max_abs_diff={mx!r} mean_abs_diff={mean!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groundsim", description="Granular ground deformation under moving bodies.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario file and export frames")
    s.add_argument("scenario")
    s.add_argument("--workers", type=int, help="0 runs serially in-process")
    s.add_argument("--transport", choices=("inproc", "stream"))
    s.add_argument("--out", default="out")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames-every", type=int)
    s.add_argument("--timing", help="timing report path (CSV copy written next to it)")
    s.add_argument("--trace", help="write the coordinator message log here")
    s.set_defaults(func=_simulate)

    b = sub.add_parser("bench", help="timing versus number of characters")
    b.add_argument("--characters", type=int, default=4, help="run 1..N characters")
    b.add_argument("--duration", type=float, default=1.0, help="simulated seconds per run")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--workers", type=int, default=2)
    b.add_argument("--transport", choices=("inproc", "stream"), default="stream")
    b.add_argument("--serial-only", action="store_true")
    b.set_defaults(func=_bench)

    d = sub.add_parser("diff-heightmaps", help="max/mean absolute difference of two heightmaps")
    d.add_argument("a")
    d.add_argument("b")
    d.set_defaults(func=_diff)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, MaterialError, MeshError, TrajectoryError, gio.FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
