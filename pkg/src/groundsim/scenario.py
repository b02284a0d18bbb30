"""Scenario files, the batch run loop and timing reports.

A scenario is an INI-style file::

    [grid]
    cell_size = 0.01
    extent = 512 512          ; rows cols
    initial = flat            ; flat | noise | <heightmap file>
    height = 0.0

    [material]
    preset = sand             ; or file = my.mat; single keys override

    [particles]
    adhesion = 0.0

    [time]
    start = 0
    end = 1
    dt = 1/300

    [output]
    frames_every = 10

    [body left_foot]
    character = runner
    mesh = foot.obj           ; or sphere:R, box:SX,SY,SZ, ellipsoid:A,B,C, cylinder:R,W
    trajectory = runner.traj
    id = left_foot            ; body id inside the trajectory file

Relative paths are resolved against the scenario's directory.
"""

from __future__ import annotations

import configparser
import csv
import logging
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import io as gio
from . import scheduler as S
from .deformation import STAGES, Character, MaterialError, MaterialParams, load_material, preset
from .geometry import (
    Body, Trajectory, TriangleMesh, box_mesh, cylinder_mesh, ellipsoid_mesh, load_mesh, load_trajectories,
    sphere_mesh,
)
from .particles import ParticleParams
from .terrain import EMPTY_RECT, CellRect, GridConfig, NoiseParams, SparseColumnGrid

log = logging.getLogger(__name__)

DEFAULT_DT = 1.0 / 300.0
DEFAULT_FRAMES_EVERY = 10


class ScenarioError(ValueError):
    pass


@dataclass
class BodySpec:
    character: str
    body_id: str
    mesh: TriangleMesh
    trajectory: Trajectory


@dataclass
class Scenario:
    grid: GridConfig
    material: MaterialParams
    bodies: list[BodySpec] = field(default_factory=list)
    init: object = None  # see SparseColumnGrid
    particles: ParticleParams = field(default_factory=ParticleParams)
    start: float = 0.0
    end: float = 1.0
    dt: float = DEFAULT_DT
    frames_every: int = DEFAULT_FRAMES_EVERY
    region: CellRect | None = None
    height_range: tuple[float, float] | None = None
    export_obj: bool = False
    export_particles: bool = True
    spray_margin: float = 0.0
    seed: int = 0
    workers: int = 0
    transport: str = "inproc"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.dt > 0:
            raise ScenarioError(f"time step must be positive, got {self.dt}")
        if not self.end > self.start:
            raise ScenarioError(f"empty time range [{self.start}, {self.end}]")
        if self.frames_every < 1:
            raise ScenarioError("frames_every must be at least 1")
        if self.workers < 0:
            raise ScenarioError("workers must be >= 0")
        if self.transport not in ("inproc", "stream"):
            raise ScenarioError(f"unknown transport {self.transport!r}")
        if self.spray_margin < 0:
            raise ScenarioError("spray_margin must be non-negative")
        seen = set()
        for b in self.bodies:
            key = (b.character, b.body_id)
            if key in seen:
                raise ScenarioError(f"body {b.body_id!r} listed twice for {b.character!r}")
            seen.add(key)

    @property
    def n_steps(self) -> int:
        return int(round((self.end - self.start) / self.dt))

    @property
    def times(self) -> np.ndarray:
        """End time of each step."""
        return self.start + self.dt * np.arange(1, self.n_steps + 1)

    @property
    def frame_steps(self) -> list[int]:
        return [k for k in range(self.n_steps) if (k + 1) % self.frames_every == 0]

    @property
    def margin(self) -> float:
        return self.material.margin_cells * self.grid.cell_size + self.spray_margin

    def characters(self) -> list[Character]:
        by_char: dict[str, list[Body]] = {}
        for b in self.bodies:
            by_char.setdefault(b.character, []).append(Body(b.body_id, b.mesh, b.trajectory))
        chars = []
        for cid in sorted(by_char):
            bodies = sorted(by_char[cid], key=lambda body: body.id)
            chars.append(Character(cid, bodies).init_emitters(self.seed))
        return chars


# -- loading ----------------------------------------------------------------------------------

def _floats(text: str, n: int, key: str) -> list[float]:
    parts = text.replace(",", " ").split()
    if len(parts) != n:
        raise ScenarioError(f"{key}: expected {n} numbers, got {text!r}")
    return [float(Fraction(p)) for p in parts]


def _number(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ScenarioError(f"not a number: {text!r}") from None


def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ScenarioError(f"referenced file not found: {p}")
    return p


def parse_mesh(text: str, base: Path) -> TriangleMesh:
    kind, _, args = text.partition(":")
    shapes = {"sphere": (sphere_mesh, 1), "box": (box_mesh, 3), "ellipsoid": (ellipsoid_mesh, 3),
              "cylinder": (cylinder_mesh, 2)}
    if kind in shapes and args:
        fn, n = shapes[kind]
        return fn(*_floats(args, n, "mesh"))
    return load_mesh(_resolve(base, text))


def _material(sec, base: Path) -> MaterialParams:
    if "file" in sec:
        mat = load_material(_resolve(base, sec["file"]))
    else:
        mat = preset(sec.get("preset", "sand"))
    overrides = {}
    for key in MaterialParams.__dataclass_fields__:
        if key in sec:
            v = _number(sec[key])
            overrides[key] = int(v) if key in ("max_erosion_iters", "margin_cells") else v
    return replace(mat, **overrides) if overrides else mat


def _particles(sec) -> tuple[ParticleParams, float]:
    kw = {}
    for key in ("adhesion", "particle_volume", "half_life", "min_accel", "gamma", "velocity_jitter"):
        if key in sec:
            kw[key] = _number(sec[key])
    if "gravity" in sec:
        kw["gravity"] = tuple(_floats(sec["gravity"], 3, "gravity"))
    return ParticleParams(**kw), _number(sec.get("spray_margin", "0"))


def _grid(sec, base: Path):
    d = _number(sec.get("cell_size", "0.01"))
    origin = tuple(_floats(sec.get("origin", "0 0"), 2, "origin"))
    initial = sec.get("initial", "flat").strip()
    height = _number(sec.get("height", "0"))
    init: object = height
    extent_text = sec.get("extent")
    if initial == "noise":
        init = NoiseParams(_number(sec.get("noise_spacing", "16")), _number(sec.get("noise_amplitude", "0")),
                           int(_number(sec.get("noise_seed", "0"))), height)
    elif initial != "flat":
        init, d_file = gio.load_heightmap(_resolve(base, initial))
        if "cell_size" not in sec:
            d = d_file
        if extent_text is None:
            extent_text = f"{init.shape[0]} {init.shape[1]}"
    extent = tuple(int(v) for v in _floats(extent_text or "1024 1024", 2, "extent"))
    cfg = GridConfig(d, origin, extent, _number(sec.get("depth_margin", "10")))
    return cfg, init


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    base = path.parent
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as e:
        raise ScenarioError(str(e)) from None
    section = lambda name: cp[name] if cp.has_section(name) else {}

    cfg, init = _grid(section("grid"), base)
    try:
        material = _material(section("material"), base)
    except MaterialError as e:
        raise ScenarioError(str(e)) from None
    pparams, spray = _particles(section("particles"))
    tsec, osec, misc = section("time"), section("output"), section("scenario")

    traj_cache: dict[Path, dict] = {}
    bodies = []
    for name in cp.sections():
        if not name.startswith("body"):
            continue
        sec = cp[name]
        label = name[4:].strip() or name
        for key in ("mesh", "trajectory"):
            if key not in sec:
                raise ScenarioError(f"[{name}] needs a {key} entry")
        tpath = _resolve(base, sec["trajectory"])
        trajs = traj_cache.setdefault(tpath, load_trajectories(tpath))
        tid = sec.get("id", label)
        if tid not in trajs:
            raise ScenarioError(f"[{name}]: trajectory file has no body {tid!r}")
        bodies.append(BodySpec(sec.get("character", label), label, parse_mesh(sec["mesh"], base), trajs[tid]))

    region = None
    if "region" in osec:
        region = CellRect(*(int(v) for v in _floats(osec["region"], 4, "region")))
    hrange = tuple(_floats(osec["height_range"], 2, "height_range")) if "height_range" in osec else None
    yes = lambda v: str(v).strip().lower() in ("1", "yes", "true", "on")
    return Scenario(
        grid=cfg, material=material, bodies=bodies, init=init, particles=pparams,
        start=_number(tsec.get("start", "0")), end=_number(tsec.get("end", "1")),
        dt=_number(tsec.get("dt", str(Fraction(1, 300)))),
        frames_every=int(_number(osec.get("frames_every", str(DEFAULT_FRAMES_EVERY)))),
        region=region, height_range=hrange,
        export_obj=yes(osec.get("obj", "no")), export_particles=yes(osec.get("particles", "yes")),
        spray_margin=spray, seed=int(_number(misc.get("seed", "0"))),
        workers=int(_number(misc.get("workers", "0"))), transport=misc.get("transport", "inproc"),
    )


# -- timing ----------------------------------------------------------------------------------------

@dataclass
class TimingReport:
    stages: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    n_characters: int = 0
    n_workers: int = 0
    active_cells_max: int = 0
    wall_clock: float = 0.0
    n_steps: int = 0
    simulated_time: float = 0.0

    @property
    def total_stages(self) -> float:
        return float(sum(self.stages.values()))

    def as_rows(self) -> list[tuple[str, object]]:
        rows = [(f"{s}_s", self.stages.get(s, 0.0)) for s in STAGES]
        rows += [("stages_total_s", self.total_stages), ("wall_clock_s", self.wall_clock),
                 ("characters", self.n_characters), ("workers", self.n_workers),
                 ("steps", self.n_steps), ("simulated_s", self.simulated_time),
                 ("active_cells_max", self.active_cells_max)]
        return rows


def report_timing(report: TimingReport, path):
    """Plain-text report at ``path`` and the same numbers as CSV at ``path.csv``."""
    path = Path(path)
    lines = [f"{k:<18} {v:.6f}" if isinstance(v, float) else f"{k:<18} {v}" for k, v in report.as_rows()]
    path.write_text("\n".join(lines) + "\n")
    with open(path.with_name(path.name + ".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([k for k, _ in report.as_rows()])
        w.writerow([repr(v) for _, v in report.as_rows()])


# -- run -----------------------------------------------------------------------------------------------

@dataclass
class RunOutput:
    grid: SparseColumnGrid
    region: CellRect
    frames: list  # (step, heights)
    particles: dict  # step -> rows
    timing: TimingReport
    result: S.RunResult | None
    initial_volume: float
    displaced_volume: float  # total m over the run


def _default_region(plan: S.Plan | None, config: GridConfig) -> CellRect:
    rect = EMPTY_RECT
    if plan is not None:
        for it in plan.items:
            rect = rect.union(it.rect)
    return config.bounds if rect.is_empty() else rect.intersection(config.bounds)


def run(scn: Scenario, workers: int | None = None, transport: str | None = None, delay=None) -> RunOutput:
    """Step the scenario and keep every output frame in memory."""
    workers = scn.workers if workers is None else workers
    transport = transport or scn.transport
    t0 = time.perf_counter()
    grid = SparseColumnGrid(scn.grid, scn.init)
    chars = scn.characters()
    for c in chars:
        for b in c.bodies:
            if not (b.trajectory.covers(scn.start) and b.trajectory.covers(scn.end)):
                log.warning("trajectory of %s/%s does not cover [%g, %g]; poses are clamped",
                            c.id, b.id, scn.start, scn.end)
    times = scn.times
    plan = S.Plan(chars, times, scn.grid, scn.margin, max(workers, 1)) if chars else None
    region = scn.region.intersection(scn.grid.bounds) if scn.region else _default_region(plan, scn.grid)
    frames = [(-1, grid.heights(region))]
    particles: dict[int, list] = {}

    def on_frame(step, g, parts):
        frames.append((step, g.heights(region)))
        t = float(times[step])
        rows = []
        for cid in sorted(parts):
            pos, vel = parts[cid]
            rows.extend((t, *p, *v, scn.particles.particle_volume) for p, v in zip(pos, vel))
        particles[step] = rows

    v0 = grid.read_window(region).height.sum() * scn.grid.cell_size ** 2
    timing = TimingReport(n_characters=len(chars), n_workers=workers, n_steps=len(times),
                          simulated_time=float(len(times) * scn.dt))
    result = None
    displaced = 0.0
    if plan is not None and len(times):
        setup = S.SimSetup(scn.grid, grid.min_height, scn.material, scn.particles,
                           {c.id: c.bodies for c in chars}, times, scn.dt, frozenset(scn.frame_steps))
        result = S.run(grid, chars, setup, plan, workers, transport, on_frame=on_frame, delay=delay)
        for k, v in result.timings.items():
            timing.stages[k] = timing.stages.get(k, 0.0) + v
        per_step = np.zeros(len(times), dtype=np.int64)
        for it in plan.items:
            per_step[it.step] += it.rect.area
        timing.active_cells_max = int(per_step.max())
        displaced = float(sum(sum(cs.displaced_volume.values()) for cs in result.reports))
    else:
        for step in scn.frame_steps:
            on_frame(step, grid, {})
    timing.wall_clock = time.perf_counter() - t0
    return RunOutput(grid, region, frames, particles, timing, result, float(v0), displaced)


def frame_name(step: int) -> str:
    return f"frame_{step + 1:06d}"


def export(out: RunOutput, scn: Scenario, directory) -> list[Path]:
    """Write all buffered frames with one quantization range."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if scn.height_range is not None:
        lo, hi = scn.height_range
    else:
        lo = min(float(h.min()) for _, h in out.frames)
        hi = max(float(h.max()) for _, h in out.frames)
    cfg = scn.grid
    r = out.region
    meta = gio.HeightmapMeta(lo, hi, cfg.cell_size, r.i0, r.j0, float(cfg.cell_x(r.i0)), float(cfg.cell_z(r.j0)))
    written = []
    for step, heights in out.frames:
        stem = directory / frame_name(step)
        gio.write_pgm(stem.with_suffix(".pgm"), heights, meta)
        written.append(stem.with_suffix(".pgm"))
        if scn.export_obj:
            gio.write_obj(stem.with_suffix(".obj"), heights, cfg.cell_size, (meta.origin_x, meta.origin_z))
            written.append(stem.with_suffix(".obj"))
        if scn.export_particles and scn.particles.enabled and step in out.particles:
            p = directory / f"particles_{step + 1:06d}.csv"
            gio.write_particles_csv(p, out.particles[step])
            written.append(p)
    return written


def write_trace(lines, path):
    with open(path, "w") as fh:
        for w, seq, direction, tag, item, dig in lines:
            fh.write(f"{w} {seq} {direction} {tag} {item} {dig}\n")


# -- benchmark ----------------------------------------------------------------------------------------

def synthetic_scenario(n_characters: int, duration: float = 1.0, dt: float = 0.01,
                       cell_size: float = 0.02, seed: int = 0) -> Scenario:
    """``n`` identical box feet stamping along parallel, well separated lanes."""
    lane = 1.5
    times = np.linspace(0.0, duration, max(3, int(round(duration / dt)) + 1))
    bodies = []
    for k in range(n_characters):
        z = 0.75 + k * lane
        x = 0.3 + 0.8 * times
        y = 0.04 - 0.06 * np.abs(np.sin(np.pi * times / 0.25))
        pos = np.stack([x, y, np.full_like(times, z)], axis=1)
        quat = np.tile([1.0, 0.0, 0.0, 0.0], (len(times), 1))
        bodies.append(BodySpec(f"c{k:02d}", "foot", box_mesh(0.12, 0.06, 0.3), Trajectory(times, pos, quat, "foot")))
    rows = int(np.ceil((0.3 + 0.8 * duration + 0.6) / cell_size))
    cols = int(np.ceil((lane * max(n_characters, 1) + 0.5) / cell_size))
    cfg = GridConfig(cell_size, (0.0, 0.0), (rows, cols))
    return Scenario(cfg, preset("sand"), bodies, 0.0, start=0.0, end=duration, dt=dt,
                    frames_every=10 ** 9, seed=seed)


def bench(max_characters: int = 4, duration: float = 1.0, repeats: int = 3, workers: int = 2,
          transport: str = "stream", parallel: bool = True) -> dict:
    """Serial time for 1..N characters, a linear fit, and the 2-worker time for 2 characters."""
    serial = []
    for n in range(1, max_characters + 1):
        scn = synthetic_scenario(n, duration)
        serial.append(min(run(scn, workers=0).timing.wall_clock for _ in range(repeats)))
    n = np.arange(1, max_characters + 1, dtype=np.float64)
    y = np.array(serial)
    slope, icpt = np.polyfit(n, y, 1) if len(n) > 1 else (y[0], 0.0)
    resid = y - (slope * n + icpt)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    out = {"characters": n.astype(int).tolist(), "serial": serial, "slope": float(slope),
           "intercept": float(icpt), "r2": r2}
    if parallel and max_characters >= 2:
        scn = synthetic_scenario(2, duration)
        out["parallel_2"] = min(run(scn, workers=workers, transport=transport).timing.wall_clock
                                for _ in range(repeats))
        out["serial_2"] = serial[1]
    return out
