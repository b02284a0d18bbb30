"""Per-step ground response: collision, contour labels, displacement, erosion.

The pipeline works on a :class:`Patch`, a dense copy of the active columns.
Heights are in meters; moved material is tracked in height units (volume
divided by the cell area) since all cells have the same footprint.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, fields
from importlib import resources

import numpy as np

from . import particles as P
from .geometry import AabbTree, Body, projected_bounds
from .terrain import EMPTY_RECT, CellRect, GridConfig, SparseColumnGrid, Window

log = logging.getLogger(__name__)

HALF_PI = math.pi / 2

OFFSETS8 = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))
OFFSETS4 = OFFSETS8[:4]

COLLISION, DISPLACEMENT, EROSION, PARTICLE_LANDING = range(4)
CAUSES = ("collision", "displacement", "erosion", "particle-landing")
RECORD_DTYPE = np.dtype([("i", "<i8"), ("j", "<i8"), ("old", "<f8"), ("new", "<f8"), ("cause", "u1")])
STAGES = ("collide", "contour", "displace", "erode", "particles")


class MaterialError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialParams:
    theta_in: float
    theta_out: float
    roughness: float
    theta_stop: float
    compression: float
    max_erosion_iters: int = 200
    margin_cells: int = 10

    def __post_init__(self):
        for name in ("theta_in", "theta_out", "theta_stop"):
            v = getattr(self, name)
            if not 0.0 <= v <= HALF_PI:
                raise MaterialError(f"{name} must be an angle in [0, pi/2], got {v}")
        if not 0.0 <= self.roughness <= 1.0:
            raise MaterialError(f"roughness must be in [0, 1], got {self.roughness}")
        if not 0.0 <= self.compression <= 1.0:
            raise MaterialError(f"compression must be in [0, 1], got {self.compression}")
        if self.max_erosion_iters < 1:
            raise MaterialError("max_erosion_iters must be at least 1")
        if self.margin_cells < 0:
            raise MaterialError("margin_cells must be non-negative")
        if self.theta_stop < self.theta_out:
            warnings.warn("theta_stop < theta_out: erosion stops only at the iteration cap",
                          stacklevel=3)

    def replace(self, **kw) -> "MaterialParams":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return MaterialParams(**vals)


PRESETS = ("sand", "mud", "snow")
_INT_KEYS = {"max_erosion_iters", "margin_cells"}


def parse_material(text: str, source: str = "<string>") -> MaterialParams:
    vals = {}
    known = {f.name for f in fields(MaterialParams)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MaterialError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise MaterialError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            vals[key] = int(value) if key in _INT_KEYS else float(value)
        except ValueError:
            raise MaterialError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    try:
        return MaterialParams(**vals)
    except TypeError as exc:
        raise MaterialError(f"{source}: {exc}") from None


def load_material(path) -> MaterialParams:
    with open(path) as fh:
        return parse_material(fh.read(), str(path))


def preset(name: str) -> MaterialParams:
    if name not in PRESETS:
        raise MaterialError(f"unknown material preset {name!r} (choose from {', '.join(PRESETS)})")
    text = resources.files("groundsim").joinpath("presets", f"{name}.mat").read_text()
    return parse_material(text, f"{name}.mat")


# -- patch ----------------------------------------------------------------------

@dataclass
class Patch:
    """Dense working copy of the columns in ``rect``."""

    config: GridConfig
    rect: CellRect
    height: np.ndarray
    contact: np.ndarray
    contour: np.ndarray
    displaced: np.ndarray
    floor: float  # origin height of collision rays

    @classmethod
    def from_window(cls, window: Window, config: GridConfig, floor: float) -> "Patch":
        return cls(config, window.rect, window.height.copy(), window.contact.copy(),
                   window.contour.copy(), np.zeros(window.height.shape), floor)

    @classmethod
    def from_grid(cls, grid: SparseColumnGrid, rect: CellRect) -> "Patch":
        return cls.from_window(grid.read_window(rect), grid.config, grid.min_height)

    @classmethod
    def from_heights(cls, heights, cell_size: float = 0.01, floor: float | None = None) -> "Patch":
        h = np.array(heights, dtype=np.float64, ndmin=2)
        cfg = GridConfig(cell_size, (0.0, 0.0), h.shape)
        fl = float(h.min()) - cfg.depth_margin if floor is None else floor
        return cls(cfg, cfg.bounds, h, np.zeros(h.shape, bool), np.zeros(h.shape, np.int32),
                   np.zeros(h.shape), fl)

    def to_window(self) -> Window:
        return Window(self.rect, self.height.copy(), self.contact.copy(), self.contour.copy())

    def cell_centers(self):
        ii = np.arange(self.rect.i0, self.rect.i1)
        jj = np.arange(self.rect.j0, self.rect.j1)
        x = self.config.cell_x(ii)[:, None] * np.ones((1, len(jj)))
        z = self.config.cell_z(jj)[None, :] * np.ones((len(ii), 1))
        return x, z

    def volume(self) -> float:
        d = self.config.cell_size
        return float(self.height.sum() * d * d)


def shifted(a: np.ndarray, di: int, dj: int, fill) -> np.ndarray:
    """``out[i, j] = a[i + di, j + dj]``, ``fill`` where that falls outside."""
    out = np.full(a.shape, fill, dtype=a.dtype)
    r, c = a.shape
    out[max(-di, 0):r + min(-di, 0), max(-dj, 0):c + min(-dj, 0)] = \
        a[max(di, 0):r + min(di, 0), max(dj, 0):c + min(dj, 0)]
    return out


# -- collision --------------------------------------------------------------------

@dataclass
class Collision:
    contact: np.ndarray  # bool per cell
    owner: np.ndarray  # body index of the lowest hit, -1 if none
    triangle: np.ndarray  # triangle index of that hit, -1 if none
    displaced_volume: np.ndarray  # per body, m^3


def collide(patch: Patch, trees: list[AabbTree]) -> Collision:
    """Push columns down to where their upward ray first meets a body.

    A column whose ray reaches a body at or below its top is in contact; it is
    lowered when strictly below.  The drop accumulates in ``patch.displaced``.
    """
    shape = patch.height.shape
    best = np.full(shape, np.inf)
    owner = np.full(shape, -1, dtype=np.int64)
    tri = np.full(shape, -1, dtype=np.int64)
    if trees:
        x, z = patch.cell_centers()
        for b, tree in enumerate(trees):
            hit, t_id = tree.raycast_up_many(x.ravel(), z.ravel(), patch.floor)
            hit = np.where(np.isnan(hit), np.inf, hit).reshape(shape)
            better = hit < best
            best[better] = hit[better]
            owner[better] = b
            tri[better] = t_id.reshape(shape)[better]
    contact = best <= patch.height
    drop = np.where(contact, patch.height - best, 0.0)
    owner[~contact] = -1
    tri[~contact] = -1
    patch.height = np.where(contact, np.minimum(patch.height, best), patch.height)
    patch.displaced += drop
    patch.contact = contact
    d2 = patch.config.cell_size ** 2
    m = np.array([float(drop[owner == b].sum()) * d2 for b in range(len(trees))])
    patch.contour = np.where(contact, patch.contour, 0).astype(np.int32)
    return Collision(contact, owner, tri, m)


def build_contour(contact: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Distance labels from contacted columns to the nearest free column.

    Free columns get 0; each wave labels the unlabeled contacted columns
    touching labeled ones with (lowest neighbouring label) + 1.  Contacted
    columns with no free column reachable inside the patch keep the last wave
    number and a warning is logged.
    """
    offsets = OFFSETS8 if connectivity == 8 else OFFSETS4
    contact = np.asarray(contact, dtype=bool)
    labels = np.zeros(contact.shape, dtype=np.int32)
    labeled = ~contact
    level = 0
    while not labeled.all():
        level += 1
        reach = np.zeros(contact.shape, dtype=bool)
        for di, dj in offsets:
            reach |= shifted(labeled, di, dj, False)
        grow = reach & ~labeled
        if not grow.any():
            log.warning("contact region has no free boundary inside the active area; "
                        "labels saturate at %d", level)
            labels[~labeled] = level
            break
        labels[grow] = level
        labeled |= grow
    return labels


def _lower_neighbors(labels: np.ndarray, offsets):
    lower = [shifted(labels, di, dj, np.iinfo(np.int32).max) < labels for di, dj in offsets]
    n_low = np.sum(lower, axis=0)
    return lower, n_low


def displace(patch: Patch, alpha: float) -> float:
    """Route the uncompressed share of displaced material down the contour.

    Each contacted column passes ``alpha * displaced`` in equal parts to its
    neighbours with a lower label until it reaches free (label 0) columns,
    which rise by what they receive.  Returns the volume deposited.
    """
    labels = patch.contour
    load = np.where(patch.contact, alpha * patch.displaced, 0.0)
    patch.displaced = np.zeros(patch.height.shape)
    if alpha == 0.0 or not load.any():
        return 0.0
    lower, n_low = _lower_neighbors(labels, OFFSETS8)
    for level in range(int(labels.max()), 0, -1):
        at = (labels == level) & (n_low > 0) & (load != 0)
        if not at.any():
            continue
        share = np.where(at, load / np.where(n_low > 0, n_low, 1), 0.0)
        load = np.where(at, 0.0, load)
        for (di, dj), low in zip(OFFSETS8, lower):
            load = load + shifted(np.where(low, share, 0.0), -di, -dj, 0.0)
    free = labels == 0
    patch.height = patch.height + np.where(free, load, 0.0)
    d = patch.config.cell_size
    return float(load[free].sum()) * d * d


# -- erosion ------------------------------------------------------------------------

def _erosion_pass(h, contact, d, params: MaterialParams):
    """Evaluate one erosion pass; returns (delta, blocking)."""
    diag = d * math.sqrt(2.0)
    n = np.zeros(h.shape)
    sumdiff = np.zeros(h.shape)
    steep = []
    blocking = False
    for di, dj in OFFSETS8:
        dist = diag if di and dj else d
        nb = shifted(h, di, dj, np.nan)
        diff = h - nb
        with np.errstate(invalid="ignore"):
            slope = np.arctan(diff / dist)
            touching = contact | shifted(contact, di, dj, False)
            thr = np.where(touching, params.theta_in, params.theta_out)
            st = (diff > 0) & (slope > thr)
            if not blocking:
                blocking = bool(np.any(st & (slope > np.maximum(thr, params.theta_stop))))
        n += st
        sumdiff += np.where(st, diff, 0.0)
        steep.append(st)
    has = n > 0
    nn = np.where(has, n, 1.0)
    shed = np.where(has, params.roughness * (sumdiff / nn), 0.0)
    share = shed / nn
    delta = -shed
    for (di, dj), st in zip(OFFSETS8, steep):
        delta = delta + shifted(np.where(st, share, 0.0), -di, -dj, 0.0)
    return delta, blocking


def erode(patch: Patch, params: MaterialParams, crop: bool = True) -> int:
    """Move material down slopes that are too steep; returns passes executed.

    A column sheds ``roughness`` times the mean height difference to its
    too-steep downhill neighbours, split equally among them.  Passes read a
    snapshot and apply all deltas at once.  They repeat until no slope
    exceeds ``theta_stop`` among pairs erosion can still act on, or the cap.

    With ``crop`` later passes only revisit the bounding box of cells that
    changed, grown by two cells; the result is identical to full passes.
    """
    h = patch.height
    d = patch.config.cell_size
    rows, cols = h.shape
    i0, i1, j0, j1 = 0, rows, 0, cols
    passes = 0
    while True:
        hs = h[i0:i1, j0:j1]
        delta, blocking = _erosion_pass(hs, patch.contact[i0:i1, j0:j1], d, params)
        if passes > 0 and not blocking:
            break
        if passes >= params.max_erosion_iters:
            log.debug("erosion hit the iteration cap (%d)", passes)
            break
        new = hs + delta
        changed = new != hs
        h[i0:i1, j0:j1] = new
        passes += 1
        if not changed.any():
            break
        if crop:
            ci = np.flatnonzero(changed.any(axis=1))
            cj = np.flatnonzero(changed.any(axis=0))
            i0, i1 = max(0, i0 + ci[0] - 2), min(rows, i0 + ci[-1] + 3)
            j0, j1 = max(0, j0 + cj[0] - 2), min(cols, j0 + cj[-1] + 3)
    patch.height = h
    return passes


# -- change records ---------------------------------------------------------------------

def diff_records(before: np.ndarray, after: np.ndarray, rect: CellRect, cause: int) -> np.ndarray:
    k = np.flatnonzero(before.ravel() != after.ravel())
    rec = np.empty(len(k), dtype=RECORD_DTYPE)
    cols = before.shape[1]
    rec["i"] = rect.i0 + k // cols
    rec["j"] = rect.j0 + k % cols
    rec["old"] = before.ravel()[k]
    rec["new"] = after.ravel()[k]
    rec["cause"] = cause
    return rec


@dataclass(frozen=True)
class StepReportRecord:
    i: int
    j: int
    old: float
    new: float
    cause: str


def iter_records(records: np.ndarray):
    for r in records:
        yield StepReportRecord(int(r["i"]), int(r["j"]), float(r["old"]), float(r["new"]),
                               CAUSES[int(r["cause"])])


@dataclass
class StepReport:
    records: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=RECORD_DTYPE))
    displaced_volume: dict = field(default_factory=dict)  # (character, body) -> m^3
    deposited_volume: float = 0.0
    erosion_passes: int = 0
    n_contact: int = 0
    n_spawned: int = 0
    n_landed: int = 0
    active_cells: int = 0

    def merge(self, other: "StepReport") -> "StepReport":
        return StepReport(
            np.concatenate([self.records, other.records]),
            {**self.displaced_volume, **other.displaced_volume},
            self.deposited_volume + other.deposited_volume,
            max(self.erosion_passes, other.erosion_passes),
            self.n_contact + other.n_contact,
            self.n_spawned + other.n_spawned,
            self.n_landed + other.n_landed,
            self.active_cells + other.active_cells,
        )

    @property
    def is_empty(self) -> bool:
        return len(self.records) == 0

    def record_list(self) -> list[StepReportRecord]:
        return list(iter_records(self.records))


# -- characters and stepping -----------------------------------------------------------

@dataclass
class Character:
    """Bodies moved together by one animated figure, with their spray state."""

    id: str
    bodies: list[Body]
    emitters: list[P.Emitter] = field(default_factory=list)

    def init_emitters(self, seed: int):
        self.emitters = [P.Emitter.for_body(b, seed, self.id) for b in self.bodies]
        return self


def character_rect(character: Character, t: float, config: GridConfig, margin: float) -> CellRect:
    rect = EMPTY_RECT
    for body in character.bodies:
        rect = rect.union(projected_bounds(body.mesh, body.trajectory.sample(t), margin, config))
    return rect


def plan_groups(rects: dict) -> list[tuple[tuple, CellRect]]:
    """Merge characters whose rectangles overlap, transitively.

    Merged groups are stepped on the bounding rectangle of their members; the
    merge repeats until those bounding rectangles are pairwise disjoint.
    Groups come back ordered by their first member id.  Characters with an
    empty rectangle are left out.
    """
    groups = [((cid,), r) for cid, r in sorted(rects.items()) if not r.is_empty()]
    merged = True
    while merged:
        merged = False
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                if groups[a][1].intersects(groups[b][1]):
                    ids = tuple(sorted(groups[a][0] + groups[b][0]))
                    groups[a] = (ids, groups[a][1].union(groups[b][1]))
                    del groups[b]
                    merged = True
                    break
            if merged:
                break
    return sorted(groups, key=lambda g: g[0][0])


class _Timer:
    def __init__(self, sink: dict | None):
        self.sink = sink

    def __call__(self, name):
        return _Lap(self.sink, name)


class _Lap:
    def __init__(self, sink, name):
        self.sink, self.name = sink, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        if self.sink is not None:
            self.sink[self.name] = self.sink.get(self.name, 0.0) + time.perf_counter() - self.t0


def step_patch(patch: Patch, characters: list[Character], t: float, dt: float,
               material: MaterialParams, pparams: P.ParticleParams | None = None,
               timings: dict | None = None, extent=None) -> StepReport:
    """Run collide, contour, displace, erode and particles on one patch."""
    lap = _Timer(timings)
    pparams = pparams or P.ParticleParams()
    extent = extent or patch.config.virtual_extent
    bodies = [(c, k, body) for c in characters for k, body in enumerate(c.bodies)]
    parts = []

    with lap("collide"):
        trees = [AabbTree.for_body(body, body.trajectory.sample(t)) for _, _, body in bodies]
        h0 = patch.height.copy()
        hit = collide(patch, trees)
        parts.append(diff_records(h0, patch.height, patch.rect, COLLISION))
    with lap("contour"):
        patch.contour = build_contour(patch.contact)
    with lap("displace"):
        h1 = patch.height.copy()
        deposited = displace(patch, material.compression)
        parts.append(diff_records(h1, patch.height, patch.rect, DISPLACEMENT))
    with lap("erode"):
        h2 = patch.height.copy()
        passes = erode(patch, material)
        parts.append(diff_records(h2, patch.height, patch.rect, EROSION))

    n_spawned = n_landed = 0
    with lap("particles"):
        h3 = patch.height.copy()
        for b, (c, k, body) in enumerate(bodies):
            if not c.emitters:
                continue
            em = c.emitters[k]
            em.advance(dt, pparams)
            if pparams.enabled:
                touched = np.zeros(body.mesh.n_triangles, dtype=bool)
                touched[np.unique(hit.triangle[hit.owner == b])] = True
                counts = em.update_loads(body, touched, t, dt, pparams)
                n_spawned += em.emit(body, counts, t, dt, pparams)
            n_landed += em.deposit(patch, pparams, extent, patch.floor)
        parts.append(diff_records(h3, patch.height, patch.rect, PARTICLE_LANDING))

    return StepReport(
        records=np.concatenate(parts),
        displaced_volume={(c.id, body.id): float(hit.displaced_volume[b]) for b, (c, _, body) in enumerate(bodies)},
        deposited_volume=deposited,
        erosion_passes=passes,
        n_contact=int(hit.contact.sum()),
        n_spawned=n_spawned,
        n_landed=n_landed,
        active_cells=patch.rect.area,
    )


class World:
    """A grid plus the characters moving over it, stepped serially."""

    def __init__(self, grid: SparseColumnGrid, characters: list[Character], material: MaterialParams,
                 particle_params: P.ParticleParams | None = None, spray_margin: float = 0.0):
        self.grid = grid
        self.characters = {c.id: c for c in characters}
        self.material = material
        self.particle_params = particle_params or P.ParticleParams()
        self.margin = material.margin_cells * grid.cell_size + spray_margin
        self.timings: dict[str, float] = {}

    def rects(self, t: float) -> dict:
        return {cid: character_rect(c, t, self.grid.config, self.margin) for cid, c in self.characters.items()}

    def step(self, t: float, dt: float) -> StepReport:
        return step(self, t, dt)


def step(world: World, t: float, dt: float) -> StepReport:
    """Advance every character group by one step at time ``t``."""
    grid = world.grid
    grid.clear_active()
    report = StepReport()
    for ids, rect in plan_groups(world.rects(t)):
        rect = grid.mark_active(rect)
        patch = Patch.from_grid(grid, rect)
        rep = step_patch(patch, [world.characters[c] for c in ids], t, dt, world.material,
                         world.particle_params, world.timings, grid.config.virtual_extent)
        grid.write_window(patch.to_window())
        report = report.merge(rep)
    return report
