"""Sparse column height field.

Columns live on a uniform grid; cell ``(i, j)`` has its top vertex at world
``x = origin[0] + i * cell_size``, ``z = origin[1] + j * cell_size`` with
``y`` pointing up.  Storage is a hash of fixed-size tiles so that only the
parts of a large virtual grid that were ever touched cost memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Union

import numpy as np

TILE = 32

_SQRT2 = math.sqrt(2.0)
# max of sum |w| for the Catmull-Rom basis is 1.25 (at u = 0.5); squared in 2D
_CATMULL_ROM_OVERSHOOT = 1.25 * 1.25

NEIGHBOR_OFFSETS = (
    (-1, 0), (1, 0), (0, -1), (0, 1),
    (-1, -1), (-1, 1), (1, -1), (1, 1),
)


class GridError(ValueError):
    pass


class CellRect(NamedTuple):
    """Half-open rectangle of cell indices ``[i0, i1) x [j0, j1)``."""

    i0: int
    j0: int
    i1: int
    j1: int

    @property
    def shape(self) -> tuple[int, int]:
        return (max(0, self.i1 - self.i0), max(0, self.j1 - self.j0))

    @property
    def area(self) -> int:
        r, c = self.shape
        return r * c

    def is_empty(self) -> bool:
        return self.i1 <= self.i0 or self.j1 <= self.j0

    def intersects(self, other: "CellRect") -> bool:
        # two rects sharing even a single cell overlap
        if self.is_empty() or other.is_empty():
            return False
        return (self.i0 < other.i1 and other.i0 < self.i1
                and self.j0 < other.j1 and other.j0 < self.j1)

    def intersection(self, other: "CellRect") -> "CellRect":
        r = CellRect(max(self.i0, other.i0), max(self.j0, other.j0),
                     min(self.i1, other.i1), min(self.j1, other.j1))
        return r if not r.is_empty() else EMPTY_RECT

    def union(self, other: "CellRect") -> "CellRect":
        """Bounding rectangle of both."""
        if self.is_empty():
            return other
        if other.is_empty():
            return self
        return CellRect(min(self.i0, other.i0), min(self.j0, other.j0),
                        max(self.i1, other.i1), max(self.j1, other.j1))

    def contains(self, i: int, j: int) -> bool:
        return self.i0 <= i < self.i1 and self.j0 <= j < self.j1

    def expand(self, n: int) -> "CellRect":
        return CellRect(self.i0 - n, self.j0 - n, self.i1 + n, self.j1 + n)

    def cells(self) -> Iterator[tuple[int, int]]:
        for i in range(self.i0, self.i1):
            for j in range(self.j0, self.j1):
                yield (i, j)


EMPTY_RECT = CellRect(0, 0, 0, 0)


@dataclass(frozen=True)
class GridConfig:
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)
    virtual_extent: tuple[int, int] = (1024, 1024)
    # ray origins for collision start this far below the lowest initial height
    depth_margin: float = 10.0

    def __post_init__(self):
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise GridError(f"cell_size must be positive, got {self.cell_size}")
        rows, cols = self.virtual_extent
        if rows < 1 or cols < 1:
            raise GridError(f"virtual_extent must be >= 1 in both axes, got {self.virtual_extent}")
        object.__setattr__(self, "virtual_extent", (int(rows), int(cols)))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def bounds(self) -> CellRect:
        return CellRect(0, 0, self.virtual_extent[0], self.virtual_extent[1])

    def cell_x(self, i):
        return self.origin[0] + np.asarray(i, dtype=np.float64) * self.cell_size

    def cell_z(self, j):
        return self.origin[1] + np.asarray(j, dtype=np.float64) * self.cell_size

    def nearest_cell(self, x, z):
        """Index of the column whose top vertex is closest to ``(x, z)``."""
        i = np.floor((np.asarray(x) - self.origin[0]) / self.cell_size + 0.5).astype(np.int64)
        j = np.floor((np.asarray(z) - self.origin[1]) / self.cell_size + 0.5).astype(np.int64)
        return i, j


@dataclass(frozen=True)
class NoiseParams:
    lattice_spacing: float = 16.0
    amplitude: float = 0.0
    seed: int = 0
    base_height: float = 0.0

    def __post_init__(self):
        if self.lattice_spacing < 1:
            raise GridError("lattice_spacing must be at least one cell")
        if self.amplitude < 0:
            raise GridError("amplitude must be non-negative")


@dataclass
class Column:
    height: float
    in_contact: bool = False
    contour: int = 0
    displaced: float = 0.0


# -- initial conditions ------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)
_PI = np.uint64(0xD6E8FEB86659FD93)
_PJ = np.uint64(0xA0761D6478BD642F)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; wraparound is intended
    with np.errstate(over="ignore"):
        x = x + _M1
        x = (x ^ (x >> np.uint64(30))) * _M2
        x = (x ^ (x >> np.uint64(27))) * _M3
        return x ^ (x >> np.uint64(31))


def lattice_value(seed: int, ki, kj) -> np.ndarray:
    """Counter-based pseudo-random knot value in ``[-1, 1]``.

    Depends only on ``(seed, ki, kj)``, never on evaluation order.
    """
    ki = np.asarray(ki, dtype=np.int64).view(np.uint64)
    kj = np.asarray(kj, dtype=np.int64).view(np.uint64)
    s = _mix64(np.full(ki.shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64))
    with np.errstate(over="ignore"):
        x = _mix64(s ^ (ki * _PI))
        x = _mix64(x ^ (kj * _PJ))
    unit = (x >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return 2.0 * unit - 1.0


def catmull_rom_weights(u):
    u = np.asarray(u, dtype=np.float64)
    u2 = u * u
    u3 = u2 * u
    return (
        0.5 * (-u3 + 2.0 * u2 - u),
        0.5 * (3.0 * u3 - 5.0 * u2 + 2.0),
        0.5 * (-3.0 * u3 + 4.0 * u2 + u),
        0.5 * (u3 - u2),
    )


def initial_height_noise(params: NoiseParams, i, j):
    """Lattice noise interpolated with Catmull-Rom splines, scaled by amplitude.

    ``i`` and ``j`` may be scalars or broadcastable arrays of cell indices.
    """
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    i, j = np.broadcast_arrays(i, j)
    if params.amplitude == 0.0:
        out = np.full(i.shape, params.base_height)
        return out if out.ndim else float(out)
    ui = i / params.lattice_spacing
    uj = j / params.lattice_spacing
    ki = np.floor(ui)
    kj = np.floor(uj)
    wi = catmull_rom_weights(ui - ki)
    wj = catmull_rom_weights(uj - kj)
    ki = ki.astype(np.int64)
    kj = kj.astype(np.int64)
    acc = np.zeros(i.shape)
    for a in range(4):
        row = np.zeros(i.shape)
        for b in range(4):
            row += wj[b] * lattice_value(params.seed, ki + (a - 1), kj + (b - 1))
        acc += wi[a] * row
    out = params.base_height + params.amplitude * acc
    return out if out.ndim else float(out)


class _Initializer:
    min_height: float

    def heights(self, rect: CellRect) -> np.ndarray:
        raise NotImplementedError


class _Flat(_Initializer):
    def __init__(self, height: float):
        self.height = float(height)
        self.min_height = self.height

    def heights(self, rect):
        return np.full(rect.shape, self.height)


class _Noise(_Initializer):
    def __init__(self, params: NoiseParams):
        self.params = params
        self.min_height = params.base_height - _CATMULL_ROM_OVERSHOOT * params.amplitude

    def heights(self, rect):
        ii = np.arange(rect.i0, rect.i1)[:, None]
        jj = np.arange(rect.j0, rect.j1)[None, :]
        return np.asarray(initial_height_noise(self.params, ii, jj), dtype=np.float64).reshape(rect.shape)


class _Imported(_Initializer):
    def __init__(self, data: np.ndarray):
        self.data = data
        self.min_height = float(data.min())

    def heights(self, rect):
        return self.data[rect.i0:rect.i1, rect.j0:rect.j1].copy()


Init = Union[NoiseParams, np.ndarray, float, int, None]


def _make_initializer(config: GridConfig, init: Init) -> _Initializer:
    if init is None:
        return _Flat(0.0)
    if isinstance(init, NoiseParams):
        return _Noise(init)
    if isinstance(init, (int, float)):
        return _Flat(float(init))
    data = np.asarray(init, dtype=np.float64)
    if data.shape != config.virtual_extent:
        raise GridError(
            f"imported heights have shape {data.shape}, expected {config.virtual_extent}")
    if not np.all(np.isfinite(data)):
        raise GridError("imported heights contain non-finite values")
    return _Imported(data.copy())


class _Tile:
    __slots__ = ("height", "contact", "contour", "displaced", "materialized")

    def __init__(self, heights: np.ndarray):
        self.height = heights
        self.contact = np.zeros(heights.shape, dtype=bool)
        self.contour = np.zeros(heights.shape, dtype=np.int32)
        self.displaced = np.zeros(heights.shape)
        self.materialized = np.zeros(heights.shape, dtype=bool)


@dataclass
class Window:
    """Dense copy of the column state inside ``rect``."""

    rect: CellRect
    height: np.ndarray
    contact: np.ndarray
    contour: np.ndarray


class SparseColumnGrid:
    """On-demand column storage over a bounded virtual grid."""

    def __init__(self, config: GridConfig, init: Init = None):
        self.config = config
        self.initializer = _make_initializer(config, init)
        self.min_height = self.initializer.min_height - config.depth_margin
        self._tiles: dict[tuple[int, int], _Tile] = {}
        self._active: dict = {}

    # -- bookkeeping --------------------------------------------------------

    @property
    def cell_size(self) -> float:
        return self.config.cell_size

    @property
    def n_materialized(self) -> int:
        return int(sum(int(t.materialized.sum()) for t in self._tiles.values()))

    @property
    def n_tiles(self) -> int:
        return len(self._tiles)

    def is_materialized(self, i: int, j: int) -> bool:
        tile = self._tiles.get((i // TILE, j // TILE))
        return bool(tile is not None and tile.materialized[i % TILE, j % TILE])

    def _check(self, i: int, j: int):
        if not self.config.bounds.contains(i, j):
            raise IndexError(f"cell ({i}, {j}) outside virtual extent {self.config.virtual_extent}")

    def _tile_rect(self, ti: int, tj: int) -> CellRect:
        return CellRect(ti * TILE, tj * TILE, (ti + 1) * TILE, (tj + 1) * TILE)

    def _tile(self, ti: int, tj: int) -> _Tile:
        tile = self._tiles.get((ti, tj))
        if tile is None:
            full = self._tile_rect(ti, tj)
            heights = np.zeros((TILE, TILE))
            inside = full.intersection(self.config.bounds)
            heights[inside.i0 - full.i0:inside.i1 - full.i0,
                    inside.j0 - full.j0:inside.j1 - full.j0] = self.initializer.heights(inside)
            tile = self._tiles[(ti, tj)] = _Tile(heights)
        return tile

    def _tiles_over(self, rect: CellRect):
        """Yield (tile key, sub-rect in world cells) for tiles overlapping rect."""
        for ti in range(rect.i0 // TILE, (rect.i1 - 1) // TILE + 1):
            for tj in range(rect.j0 // TILE, (rect.j1 - 1) // TILE + 1):
                yield (ti, tj), self._tile_rect(ti, tj).intersection(rect)

    # -- queries ------------------------------------------------------------

    def height_at(self, i: int, j: int) -> float:
        self._check(i, j)
        tile = self._tiles.get((i // TILE, j // TILE))
        if tile is not None:
            return float(tile.height[i % TILE, j % TILE])
        return float(self.initializer.heights(CellRect(i, j, i + 1, j + 1))[0, 0])

    def column(self, i: int, j: int) -> Column:
        self._check(i, j)
        tile = self._tiles.get((i // TILE, j // TILE))
        if tile is None:
            return Column(self.height_at(i, j))
        a, b = i % TILE, j % TILE
        return Column(float(tile.height[a, b]), bool(tile.contact[a, b]),
                      int(tile.contour[a, b]), float(tile.displaced[a, b]))

    def read_window(self, rect: CellRect) -> Window:
        """Copy state for ``rect`` (clipped to the extent) without materializing."""
        rect = rect.intersection(self.config.bounds)
        height = np.zeros(rect.shape)
        contact = np.zeros(rect.shape, dtype=bool)
        contour = np.zeros(rect.shape, dtype=np.int32)
        if rect.is_empty():
            return Window(rect, height, contact, contour)
        for key, sub in self._tiles_over(rect):
            dst = (slice(sub.i0 - rect.i0, sub.i1 - rect.i0), slice(sub.j0 - rect.j0, sub.j1 - rect.j0))
            tile = self._tiles.get(key)
            if tile is None:
                height[dst] = self.initializer.heights(sub)
                continue
            src = (slice(sub.i0 - key[0] * TILE, sub.i1 - key[0] * TILE),
                   slice(sub.j0 - key[1] * TILE, sub.j1 - key[1] * TILE))
            height[dst] = tile.height[src]
            contact[dst] = tile.contact[src]
            contour[dst] = tile.contour[src]
        return Window(rect, height, contact, contour)

    def heights(self, rect: CellRect) -> np.ndarray:
        return self.read_window(rect).height

    # -- mutation -----------------------------------------------------------

    def materialize(self, rect: CellRect) -> CellRect:
        rect = rect.intersection(self.config.bounds)
        if rect.is_empty():
            return rect
        for key, sub in self._tiles_over(rect):
            tile = self._tile(*key)
            tile.materialized[sub.i0 - key[0] * TILE:sub.i1 - key[0] * TILE,
                              sub.j0 - key[1] * TILE:sub.j1 - key[1] * TILE] = True
        return rect

    @property
    def active(self) -> set[tuple[int, int]]:
        """Cells currently under simulation."""
        out: set[tuple[int, int]] = set()
        for rect in self._active.values():
            out.update(rect.cells())
        return out

    def mark_active(self, rect: CellRect, key=None) -> CellRect:
        """Materialize ``rect`` (clipped) and add it to the active set.

        ``key`` names the activation so :meth:`deactivate` can drop it again.
        """
        rect = self.materialize(rect)
        self._active[rect if key is None else key] = rect
        return rect

    def deactivate(self, key):
        self._active.pop(key, None)

    def clear_active(self):
        self._active.clear()

    def write_window(self, window: Window):
        """Store a window back; every cell in it becomes materialized."""
        rect = self.materialize(window.rect)
        for key, sub in self._tiles_over(rect):
            tile = self._tiles[key]
            src = (slice(sub.i0 - rect.i0, sub.i1 - rect.i0), slice(sub.j0 - rect.j0, sub.j1 - rect.j0))
            dst = (slice(sub.i0 - key[0] * TILE, sub.i1 - key[0] * TILE),
                   slice(sub.j0 - key[1] * TILE, sub.j1 - key[1] * TILE))
            tile.height[dst] = window.height[src]
            tile.contact[dst] = window.contact[src]
            tile.contour[dst] = window.contour[src]
            tile.displaced[dst] = 0.0

    def write_flags(self, rect: CellRect, contact: np.ndarray, contour: np.ndarray):
        """Store contact flags and contour labels for ``rect``."""
        rect = self.materialize(rect)
        for key, sub in self._tiles_over(rect):
            tile = self._tiles[key]
            src = (slice(sub.i0 - rect.i0, sub.i1 - rect.i0), slice(sub.j0 - rect.j0, sub.j1 - rect.j0))
            dst = (slice(sub.i0 - key[0] * TILE, sub.i1 - key[0] * TILE),
                   slice(sub.j0 - key[1] * TILE, sub.j1 - key[1] * TILE))
            tile.contact[dst] = contact[src]
            tile.contour[dst] = contour[src]
            tile.displaced[dst] = 0.0

    def set_heights(self, i: np.ndarray, j: np.ndarray, values: np.ndarray):
        """Scatter heights into cells; indices must be unique and in extent."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if i.size == 0:
            return
        rows, cols = self.config.virtual_extent
        if i.min() < 0 or j.min() < 0 or i.max() >= rows or j.max() >= cols:
            raise IndexError("height update outside virtual extent")
        ti, tj = i // TILE, j // TILE
        keys = ti * (cols // TILE + 2) + tj
        for key in np.unique(keys):
            sel = keys == key
            tile = self._tile(int(ti[sel][0]), int(tj[sel][0]))
            a, b = i[sel] % TILE, j[sel] % TILE
            tile.height[a, b] = values[sel]
            tile.materialized[a, b] = True

    def set_height(self, i: int, j: int, value: float):
        self._check(i, j)
        self.set_heights(np.array([i]), np.array([j]), np.array([value]))

    def snapshot(self) -> dict:
        """Deep copy of the stored state, keyed by tile (for equality checks)."""
        return {k: (t.height.copy(), t.contact.copy(), t.contour.copy(), t.materialized.copy())
                for k, t in self._tiles.items()}


def create_grid(config: GridConfig, init: Init = None) -> SparseColumnGrid:
    return SparseColumnGrid(config, init)


def height_at(grid: SparseColumnGrid, i: int, j: int) -> float:
    return grid.height_at(i, j)


def mark_active(grid: SparseColumnGrid, rect: CellRect) -> CellRect:
    return grid.mark_active(rect)


def neighbors8(i: int, j: int, config: GridConfig | None = None, cell_size: float = 1.0):
    """Eight-way neighbours of ``(i, j)`` with center-to-center distances.

    With a ``config`` the result is clipped to its extent and distances use its
    cell size.
    """
    d = config.cell_size if config is not None else cell_size
    out = []
    for di, dj in NEIGHBOR_OFFSETS:
        k, l = i + di, j + dj
        if config is not None and not config.bounds.contains(k, l):
            continue
        out.append(((k, l), d * _SQRT2 if di and dj else d))
    return out


def total_volume(grid: SparseColumnGrid, region: CellRect) -> float:
    """Sum of height times cell area over ``region``."""
    if region.is_empty():
        return 0.0
    region_c = region.intersection(grid.config.bounds)
    if region_c != region:
        raise GridError(f"region {region} exceeds the virtual extent")
    d = grid.cell_size
    return float(grid.heights(region).sum() * d * d)
