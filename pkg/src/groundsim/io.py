"""Heightmap, mesh and particle file formats.

Heightmaps are 16-bit binary PGM files (``P5``, maxval 65535) with a sidecar
``<file>.meta`` of ``key = value`` lines giving the height range used for
quantization and the grid placement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MAXVAL = 65535
CSV_HEADER = ("t", "x", "y", "z", "vx", "vy", "vz", "volume")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class HeightmapMeta:
    min_height: float
    max_height: float
    cell_size: float
    origin_i: int = 0
    origin_j: int = 0
    origin_x: float = 0.0
    origin_z: float = 0.0

    def __post_init__(self):
        for k, f in self.__dataclass_fields__.items():
            object.__setattr__(self, k, int(getattr(self, k)) if f.type == "int" else float(getattr(self, k)))

    @property
    def level(self) -> float:
        """Height step of one quantization level."""
        return (self.max_height - self.min_height) / MAXVAL


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def quantize(heights: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi < lo:
        raise ValueError("height range is inverted")
    if hi == lo:
        return np.zeros(np.shape(heights), dtype=np.uint16)
    q = np.rint((np.asarray(heights, dtype=np.float64) - lo) / (hi - lo) * MAXVAL)
    return np.clip(q, 0, MAXVAL).astype(np.uint16)


def dequantize(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + q.astype(np.float64) / MAXVAL * (hi - lo)


def write_pgm(path, heights: np.ndarray, meta: HeightmapMeta):
    """Write rows as the first index (i) and columns as j."""
    q = quantize(heights, meta.min_height, meta.max_height)
    rows, cols = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n{MAXVAL}\n".encode("ascii"))
        fh.write(q.astype(">u2").tobytes())
    lines = [f"{k} = {getattr(meta, k)!r}" for k in HeightmapMeta.__dataclass_fields__]
    sidecar_path(path).write_text("\n".join(lines) + "\n")


def _pgm_tokens(data: bytes, count: int):
    """Header tokens of a PNM file and the offset of the raster."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_meta(path) -> HeightmapMeta:
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"{path}: missing sidecar {side.name}")
    kv = {}
    for n, line in enumerate(side.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{side}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    try:
        return HeightmapMeta(
            float(kv["min_height"]), float(kv["max_height"]), float(kv["cell_size"]),
            int(kv.get("origin_i", 0)), int(kv.get("origin_j", 0)),
            float(kv.get("origin_x", 0.0)), float(kv.get("origin_z", 0.0)))
    except KeyError as e:
        raise FormatError(f"{side}: missing key {e.args[0]}") from None


def read_pgm(path) -> tuple[np.ndarray, HeightmapMeta]:
    """Heights (float64, rows = i) and placement of an exported heightmap."""
    data = Path(path).read_bytes()
    tokens, off = _pgm_tokens(data, 4)
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    raster = np.frombuffer(data, dtype=dtype, count=rows * cols, offset=off).reshape(rows, cols)
    meta = read_meta(path)
    q = raster.astype(np.float64) * (MAXVAL / maxval)
    return dequantize(q, meta.min_height, meta.max_height), meta


def read_heightmap_text(path) -> tuple[np.ndarray, float]:
    """Plain text import: ``rows cols cell_size`` then row-major heights."""
    text = Path(path).read_text().split()
    if len(text) < 3:
        raise FormatError(f"{path}: expected 'rows cols cell_size' header")
    rows, cols, d = int(text[0]), int(text[1]), float(text[2])
    values = np.array(text[3:], dtype=np.float64)
    if values.size != rows * cols:
        raise FormatError(f"{path}: expected {rows * cols} heights, found {values.size}")
    return values.reshape(rows, cols), d


def load_heightmap(path) -> tuple[np.ndarray, float]:
    """Heights and cell size from either a PGM (with sidecar) or a text file."""
    if Path(path).read_bytes()[:2] == b"P5":
        h, meta = read_pgm(path)
        return h, meta.cell_size
    return read_heightmap_text(path)


def write_obj(path, heights: np.ndarray, cell_size: float, origin=(0.0, 0.0)):
    """Height field as a quad mesh; vertex (i, j) sits at the column top."""
    rows, cols = heights.shape
    with open(path, "w") as fh:
        x = (origin[0] + np.arange(rows) * cell_size).tolist()
        z = (origin[1] + np.arange(cols) * cell_size).tolist()
        h = np.asarray(heights, dtype=np.float64).tolist()
        for a in range(rows):
            for b in range(cols):
                fh.write(f"v {x[a]!r} {h[a][b]!r} {z[b]!r}\n")
        for a in range(rows - 1):
            for b in range(cols - 1):
                v0 = a * cols + b + 1
                fh.write(f"f {v0} {v0 + 1} {v0 + cols + 1} {v0 + cols}\n")


def write_particles_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def read_particles_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != CSV_HEADER:
            raise FormatError(f"{path}: unexpected header {header}")
        data = [[float(v) for v in row] for row in r]
    return np.array(data, dtype=np.float64).reshape(-1, len(CSV_HEADER))


def resample(heights: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling that keeps the corner samples aligned."""
    if heights.shape == tuple(shape):
        return heights
    ii = np.linspace(0, heights.shape[0] - 1, shape[0])
    jj = np.linspace(0, heights.shape[1] - 1, shape[1])
    grid = np.meshgrid(ii, jj, indexing="ij")
    return ndimage.map_coordinates(heights, grid, order=1, mode="nearest")


def diff_heightmaps(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Max and mean absolute difference; ``b`` is resampled onto ``a`` if needed."""
    b = resample(np.asarray(b, dtype=np.float64), a.shape)
    diff = np.abs(np.asarray(a, dtype=np.float64) - b)
    return float(diff.max()), float(diff.mean())
