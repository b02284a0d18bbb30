"""Rigid triangle meshes, trajectory playback and vertical ray casting."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.spatial.transform import Rotation

from .terrain import EMPTY_RECT, CellRect, GridConfig

LEAF_SIZE = 8
# relative tolerance on edge functions; points this close to an edge count as hits
EDGE_EPS = 1e-12


class MeshError(ValueError):
    pass


class TrajectoryError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) body frame, meters
    triangles: np.ndarray  # (T, 3) int
    areas: np.ndarray = field(init=False)
    degenerate: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("mesh has non-finite vertex coordinates")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")
        self.areas = triangle_areas(self.vertices[self.triangles]) if len(self.triangles) else np.zeros(0)
        scale = float(np.ptp(self.vertices, axis=0).max()) if len(self.vertices) else 0.0
        self.degenerate = self.areas <= 1e-14 * scale * scale

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def posed(self, rotation: np.ndarray, position: np.ndarray) -> np.ndarray:
        """World-space vertices for a rotation matrix and translation."""
        return self.vertices @ np.asarray(rotation).T + np.asarray(position)


def triangle_areas(tris: np.ndarray) -> np.ndarray:
    tris = np.asarray(tris, dtype=np.float64)
    return 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)


def _parse_index(tok: str, n_vertices: int, lineno: int) -> int:
    head = tok.split("/")[0]
    try:
        k = int(head)
    except ValueError:
        raise MeshError(f"line {lineno}: bad face index {tok!r}") from None
    if k < 0:
        k = n_vertices + k + 1
    if k < 1 or k > n_vertices:
        raise MeshError(f"line {lineno}: face references vertex {head} but only {n_vertices} defined")
    return k - 1


_IGNORED_OBJ = {"vt", "vn", "vp", "o", "g", "s", "usemtl", "mtllib", "l"}


def parse_obj(lines: Iterable[str]) -> TriangleMesh:
    verts: list[tuple[float, float, float]] = []
    tris: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append((float(rest[0]), float(rest[1]), float(rest[2])))
            except ValueError:
                raise MeshError(f"line {lineno}: bad vertex coordinate") from None
        elif tag == "f":
            if len(rest) < 3:
                raise MeshError(f"line {lineno}: face needs at least 3 vertices")
            idx = [_parse_index(t, len(verts), lineno) for t in rest]
            for k in range(1, len(idx) - 1):
                tris.append((idx[0], idx[k], idx[k + 1]))
        elif tag in _IGNORED_OBJ:
            continue
        else:
            raise MeshError(f"line {lineno}: unsupported record {tag!r}")
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3))


def load_mesh(source) -> TriangleMesh:
    """Read an OBJ subset (``v`` and ``f`` records; faces fan-triangulated)."""
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            return parse_obj(fh)
    return parse_obj(source)


def save_obj(mesh: TriangleMesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


# -- primitive meshes ---------------------------------------------------------

def box_mesh(sx: float, sy: float, sz: float) -> TriangleMesh:
    """Axis-aligned box centered at the origin with full side lengths."""
    hx, hy, hz = sx / 2, sy / 2, sz / 2
    v = np.array([[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [(a, b, c) for a, b, c, d in quads] + [(a, c, d) for a, b, c, d in quads]
    return TriangleMesh(v, np.array(tris))


def ellipsoid_mesh(a: float, b: float, c: float, n_lat: int = 16, n_lon: int = 32) -> TriangleMesh:
    """UV ellipsoid with semi-axes (a, b, c) along (x, y, z)."""
    verts = [(0.0, -b, 0.0)]
    for k in range(1, n_lat):
        th = -math.pi / 2 + math.pi * k / n_lat
        for m in range(n_lon):
            ph = 2 * math.pi * m / n_lon
            verts.append((a * math.cos(th) * math.cos(ph), b * math.sin(th), c * math.cos(th) * math.sin(ph)))
    verts.append((0.0, b, 0.0))
    top = len(verts) - 1
    tris = []
    for m in range(n_lon):
        tris.append((0, 1 + (m + 1) % n_lon, 1 + m))
    for k in range(n_lat - 2):
        r0, r1 = 1 + k * n_lon, 1 + (k + 1) * n_lon
        for m in range(n_lon):
            m1 = (m + 1) % n_lon
            tris.append((r0 + m, r0 + m1, r1 + m1))
            tris.append((r0 + m, r1 + m1, r1 + m))
    last = 1 + (n_lat - 2) * n_lon
    for m in range(n_lon):
        tris.append((last + m, last + (m + 1) % n_lon, top))
    return TriangleMesh(np.array(verts), np.array(tris))


def sphere_mesh(radius: float, n_lat: int = 16, n_lon: int = 32) -> TriangleMesh:
    return ellipsoid_mesh(radius, radius, radius, n_lat, n_lon)


def cylinder_mesh(radius: float, width: float, n: int = 32) -> TriangleMesh:
    """Wheel-like cylinder whose axis is the body-frame z axis."""
    verts = []
    for z in (-width / 2, width / 2):
        for m in range(n):
            ph = 2 * math.pi * m / n
            verts.append((radius * math.cos(ph), radius * math.sin(ph), z))
    verts += [(0.0, 0.0, -width / 2), (0.0, 0.0, width / 2)]
    c0, c1 = 2 * n, 2 * n + 1
    tris = []
    for m in range(n):
        m1 = (m + 1) % n
        tris += [(m, m1, n + m1), (m, n + m1, n + m), (c0, m1, m), (c1, n + m, n + m1)]
    return TriangleMesh(np.array(verts), np.array(tris))


# -- trajectories ---------------------------------------------------------------

def _as_wxyz(rot: Rotation) -> np.ndarray:
    q = rot.as_quat()
    return np.array([q[3], q[0], q[1], q[2]])


def _rot(q_wxyz) -> Rotation:
    w, x, y, z = q_wxyz
    return Rotation.from_quat([x, y, z, w])


@dataclass
class BodyState:
    position: np.ndarray
    orientation: np.ndarray  # unit quaternion, scalar first
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    linear_acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return _rot(self.orientation).as_matrix()


def _central_difference(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    n = len(times)
    out = np.zeros_like(values)
    if n < 2:
        return out
    out[0] = (values[1] - values[0]) / (times[1] - times[0])
    out[-1] = (values[-1] - values[-2]) / (times[-1] - times[-2])
    if n > 2:
        dt = (times[2:] - times[:-2])[:, None]
        out[1:-1] = (values[2:] - values[:-2]) / dt
    return out


class Trajectory:
    """Time-ordered rigid poses with finite-differenced derivatives."""

    def __init__(self, times, positions, orientations, body_id: str = "body"):
        self.id = str(body_id)
        self.times = np.asarray(times, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(orientations, dtype=np.float64).reshape(-1, 4)
        if len(self.times) < 1:
            raise TrajectoryError(f"trajectory {self.id!r} has no samples")
        if len(self.positions) != len(self.times) or len(q) != len(self.times):
            raise TrajectoryError(f"trajectory {self.id!r}: sample arrays differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise TrajectoryError(f"trajectory {self.id!r}: times must be strictly increasing")
        norms = np.linalg.norm(q, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(q)) or not np.all(np.isfinite(self.positions)):
            raise TrajectoryError(f"trajectory {self.id!r}: invalid sample values")
        self.orientations = q / norms[:, None]
        self._rots = Rotation.from_quat(self.orientations[:, [1, 2, 3, 0]])

        n = len(self.times)
        self.velocities = _central_difference(self.positions, self.times)
        self.accelerations = _central_difference(self.velocities, self.times)
        self.angular_velocities = np.zeros((n, 3))
        if n >= 2:
            lo = np.r_[0, np.arange(n - 2), n - 2]
            hi = np.r_[1, np.arange(2, n), n - 1]
            rel = self._rots[hi] * self._rots[lo].inv()
            self.angular_velocities = rel.as_rotvec() / (self.times[hi] - self.times[lo])[:, None]

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def covers(self, t: float) -> bool:
        return self.start <= t <= self.end

    def sample(self, t: float) -> BodyState:
        times = self.times
        if t <= times[0] or len(times) == 1:
            return self._at(0)
        if t >= times[-1]:
            return self._at(len(times) - 1)
        k = int(np.searchsorted(times, t, side="right")) - 1
        if t == times[k]:
            return self._at(k)
        u = (t - times[k]) / (times[k + 1] - times[k])
        lerp = lambda a: a[k] + u * (a[k + 1] - a[k])  # noqa: E731
        rel = (self._rots[k].inv() * self._rots[k + 1]).as_rotvec()
        q = _as_wxyz(self._rots[k] * Rotation.from_rotvec(u * rel))
        if np.dot(q, self.orientations[k]) < 0:
            q = -q
        return BodyState(lerp(self.positions), q, lerp(self.velocities),
                         lerp(self.angular_velocities), lerp(self.accelerations))

    def sample_many(self, ts):
        """Vectorised :meth:`sample`: ``(positions, rotation matrices, v, omega, a)``."""
        ts = np.asarray(ts, dtype=np.float64).reshape(-1)
        n = len(self.times)
        if n == 1:
            rep = lambda a: np.repeat(a[:1], len(ts), axis=0)  # noqa: E731
            return (rep(self.positions), np.repeat(self._rots[0].as_matrix()[None], len(ts), axis=0),
                    rep(self.velocities), rep(self.angular_velocities), rep(self.accelerations))
        k = np.clip(np.searchsorted(self.times, ts, side="right") - 1, 0, n - 2)
        u = np.clip((ts - self.times[k]) / (self.times[k + 1] - self.times[k]), 0.0, 1.0)[:, None]
        lerp = lambda a: a[k] + u * (a[k + 1] - a[k])  # noqa: E731
        rel = (self._rots[k].inv() * self._rots[k + 1]).as_rotvec()
        mats = (self._rots[k] * Rotation.from_rotvec(u * rel)).as_matrix()
        return (lerp(self.positions), mats, lerp(self.velocities),
                lerp(self.angular_velocities), lerp(self.accelerations))

    def _at(self, k: int) -> BodyState:
        return BodyState(self.positions[k].copy(), self.orientations[k].copy(),
                         self.velocities[k].copy(), self.angular_velocities[k].copy(),
                         self.accelerations[k].copy())


def sample_trajectory(traj: Trajectory, t: float) -> BodyState:
    return traj.sample(t)


def load_trajectories(path) -> dict[str, Trajectory]:
    """Read ``time body_id px py pz qw qx qy qz`` records, grouped by body id."""
    rows: dict[str, list[list[float]]] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 9:
                raise TrajectoryError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            try:
                vals = [float(parts[0])] + [float(p) for p in parts[2:]]
            except ValueError:
                raise TrajectoryError(f"{path}:{lineno}: non-numeric field") from None
            rows.setdefault(parts[1], []).append(vals)
    out = {}
    for body_id, recs in rows.items():
        a = np.array(recs)
        if np.any(np.diff(a[:, 0]) <= 0):
            raise TrajectoryError(f"{path}: records for body {body_id!r} are not time-sorted")
        out[body_id] = Trajectory(a[:, 0], a[:, 1:4], a[:, 4:8], body_id)
    return out


def save_trajectories(path, trajectories: Iterable[Trajectory]):
    with open(path, "w") as fh:
        fh.write("# time body_id px py pz qw qx qy qz\n")
        for traj in trajectories:
            for t, p, q in zip(traj.times, traj.positions, traj.orientations):
                fh.write(" ".join([repr(float(t)), traj.id] + [repr(float(x)) for x in (*p, *q)]) + "\n")


@dataclass
class Body:
    """A mesh driven by a trajectory."""

    id: str
    mesh: TriangleMesh
    trajectory: Trajectory

    def world_triangles(self, state: BodyState) -> np.ndarray:
        return self.mesh.posed(state.rotation_matrix, state.position)[self.mesh.triangles]

    def tree(self, state: BodyState) -> "AabbTree":
        """Hierarchy for ``state``, refit from a topology built once in the body frame."""
        topo = self.__dict__.get("_topology")
        if topo is None:
            topo = self.__dict__["_topology"] = AabbTree(self.mesh.vertices[self.mesh.triangles])
        return topo.refit(self.world_triangles(state))


# -- bounding volume hierarchy ---------------------------------------------------

class AabbTree:
    """Binary AABB hierarchy over world-space triangles.

    Nodes are stored in flat arrays; ``left[k] < 0`` marks a leaf whose
    triangles are ``order[start[k]:start[k] + count[k]]``.  A tree for a new
    pose of the same mesh is obtained with :meth:`refit`, which keeps the
    topology and recomputes the boxes.
    """

    def __init__(self, triangles: np.ndarray, leaf_size: int = LEAF_SIZE):
        tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        n = len(tris)
        centroids = tris.mean(axis=1)
        order = np.arange(n)
        left, right, start, count, depth = [], [], [], [], []

        def new_node(s, c, dep):
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(c)
            depth.append(dep)
            return len(left) - 1

        stack = [new_node(0, n, 0)]
        while stack:
            k = stack.pop()
            s, c = start[k], count[k]
            if c <= leaf_size:
                continue
            idx = order[s:s + c]
            axis = int(np.argmax(np.ptp(centroids[idx], axis=0)))
            order[s:s + c] = idx[np.argsort(centroids[idx, axis], kind="stable")]
            half = c // 2
            left[k] = new_node(s, half, depth[k] + 1)
            right[k] = new_node(s + half, c - half, depth[k] + 1)
            stack += [right[k], left[k]]

        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.depth = np.array(depth, dtype=np.int64)
        self.order = order
        leaves = np.flatnonzero(self.left < 0)
        # leaf ranges tile [0, n) contiguously once sorted by start
        self._leaves = leaves[np.argsort(self.start[leaves], kind="stable")]
        self._fit(tris)

    def _fit(self, tris: np.ndarray):
        self.triangles = tris
        n = len(tris)
        area2 = ((tris[:, 1, 0] - tris[:, 0, 0]) * (tris[:, 2, 2] - tris[:, 0, 2])
                 - (tris[:, 1, 2] - tris[:, 0, 2]) * (tris[:, 2, 0] - tris[:, 0, 0]))
        scale = float(np.ptp(tris.reshape(-1, 3), axis=0).max()) if n else 0.0
        # triangles seen edge-on by a vertical ray cannot be hit
        self.vertical = np.abs(area2) <= 1e-14 * scale * scale
        m = len(self.left)
        self.lo = np.full((m, 3), np.inf)
        self.hi = np.full((m, 3), -np.inf)
        if n == 0:
            return
        tlo = tris.min(axis=1)[self.order]
        thi = tris.max(axis=1)[self.order]
        leaves = self._leaves
        starts = self.start[leaves]
        self.lo[leaves] = np.minimum.reduceat(tlo, starts, axis=0)
        self.hi[leaves] = np.maximum.reduceat(thi, starts, axis=0)
        inner = self.left >= 0
        for dep in range(int(self.depth.max()), -1, -1):
            k = np.flatnonzero(inner & (self.depth == dep))
            if k.size:
                self.lo[k] = np.minimum(self.lo[self.left[k]], self.lo[self.right[k]])
                self.hi[k] = np.maximum(self.hi[self.left[k]], self.hi[self.right[k]])

    def refit(self, triangles: np.ndarray) -> "AabbTree":
        """Same hierarchy over moved triangles (same count and order)."""
        tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        if len(tris) != len(self.order):
            raise ValueError("refit needs the same number of triangles")
        tree = object.__new__(AabbTree)
        for name in ("left", "right", "start", "count", "depth", "order", "_leaves"):
            setattr(tree, name, getattr(self, name))
        tree._fit(tris)
        return tree

    @classmethod
    def for_body(cls, body: "Body", state: BodyState) -> "AabbTree":
        return body.tree(state)

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def raycast_up_many(self, x, z, y_from):
        """Lowest hit height of upward vertical rays; NaN where there is no hit.

        Returns ``(heights, triangle_ids)``; ids index the input triangles and
        are -1 for misses.
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        y0 = np.broadcast_to(np.asarray(y_from, dtype=np.float64), x.shape)
        best = np.full(x.shape, np.inf)
        best_tri = np.full(x.shape, -1, dtype=np.int64)
        if len(self.triangles) == 0 or x.size == 0:
            return np.full(x.shape, np.nan), best_tri
        stack = [(0, np.arange(x.size))]
        lo, hi = self.lo, self.hi
        while stack:
            k, idx = stack.pop()
            xi, zi = x[idx], z[idx]
            keep = ((xi >= lo[k, 0]) & (xi <= hi[k, 0]) & (zi >= lo[k, 2]) & (zi <= hi[k, 2])
                    & (y0[idx] <= hi[k, 1]) & (best[idx] > lo[k, 1]))
            idx = idx[keep]
            if idx.size == 0:
                continue
            if self.left[k] >= 0:
                stack.append((self.right[k], idx))
                stack.append((self.left[k], idx))
                continue
            tids = self.order[self.start[k]:self.start[k] + self.count[k]]
            tids = tids[~self.vertical[tids]]
            if tids.size == 0:
                continue
            y = _vertical_hits(self.triangles[tids], x[idx], z[idx])  # (rays, tris)
            y = np.where(y >= y0[idx][:, None], y, np.inf)
            col = np.argmin(y, axis=1)
            ymin = y[np.arange(len(idx)), col]
            better = ymin < best[idx]
            if better.any():
                sel = idx[better]
                best[sel] = ymin[better]
                best_tri[sel] = tids[col[better]]
        heights = np.where(np.isfinite(best), best, np.nan)
        return heights, best_tri

    def raycast_up(self, x: float, z: float, y_from: float):
        h, _ = self.raycast_up_many([x], [z], y_from)
        return None if np.isnan(h[0]) else float(h[0])


def _vertical_hits(tris: np.ndarray, px: np.ndarray, pz: np.ndarray) -> np.ndarray:
    """Heights where vertical lines through (px, pz) meet each triangle; inf outside.

    ``tris`` is ``(m, 3, 3)``, the result ``(len(px), m)``.
    """
    ax, ay, az = (tris[:, 0, c][None, :] for c in range(3))
    bx, by, bz = (tris[:, 1, c][None, :] for c in range(3))
    cx, cy, cz = (tris[:, 2, c][None, :] for c in range(3))
    px = px[:, None]
    pz = pz[:, None]
    ea = (cx - bx) * (pz - bz) - (cz - bz) * (px - bx)
    eb = (ax - cx) * (pz - cz) - (az - cz) * (px - cx)
    ec = (bx - ax) * (pz - az) - (bz - az) * (px - ax)
    total = ea + eb + ec
    tol = -EDGE_EPS * np.abs(total)
    sign = np.sign(total)
    inside = (ea * sign >= tol) & (eb * sign >= tol) & (ec * sign >= tol) & (total != 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        y = (ea * ay + eb * by + ec * cy) / total
    return np.where(inside, y, np.inf)


def raycast_up(tree: AabbTree, x: float, z: float, y_from: float):
    return tree.raycast_up(x, z, y_from)


def projected_bounds(mesh: TriangleMesh, state: BodyState, margin: float, config: GridConfig) -> CellRect:
    """Cells covered by the posed mesh's horizontal bounding box grown by ``margin``."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if len(mesh.vertices) == 0:
        return EMPTY_RECT
    world = mesh.posed(state.rotation_matrix, state.position)
    lo = world.min(axis=0)
    hi = world.max(axis=0)
    d = config.cell_size
    x0, z0 = config.origin
    i0 = math.floor((lo[0] - margin - x0) / d)
    i1 = math.ceil((hi[0] + margin - x0) / d)
    j0 = math.floor((lo[2] - margin - z0) / d)
    j1 = math.ceil((hi[2] + margin - z0) / d)
    return CellRect(i0, j0, i1 + 1, j1 + 1).intersection(config.bounds)
