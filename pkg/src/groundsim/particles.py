"""Spray of ground material thrown off contacting triangles.

Each triangle that touches the ground picks up ``area * adhesion`` of
material.  Once it leaves the ground the load is released with an exponential
schedule, turned into fixed-volume particles that fly ballistically and are
added back to the column they land on.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Body, Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParticleParams:
    adhesion: float = 0.0  # volume picked up per unit area (m)
    particle_volume: float = 1e-7  # m^3
    half_life: float = 0.1  # s
    min_accel: float = 10.0  # m/s^2, every candidate is dropped at or above this
    gamma: float = 1.0
    velocity_jitter: float = 0.2
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)

    def __post_init__(self):
        for name in ("adhesion", "min_accel", "gamma", "velocity_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.particle_volume <= 0:
            raise ValueError("particle_volume must be positive")
        if self.half_life <= 0:
            raise ValueError("half_life must be positive")

    @property
    def enabled(self) -> bool:
        return self.adhesion > 0


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    volume: float
    birth: float


def attach(area: float, params: ParticleParams, degenerate: bool = False) -> float:
    """Volume picked up by a contacting triangle."""
    return 0.0 if degenerate else area * params.adhesion


def release_volume(v, t, t_c, dt, half_life):
    """Volume dropped during the step ``(t - dt, t]`` by a load that left the ground at ``t_c``."""
    return v * (np.exp((-t + t_c + dt) / half_life) - np.exp((-t + t_c) / half_life))


def barycentric(rho_a, rho_b):
    """Uniform barycentric coordinates from two uniform variates."""
    b_a = 1.0 - np.sqrt(rho_a)
    b_b = rho_b * (1.0 - b_a)
    b_c = 1.0 - (b_a + b_b)
    return b_a, b_b, b_c


def gate_value(accel, min_accel: float, gamma: float):
    accel = np.asarray(accel, dtype=np.float64)
    if min_accel == 0:
        return np.full(accel.shape, np.inf)
    return (accel / min_accel) ** gamma


def spawn(tri_local: np.ndarray, counts, trajectory: Trajectory, params: ParticleParams,
          rng: np.random.Generator, t0: float, t1: float):
    """Generate candidate particles on body-frame triangles and gate them.

    ``tri_local`` is ``(T, 3, 3)``, ``counts[k]`` candidates are drawn on
    triangle ``k``.  Returns ``(positions, velocities, births, tri_index)``
    for the candidates that survive acceleration gating; positions and
    velocities are at each particle's birth time.
    """
    tri_local = np.asarray(tri_local, dtype=np.float64).reshape(-1, 3, 3)
    counts = np.asarray(counts, dtype=np.int64)
    n = int(counts.sum())
    if n == 0:
        z = np.zeros((0, 3))
        return z, z.copy(), np.zeros(0), np.zeros(0, dtype=np.int64)
    tri_index = np.repeat(np.arange(len(tri_local)), counts)
    u = rng.random((n, 5))
    normal = rng.standard_normal((n, 3))
    b_a, b_b, b_c = barycentric(u[:, 0], u[:, 1])
    tri = tri_local[tri_index]
    local = b_a[:, None] * tri[:, 0] + b_b[:, None] * tri[:, 1] + b_c[:, None] * tri[:, 2]
    births = t0 + u[:, 2] * (t1 - t0)

    pos_b, rot_b, vel_b, omega_b, acc_b = trajectory.sample_many(births)
    p0 = np.einsum("nij,nj->ni", rot_b, local) + pos_b
    # rigid velocity of the material point, taken about the body origin
    v0 = vel_b + np.cross(omega_b, p0 - pos_b)
    speed = np.linalg.norm(v0, axis=1)
    norm = np.linalg.norm(normal, axis=1)
    norm[norm == 0] = 1.0
    radius = params.velocity_jitter * speed * np.cbrt(u[:, 4])
    v0 = v0 + normal / norm[:, None] * radius[:, None]

    keep = gate_value(np.linalg.norm(acc_b, axis=1), params.min_accel, params.gamma) > u[:, 3]
    return p0[keep], v0[keep], births[keep], tri_index[keep]


def ballistic(pos, vel, dt, gravity):
    dt = np.asarray(dt, dtype=np.float64)
    if dt.ndim:
        dt = dt[:, None]
    g = np.asarray(gravity, dtype=np.float64)
    return pos + vel * dt + 0.5 * g * dt * dt, vel + g * dt


def body_seed(seed: int, character_id: str, body_id: str) -> np.random.SeedSequence:
    key = zlib.crc32(f"{character_id}/{body_id}".encode())
    return np.random.SeedSequence(entropy=seed, spawn_key=(key,))


@dataclass
class Emitter:
    """Per-body particle state: triangle loads, airborne particles and a ledger."""

    n_triangles: int
    rng: np.random.Generator
    attached: np.ndarray = field(init=False)  # v at last contact
    remaining: np.ndarray = field(init=False)  # still stuck to the triangle
    t_c: np.ndarray = field(init=False)  # NaN while touching or never touched
    was_in_contact: np.ndarray = field(init=False)
    carry: np.ndarray = field(init=False)
    pos: np.ndarray = field(init=False)
    vel: np.ndarray = field(init=False)
    birth: np.ndarray = field(init=False)
    picked_up: float = 0.0
    deposited: float = 0.0
    leaked: float = 0.0
    n_spawned: int = 0
    n_landed: int = 0

    def __post_init__(self):
        n = self.n_triangles
        self.attached = np.zeros(n)
        self.remaining = np.zeros(n)
        self.t_c = np.full(n, np.nan)
        self.was_in_contact = np.zeros(n, dtype=bool)
        self.carry = np.zeros(n)
        self.pos = np.zeros((0, 3))
        self.vel = np.zeros((0, 3))
        self.birth = np.zeros(0)

    @classmethod
    def for_body(cls, body: Body, seed: int, character_id: str) -> "Emitter":
        return cls(body.mesh.n_triangles, np.random.default_rng(body_seed(seed, character_id, body.id)))

    @property
    def n_airborne(self) -> int:
        return len(self.birth)

    def airborne_volume(self, params: ParticleParams) -> float:
        return self.n_airborne * params.particle_volume

    def particles(self, params: ParticleParams) -> list[Particle]:
        return [Particle(p.copy(), v.copy(), params.particle_volume, float(b))
                for p, v, b in zip(self.pos, self.vel, self.birth)]

    def update_loads(self, body: Body, contacted: np.ndarray, t: float, dt: float,
                     params: ParticleParams) -> np.ndarray:
        """Refresh loads of touching triangles; return candidate counts per triangle."""
        mesh = body.mesh
        contacted = contacted & ~mesh.degenerate
        if contacted.any():
            fresh = mesh.areas[contacted] * params.adhesion
            self.picked_up += float((fresh - self.remaining[contacted]).sum())
            self.attached[contacted] = fresh
            self.remaining[contacted] = fresh
            self.t_c[contacted] = np.nan
            self.carry[contacted] = 0.0
        left = self.was_in_contact & ~contacted
        self.t_c[left] = t - dt
        self.was_in_contact = contacted

        counts = np.zeros(self.n_triangles, dtype=np.int64)
        rel = ~contacted & ~np.isnan(self.t_c) & (self.remaining > 0)
        if not rel.any():
            return counts
        dv = release_volume(self.attached[rel], t, self.t_c[rel], dt, params.half_life)
        want = self.carry[rel] + dv / params.particle_volume
        n = np.floor(want)
        # never emit more than is still attached
        n = np.minimum(n, np.floor(self.remaining[rel] / params.particle_volume + 1e-9))
        self.carry[rel] = want - n
        counts[rel] = n.astype(np.int64)
        return counts

    def emit(self, body: Body, counts: np.ndarray, t: float, dt: float, params: ParticleParams) -> int:
        tri_local = body.mesh.vertices[body.mesh.triangles]
        p, v, b, tri = spawn(tri_local, counts, body.trajectory, params, self.rng, t - dt, t)
        if len(b) == 0:
            return 0
        np.subtract.at(self.remaining, tri, params.particle_volume)
        p, v = ballistic(p, v, t - b, params.gravity)
        self.pos = np.concatenate([self.pos, p])
        self.vel = np.concatenate([self.vel, v])
        self.birth = np.concatenate([self.birth, b])
        self.n_spawned += len(b)
        return len(b)

    def advance(self, dt: float, params: ParticleParams):
        if self.n_airborne:
            self.pos, self.vel = ballistic(self.pos, self.vel, dt, params.gravity)

    def _drop(self, mask: np.ndarray):
        keep = ~mask
        self.pos, self.vel, self.birth = self.pos[keep], self.vel[keep], self.birth[keep]

    def deposit(self, patch, params: ParticleParams, extent, floor: float) -> int:
        """Land particles at or below their column top inside ``patch``.

        Particles outside the virtual extent or below ``floor`` are dropped and
        counted as leaked.  Returns the number landed.
        """
        if not self.n_airborne:
            return 0
        phi = params.particle_volume
        i, j = patch.config.nearest_cell(self.pos[:, 0], self.pos[:, 2])
        rows, cols = extent
        outside = (i < 0) | (j < 0) | (i >= rows) | (j >= cols) | (self.pos[:, 1] < floor)
        if outside.any():
            n_out = int(outside.sum())
            self.leaked += n_out * phi
            log.debug("%d particles left the terrain", n_out)
        r = patch.rect
        li, lj = i - r.i0, j - r.j0
        inside = ~outside & (li >= 0) & (lj >= 0) & (li < r.shape[0]) & (lj < r.shape[1])
        landed = np.zeros(self.n_airborne, dtype=bool)
        if inside.any():
            k = np.flatnonzero(inside)
            top = patch.height[li[k], lj[k]]
            hit = self.pos[k, 1] <= top
            landed[k[hit]] = True
        if landed.any():
            d = patch.config.cell_size
            np.add.at(patch.height, (li[landed], lj[landed]), phi / (d * d))
            self.deposited += int(landed.sum()) * phi
            self.n_landed += int(landed.sum())
        self._drop(landed | outside)
        return int(landed.sum())

    def ledger_error(self, params: ParticleParams) -> float:
        """picked_up - (attached + airborne + deposited + leaked); zero up to rounding."""
        return self.picked_up - (float(self.remaining.sum()) + self.airborne_volume(params)
                                 + self.deposited + self.leaked)


def integrate_and_deposit(emitters, patch, dt: float, params: ParticleParams, extent, floor: float) -> int:
    total = 0
    for em in emitters:
        em.advance(dt, params)
        total += em.deposit(patch, params, extent, floor)
    return total


def particles_csv_rows(t: float, emitters, params: ParticleParams):
    for em in emitters:
        for p, v in zip(em.pos, em.vel):
            yield (t, *p, *v, params.particle_volume)

