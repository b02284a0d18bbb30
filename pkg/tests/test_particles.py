import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from groundsim import particles as P
from groundsim.deformation import Character, Patch, preset, step_patch
from groundsim.geometry import Body, Trajectory, TriangleMesh, box_mesh
from groundsim.terrain import GridConfig

IDENT = [1.0, 0.0, 0.0, 0.0]
TRI = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]])


def still(t_end=4.0):
    return Trajectory([0.0, t_end], np.zeros((2, 3)), [IDENT, IDENT])


def accelerating(a, t_end=4.0):
    t = np.arange(int(t_end / 0.125) + 1) * 0.125
    pos = np.stack([0.5 * a * t ** 2, 0 * t, 0 * t], axis=1)
    return Trajectory(t, pos, np.tile(IDENT, (len(t), 1)))


class FixedRng:
    """Stands in for a generator so spawn sees chosen variates."""

    def __init__(self, u):
        self.u = np.asarray(u, float)

    def random(self, shape):
        return np.broadcast_to(self.u, shape).copy()

    def standard_normal(self, shape):
        return np.zeros(shape)


# -- parameters and attachment ----------------------------------------------------------

def test_params_validation():
    for bad in ({"adhesion": -1}, {"particle_volume": 0}, {"half_life": 0}, {"gamma": -1}):
        with pytest.raises(ValueError):
            P.ParticleParams(**bad)
    assert not P.ParticleParams().enabled
    assert P.ParticleParams(adhesion=0.001).enabled


def test_attach_by_hand():
    params = P.ParticleParams(adhesion=0.001)
    assert P.attach(0.01, params) == pytest.approx(1e-5, rel=1e-12)
    assert P.attach(0.01, params, degenerate=True) == 0.0
    assert P.attach(0.01, P.ParticleParams(adhesion=0.0)) == 0.0


# -- release ---------------------------------------------------------------------------------

def test_release_first_step_by_hand():
    assert P.release_volume(1.0, 0.1, 0.0, 0.1, 0.1) == pytest.approx(1 - math.exp(-1), abs=1e-15)
    assert P.release_volume(1.0, 0.1, 0.0, 0.1, 0.1) == pytest.approx(0.63212, abs=1e-5)
    assert P.release_volume(1.0, 1e-12, 0.0, 1e-12, 0.1) == pytest.approx(0.0, abs=1e-10)


@given(st.floats(1e-6, 1.0), st.floats(1e-3, 0.05), st.floats(0.01, 1.0), st.integers(1, 400))
def test_release_telescopes(v, dt, h, k):
    t_c = 0.37
    total = sum(P.release_volume(v, t_c + n * dt, t_c, dt, h) for n in range(1, k + 1))
    assert total == pytest.approx(v * (1 - math.exp(-k * dt / h)), rel=1e-9)


# -- barycentric sampling and spawning -----------------------------------------------------------

def test_barycentric_by_hand():
    assert P.barycentric(0.0, 0.7) == (1.0, 0.0, 0.0)
    b = P.barycentric(0.25, 0.5)
    assert b == (0.5, 0.25, 0.25)


def test_barycentric_uniform_over_triangle():
    rng = np.random.default_rng(0)
    n = 100_000
    ba, bb, bc = P.barycentric(rng.random(n), rng.random(n))
    assert (np.stack([ba, bb, bc]) >= -1e-15).all()
    # sub-triangle of the midpoint subdivision: the corner ones have one weight > 1/2
    occ = np.array([(ba > 0.5).mean(), (bb > 0.5).mean(), (bc > 0.5).mean()])
    occ = np.append(occ, 1 - occ.sum())
    assert np.all(np.abs(occ - 0.25) < 0.01)
    a, b, c = np.array([0, 0]), np.array([3, 0]), np.array([0, 1.5])
    pts = ba[:, None] * a + bb[:, None] * b + bc[:, None] * c
    assert np.linalg.norm(pts.mean(0) - (a + b + c) / 3) < 0.01 * np.linalg.norm(b - c)


def test_spawn_at_vertex_with_fixed_variates():
    params = P.ParticleParams(adhesion=1.0, min_accel=0.0, velocity_jitter=0.0)
    tri = np.array([[[1.0, 2.0, 3.0], [2.0, 2.0, 3.0], [1.0, 2.0, 4.0]]])
    p, v, births, idx = P.spawn(tri, [1], still(), params, FixedRng([0.0, 0.3, 0.5, 0.0, 0.0]), 1.0, 1.1)
    assert p.tolist() == [[1.0, 2.0, 3.0]]
    assert births.tolist() == [pytest.approx(1.05)]
    assert idx.tolist() == [0]


def test_spawn_velocity_rigid_about_body_origin():
    # spinning about +y at 2 rad/s while translating along x at 1 m/s
    t = np.linspace(0, 1, 101)
    q = np.stack([np.cos(t), 0 * t, np.sin(t), 0 * t], axis=1)
    traj = Trajectory(t, np.stack([t, 0 * t, 0 * t], 1), q)
    params = P.ParticleParams(adhesion=1.0, min_accel=0.0, velocity_jitter=0.0)
    rng = np.random.default_rng(1)
    p, v, births, _ = P.spawn(TRI, [200], traj, params, rng, 0.4, 0.5)
    pos, _, vel, omega, _ = traj.sample_many(births)
    assert np.allclose(omega, [0, 2, 0], atol=1e-6)
    assert np.allclose(v, vel + np.cross(omega, p - pos), atol=1e-12)


def test_jitter_bounded_by_fraction_of_speed():
    traj = Trajectory([0, 1], [[0, 0, 0], [3, 0, 0]], [IDENT, IDENT])
    params = P.ParticleParams(adhesion=1.0, min_accel=0.0, velocity_jitter=0.2)
    _, v, _, _ = P.spawn(TRI, [5000], traj, params, np.random.default_rng(3), 0.2, 0.3)
    dev = np.linalg.norm(v - [3, 0, 0], axis=1)
    assert dev.max() <= 0.2 * 3 + 1e-12
    assert dev.max() > 0.5
    # uniform in a ball: P(|dev| < r/2) = 1/8
    assert abs((dev < 0.3).mean() - 0.125) < 0.02


def test_birth_times_uniform_in_step():
    params = P.ParticleParams(adhesion=1.0, min_accel=0.0)
    _, _, births, _ = P.spawn(TRI, [10_000], still(), params, np.random.default_rng(4), 2.0, 2.01)
    assert births.min() >= 2.0 and births.max() <= 2.01
    assert stats.kstest((births - 2.0) / 0.01, "uniform").pvalue > 0.01


def test_gate_keeps_everything_at_min_accel():
    params = P.ParticleParams(adhesion=1.0, min_accel=10.0, gamma=1.0)
    _, _, births, _ = P.spawn(TRI, [5000], accelerating(10.0), params, np.random.default_rng(5), 1.0, 1.1)
    assert len(births) == 5000


def test_gate_fraction_monotone_below_min_accel():
    params = P.ParticleParams(adhesion=1.0, min_accel=10.0, gamma=2.0)
    fractions = []
    for a in (0.0, 2.5, 5.0, 7.5, 10.0):
        _, _, births, _ = P.spawn(TRI, [20_000], accelerating(a), params, np.random.default_rng(6), 1.0, 1.1)
        fractions.append(len(births) / 20_000)
    assert fractions == sorted(fractions)
    assert fractions[0] == 0.0 and fractions[-1] == 1.0
    assert fractions[2] == pytest.approx(0.25, abs=0.02)
    assert P.gate_value(3.0, 0.0, 1.0) == np.inf


# -- flight and landing ----------------------------------------------------------------------------

def test_ballistic_formula():
    p, v = P.ballistic(np.array([[0.0, 1.0, 0.0]]), np.array([[1.0, 2.0, 0.0]]), 0.5, (0, -10, 0))
    assert p.tolist() == [[0.5, 1.0 + 1.0 - 1.25, 0.0]]
    assert v.tolist() == [[1.0, -3.0, 0.0]]


def test_particle_drop_lands_after_fall_time():
    d, dt = 0.01, 1e-4
    params = P.ParticleParams(adhesion=1.0, particle_volume=1e-8)
    patch = Patch.from_heights(np.zeros((5, 5)), d, floor=-10.0)
    em = P.Emitter(1, np.random.default_rng(0))
    em.pos = np.array([[0.02, 0.1, 0.02]])
    em.vel = np.zeros((1, 3))
    em.birth = np.zeros(1)
    steps = 0
    while em.n_airborne:
        em.advance(dt, params)
        em.deposit(patch, params, (5, 5), -10.0)
        steps += 1
    assert steps * dt == pytest.approx(math.sqrt(2 * 0.1 / 9.81), abs=2 * dt)
    assert patch.height[2, 2] == pytest.approx(1e-8 / d ** 2, rel=1e-12)
    assert patch.height.sum() == patch.height[2, 2]


def test_zero_particles_leave_grid_alone():
    patch = Patch.from_heights(np.zeros((4, 4)), 0.01)
    em = P.Emitter(3, np.random.default_rng(0))
    assert P.integrate_and_deposit([em], patch, 0.01, P.ParticleParams(), (4, 4), -10.0) == 0
    assert (patch.height == 0).all()


def test_leaving_extent_counts_as_leak():
    params = P.ParticleParams(adhesion=1.0, particle_volume=2e-8)
    patch = Patch.from_heights(np.zeros((4, 4)), 0.01)
    em = P.Emitter(1, np.random.default_rng(0))
    em.pos = np.array([[-0.5, 1.0, 0.0], [0.01, 1.0, 0.01]])
    em.vel = np.zeros((2, 3))
    em.birth = np.zeros(2)
    em.deposit(patch, params, (4, 4), -10.0)
    assert em.leaked == pytest.approx(2e-8)
    assert em.n_airborne == 1


def test_body_streams_are_independent_and_repeatable():
    a = np.random.default_rng(P.body_seed(7, "runner", "left")).random(4)
    b = np.random.default_rng(P.body_seed(7, "runner", "left")).random(4)
    c = np.random.default_rng(P.body_seed(7, "runner", "right")).random(4)
    d = np.random.default_rng(P.body_seed(8, "runner", "left")).random(4)
    assert a.tolist() == b.tolist()
    assert a.tolist() != c.tolist() and a.tolist() != d.tolist()


# -- loads over time ------------------------------------------------------------------------------

def bounce_body():
    t = np.linspace(0.0, 1.0, 201)
    y = 0.03 - 0.05 * np.abs(np.sin(2 * np.pi * t))
    x = 0.3 + 0.3 * t
    pos = np.stack([x, y, np.full_like(t, 0.3)], 1)
    return Body("foot", box_mesh(0.08, 0.04, 0.12), Trajectory(t, pos, np.tile(IDENT, (len(t), 1)), "foot"))


def test_ledger_constant_over_bounce():
    params = P.ParticleParams(adhesion=0.002, particle_volume=2e-8, half_life=0.05, min_accel=0.0)
    cfg = GridConfig(0.01, virtual_extent=(70, 60))
    char = Character("c", [bounce_body()]).init_emitters(3)
    em = char.emitters[0]
    from groundsim.terrain import SparseColumnGrid
    grid = SparseColumnGrid(cfg)
    rect = cfg.bounds
    spawned = 0
    for k in range(1, 200):
        patch = Patch.from_grid(grid, rect)
        before = patch.volume()
        rep = step_patch(patch, [char], k * 0.005, 0.005, preset("sand").replace(compression=1.0), params)
        grid.write_window(patch.to_window())
        spawned += rep.n_spawned
        assert abs(em.ledger_error(params)) <= 1e-12 * max(em.picked_up, 1e-9)
        # what lands is exactly what the columns gained beyond the stamp
        assert (patch.volume() - before) == pytest.approx(rep.n_landed * params.particle_volume, abs=1e-12)
    assert spawned > 50
    assert em.deposited > 0
    assert (em.remaining >= -1e-18).all()


def test_contact_refresh_and_detach_time():
    mesh = box_mesh(0.1, 0.1, 0.1)
    body = Body("b", mesh, still())
    params = P.ParticleParams(adhesion=0.01, particle_volume=1e-9, min_accel=0.0)
    em = P.Emitter(mesh.n_triangles, np.random.default_rng(0))
    touching = np.zeros(mesh.n_triangles, bool)
    touching[:2] = True
    assert em.update_loads(body, touching, 0.1, 0.01, params).sum() == 0
    assert np.allclose(em.remaining[:2], mesh.areas[:2] * 0.01)
    assert np.isnan(em.t_c).all()
    counts = em.update_loads(body, np.zeros(mesh.n_triangles, bool), 0.11, 0.01, params)
    assert em.t_c[:2].tolist() == [0.1, 0.1]
    assert counts[:2].sum() > 0 and counts[2:].sum() == 0
    em.update_loads(body, touching, 0.12, 0.01, params)
    assert np.isnan(em.t_c[:2]).all()
    assert np.allclose(em.remaining[:2], mesh.areas[:2] * 0.01)


def test_fractional_counts_carry_over():
    mesh = TriangleMesh(TRI[0], [[0, 1, 2]])
    body = Body("b", mesh, still())
    params = P.ParticleParams(adhesion=1e-6, particle_volume=1e-7, half_life=0.1)
    em = P.Emitter(1, np.random.default_rng(0))
    em.update_loads(body, np.array([True]), 0.0, 0.01, params)
    total = 0
    for k in range(1, 400):
        total += int(em.update_loads(body, np.array([False]), k * 0.01, 0.01, params).sum())
    # 5e-7 attached, 1e-7 per particle: all five whole particles come out
    assert total == 5
