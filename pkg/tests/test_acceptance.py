"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
"""

import filecmp
import math
import os
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from groundsim import particles as P
from groundsim import scenario as SC
from groundsim.cli import main
from groundsim.deformation import (
    Character, Patch, character_rect, erode, iter_records, preset, step_patch,
)
from groundsim.geometry import AabbTree, Body, Trajectory, ellipsoid_mesh, sphere_mesh
from groundsim.terrain import GridConfig, SparseColumnGrid

IDENT = [1.0, 0.0, 0.0, 0.0]


def record(n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def held(mesh, position, body_id="b"):
    p = np.asarray(position, float)
    return Body(body_id, mesh, Trajectory([0.0, 1.0], [p, p], [IDENT, IDENT], body_id))


# 1 -----------------------------------------------------------------------------------------------

def test_criterion_1_material_presets():
    expect = {"sand": (0.8, 0.436, 0.2, 0.8, 0.3), "mud": (1.57, 1.1, 0.2, 1.1, 0.41),
              "snow": (1.57, 1.57, 0.2, 1.57, 0.0)}
    got = {}
    for name in expect:
        m = preset(name)
        got[name] = (m.theta_in, m.theta_out, m.roughness, m.theta_stop, m.compression)
    record(1, got == expect, f"presets {got}")


# 2 -----------------------------------------------------------------------------------------------

def sphere_press(alpha: float):
    """Ball pressed 4 cm into a 128x128 patch over 10 steps, then lifted over 5."""
    d, base, r = 0.01, 0.05, 0.2
    t = np.array([0.0, 0.1, 0.15])
    y = base + r - np.array([0.0, 0.04, -0.01])
    traj = Trajectory(t, np.stack([np.full(3, 0.635), y, np.full(3, 0.635)], 1), [IDENT] * 3, "ball")
    char = Character("ball", [Body("ball", sphere_mesh(r), traj)])
    patch = Patch.from_heights(np.full((128, 128), base), d)
    v0 = patch.volume()
    total_m, rel_err = 0.0, []
    for k in range(1, 16):
        rep = step_patch(patch, [char], k * 0.01, 0.01, preset("sand").replace(compression=alpha))
        total_m += sum(rep.displaced_volume.values())
        expect = v0 - (1 - alpha) * total_m
        rel_err.append(abs(patch.volume() - expect) / v0)
    return v0, patch.volume(), total_m, max(rel_err)


def test_criterion_2_volume_ledger():
    t0 = time.perf_counter()
    v0, v1, m1, err1 = sphere_press(1.0)
    _, v3, m3, _ = sphere_press(0.3)
    deficit = v0 - v3
    rel = abs(deficit - 0.7 * m3) / (0.7 * m3)
    elapsed = time.perf_counter() - t0
    ok = m1 > 0 and err1 <= 1e-9 and rel <= 1e-9 and elapsed < 10
    record(2, ok, f"alpha=1 max rel volume error {err1:.2e}; alpha=0.3 deficit/(0.7 sum m) rel error "
                  f"{rel:.2e} (sum m {m3:.3e} m^3); {elapsed:.2f} s")


# 3 -----------------------------------------------------------------------------------------------

def test_criterion_3_snow_footprint():
    body = held(ellipsoid_mesh(0.05, 0.03, 0.12), [0.4, 0.015, 0.4])
    char = Character("c", [body])
    grid = SparseColumnGrid(GridConfig(0.01, virtual_extent=(80, 80)))
    snow = preset("snow")
    patch = Patch.from_grid(grid, character_rect(char, 0.5, grid.config, snow.margin_cells * 0.01))
    before = patch.height.copy()
    rep = step_patch(patch, [char], 0.5, 0.01, snow)
    rise = float((patch.height - before)[~patch.contact].max())
    eroded = sum(r.cause == "erosion" for r in iter_records(rep.records))
    ok = patch.contact.any() and rise == 0.0 and eroded == 0
    record(3, ok, f"max rise off contact {rise!r}, erosion records {eroded}, "
                  f"contact cells {int(patch.contact.sum())}")


# 4 -----------------------------------------------------------------------------------------------

def test_criterion_4_triple_column_erosion():
    sand = preset("sand")
    one = Patch.from_heights([[0.0, 0.1, 0.0]], 0.01)
    erode(one, sand.replace(max_erosion_iters=1))
    err = float(np.abs(one.height[0] - [0.01, 0.08, 0.01]).max())
    full = Patch.from_heights([[0.0, 0.1, 0.0]], 0.01)
    passes = erode(full, sand)
    slope = float(np.arctan(np.abs(np.diff(full.height[0])) / 0.01).max())
    ok = err <= 1e-12 and slope <= sand.theta_stop and passes < sand.max_erosion_iters
    record(4, ok, f"one pass {one.height[0].tolist()} (error {err:.1e}); "
                  f"{passes} passes, max slope {slope:.4f} rad")


# 5 -----------------------------------------------------------------------------------------------

def footprint(d: float):
    n = int(round(0.8 / d))
    grid = SparseColumnGrid(GridConfig(d, virtual_extent=(n, n)))
    char = Character("c", [held(ellipsoid_mesh(0.05, 0.03, 0.12, n_lat=32, n_lon=64), [0.4, 0.015, 0.4])])
    sand = preset("sand")
    patch = Patch.from_grid(grid, character_rect(char, 0.5, grid.config, sand.margin_cells * d))
    before = patch.height.copy()
    rep = step_patch(patch, [char], 0.5, 0.01, sand)
    return sum(rep.displaced_volume.values()), float((before - patch.height).max())


def test_criterion_5_resolution_robustness():
    t0 = time.perf_counter()
    res = {d: footprint(d) for d in (0.02, 0.01, 0.005, 0.0025)}
    elapsed = time.perf_counter() - t0
    v_ref, depth_ref = res[0.0025]
    dv = max(abs(v - v_ref) / v_ref for v, _ in res.values())
    dd = max(abs(h - depth_ref) / depth_ref for _, h in res.values())
    parts = ", ".join(f"{d * 1000:g} mm: V={v:.3e} depth={h:.4f}" for d, (v, h) in res.items())
    record(5, dv <= 0.2 and dd <= 0.1 and elapsed < 60,
           f"volume spread {dv:.1%}, depth spread {dd:.1%}, {elapsed:.2f} s ({parts})")


# 6 -----------------------------------------------------------------------------------------------

def test_criterion_6_particle_math():
    t0 = time.perf_counter()
    v, dt, h, t_c = 3e-6, 1 / 300, 0.05, 0.2
    tele = 0.0
    for k in (1, 7, 50, 300):
        total = sum(P.release_volume(v, t_c + n * dt, t_c, dt, h) for n in range(1, k + 1))
        tele = max(tele, abs(total - v * (1 - math.exp(-k * dt / h))) / v)

    rng = np.random.default_rng(0)
    ba, bb, bc = P.barycentric(rng.random(100_000), rng.random(100_000))
    occ = [(ba > 0.5).mean(), (bb > 0.5).mean(), (bc > 0.5).mean()]
    occ.append(1 - sum(occ))
    occ_err = max(abs(o - 0.25) for o in occ)

    tri = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]])
    params = P.ParticleParams(adhesion=1.0, min_accel=10.0, gamma=1.0)
    fractions = []
    for a in (0.0, 2.5, 5.0, 7.5, 10.0):
        tt = np.arange(33) * 0.125
        traj = Trajectory(tt, np.stack([0.5 * a * tt ** 2, 0 * tt, 0 * tt], 1), np.tile(IDENT, (33, 1)))
        _, _, births, _ = P.spawn(tri, [20_000], traj, params, np.random.default_rng(1), 1.0, 1.1)
        fractions.append(len(births) / 20_000)
    elapsed = time.perf_counter() - t0
    ok = (tele <= 1e-9 and occ_err <= 0.01 and fractions[-1] == 1.0 and fractions == sorted(fractions)
          and elapsed < 10)
    record(6, ok, f"telescoping rel error {tele:.1e}; sub-triangle occupancy {[round(float(o), 4) for o in occ]}; "
                  f"gate fractions {fractions}; {elapsed:.2f} s")


# 7 -----------------------------------------------------------------------------------------------

def brute_force_up(tris, x, z, y_from):
    """Lowest upward vertical-ray hit against every triangle (vectorized over triangles)."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    e1, e2 = b - a, c - a
    d = np.array([0.0, 1.0, 0.0])
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = np.array([x, y_from, z]) - a
    u = np.einsum("ij,ij->i", tv, p) * inv
    q = np.cross(tv, e1)
    v = q[:, 1] * inv
    s = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (s >= 0)
    return float((y_from + s[hit]).min()) if hit.any() else None


def test_criterion_7_ray_oracle():
    rng = np.random.default_rng(7)
    n_rays, mismatches, worst, max_tris = 0, 0, 0.0, 0
    for mesh_k in range(10):
        if mesh_k % 2:
            m = ellipsoid_mesh(*rng.uniform(0.2, 1.0, 3), n_lat=12, n_lon=20)
            tris = m.vertices[m.triangles] + rng.normal(scale=0.01, size=(m.n_triangles, 3, 3))
        else:
            tris = rng.uniform(-1, 1, size=(int(rng.integers(50, 501)), 3, 3))
        max_tris = max(max_tris, len(tris))
        tree = AabbTree(tris)
        lo, hi = tris.reshape(-1, 3).min(0), tris.reshape(-1, 3).max(0)
        x = rng.uniform(lo[0] - 0.1, hi[0] + 0.1, 1000)
        z = rng.uniform(lo[2] - 0.1, hi[2] + 0.1, 1000)
        y0 = rng.uniform(lo[1] - 1, hi[1], 1000)
        got, _ = tree.raycast_up_many(x, z, y0)
        for k in range(1000):
            ref = brute_force_up(tris, x[k], z[k], y0[k])
            n_rays += 1
            if (ref is None) != bool(np.isnan(got[k])):
                mismatches += 1
            elif ref is not None:
                worst = max(worst, abs(ref - got[k]))
    record(7, n_rays == 10_000 and max_tris <= 500 and mismatches == 0 and worst <= 1e-9,
           f"{n_rays} rays, meshes up to {max_tris} triangles, hit/miss mismatches {mismatches}, "
           f"max height error {worst:.1e}")


# 8 -----------------------------------------------------------------------------------------------

def test_criterion_8_serial_equivalence(scenarios_dir):
    scn = SC.load_scenario(scenarios_dir / "crossing.ini")
    schedules = {"serial": dict(workers=0), "inproc x2": dict(workers=2, transport="inproc"),
                 "stream x2": dict(workers=2, transport="stream"),
                 "inproc x2 delayed": dict(workers=2, transport="inproc", delay=(11, 0.002)),
                 "stream x2 delayed": dict(workers=2, transport="stream", delay=(12, 0.002))}
    finals = {}
    for name, kw in schedules.items():
        out = SC.run(scn, **kw)
        finals[name] = out.grid.heights(scn.grid.bounds).tobytes()
    ref = finals["serial"]
    same = [name for name, b in finals.items() if b == ref]
    changed = np.frombuffer(ref).min() < 0
    record(8, len(same) == len(finals) and changed,
           f"byte-identical final heightmaps: {len(same)}/{len(finals)} schedules ({', '.join(finals)})")


# 9 -----------------------------------------------------------------------------------------------

def test_criterion_9_scaling_shape():
    cores = len(os.sched_getaffinity(0))
    res = SC.bench(4, duration=1.0, repeats=3, workers=2, transport="stream", parallel=cores >= 2)
    times = ", ".join(f"{t:.3f}" for t in res["serial"])
    ok = res["r2"] > 0.95
    detail = f"serial s for 1-4 characters [{times}], R^2 {res['r2']:.4f}"
    if cores >= 2:
        ratio = res["parallel_2"] / res["serial_2"]
        ok = ok and ratio < 0.85
        detail += f"; 2 workers / serial for 2 characters {ratio:.2f}"
    else:
        detail += f"; parallel sub-check N/A ({cores} core available)"
    record(9, ok, detail)


# 10 ----------------------------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path, scenarios_dir, capsys):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["simulate", str(scenarios_dir / "crossing.ini"), "--out", str(d), "--seed", "3"]) == 0
    capsys.readouterr()
    names = sorted(p.name for p in dirs[0].iterdir() if not p.name.startswith("timing"))
    other = sorted(p.name for p in dirs[1].iterdir() if not p.name.startswith("timing"))
    _, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
    n_csv = sum(n.endswith(".csv") for n in names)
    with capsys.disabled():
        record(10, names == other and not mismatch and not errors and n_csv > 0,
               f"{len(names)} exported files ({n_csv} particle CSVs) byte-identical across two runs; "
               f"mismatches {mismatch + errors}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
