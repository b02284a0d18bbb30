"""Regenerate the trajectory files used by the example scenarios.

    python3 scenarios/make_scenarios.py
"""

from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from groundsim.geometry import Trajectory, save_trajectories

HERE = Path(__file__).resolve().parent
IDENT = np.array([1.0, 0.0, 0.0, 0.0])


def _wxyz(rot: Rotation) -> np.ndarray:
    q = rot.as_quat()
    return q[..., [3, 0, 1, 2]]


def foot(times, phase, z, first_x, stride=0.6, period=0.4, stance=0.2, depth=0.012, lift=0.12):
    """A foot planted for ``stance`` seconds every ``period``, swinging forward in between."""
    local = np.clip(times - phase, 0.0, None)
    cycle = np.floor(local / period)
    u = local - cycle * period
    swing = np.clip((u - stance) / (period - stance), 0.0, 1.0)
    x = first_x + stride * (cycle + swing)
    y = 0.025 - depth + lift * np.sin(np.pi * swing)
    return np.stack([x, y, np.full_like(times, z)], axis=1)


def crossing():
    times = np.linspace(0.0, 1.0, 201)
    q = np.tile(IDENT, (len(times), 1))
    left = Trajectory(times, foot(times, 0.0, 1.42, 0.5), q, "left_foot")
    right = Trajectory(times, foot(times, 0.2, 1.58, 0.8), q, "right_foot")
    save_trajectories(HERE / "runner.traj", [left, right])

    # the wheel reaches the runner's lane after the runner has passed
    radius, speed, t0 = 0.3, 4.0, 0.45
    z = np.where(times < t0, 0.4, 0.4 + speed * (times - t0))
    pos = np.stack([np.full_like(times, 0.82), np.full_like(times, radius - 0.008), z], axis=1)
    roll = Rotation.from_rotvec(np.outer((z - z[0]) / radius, [1.0, 0.0, 0.0]))
    yaw = Rotation.from_rotvec([0.0, np.pi / 2, 0.0])
    wheel = Trajectory(times, pos, _wxyz(roll * yaw), "wheel")
    save_trajectories(HERE / "cyclist.traj", [wheel])


def stamp():
    # down 1.5 cm into the ground and straight back up
    times = np.array([0.0, 0.01, 0.02, 0.03])
    y = 0.1 + np.array([0.02, -0.015, 0.03, 0.05])
    pos = np.stack([np.full(4, 0.6), y, np.full(4, 0.6)], axis=1)
    save_trajectories(HERE / "stamp.traj", [Trajectory(times, pos, np.tile(IDENT, (4, 1)), "ball")])


if __name__ == "__main__":
    crossing()
    stamp()
