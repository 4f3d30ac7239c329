"""Deterministic synthetic worlds for desk-scale loop-closure runs.

A closed harmonic loop is traversed once, then a configurable number of
short segments are revisited, some driven in the reverse direction. The
world is a field of box and cylinder obstacles whose lateral surfaces are
point-sampled once; every scan selects the surface points within sensor
range, expresses them in the sensor frame, and optionally perturbs them
with Gaussian noise. Poses are exact, so ground-truth loop labels are
free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Pose
from .errors import ContractError
from .voxelizer import PointCloud

_SURFACE_DENSITY = 1.2
_PATH_CLEARANCE = 6.0


@dataclass(frozen=True)
class SynthConfig:
    """Trajectory, revisit, world, and noise knobs. Same seed, same world.

    Revisited segments are drawn from the first part of the base loop so
    that, when the base trajectory is long enough, every revisited id is
    at least min_id_gap scans older than every revisit query; shorter
    worlds fall back to unconstrained starts.
    """

    n_scans: int = 200
    revisit_count: int = 20
    reverse_fraction: float = 0.3
    noise_sigma: float = 0.05
    obstacle_density: float = 30.0
    sensor_range: float = 80.0
    sensor_height: float = 1.8
    min_id_gap: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_scans < 8:
            raise ContractError(f"synth: need at least 8 scans, got {self.n_scans}")
        if self.revisit_count < 1:
            raise ContractError("synth: need at least one revisit")
        if not 0.0 <= self.reverse_fraction <= 1.0:
            raise ContractError(f"synth: reverse fraction {self.reverse_fraction} outside [0, 1]")
        if self.noise_sigma < 0:
            raise ContractError(f"synth: negative noise level {self.noise_sigma}")
        if self.obstacle_density <= 0:
            raise ContractError("synth: obstacle density must be positive")


def _path_xy(s, phases) -> np.ndarray:
    theta = 2.0 * np.pi * np.atleast_1d(np.asarray(s, dtype=np.float64))
    r = 1.0 + 0.12 * np.sin(2.0 * theta + phases[0]) + 0.08 * np.sin(3.0 * theta + phases[1])
    return np.stack([70.0 * r * np.cos(theta), 50.0 * r * np.sin(theta)], axis=1)


def _tangent_yaw(s, phases) -> np.ndarray:
    h = 1e-4
    d = _path_xy(np.asarray(s) + h, phases) - _path_xy(np.asarray(s) - h, phases)
    return np.arctan2(d[:, 1], d[:, 0])


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _box_perimeter(u: np.ndarray, w: float, l: float) -> np.ndarray:
    """Map arclengths u in [0, 2(w+l)) onto a centered rectangle border."""
    x = np.empty_like(u)
    y = np.empty_like(u)
    a = u < w
    b = (u >= w) & (u < w + l)
    c = (u >= w + l) & (u < 2 * w + l)
    d = u >= 2 * w + l
    x[a], y[a] = u[a] - w / 2, -l / 2
    x[b], y[b] = w / 2, u[b] - w - l / 2
    x[c], y[c] = w / 2 - (u[c] - w - l), l / 2
    x[d], y[d] = -w / 2, l / 2 - (u[d] - 2 * w - l)
    return np.stack([x, y], axis=1)


def _sample_obstacles(rng, dense_path, lo, hi, n_obs):
    """Obstacle surface points, one static batch for the whole world.

    Half the obstacles hug the trajectory so every scan sees structure;
    the rest scatter uniformly. Nothing lands within clearance of the path.
    """
    chunks = []
    placed = 0
    attempts = 0
    while placed < n_obs:
        attempts += 1
        if attempts > 200 * n_obs:
            raise ContractError("synth: could not place obstacles clear of the path")
        if rng.random() < 0.5:
            anchor = dense_path[rng.integers(dense_path.shape[0])]
            side = rng.uniform(0.0, 2.0 * np.pi)
            offset = rng.uniform(8.0, 35.0)
            center = anchor + offset * np.array([math.cos(side), math.sin(side)])
        else:
            center = rng.uniform(lo, hi)
        if np.min(np.linalg.norm(dense_path - center, axis=1)) < _PATH_CLEARANCE:
            continue
        height = rng.uniform(2.0, 8.0)
        if rng.random() < 0.5:
            w, l = rng.uniform(1.0, 6.0, 2)
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            perim = 2.0 * (w + l)
            n_pts = max(8, int(round(_SURFACE_DENSITY * perim * height)))
            u = rng.uniform(0.0, perim, n_pts)
            border = _box_perimeter(u, w, l)
            c, sn = math.cos(yaw), math.sin(yaw)
            xy = border @ np.array([[c, sn], [-sn, c]]) + center
        else:
            radius = rng.uniform(0.5, 3.0)
            n_pts = max(8, int(round(_SURFACE_DENSITY * 2.0 * np.pi * radius * height)))
            phi = rng.uniform(0.0, 2.0 * np.pi, n_pts)
            xy = center + radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        z = rng.uniform(0.0, height, xy.shape[0])
        chunks.append(np.column_stack([xy, z]))
        placed += 1
    return np.vstack(chunks)


def synth_world(cfg: SynthConfig) -> tuple[list[PointCloud], list[Pose]]:
    """Generate (clouds, poses); scan order is base loop then revisits."""
    rng = np.random.default_rng(cfg.seed)
    phases = tuple(rng.uniform(0.0, 2.0 * np.pi, 2))

    seg_len = max(2, cfg.n_scans // (2 * cfg.revisit_count))
    n_base = cfg.n_scans - seg_len * cfg.revisit_count
    if n_base < max(4, seg_len):
        raise ContractError(
            f"synth: {cfg.n_scans} scans cannot host {cfg.revisit_count} "
            f"revisits of length {seg_len}"
        )

    base_s = np.arange(n_base, dtype=np.float64) / n_base
    base_xy = _path_xy(base_s, phases)
    base_yaw = _tangent_yaw(base_s, phases)
    base_poses = [
        Pose(_rot_z(base_yaw[i]), np.array([base_xy[i, 0], base_xy[i, 1], cfg.sensor_height]))
        for i in range(n_base)
    ]

    max_start = n_base - seg_len - cfg.min_id_gap
    if max_start < 0:
        max_start = n_base - seg_len
    starts = rng.integers(0, max_start + 1, size=cfg.revisit_count)
    n_rev = int(round(cfg.reverse_fraction * cfg.revisit_count))
    rev = np.zeros(cfg.revisit_count, dtype=bool)
    rev[rng.permutation(cfg.revisit_count)[:n_rev]] = True

    poses = list(base_poses)
    for j in range(cfg.revisit_count):
        span = range(int(starts[j]), int(starts[j]) + seg_len)
        if rev[j]:
            for i in reversed(span):
                poses.append(Pose(_rot_z(base_yaw[i] + np.pi), base_poses[i].translation))
        else:
            for i in span:
                poses.append(base_poses[i])

    dense = _path_xy(np.linspace(0.0, 1.0, 512, endpoint=False), phases)
    lo = dense.min(axis=0) - 90.0
    hi = dense.max(axis=0) + 90.0
    area_ha = float((hi - lo).prod()) / 1e4
    n_obs = max(1, int(round(cfg.obstacle_density * area_ha)))
    world = _sample_obstacles(rng, dense, lo, hi, n_obs)

    clouds = []
    for pose in poses:
        t = pose.translation
        sel = np.linalg.norm(world[:, :2] - t[:2], axis=1) <= cfg.sensor_range
        local = (world[sel] - t) @ pose.rotation
        if cfg.noise_sigma > 0.0:
            local = local + rng.normal(0.0, cfg.noise_sigma, local.shape)
        clouds.append(PointCloud(local))
    return clouds, poses
