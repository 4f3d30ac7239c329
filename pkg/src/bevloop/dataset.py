"""Sequence ingestion and ground-truth loop labeling.

Scan files are binary, consecutive little-endian float32 quadruples
(x, y, z, intensity). Pose files are text, twelve whitespace-separated
reals per line forming a row-major 3x4 rigid transform [R | t] from the
sensor frame to the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, PoseError
from .voxelizer import PointCloud


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid sensor-to-world transform with an orthonormal rotation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise PoseError(f"pose: expected 3x3 rotation and 3-vector, got {r.shape}, {t.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise PoseError("pose: rotation is not orthonormal within 1e-6")
        if abs(float(np.linalg.det(r)) - 1.0) > 1e-6:
            raise PoseError("pose: rotation determinant is not 1 within 1e-6")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def transform(self, xyz: np.ndarray) -> np.ndarray:
        """Apply to an Nx3 array of points."""
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])


def load_scan(path) -> PointCloud:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) % 16:
        raise FormatError(
            f"{path}: truncated point record at byte {len(blob) - len(blob) % 16}"
        )
    raw = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(raw[:, :3], raw[:, 3])


def save_scan(path, cloud: PointCloud) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    raw = np.column_stack([cloud.xyz, inten]).astype("<f4")
    Path(path).write_bytes(raw.tobytes())


def load_poses(path) -> list[Pose]:
    path = Path(path)
    poses = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise FormatError(f"{path}: line {lineno}: expected 12 values, got {len(parts)}")
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: non-numeric value") from None
        m = np.array(values, dtype=np.float64).reshape(3, 4)
        try:
            poses.append(Pose(m[:, :3], m[:, 3]))
        except PoseError as exc:
            raise PoseError(f"{path}: line {lineno}: {exc}") from None
    return poses


def save_poses(path, poses) -> None:
    lines = []
    for pose in poses:
        lines.append(" ".join(f"{v:.17g}" for v in pose.matrix().reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class LoopLabels:
    """True-match sets per query, under the distance and exclusion rules."""

    matches: dict = field(default_factory=dict)
    d_true: float = 10.0
    exclusion: int = 50

    def has_loop(self, query_id: int) -> bool:
        return bool(self.matches.get(query_id))

    def loop_queries(self) -> list[int]:
        return sorted(q for q, m in self.matches.items() if m)


def ground_truth_loops(poses, d_true: float = 10.0, exclusion: int = 50) -> LoopLabels:
    """Label query q with every id at most q - exclusion whose pose is near.

    Near means translation distance strictly below d_true. Ids inside
    (q - exclusion, q] are barred, matching the retrieval eligibility rule.
    """
    t = np.array([p.translation for p in poses], dtype=np.float64)
    matches: dict[int, set] = {}
    for q in range(len(poses)):
        cut = q - exclusion
        if cut < 0:
            continue
        d = np.linalg.norm(t[: cut + 1] - t[q], axis=1)
        near = np.nonzero(d < d_true)[0]
        if near.size:
            matches[q] = set(int(i) for i in near)
    return LoopLabels(matches, d_true, exclusion)


def load_sequence(root) -> tuple[list[PointCloud], list[Pose]]:
    """Read root/velodyne/*.bin (sorted) and root/poses.txt."""
    root = Path(root)
    scan_paths = sorted((root / "velodyne").glob("*.bin"))
    clouds = [load_scan(p) for p in scan_paths]
    poses = load_poses(root / "poses.txt")
    if len(clouds) != len(poses):
        raise FormatError(
            f"{root}: {len(clouds)} scans but {len(poses)} poses"
        )
    return clouds, poses


def save_sequence(root, clouds, poses) -> None:
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(clouds):
        save_scan(root / "velodyne" / f"{i:06d}.bin", cloud)
    save_poses(root / "poses.txt", poses)
