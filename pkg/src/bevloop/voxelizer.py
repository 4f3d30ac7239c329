"""Point cloud cropping and binary occupancy voxelization.

A scan is cropped to a fixed axis-aligned window around the sensor, then
rasterized into a height-layered occupancy grid. Occupancy is binary: a
cell holds 1 when at least one point falls inside it, regardless of how
many. The grid is later consumed channels-first, one channel per height
layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class GridConfig:
    """Crop window and cell counts for the occupancy grid.

    Ranges are half-open on the high side: a point sitting exactly on the
    upper bound of an axis is dropped, one on the lower bound is kept.
    """

    x_range: tuple[float, float] = (-50.0, 50.0)
    y_range: tuple[float, float] = (-50.0, 50.0)
    z_range: tuple[float, float] = (-4.0, 3.0)
    h_cells: int = 256
    w_cells: int = 256
    layers: int = 32

    def __post_init__(self) -> None:
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ContractError(f"{name}: need low < high, got ({lo}, {hi})")
        for name in ("h_cells", "w_cells", "layers"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name}: need a positive cell count")

    @classmethod
    def full(cls) -> "GridConfig":
        """Deployment-scale grid."""
        return cls()

    @classmethod
    def desk(cls) -> "GridConfig":
        """Small preset for tests and laptop-scale experiments."""
        return cls(h_cells=64, w_cells=64, layers=8)

    @property
    def cell_x(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.h_cells

    @property
    def cell_y(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.w_cells

    @property
    def cell_z(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.layers


class PointCloud:
    """Nx3 float64 point set, optionally with per-point intensity."""

    __slots__ = ("xyz", "intensity")

    def __init__(self, xyz: np.ndarray, intensity: np.ndarray | None = None):
        xyz = np.asarray(xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise DimensionError(f"point cloud: expected an Nx3 array, got {xyz.shape}")
        if not np.all(np.isfinite(xyz)):
            raise ContractError("point cloud: coordinates must be finite")
        self.xyz = xyz
        if intensity is not None:
            intensity = np.asarray(intensity, dtype=np.float64)
            if intensity.shape != (xyz.shape[0],):
                raise DimensionError(
                    f"intensity: expected shape ({xyz.shape[0]},), got {intensity.shape}"
                )
        self.intensity = intensity

    def __len__(self) -> int:
        return self.xyz.shape[0]


@dataclass(frozen=True)
class BevGrid:
    """Occupancy grid of shape [h_cells, w_cells, layers], values in {0, 1}."""

    cells: np.ndarray
    config: GridConfig

    def __post_init__(self) -> None:
        expect = (self.config.h_cells, self.config.w_cells, self.config.layers)
        if self.cells.shape != expect:
            raise DimensionError(f"grid: expected shape {expect}, got {self.cells.shape}")

    @property
    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.cells))

    def to_channels(self) -> np.ndarray:
        """Channels-first float64 view [layers, h_cells, w_cells] for the encoder."""
        return np.ascontiguousarray(self.cells.transpose(2, 0, 1), dtype=np.float64)


def crop(cloud: PointCloud, config: GridConfig) -> PointCloud:
    xyz = cloud.xyz
    keep = (
        (xyz[:, 0] >= config.x_range[0])
        & (xyz[:, 0] < config.x_range[1])
        & (xyz[:, 1] >= config.y_range[0])
        & (xyz[:, 1] < config.y_range[1])
        & (xyz[:, 2] >= config.z_range[0])
        & (xyz[:, 2] < config.z_range[1])
    )
    inten = cloud.intensity[keep] if cloud.intensity is not None else None
    return PointCloud(xyz[keep], inten)


def voxelize(cloud: PointCloud, config: GridConfig) -> BevGrid:
    """Rasterize a scan. Points outside the window are ignored, not an error."""
    inside = crop(cloud, config)
    cells = np.zeros((config.h_cells, config.w_cells, config.layers), dtype=np.uint8)
    if len(inside) > 0:
        xyz = inside.xyz
        ix = np.floor((xyz[:, 0] - config.x_range[0]) / config.cell_x).astype(np.int64)
        iy = np.floor((xyz[:, 1] - config.y_range[0]) / config.cell_y).astype(np.int64)
        iz = np.floor((xyz[:, 2] - config.z_range[0]) / config.cell_z).astype(np.int64)
        # A point just under the upper bound can round onto the edge cell
        # after the division; clip rather than widen the crop test.
        np.clip(ix, 0, config.h_cells - 1, out=ix)
        np.clip(iy, 0, config.w_cells - 1, out=iy)
        np.clip(iz, 0, config.layers - 1, out=iz)
        cells[ix, iy, iz] = 1
    return BevGrid(cells, config)
