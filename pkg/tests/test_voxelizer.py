"""Voxelizer: cell arithmetic by hand, boundary semantics, permutation invariance."""

import numpy as np
import pytest

from bevloop.errors import ContractError, DimensionError
from bevloop.voxelizer import BevGrid, GridConfig, PointCloud, crop, voxelize


class TestGridConfig:
    def test_validation(self):
        with pytest.raises(ContractError):
            GridConfig(x_range=(1.0, 1.0))
        with pytest.raises(ContractError):
            GridConfig(z_range=(3.0, -4.0))
        with pytest.raises(ContractError):
            GridConfig(layers=0)

    def test_cell_sizes(self):
        cfg = GridConfig()
        # 100 m over 256 cells and 7 m over 32 layers.
        assert cfg.cell_x == 100.0 / 256.0
        assert cfg.cell_y == 100.0 / 256.0
        assert cfg.cell_z == 7.0 / 32.0

    def test_presets(self):
        desk = GridConfig.desk()
        assert (desk.h_cells, desk.w_cells, desk.layers) == (64, 64, 8)
        assert GridConfig.full().h_cells == 256


class TestPointCloud:
    def test_shape_and_finiteness(self):
        with pytest.raises(DimensionError):
            PointCloud(np.zeros((4, 2)))
        with pytest.raises(ContractError):
            PointCloud(np.array([[0.0, 0.0, np.nan]]))
        with pytest.raises(DimensionError):
            PointCloud(np.zeros((2, 3)), intensity=np.zeros(3))

    def test_len(self):
        assert len(PointCloud(np.zeros((5, 3)))) == 5


class TestVoxelize:
    def test_origin_lands_in_cell_128_128_18(self):
        # Default window: x,y in [-50, 50) over 256 cells (0.390625 m),
        # z in [-4, 3) over 32 layers (0.21875 m). The origin point maps to
        # floor(50/0.390625) = 128 in x and y and floor(4/0.21875) = 18 in z.
        grid = voxelize(PointCloud(np.array([[0.0, 0.0, 0.0]])), GridConfig())
        assert grid.occupied_count == 1
        assert grid.cells[128, 128, 18] == 1

    def test_low_edge_kept_high_edge_dropped(self):
        cfg = GridConfig()
        low = voxelize(PointCloud(np.array([[-50.0, -50.0, -4.0]])), cfg)
        assert low.cells[0, 0, 0] == 1
        high = voxelize(PointCloud(np.array([[50.0, 0.0, 0.0]])), cfg)
        assert high.occupied_count == 0

    def test_point_just_under_high_edge_in_last_cell(self):
        cfg = GridConfig()
        eps = 1e-9
        grid = voxelize(PointCloud(np.array([[50.0 - eps, 50.0 - eps, 3.0 - eps]])), cfg)
        assert grid.cells[255, 255, 31] == 1

    def test_occupancy_is_binary(self):
        pts = np.tile([[1.0, 1.0, 0.0]], (50, 1))
        grid = voxelize(PointCloud(pts), GridConfig())
        assert grid.occupied_count == 1
        assert grid.cells.max() == 1

    def test_permutation_invariance_bit_exact(self):
        rng = np.random.default_rng(42)
        cfg = GridConfig.desk()
        for _ in range(20):
            pts = rng.uniform(-60.0, 60.0, size=(300, 3)) * np.array([1.0, 1.0, 0.05])
            base = voxelize(PointCloud(pts), cfg)
            shuffled = voxelize(PointCloud(pts[rng.permutation(300)]), cfg)
            assert np.array_equal(base.cells, shuffled.cells)

    def test_outside_points_ignored(self):
        pts = np.array([[500.0, 0.0, 0.0], [0.0, 0.0, 100.0], [1.0, 1.0, 0.0]])
        grid = voxelize(PointCloud(pts), GridConfig())
        assert grid.occupied_count == 1

    def test_empty_cloud(self):
        grid = voxelize(PointCloud(np.zeros((0, 3))), GridConfig.desk())
        assert grid.occupied_count == 0


class TestCrop:
    def test_intensity_stays_aligned(self):
        pts = np.array([[0.0, 0.0, 0.0], [999.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        inten = np.array([0.1, 0.2, 0.3])
        kept = crop(PointCloud(pts, inten), GridConfig())
        np.testing.assert_array_equal(kept.intensity, [0.1, 0.3])
        assert len(kept) == 2


class TestBevGrid:
    def test_shape_validated(self):
        cfg = GridConfig.desk()
        with pytest.raises(DimensionError):
            BevGrid(np.zeros((2, 2, 2), dtype=np.uint8), cfg)

    def test_to_channels_layout(self):
        # cells[x, y, z] must reappear as channels[z, x, y].
        cfg = GridConfig.desk()
        cells = np.zeros((64, 64, 8), dtype=np.uint8)
        cells[3, 5, 7] = 1
        ch = BevGrid(cells, cfg).to_channels()
        assert ch.shape == (8, 64, 64)
        assert ch.dtype == np.float64
        assert ch[7, 3, 5] == 1.0
        assert ch.sum() == 1.0
