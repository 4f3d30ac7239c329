"""Configuration tests: presets, file parsing, and overrides."""

import dataclasses

import pytest

from bevloop.config import PipelineConfig
from bevloop.errors import ContractError, FormatError


class TestPresets:
    def test_full_is_default(self):
        assert PipelineConfig.full() == PipelineConfig()

    def test_desk_shrinks_shapes(self):
        desk = PipelineConfig.desk()
        assert (desk.h_cells, desk.w_cells, desk.layers) == (64, 64, 8)
        assert desk.stage_channels == (4, 8, 16)
        assert desk.feature_channels == 32
        assert desk.descriptor_dim == 64
        # Retrieval and training knobs stay at deployment scale.
        assert desk.top_k == 25
        assert desk.exclusion == 50

    def test_preset_lookup(self):
        assert PipelineConfig.preset("desk") == PipelineConfig.desk()
        assert PipelineConfig.preset("full") == PipelineConfig.full()
        with pytest.raises(ContractError):
            PipelineConfig.preset("tiny")

    def test_grid_mirrors_ranges(self):
        grid = PipelineConfig.desk().grid()
        assert grid.x_range == (-50.0, 50.0)
        assert grid.z_range == (-4.0, 3.0)
        assert (grid.h_cells, grid.w_cells, grid.layers) == (64, 64, 8)

    def test_config_is_immutable(self):
        with pytest.raises(dataclasses.FrozenInstanceError):
            PipelineConfig().top_k = 9


class TestConfigFile:
    def test_to_lines_round_trips(self, tmp_path):
        path = tmp_path / "desk.cfg"
        path.write_text("\n".join(PipelineConfig.desk().to_lines()) + "\n")
        assert PipelineConfig.full().with_file(path) == PipelineConfig.desk()

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# full line comment\n\ntop_k = 7 # trailing comment\nuse_attention = no\n")
        cfg = PipelineConfig().with_file(path)
        assert cfg.top_k == 7
        assert cfg.use_attention is False

    def test_tuple_and_float_values(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("stage_channels = 2, 4, 8\nd_true = 7.5\n")
        cfg = PipelineConfig().with_file(path)
        assert cfg.stage_channels == (2, 4, 8)
        assert cfg.d_true == 7.5

    def test_missing_equals_named_with_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("top_k = 3\njust words\n")
        with pytest.raises(FormatError, match="line 2"):
            PipelineConfig().with_file(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("no_such_knob = 1\n")
        with pytest.raises(FormatError, match="no_such_knob"):
            PipelineConfig().with_file(path)

    def test_bad_values_rejected(self, tmp_path):
        for body in ("top_k = many", "use_attention = maybe", "stage_channels = 2,x"):
            path = tmp_path / "c.cfg"
            path.write_text(body + "\n")
            with pytest.raises(FormatError, match="line 1"):
                PipelineConfig().with_file(path)


class TestOverrides:
    def test_none_values_are_skipped(self):
        cfg = PipelineConfig().with_overrides(top_k=None, epochs=3)
        assert cfg.top_k == 25
        assert cfg.epochs == 3

    def test_unknown_field_rejected(self):
        with pytest.raises(ContractError):
            PipelineConfig().with_overrides(banana=1)
