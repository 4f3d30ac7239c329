"""Pipeline configuration: one dataclass, two presets, key = value files.

Precedence is preset, then config file, then explicit flag overrides.
The desk preset shrinks every shape so the whole pipeline trains and
evaluates in minutes on one core; the full preset keeps the deployment
scale defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ContractError, FormatError
from .voxelizer import GridConfig


@dataclass(frozen=True)
class PipelineConfig:
    x_min: float = -50.0
    x_max: float = 50.0
    y_min: float = -50.0
    y_max: float = 50.0
    z_min: float = -4.0
    z_max: float = 3.0
    h_cells: int = 256
    w_cells: int = 256
    layers: int = 32
    stage_channels: tuple = (64, 128, 256)
    feature_channels: int = 512
    clusters: int = 32
    descriptor_dim: int = 1024
    use_attention: bool = True
    top_k: int = 25
    exclusion: int = 50
    d_true: float = 10.0
    margin: float = 0.3
    sigma_pos: float = 10.0
    sigma_neg: float = 50.0
    n_pos: int = 2
    n_neg: int = 10
    lr: float = 0.02
    overlap_lr: float = 0.05
    epochs: int = 40
    overlap_epochs: int = 120
    batches_per_epoch: int = 30

    @classmethod
    def full(cls) -> "PipelineConfig":
        """Deployment-scale shapes; the class defaults."""
        return cls()

    @classmethod
    def desk(cls) -> "PipelineConfig":
        """Laptop-scale shapes; training settles in single-digit minutes."""
        return cls(
            h_cells=64,
            w_cells=64,
            layers=8,
            stage_channels=(4, 8, 16),
            feature_channels=32,
            clusters=8,
            descriptor_dim=64,
        )

    @classmethod
    def preset(cls, name: str) -> "PipelineConfig":
        if name == "full":
            return cls.full()
        if name == "desk":
            return cls.desk()
        raise ContractError(f"config: unknown preset {name!r} (expected full or desk)")

    def grid(self) -> GridConfig:
        return GridConfig(
            (self.x_min, self.x_max),
            (self.y_min, self.y_max),
            (self.z_min, self.z_max),
            self.h_cells,
            self.w_cells,
            self.layers,
        )

    def with_file(self, path) -> "PipelineConfig":
        """Apply a key = value file on top of this configuration."""
        path = Path(path)
        updates = {}
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            bare = line.split("#", 1)[0].strip()
            if not bare:
                continue
            if "=" not in bare:
                raise FormatError(f"{path}: line {lineno}: expected key = value")
            key, _, raw = bare.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in _FIELD_TYPES:
                raise FormatError(f"{path}: line {lineno}: unknown key {key!r}")
            try:
                updates[key] = _parse_value(raw, _FIELD_TYPES[key])
            except ValueError:
                raise FormatError(
                    f"{path}: line {lineno}: bad value {raw!r} for {key}"
                ) from None
        return replace(self, **updates)

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        updates = {k: v for k, v in kwargs.items() if v is not None}
        for key in updates:
            if key not in _FIELD_TYPES:
                raise ContractError(f"config: unknown field {key!r}")
        return replace(self, **updates)

    def to_lines(self) -> list[str]:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return lines


def _parse_value(raw: str, kind: type):
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(raw)
    if kind is tuple:
        return tuple(int(part.strip()) for part in raw.split(","))
    return kind(raw)


_FIELD_TYPES = {f.name: type(getattr(PipelineConfig(), f.name)) for f in fields(PipelineConfig)}
