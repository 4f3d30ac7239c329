"""Convolutional encoder from occupancy grids to spatial feature volumes.

The encoder sees the grid channels-first, one channel per height layer,
and shrinks the spatial extent by a fixed factor of eight: a stem
convolution at full resolution, then three stages of strided convolution
followed by a residual refinement block. Channel width grows stage by
stage up to ``out_channels``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .checkpoint import append_record, read_container
from .errors import ConflictError, DimensionError, NotFoundError
from .voxelizer import BevGrid

FEATURE_STRIDE = 8


class FeatureVolume:
    """Encoder output for one scan: float64 features shaped [C_f, H, W]."""

    __slots__ = ("f", "scan_id")

    def __init__(self, f: np.ndarray, scan_id: int):
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 3:
            raise DimensionError(f"feature volume: expected [C, H, W], got {f.shape}")
        self.f = f
        self.scan_id = int(scan_id)

    @property
    def channels(self) -> int:
        return self.f.shape[0]

    def occupancy_mask(self) -> np.ndarray:
        """Boolean [H, W] mask of cells with any non-zero response."""
        return np.any(self.f != 0.0, axis=0)


class _Conv:
    __slots__ = ("w", "b", "stride", "padding")

    def __init__(self, name, c_in, c_out, rng, stride=1, kernel=3):
        fan_in = c_in * kernel * kernel
        self.w = T.Parameter(
            T.he_init((c_out, c_in, kernel, kernel), fan_in, rng), name=f"{name}.w"
        )
        # Zero bias keeps the zero-padding ring indistinguishable from
        # empty space, which is what makes shifted inputs map to shifted
        # features.
        self.b = T.Parameter(np.zeros(c_out), name=f"{name}.b")
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.w, self.b]


class BevEncoder:
    """Occupancy grid [C_in, H, W] -> feature volume [out_channels, H/8, W/8]."""

    def __init__(
        self,
        in_channels: int,
        stage_channels: tuple[int, int, int] = (64, 128, 256),
        out_channels: int = 512,
        rng: np.random.Generator | None = None,
        name: str = "enc",
    ):
        if len(stage_channels) != 3:
            raise DimensionError("encoder: exactly three stages set the stride of 8")
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = (stage_channels[0], stage_channels[1], stage_channels[2], out_channels)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stem = _Conv(f"{name}/stem", in_channels, widths[0], rng)
        self.downs = []
        self.res = []
        for i in range(3):
            self.downs.append(_Conv(f"{name}/down{i}", widths[i], widths[i + 1], rng, stride=2))
            self.res.append(
                (
                    _Conv(f"{name}/res{i}a", widths[i + 1], widths[i + 1], rng),
                    _Conv(f"{name}/res{i}b", widths[i + 1], widths[i + 1], rng),
                )
            )

    def parameters(self) -> list:
        params = self.stem.parameters()
        for down, (ra, rb) in zip(self.downs, self.res):
            params += down.parameters() + ra.parameters() + rb.parameters()
        return params

    def forward(self, x: T.Tensor) -> T.Tensor:
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise DimensionError(
                f"encoder: expected [{self.in_channels}, H, W] input, got {x.shape}"
            )
        h = T.relu(self.stem(x))
        for down, (ra, rb) in zip(self.downs, self.res):
            h = T.relu(down(h))
            h = T.relu(h + rb(T.relu(ra(h))))
        return h

    def encode(self, grid: BevGrid | np.ndarray, scan_id: int = -1) -> FeatureVolume:
        """Inference path: no tape, returns a plain array wrapper."""
        channels = grid.to_channels() if isinstance(grid, BevGrid) else np.asarray(grid)
        with T.no_grad():
            out = self.forward(T.Tensor(channels))
        return FeatureVolume(out.data, scan_id)


class FeatureDb:
    """Feature volumes keyed by scan id, optionally mirrored to a container file.

    Records are named ``feat/<id>`` and kept in insertion order.
    """

    def __init__(self, path=None):
        self._store: dict[int, np.ndarray] = {}
        self._path = path

    @classmethod
    def open(cls, path) -> "FeatureDb":
        db = cls()
        for name, values in read_container(path).items():
            if not name.startswith("feat/"):
                continue
            db._store[int(name[len("feat/") :])] = values
        db._path = path
        return db

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, scan_id: int) -> bool:
        return int(scan_id) in self._store

    def ids(self) -> list[int]:
        return list(self._store)

    def add(self, volume: FeatureVolume) -> None:
        sid = volume.scan_id
        if sid in self._store:
            raise ConflictError(f"feature store: scan {sid} already present")
        self._store[sid] = volume.f
        if self._path is not None:
            append_record(self._path, f"feat/{sid}", volume.f)

    def get(self, scan_id: int) -> FeatureVolume:
        sid = int(scan_id)
        if sid not in self._store:
            raise NotFoundError(f"feature store: no scan {sid}")
        return FeatureVolume(self._store[sid], sid)
