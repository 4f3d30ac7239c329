"""Model assembly and per-scan indexing.

A PipelineModel owns the encoder, descriptor head, and overlap head
built from one PipelineConfig and one seed. Indexing a scan charges the
voxelization, feature extraction, and descriptor stages to an optional
timer and feeds the two databases the fine and coarse stages search.
"""

from __future__ import annotations

from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext

import numpy as np

from .checkpoint import read_container, write_container
from .config import PipelineConfig
from .descriptor import DescriptorHead
from .encoder import BevEncoder, FeatureDb
from .errors import NotFoundError
from .overlap import OverlapHead
from .profiler import STAGE_DESCRIBE, STAGE_ENCODE, STAGE_VOXELIZE
from .retrieval import DescriptorDb
from .voxelizer import PointCloud, voxelize


class PipelineModel:
    """All trainable components of the pipeline under one configuration."""

    def __init__(self, config: PipelineConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.seed = seed
        self.grid = config.grid()
        self.encoder = BevEncoder(
            config.layers, config.stage_channels, config.feature_channels, rng
        )
        self.descriptor = DescriptorHead(
            config.feature_channels,
            config.clusters,
            config.descriptor_dim,
            rng,
            use_attention=config.use_attention,
        )
        self.overlap = OverlapHead(config.feature_channels, rng)

    def parameters(self) -> list:
        return self.encoder.parameters() + self.descriptor.parameters() + self.overlap.parameters()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((p.name, p.data.copy()) for p in self.parameters())

    def save_weights(self, path) -> None:
        write_container(path, self.state_dict())

    def load_weights(self, path) -> None:
        """Assign every parameter from the container; extra records are ignored."""
        state = read_container(path)
        for p in self.parameters():
            if p.name not in state:
                raise NotFoundError(f"checkpoint {path}: missing parameter {p.name}")
            p.assign(state[p.name])

    def index_scan(self, cloud: PointCloud, scan_id: int, timer=None):
        """Voxelize, encode, describe one scan. Returns (features, descriptor)."""
        stage = timer.stage if timer is not None else (lambda name: nullcontext())
        with stage(STAGE_VOXELIZE):
            grid = voxelize(cloud, self.grid)
        with stage(STAGE_ENCODE):
            fv = self.encoder.encode(grid, scan_id)
        with stage(STAGE_DESCRIBE):
            desc = self.descriptor.generate(fv)
        return fv, desc

    def index_sequence(
        self,
        clouds,
        timer=None,
        jobs: int = 1,
        feature_path=None,
        descriptor_path=None,
    ) -> tuple[FeatureDb, DescriptorDb]:
        """Index scans 0..n-1 in id order; jobs > 1 parallelizes the encoding."""
        fdb = FeatureDb(feature_path)
        vdb = DescriptorDb(descriptor_path)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(
                    pool.map(lambda pair: self.index_scan(pair[1], pair[0], timer), enumerate(clouds))
                )
        else:
            results = [self.index_scan(cloud, i, timer) for i, cloud in enumerate(clouds)]
        for fv, desc in results:
            fdb.add(fv)
            vdb.add(desc)
        return fdb, vdb
