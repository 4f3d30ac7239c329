"""Coarse-to-fine LiDAR place recognition on BEV occupancy grids.

Scans become height-layered occupancy grids, a residual convolutional
encoder turns grids into feature volumes, an attention-guided VLAD head
turns volumes into unit-norm global descriptors for Top-K retrieval, and
a pairwise overlap head re-ranks the retrieved candidates. Everything
runs on a small self-contained float64 autodiff core, so every gradient
is checkable against finite differences.
"""

from .config import PipelineConfig
from .dataset import (
    LoopLabels,
    Pose,
    ground_truth_loops,
    load_poses,
    load_scan,
    load_sequence,
    save_poses,
    save_scan,
    save_sequence,
)
from .descriptor import DescriptorHead, GlobalDescriptor
from .encoder import FEATURE_STRIDE, BevEncoder, FeatureDb, FeatureVolume
from .errors import (
    BevLoopError,
    ConflictError,
    ContractError,
    DegenerateDescriptorError,
    DegeneratePairError,
    DimensionError,
    FormatError,
    NotFoundError,
    PoseError,
    TrainingDivergedError,
)
from .evaluate import (
    EvalReport,
    recall_at_n,
    recall_at_one_percent,
    run_evaluation,
)
from .overlap import MatchDecision, OverlapHead, OverlapResult, gt_overlap, overlap_score
from .pipeline import PipelineModel
from .profiler import StageTimer, exhaustive_cost_hours, projected_cost_hours
from .retrieval import CandidateSet, DescriptorDb, affinity, brute_force_knn, top_k
from .synth import SynthConfig, synth_world
from .trainer import TrainConfig, TripletBatch, lazy_triplet_loss, mine_triplets, train
from .voxelizer import BevGrid, GridConfig, PointCloud, voxelize

__version__ = "0.1.0"

__all__ = [
    "BevEncoder",
    "BevGrid",
    "BevLoopError",
    "CandidateSet",
    "ConflictError",
    "ContractError",
    "DegenerateDescriptorError",
    "DegeneratePairError",
    "DescriptorDb",
    "DescriptorHead",
    "DimensionError",
    "EvalReport",
    "FEATURE_STRIDE",
    "FeatureDb",
    "FeatureVolume",
    "FormatError",
    "GlobalDescriptor",
    "GridConfig",
    "LoopLabels",
    "MatchDecision",
    "NotFoundError",
    "OverlapHead",
    "OverlapResult",
    "PipelineConfig",
    "PipelineModel",
    "PointCloud",
    "Pose",
    "PoseError",
    "StageTimer",
    "SynthConfig",
    "TrainConfig",
    "TrainingDivergedError",
    "TripletBatch",
    "affinity",
    "brute_force_knn",
    "exhaustive_cost_hours",
    "ground_truth_loops",
    "gt_overlap",
    "lazy_triplet_loss",
    "load_poses",
    "load_scan",
    "load_sequence",
    "mine_triplets",
    "overlap_score",
    "projected_cost_hours",
    "recall_at_n",
    "recall_at_one_percent",
    "run_evaluation",
    "save_poses",
    "save_scan",
    "save_sequence",
    "synth_world",
    "top_k",
    "train",
    "voxelize",
]
