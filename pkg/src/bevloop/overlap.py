"""Fine stage: pairwise overlap estimation over candidate pairs.

Each pair of feature volumes is fused by cross-attention in both
directions, every cell is classified as co-visible or not, and the two
per-scan co-visibility rates are averaged into the overlap score tau.
The candidate with the highest tau becomes the final match. Ground-truth
overlap masks for training come from pose-aligned occupancy grids.
"""

from __future__ import annotations

import threading
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .descriptor import attend, fuse_context
from .encoder import FeatureDb, FeatureVolume, _Conv
from .errors import ContractError, DegeneratePairError, DimensionError
from .profiler import STAGE_OVERLAP
from .retrieval import CandidateSet
from .voxelizer import GridConfig


@dataclass(frozen=True)
class OverlapResult:
    """Per-pair classification maps, their cell counts, and the score tau."""

    gamma_p: np.ndarray
    gamma_q: np.ndarray
    n_p: int
    n_q: int
    tau: float

    def __post_init__(self) -> None:
        if self.n_p < 1 or self.n_q < 1:
            raise ContractError("overlap result: cell counts must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError(f"overlap result: tau {self.tau} outside [0, 1]")


@dataclass(frozen=True)
class MatchDecision:
    """Final verdict for one query: best candidate by tau, ties to smaller id."""

    query_id: int
    best_id: int | None
    tau_best: float | None
    scores: tuple

    @property
    def matched(self) -> bool:
        return self.best_id is not None


def overlap_score(gamma_p, gamma_q, mask_p, mask_q) -> float:
    """Average co-visible fraction over the two masks, in [0, 1].

    Sums run over masked cells only, so the normalizing counts and the
    summed cells always agree.
    """
    gamma_p, gamma_q = np.asarray(gamma_p), np.asarray(gamma_q)
    mask_p, mask_q = np.asarray(mask_p, dtype=bool), np.asarray(mask_q, dtype=bool)
    if gamma_p.shape != mask_p.shape or gamma_q.shape != mask_q.shape:
        raise DimensionError("overlap score: map and mask shapes disagree")
    n_p = int(np.count_nonzero(mask_p))
    n_q = int(np.count_nonzero(mask_q))
    if n_p == 0 or n_q == 0:
        raise DegeneratePairError("overlap score: a scan has no non-zero cells")
    return 0.5 * (float(gamma_p[mask_p].sum()) / n_p + float(gamma_q[mask_q].sum()) / n_q)


class OverlapHead:
    """Cross-attention fusion plus a two-conv per-cell classifier."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, name: str = "ovl"):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = channels
        self.channels = c
        self.w_q = T.Parameter(T.uniform_init((c, c), c, rng), name=f"{name}/att_q.w")
        self.w_k = T.Parameter(T.uniform_init((c, c), c, rng), name=f"{name}/att_k.w")
        self.w_v = T.Parameter(T.uniform_init((c, c), c, rng), name=f"{name}/att_v.w")
        self.fuse = []
        widths = (2 * c, c, c, c)
        for i in range(3):
            # Hidden layers feed ReLU, hence the He scale.
            init = T.he_init if i < 2 else T.uniform_init
            w = T.Parameter(
                init((widths[i + 1], widths[i]), widths[i], rng),
                name=f"{name}/fuse{i}.w",
            )
            b = T.Parameter(np.zeros(widths[i + 1]), name=f"{name}/fuse{i}.b")
            self.fuse.append((w, b))
        self.conv_a = _Conv(f"{name}/cls_a", c, c, rng)
        self.conv_b = _Conv(f"{name}/cls_b", c, 1, rng)
        self.overlap_calls = 0
        self._count_lock = threading.Lock()

    def parameters(self) -> list:
        params = [self.w_q, self.w_k, self.w_v]
        for w, b in self.fuse:
            params += [w, b]
        return params + self.conv_a.parameters() + self.conv_b.parameters()

    def cross_fuse(self, f_p: T.Tensor, f_q: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        """Residual fusion of each volume with attention over the other."""
        if f_p.shape != f_q.shape:
            raise DimensionError(f"cross fuse: shapes disagree, {f_p.shape} vs {f_q.shape}")
        if f_p.ndim != 3 or f_p.shape[0] != self.channels:
            raise DimensionError(
                f"cross fuse: expected [{self.channels}, H, W], got {f_p.shape}"
            )
        c, h, w = f_p.shape
        p_flat = f_p.reshape(c, h * w)
        q_flat = f_q.reshape(c, h * w)
        r_p = fuse_context(p_flat, attend(p_flat, q_flat, q_flat, self.w_q, self.w_k, self.w_v), self.fuse)
        r_q = fuse_context(q_flat, attend(q_flat, p_flat, p_flat, self.w_q, self.w_k, self.w_v), self.fuse)
        return r_p.reshape(c, h, w), r_q.reshape(c, h, w)

    def classify_logits(self, r: T.Tensor) -> T.Tensor:
        """Pre-sigmoid map, the quantity the training loss consumes."""
        out = self.conv_b(T.relu(self.conv_a(r)))
        return out.reshape(out.shape[1], out.shape[2])

    def classify(self, r: T.Tensor) -> T.Tensor:
        return T.sigmoid(self.classify_logits(r))

    def pair_score(self, fv_p: FeatureVolume, fv_q: FeatureVolume) -> OverlapResult:
        """Inference path: fuse, classify both maps, score the pair.

        The averaging masks come from the encoder outputs, not the fused
        volumes: attention hands every cell a context term, so the fused
        volumes have no all-zero columns left to mask on.
        """
        with T.no_grad():
            r_p, r_q = self.cross_fuse(T.Tensor(fv_p.f), T.Tensor(fv_q.f))
            gamma_p = self.classify(r_p).data
            gamma_q = self.classify(r_q).data
        mask_p = fv_p.occupancy_mask()
        mask_q = fv_q.occupancy_mask()
        tau = overlap_score(gamma_p, gamma_q, mask_p, mask_q)
        with self._count_lock:
            self.overlap_calls += 1
        return OverlapResult(gamma_p, gamma_q, int(mask_p.sum()), int(mask_q.sum()), tau)

    def verify(
        self, query: FeatureVolume, candidates: CandidateSet, fdb: FeatureDb, timer=None
    ) -> MatchDecision:
        """Score every candidate, exactly one estimation each, pick the best."""
        if len(candidates) == 0:
            return MatchDecision(candidates.query_id, None, None, ())
        stage = timer.stage if timer is not None else (lambda name: nullcontext())
        scores = []
        best_id, best_tau = None, None
        for sid in candidates.ids():
            with stage(STAGE_OVERLAP):
                tau = self.pair_score(query, fdb.get(sid)).tau
            scores.append((sid, tau))
            if best_tau is None or tau > best_tau or (tau == best_tau and sid < best_id):
                best_id, best_tau = sid, tau
        return MatchDecision(candidates.query_id, best_id, best_tau, tuple(scores))


def _coarse_occupancy(xyz: np.ndarray, cfg: GridConfig, stride: int) -> np.ndarray:
    """2D occupancy of the crop window pooled down to feature resolution."""
    h_f, w_f = cfg.h_cells // stride, cfg.w_cells // stride
    keep = (
        (xyz[:, 0] >= cfg.x_range[0])
        & (xyz[:, 0] < cfg.x_range[1])
        & (xyz[:, 1] >= cfg.y_range[0])
        & (xyz[:, 1] < cfg.y_range[1])
        & (xyz[:, 2] >= cfg.z_range[0])
        & (xyz[:, 2] < cfg.z_range[1])
    )
    pts = xyz[keep]
    occ = np.zeros((h_f, w_f), dtype=bool)
    if pts.shape[0]:
        ix = np.floor((pts[:, 0] - cfg.x_range[0]) / (cfg.cell_x * stride)).astype(np.int64)
        iy = np.floor((pts[:, 1] - cfg.y_range[0]) / (cfg.cell_y * stride)).astype(np.int64)
        np.clip(ix, 0, h_f - 1, out=ix)
        np.clip(iy, 0, w_f - 1, out=iy)
        occ[ix, iy] = True
    return occ


def gt_overlap(cloud_p, cloud_q, pose_p, pose_q, cfg: GridConfig, feature_stride: int):
    """Ground-truth co-visibility masks for a pair, one per scan frame.

    A cell is co-visible when both scans, expressed in that scan's own
    sensor frame, occupy it at feature resolution.
    """
    if cfg.h_cells % feature_stride or cfg.w_cells % feature_stride:
        raise ContractError(
            f"gt overlap: grid {cfg.h_cells}x{cfg.w_cells} not divisible by stride {feature_stride}"
        )
    q_to_p = pose_p.inverse().compose(pose_q)
    p_to_q = pose_q.inverse().compose(pose_p)
    own_p = _coarse_occupancy(cloud_p.xyz, cfg, feature_stride)
    own_q = _coarse_occupancy(cloud_q.xyz, cfg, feature_stride)
    other_p = _coarse_occupancy(q_to_p.transform(cloud_q.xyz), cfg, feature_stride)
    other_q = _coarse_occupancy(p_to_q.transform(cloud_p.xyz), cfg, feature_stride)
    return own_p & other_p, own_q & other_q
