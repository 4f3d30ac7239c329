"""Training: lazy-triplet metric learning plus overlap-map supervision.

Mode A freezes the encoder (stand-in for a pretrained backbone) and
trains only the descriptor branch on triplets mined by pose distance.
Mode B, the default at desk scale, first trains encoder and descriptor
jointly on the triplet objective, then trains the overlap head with
per-cell binary cross-entropy against pose-derived ground-truth masks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import FEATURE_STRIDE
from .errors import ContractError, TrainingDivergedError
from .overlap import gt_overlap
from .voxelizer import voxelize


@dataclass(frozen=True)
class TripletBatch:
    """One mined training example: a query with its positives and negatives."""

    query_id: int
    positive_ids: tuple
    negative_ids: tuple

    def __post_init__(self) -> None:
        if not self.positive_ids or not self.negative_ids:
            raise ContractError("triplet batch: needs at least one positive and one negative")
        ids = (self.query_id, *self.positive_ids, *self.negative_ids)
        if len(set(ids)) != len(ids):
            raise ContractError(f"triplet batch: repeated id in {ids}")


@dataclass(frozen=True)
class TrainConfig:
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
    seed: int = 0
    mode: str = "B"

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ContractError(f"train: margin must be positive, got {self.margin}")
        if not self.sigma_pos < self.sigma_neg:
            raise ContractError(
                f"train: need sigma_pos < sigma_neg, got {self.sigma_pos} >= {self.sigma_neg}"
            )
        if self.mode not in ("A", "B"):
            raise ContractError(f"train: unknown mode {self.mode!r}")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ContractError("train: need at least one positive and one negative per batch")
        # Zero is legal: lr 0 must leave parameters bit-identical.
        if self.lr < 0 or self.overlap_lr < 0:
            raise ContractError("train: learning rates must be non-negative")


def mine_triplets(positions: np.ndarray, cfg: TrainConfig, rng) -> list[TripletBatch]:
    """Mine one batch per eligible query, in a seeded random query order.

    Positives lie strictly within sigma_pos meters of the query position,
    negatives strictly beyond sigma_neg; queries lacking n_pos positives
    or n_neg negatives are skipped. Sampling is uniform without
    replacement.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    batches = []
    for q in rng.permutation(n):
        d = np.linalg.norm(positions - positions[q], axis=1)
        pos_pool = np.nonzero((d < cfg.sigma_pos) & (np.arange(n) != q))[0]
        neg_pool = np.nonzero(d > cfg.sigma_neg)[0]
        if pos_pool.size < cfg.n_pos or neg_pool.size < cfg.n_neg:
            continue
        pos = rng.choice(pos_pool, size=cfg.n_pos, replace=False)
        neg = rng.choice(neg_pool, size=cfg.n_neg, replace=False)
        batches.append(TripletBatch(int(q), tuple(int(i) for i in pos), tuple(int(i) for i in neg)))
    if not batches:
        warnings.warn("mine_triplets: no query has enough positives and negatives")
    return batches


def descriptor_distance(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Euclidean distance as a differentiable scalar."""
    diff = a - b
    return ((diff * diff).sum() + 1e-26).sqrt()


def lazy_triplet_loss(d_q: T.Tensor, positives, negatives, margin: float) -> T.Tensor:
    """Hinge over the worst positive-negative pair.

    The maximum is located on plain float values, then rebuilt as a graph
    expression, so the gradient flows only through the attaining pair;
    ties go to the smallest indices.
    """
    if not positives or not negatives:
        raise ContractError("triplet loss: empty positive or negative list")
    dp = [descriptor_distance(d_q, p) for p in positives]
    dn = [descriptor_distance(d_q, n) for n in negatives]
    best_i, best_j, best = 0, 0, None
    for i, p in enumerate(dp):
        for j, n in enumerate(dn):
            val = margin + float(p.data) - float(n.data)
            if best is None or val > best:
                best_i, best_j, best = i, j, val
    return T.relu(dp[best_i] - dn[best_j] + margin)


def sgd_step(params, lr: float) -> None:
    for p in params:
        p.data -= lr * p.grad


def _log_epoch(log, epoch: int, loss: float, lr: float, seed: int) -> None:
    if log is not None:
        log.write(f"{epoch} {loss:.6f} {lr:g} {seed}\n")


def _checkpoint(model, out_dir, epoch: int) -> None:
    if out_dir is not None:
        model.save_weights(Path(out_dir) / f"epoch_{epoch:03d}.ckpt")


def _batch_loss_value(loss: T.Tensor) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError(f"training loss is {value}")
    return value


def train(model, clouds, poses, cfg: TrainConfig, out_dir=None, log=None) -> list[float]:
    """Run the configured mode; returns the per-epoch mean losses.

    A checkpoint is written after every epoch when out_dir is given, and
    one "epoch loss lr seed" line per epoch goes to log.
    """
    rng = np.random.default_rng(cfg.seed)
    positions = np.array([p.translation for p in poses], dtype=np.float64)
    grids = [voxelize(cloud, model.grid).to_channels() for cloud in clouds]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    history: list[float] = []
    epoch = 0

    if cfg.mode == "A":
        feats = {i: model.encoder.encode(g, i).f for i, g in enumerate(grids)}

        def desc_of(i):
            return model.descriptor.forward(T.Tensor(feats[i]))

        params = model.descriptor.parameters()
    else:

        def desc_of(i):
            return model.descriptor.forward(model.encoder.forward(T.Tensor(grids[i])))

        params = model.encoder.parameters() + model.descriptor.parameters()

    for _ in range(cfg.epochs):
        batch_losses = []
        for batch in mine_triplets(positions, cfg, rng)[: cfg.batches_per_epoch]:
            T.zero_grads(params)
            loss = lazy_triplet_loss(
                desc_of(batch.query_id),
                [desc_of(i) for i in batch.positive_ids],
                [desc_of(i) for i in batch.negative_ids],
                cfg.margin,
            )
            batch_losses.append(_batch_loss_value(loss))
            T.backward(loss)
            sgd_step(params, cfg.lr)
        mean = float(np.mean(batch_losses)) if batch_losses else 0.0
        history.append(mean)
        _log_epoch(log, epoch, mean, cfg.lr, cfg.seed)
        _checkpoint(model, out_dir, epoch)
        epoch += 1

    if cfg.mode == "B":
        history += _train_overlap(model, clouds, poses, positions, grids, cfg, rng,
                                  out_dir, log, epoch)
    return history


_FLIP_XY = np.diag([-1.0, -1.0, 1.0])


def _reversed_view(cloud, pose):
    """The same scan as if taken facing the opposite way along the path.

    Rotating the points half a turn about the sensor axis and folding the
    same turn into the pose leaves the world geometry untouched, so the
    ground-truth masks stay exact while the grid content rotates.
    """
    from .dataset import Pose
    from .voxelizer import PointCloud

    xyz = cloud.xyz @ _FLIP_XY.T
    flipped = PointCloud(xyz, cloud.intensity)
    return flipped, Pose(pose.rotation @ _FLIP_XY, pose.translation)


def _train_overlap(model, clouds, poses, positions, grids, cfg, rng, out_dir, log, epoch0):
    """Overlap-head phase: BCE against ground-truth masks on frozen features.

    Each batch pairs the query with up to two positives and two
    negatives, plus reversed views of the first positive and the first
    negative; the per-cell targets come from pose geometry. The reversed
    pairs are what teach the classifier to recognize loops closed from
    the opposite travel direction, where convolutional features do not
    line up cell by cell.
    """
    feats = {i: model.encoder.encode(g, i).f for i, g in enumerate(grids)}
    rev_cache: dict = {}

    def reversed_partner(i):
        if i not in rev_cache:
            r_cloud, r_pose = _reversed_view(clouds[i], poses[i])
            r_feat = model.encoder.encode(voxelize(r_cloud, model.grid).to_channels()).f
            rev_cache[i] = (r_cloud, r_pose, r_feat)
        return rev_cache[i]

    params = model.overlap.parameters()
    history = []
    for e in range(cfg.overlap_epochs):
        batch_losses = []
        for batch in mine_triplets(positions, cfg, rng)[: cfg.batches_per_epoch]:
            q = batch.query_id
            partners = batch.positive_ids[:2] + batch.negative_ids[:2]
            pairs = [(clouds[i], poses[i], feats[i]) for i in partners]
            # One reversed positive and one reversed negative: the pair
            # teaches opposite-direction overlap, the counter-pair keeps
            # rotation artifacts from reading as overlap by themselves.
            pairs.append(reversed_partner(batch.positive_ids[0]))
            pairs.append(reversed_partner(batch.negative_ids[0]))
            T.zero_grads(params)
            terms = []
            for o_cloud, o_pose, o_feat in pairs:
                gt_q, gt_o = gt_overlap(
                    clouds[q], o_cloud, poses[q], o_pose,
                    model.grid, FEATURE_STRIDE,
                )
                r_q, r_o = model.overlap.cross_fuse(T.Tensor(feats[q]), T.Tensor(o_feat))
                # Masks come from the encoder outputs; the fused volumes
                # have no all-zero columns once attention adds context.
                for r, src, gt in ((r_q, feats[q], gt_q), (r_o, o_feat, gt_o)):
                    mask = np.any(src != 0.0, axis=0)
                    if not mask.any():
                        continue
                    bce = T.bce_with_logits(
                        model.overlap.classify_logits(r), T.Tensor(gt.astype(np.float64))
                    )
                    terms.append((bce * T.Tensor(mask.astype(np.float64))).sum() * (1.0 / mask.sum()))
            if not terms:
                continue
            loss = terms[0]
            for term in terms[1:]:
                loss = loss + term
            loss = loss * (1.0 / len(terms))
            batch_losses.append(_batch_loss_value(loss))
            T.backward(loss)
            sgd_step(params, cfg.overlap_lr)
        mean = float(np.mean(batch_losses)) if batch_losses else 0.0
        history.append(mean)
        _log_epoch(log, epoch0 + e, mean, cfg.overlap_lr, cfg.seed)
        _checkpoint(model, out_dir, epoch0 + e)
    return history
