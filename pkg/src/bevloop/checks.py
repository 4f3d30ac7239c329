"""Finite-difference verification of the two trainable branches.

Each suite builds a small model on fixed shapes, runs one loss through
it, and compares every parameter coordinate's tape gradient against a
central difference. These run in CI and behind the gradcheck command;
keeping them in the package (not the test tree) lets operators re-verify
a build on their own machine.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .descriptor import DescriptorHead
from .overlap import OverlapHead
from .trainer import lazy_triplet_loss


def _jitter_biases(params, rng) -> None:
    """Nudge zero-initialized biases off zero.

    At zero bias, a position fully clipped by one ReLU puts the next
    layer's pre-activation exactly on the kink, where a central
    difference measures the one-sided slope instead of the subgradient.
    """
    for p in params:
        if p.name.endswith(".b"):
            p.assign(rng.normal(0.0, 0.05, p.shape))


def descriptor_gradcheck(seed: int = 7, tolerance: float = 1e-4) -> T.GradCheckReport:
    """Descriptor head composed with the triplet hinge, desk shapes."""
    rng = np.random.default_rng(seed)
    head = DescriptorHead(channels=8, clusters=4, out_dim=16, rng=rng)
    _jitter_biases(head.parameters(), rng)
    feats = [T.Tensor(rng.normal(0.0, 1.0, (8, 4, 4))) for _ in range(5)]

    def loss_fn() -> T.Tensor:
        query = head.forward(feats[0])
        positives = [head.forward(f) for f in feats[1:3]]
        negatives = [head.forward(f) for f in feats[3:5]]
        return lazy_triplet_loss(query, positives, negatives, margin=0.3)

    return T.finite_diff_check(loss_fn, head.parameters(), tolerance=tolerance)


def overlap_gradcheck(seed: int = 11, tolerance: float = 1e-4) -> T.GradCheckReport:
    """Cross-attention fusion and classifier under both-direction BCE."""
    rng = np.random.default_rng(seed)
    head = OverlapHead(channels=4, rng=rng)
    _jitter_biases(head.parameters(), rng)
    f_p = T.Tensor(rng.normal(0.0, 1.0, (4, 4, 4)))
    f_q = T.Tensor(rng.normal(0.0, 1.0, (4, 4, 4)))
    gt_p = T.Tensor((rng.random((4, 4)) < 0.5).astype(np.float64))
    gt_q = T.Tensor((rng.random((4, 4)) < 0.5).astype(np.float64))

    def loss_fn() -> T.Tensor:
        r_p, r_q = head.cross_fuse(f_p, f_q)
        bce_p = T.bce_with_logits(head.classify_logits(r_p), gt_p).mean()
        bce_q = T.bce_with_logits(head.classify_logits(r_q), gt_q).mean()
        return (bce_p + bce_q) * 0.5

    return T.finite_diff_check(loss_fn, head.parameters(), tolerance=tolerance)


def run_all(tolerance: float = 1e-4):
    """Both suites; returns an ordered dict of reports keyed by suite name."""
    return {
        "descriptor_triplet": descriptor_gradcheck(tolerance=tolerance),
        "overlap_bce": overlap_gradcheck(tolerance=tolerance),
    }
