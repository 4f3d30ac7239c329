"""Global descriptor generation over encoder feature volumes.

A feature volume is flattened to channels x positions, enriched with a
per-channel attention context, aggregated by soft-assignment VLAD
pooling, and reduced by a fully connected layer to a unit-norm vector.
The context generator is channel self-attention by default; a small
convolutional gate can stand in for it when comparing variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import FeatureVolume, _Conv
from .errors import ContractError, DegenerateDescriptorError, DimensionError


class GlobalDescriptor:
    """Unit-norm float64 vector summarizing one scan for affinity search."""

    __slots__ = ("v", "scan_id")

    def __init__(self, v: np.ndarray, scan_id: int):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1:
            raise DimensionError(f"descriptor: expected a vector, got shape {v.shape}")
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > 1e-9:
            raise ContractError(f"descriptor: expected unit norm, got {norm:.12g}")
        self.v = v
        self.scan_id = int(scan_id)

    def __len__(self) -> int:
        return self.v.shape[0]


@dataclass
class NetVladParams:
    """Soft-assignment weights and cluster centers for VLAD pooling."""

    assign_w: T.Parameter
    assign_b: T.Parameter
    centers: T.Parameter

    @property
    def clusters(self) -> int:
        return self.centers.shape[0]


def attend(query: T.Tensor, keys: T.Tensor, values: T.Tensor, w_q, w_k, w_v) -> T.Tensor:
    """Channel attention: scores are channels x channels, softmax over keys.

    All three feature arguments are channels x positions with one shared
    position count; the output matches the query's shape.
    """
    if query.ndim != 2 or keys.shape != values.shape or query.shape != keys.shape:
        raise DimensionError(
            f"attend: feature shapes disagree: {query.shape}, {keys.shape}, {values.shape}"
        )
    q = T.matmul(w_q, query)
    k = T.matmul(w_k, keys)
    v = T.matmul(w_v, values)
    scores = T.matmul(q, k.T) * (1.0 / math.sqrt(query.shape[0]))
    return T.matmul(T.softmax_rows(scores), v)


def self_attention(f: T.Tensor, w_q, w_k, w_v) -> T.Tensor:
    return attend(f, f, f, w_q, w_k, w_v)


def fuse_context(f: T.Tensor, context: T.Tensor, layers) -> T.Tensor:
    """Residual fusion: f + MLP over the channel-stacked pair, per position."""
    if f.shape != context.shape:
        raise DimensionError(f"fuse: feature {f.shape} vs context {context.shape}")
    return f + T.mlp_forward(T.concat([f, context], axis=0), layers)


def netvlad(x: T.Tensor, p: NetVladParams) -> T.Tensor:
    """Soft-assigned residual aggregation, one intra-normalized row per cluster.

    Position descriptors are the columns of x. Assignment weights per
    position form a softmax over clusters, so they are non-negative and
    sum to one. All-zero residual rows stay exactly zero through the
    normalization.
    """
    if x.ndim != 2 or x.shape[0] != p.centers.shape[1]:
        raise DimensionError(
            f"vlad: features {x.shape} do not match {p.centers.shape[1]}-wide centers"
        )
    logits = T.matmul(p.assign_w, x) + p.assign_b.reshape(-1, 1)
    assign = T.softmax_rows(logits.T).T
    weight_sums = assign.sum(axis=1, keepdims=True)
    v = T.matmul(assign, x.T) - weight_sums * p.centers
    denom = ((v * v).sum(axis=1, keepdims=True) + 1e-24).sqrt()
    return v / denom


def reduce_descriptor(vlad: T.Tensor, w_fc) -> T.Tensor:
    """Flatten, project to the output length, normalize to the unit sphere."""
    flat = vlad.reshape(-1, 1)
    if w_fc.shape[1] != flat.shape[0]:
        raise DimensionError(
            f"reduce: projection expects length {w_fc.shape[1]}, got {flat.shape[0]}"
        )
    raw = T.matmul(w_fc, flat).reshape(-1)
    ss = (raw * raw).sum()
    if float(ss.data) < 1e-60:
        raise DegenerateDescriptorError("reduce: zero vector cannot be normalized")
    return raw / ss.sqrt()


class DescriptorHead:
    """Feature volume [C, H, W] -> unit-norm descriptor of length out_dim."""

    def __init__(
        self,
        channels: int,
        clusters: int = 32,
        out_dim: int = 1024,
        rng: np.random.Generator | None = None,
        use_attention: bool = True,
        name: str = "desc",
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = channels
        self.channels = c
        self.out_dim = out_dim
        self.use_attention = use_attention
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
        self.vlad = NetVladParams(
            assign_w=T.Parameter(T.uniform_init((clusters, c), c, rng), name=f"{name}/vlad.w"),
            assign_b=T.Parameter(np.zeros(clusters), name=f"{name}/vlad.b"),
            centers=T.Parameter(T.uniform_init((clusters, c), c, rng), name=f"{name}/vlad.c"),
        )
        self.w_fc = T.Parameter(
            T.uniform_init((out_dim, clusters * c), clusters * c, rng), name=f"{name}/fc.w"
        )
        # Variant context: two small convs and a sigmoid gate in place of
        # self-attention, widths mirroring the overlap classification head.
        self.gate_a = _Conv(f"{name}/gate_a", c, c, rng)
        self.gate_b = _Conv(f"{name}/gate_b", c, c, rng)

    def parameters(self) -> list:
        params = [self.w_q, self.w_k, self.w_v]
        for w, b in self.fuse:
            params += [w, b]
        params += [self.vlad.assign_w, self.vlad.assign_b, self.vlad.centers, self.w_fc]
        params += self.gate_a.parameters() + self.gate_b.parameters()
        return params

    def forward(self, f3: T.Tensor) -> T.Tensor:
        if f3.ndim != 3 or f3.shape[0] != self.channels:
            raise DimensionError(
                f"descriptor head: expected [{self.channels}, H, W], got {f3.shape}"
            )
        c, h, w = f3.shape
        flat = f3.reshape(c, h * w)
        if self.use_attention:
            context = self_attention(flat, self.w_q, self.w_k, self.w_v)
        else:
            context = T.sigmoid(self.gate_b(T.relu(self.gate_a(f3)))).reshape(c, h * w)
        fused = fuse_context(flat, context, self.fuse)
        return reduce_descriptor(netvlad(fused, self.vlad), self.w_fc)

    def generate(self, fv: FeatureVolume) -> GlobalDescriptor:
        """Inference path: no tape, returns a validated descriptor."""
        with T.no_grad():
            out = self.forward(T.Tensor(fv.f))
        return GlobalDescriptor(out.data, fv.scan_id)
