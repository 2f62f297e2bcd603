"""Shift set abstraction: multi-scale local feature summaries whose
clusters exchange partial feature channels with a distant partner.

The layer runs in four steps: cluster selection by farthest point
sampling, per-scale ball grouping with a shared MLP and masked
max-pool, one partner pairing shared by all scales, and a per-scale
exchange operation followed by scale aggregation. The default exchange
splices the first `s` channels of the partner's features into the
cluster's own, mixes them with a two-layer MLP on a residual branch,
averages with the untouched input, and applies ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from . import tensor as T

EXCHANGE_OPS = ("cs", "none", "concat", "avg", "attn")
SELECTION_STRATEGIES = ("farthest", "nearest", "feats_scale", "points_num")


@dataclass
class ScaleConfig:
    """One grouping scale: ball radius, neighbor budget, and MLP widths."""

    radius: float
    k: int
    mlp: list[int]

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("scale radius must be positive")
        if self.k < 1:
            raise ValueError("scale k must be >= 1")
        if not self.mlp:
            raise ValueError("scale mlp widths must be non-empty")

    @property
    def out_channels(self) -> int:
        return self.mlp[-1]


@dataclass
class SsaConfig:
    scales: list[ScaleConfig]
    shift_ratio: float = 1.0 / 8.0
    r_prime: float | None = None  # default: 2x the largest scale radius
    candidate_k: int | None = None  # default: largest scale's k
    aggregation: list[int] = field(default_factory=list)
    exchange_op: str = "cs"
    selection: str = "farthest"

    def __post_init__(self):
        if not self.scales:
            raise ValueError("at least one scale required")
        if not 0.0 <= self.shift_ratio <= 1.0:
            raise ValueError("shift_ratio must lie in [0, 1]")
        if self.exchange_op not in EXCHANGE_OPS:
            raise ValueError(f"unknown exchange op {self.exchange_op!r}")
        if self.selection not in SELECTION_STRATEGIES:
            raise ValueError(f"unknown selection strategy {self.selection!r}")
        max_radius = max(s.radius for s in self.scales)
        if self.r_prime is None:
            self.r_prime = 2.0 * max_radius
        if self.r_prime < max_radius:
            raise ValueError("r_prime must be at least the largest scale radius")
        if self.candidate_k is None:
            self.candidate_k = max(s.k for s in self.scales)
        if not self.aggregation:
            total = sum(s.out_channels for s in self.scales)
            self.aggregation = [total]

    @property
    def out_channels(self) -> int:
        return self.aggregation[-1]


def shift_channels(ratio: float, channels: int) -> int:
    """Donated channel count: round(ratio * C) with half-up rounding, clamped."""
    s = int(np.floor(ratio * channels + 0.5))
    return min(max(s, 0), channels)


@dataclass
class SsaParams:
    """Learnable state for one layer: per-scale feature MLPs, per-scale
    exchange parameters, and one aggregation MLP."""

    f_mlps: list[T.MlpParams]
    exchange: list[object]  # per scale: MlpParams, AttnParams, or None
    aggregate: T.MlpParams

    def named(self, prefix: str) -> list[tuple[str, T.Tensor]]:
        out = []
        for s, mlp in enumerate(self.f_mlps):
            out.extend(_named_mlp(f"{prefix}.scale{s}.f", mlp))
        for s, ex in enumerate(self.exchange):
            if isinstance(ex, T.MlpParams):
                out.extend(_named_mlp(f"{prefix}.scale{s}.shift", ex))
            elif isinstance(ex, AttnParams):
                out.extend(ex.named(f"{prefix}.scale{s}.attn"))
        out.extend(_named_mlp(f"{prefix}.aggregate", self.aggregate))
        return out

    def tensors(self) -> list[T.Tensor]:
        return [t for _, t in self.named("ssa")]


@dataclass
class AttnParams:
    """Single-pair attention: query/key/value linear maps of width C."""

    q: T.LinearParams
    k: T.LinearParams
    v: T.LinearParams

    def named(self, prefix: str) -> list[tuple[str, T.Tensor]]:
        out = []
        for tag, lin in (("q", self.q), ("k", self.k), ("v", self.v)):
            out.append((f"{prefix}.{tag}.weight", lin.weight))
            out.append((f"{prefix}.{tag}.bias", lin.bias))
        return out


def _named_mlp(prefix: str, mlp: T.MlpParams) -> list[tuple[str, T.Tensor]]:
    out = []
    for i, layer in enumerate(mlp.layers):
        out.append((f"{prefix}.{i}.weight", layer.weight))
        out.append((f"{prefix}.{i}.bias", layer.bias))
    return out


def init_ssa_params(config: SsaConfig, in_channels: int, rng: np.random.Generator) -> SsaParams:
    f_mlps = []
    exchange: list[object] = []
    for scale in config.scales:
        widths = [in_channels + 3, *scale.mlp]
        f_mlps.append(T.init_mlp(widths, rng, final_relu=True))
        c = scale.out_channels
        if config.exchange_op in ("cs", "avg"):
            exchange.append(T.init_mlp([c, c, c], rng, final_relu=False))
        elif config.exchange_op == "concat":
            exchange.append(T.init_mlp([2 * c, c, c], rng, final_relu=False))
        elif config.exchange_op == "attn":
            exchange.append(
                AttnParams(
                    q=T.init_linear(c, c, rng),
                    k=T.init_linear(c, c, rng),
                    v=T.init_linear(c, c, rng),
                )
            )
        else:
            exchange.append(None)
    concat_width = sum(s.out_channels for s in config.scales)
    aggregate = T.init_mlp([concat_width, *config.aggregation], rng, final_relu=True)
    return SsaParams(f_mlps=f_mlps, exchange=exchange, aggregate=aggregate)


@dataclass
class ClusterFeatures:
    """Output of one layer: cluster positions, per-scale features, and
    the aggregated feature matrix that feeds the next stage."""

    positions: np.ndarray  # Mx3
    per_scale: list[T.Tensor]  # each MxC_r
    aggregated: T.Tensor  # MxC_a
    indices: np.ndarray  # M indices into the parent cloud


@dataclass
class SsaDecisions:
    """Frozen stochastic choices of one forward pass, for exact replay."""

    cluster_indices: np.ndarray
    tables: list[G.NeighborTable]
    pairing: G.Pairing


def set_feature_abstraction(
    positions: np.ndarray,
    features: T.Tensor,
    cluster_indices: np.ndarray,
    scale: ScaleConfig,
    f_mlp: T.MlpParams,
    seed: int,
    table: G.NeighborTable | None = None,
) -> tuple[T.Tensor, G.NeighborTable]:
    """Summarize each cluster's ball neighborhood into one feature row.

    Per neighbor the MLP input is [x_k, p_k - p_i]; a masked max over
    the K slots reduces each group, so padded slots never contribute.
    Returns the neighbor table alongside for reuse (pairing, replay).
    """
    cluster_indices = np.asarray(cluster_indices, dtype=np.int64)
    if table is None:
        cloud = G.PointCloud(positions=positions)
        table = G.ball_query(
            cloud,
            positions[cluster_indices],
            radius=scale.radius,
            k=scale.k,
            seed=seed,
            self_indices=cluster_indices,
        )
    flat = table.indices.reshape(-1)
    centers = positions[cluster_indices]
    rel = positions[flat] - np.repeat(centers, scale.k, axis=0)
    neighbor_feats = T.gather_rows(features, flat)
    mlp_in = T.concat_cols([neighbor_feats, T.Tensor(rel)])
    per_neighbor = T.mlp_forward(mlp_in, f_mlp)
    pooled = T.reduce_max(per_neighbor, scale.k, table.valid)
    return pooled, table


def cross_cluster_shift(
    x: T.Tensor, pairing: G.Pairing, s: int, mlp2: T.MlpParams
) -> T.Tensor:
    """Splice s partner channels into each row, mix, residual-average, ReLU.

    Row i becomes relu(avg2(mlp2([x[f(i)][:s], x[i][s:]]), x[i])); the
    partner's remaining channels are never read.
    """
    m, c = x.shape
    if not 0 <= s <= c:
        raise ValueError(f"shift channel count {s} outside [0, {c}]")
    if pairing.farthest.shape[0] != m:
        raise ValueError("pairing length must match row count")
    donated = T.gather_rows(T.slice_cols(x, 0, s), pairing.farthest)
    kept = T.slice_cols(x, s, c)
    spliced = T.concat_cols([donated, kept])
    mixed = T.mlp_forward(spliced, mlp2)
    return T.relu(T.avg2(mixed, x))


def exchange_variant(
    x: T.Tensor, pairing: G.Pairing, variant: str, params, s: int
) -> T.Tensor:
    """Apply one of the exchange operations from the ablation grid."""
    if variant == "none":
        return x
    if variant == "cs":
        return cross_cluster_shift(x, pairing, s, params)
    foreign = T.gather_rows(x, pairing.farthest)
    if variant == "concat":
        mixed = T.mlp_forward(T.concat_cols([foreign, x]), params)
        return T.relu(T.avg2(mixed, x))
    if variant == "avg":
        mixed = T.mlp_forward(T.avg2(foreign, x), params)
        return T.relu(T.avg2(mixed, x))
    if variant == "attn":
        c = x.shape[1]
        q = T.linear(x, params.q)
        k_f = T.linear(foreign, params.k)
        v_self = T.linear(x, params.v)
        v_foreign = T.linear(foreign, params.v)
        logits = T.scale(T.row_sum(T.mul(q, k_f)), 1.0 / np.sqrt(c))
        alpha = T.sigmoid(logits)
        ones = T.Tensor(np.ones((x.shape[0], 1)))
        blend = T.add(
            T.scale_rows(v_foreign, alpha),
            T.scale_rows(v_self, T.sub(ones, alpha)),
        )
        return T.relu(T.avg2(blend, x))
    raise ValueError(f"unknown exchange variant {variant!r}")


def selection_variant(
    clusters: G.PointCloud,
    strategy: str,
    r_prime: float,
    k: int,
    seed: int,
    features: np.ndarray | None = None,
    valid_counts: np.ndarray | None = None,
) -> G.Pairing:
    """Pick each cluster's exchange partner by one of the ablation strategies.

    farthest/nearest rank sampled candidates by distance; feats_scale by
    the candidate's channel-mean feature value; points_num by how many
    valid neighbors the candidate's own grouping found.
    """
    if strategy not in SELECTION_STRATEGIES:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    if strategy == "farthest":
        return G.farthest_neighbor_pairing(clusters, r_prime=r_prime, k=k, seed=seed)
    table = G.ball_query(
        clusters,
        clusters.positions,
        radius=r_prime,
        k=k,
        seed=seed,
        self_indices=np.arange(clusters.n),
    )
    if strategy == "nearest":
        return G.pairing_from_table(clusters.positions, table, mode="nearest")
    if strategy == "feats_scale":
        if features is None:
            raise ValueError("feats_scale selection needs cluster features")
        scores = np.asarray(features, dtype=np.float64).mean(axis=1)
        return G.pairing_from_table(clusters.positions, table, mode="score", scores=scores)
    if valid_counts is None:
        raise ValueError("points_num selection needs per-cluster valid neighbor counts")
    return G.pairing_from_table(
        clusters.positions, table, mode="score", scores=np.asarray(valid_counts, dtype=np.float64)
    )


def aggregate_scales(per_scale: list[T.Tensor], a_mlp: T.MlpParams) -> T.Tensor:
    """Concatenate scale outputs in order and fuse them with the aggregation MLP."""
    return T.mlp_forward(T.concat_cols(per_scale), a_mlp)


def ssa_forward(
    positions: np.ndarray,
    features: T.Tensor,
    m_out: int,
    config: SsaConfig,
    params: SsaParams,
    seed: int,
    frozen: SsaDecisions | None = None,
) -> tuple[ClusterFeatures, G.Pairing, SsaDecisions]:
    """One full layer pass: sample, abstract per scale, pair, exchange, aggregate.

    With `frozen` decisions the pass replays previously recorded
    sampling choices (cluster indices, neighbor tables, pairing) on
    possibly perturbed inputs; otherwise fresh seeded choices are made
    and returned for later replay.
    """
    positions = np.asarray(positions, dtype=np.float64)
    cloud = G.PointCloud(positions=positions)
    if frozen is None:
        cluster_indices = G.dfps(cloud, m_out, seed=G.derive_seed(seed, 0))
    else:
        cluster_indices = frozen.cluster_indices

    per_scale: list[T.Tensor] = []
    tables: list[G.NeighborTable] = []
    for si, scale in enumerate(config.scales):
        table = frozen.tables[si] if frozen is not None else None
        pooled, table = set_feature_abstraction(
            positions,
            features,
            cluster_indices,
            scale,
            params.f_mlps[si],
            seed=G.derive_seed(seed, 1, si),
            table=table,
        )
        per_scale.append(pooled)
        tables.append(table)

    clusters = G.PointCloud(positions=positions[cluster_indices])
    if frozen is not None:
        pairing = frozen.pairing
    else:
        pairing = selection_variant(
            clusters,
            config.selection,
            r_prime=config.r_prime,
            k=config.candidate_k,
            seed=G.derive_seed(seed, 2),
            features=per_scale[0].values,
            valid_counts=tables[0].valid_counts(),
        )

    exchanged = []
    for si, scale in enumerate(config.scales):
        s = shift_channels(config.shift_ratio, scale.out_channels)
        exchanged.append(
            exchange_variant(per_scale[si], pairing, config.exchange_op, params.exchange[si], s)
        )

    aggregated = aggregate_scales(exchanged, params.aggregate)
    out = ClusterFeatures(
        positions=clusters.positions,
        per_scale=per_scale,
        aggregated=aggregated,
        indices=cluster_indices,
    )
    decisions = SsaDecisions(cluster_indices=cluster_indices, tables=tables, pairing=pairing)
    return out, pairing, decisions
