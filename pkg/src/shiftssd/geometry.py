"""Deterministic spatial kernels for point clouds.

Distances are compared in squared form throughout; square roots only
appear in reported radii. Every stochastic choice is driven by an
explicit integer seed, and ties always break toward the smallest index,
so results are reproducible across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# Below this cloud size a vectorized scan beats the grid; above it the
# uniform grid keeps radius queries near O(points per ball).
_GRID_MIN_POINTS = 1024


class Point3(NamedTuple):
    """A single 3D position in meters."""

    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


@dataclass
class PointCloud:
    """N positions (meters) with an NxC feature matrix (C may be 0)."""

    positions: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be Nx3, got {self.positions.shape}")
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite positions")
        if self.features is None:
            self.features = np.zeros((n, 0), dtype=np.float64)
        else:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise ValueError(
                    f"features must have {n} rows, got shape {self.features.shape}"
                )
            if not np.isfinite(self.features).all():
                raise ValueError("non-finite features")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]


@dataclass
class NeighborTable:
    """Fixed-K neighbor indices per center with a validity mask.

    Slot 0 is always the center's own anchor point. Rows with fewer than
    K in-radius points are padded by duplicating slot 0 with valid
    False.
    """

    indices: np.ndarray  # MxK int64
    valid: np.ndarray  # MxK bool
    radius: float

    def valid_counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)


@dataclass
class Pairing:
    """Per-cluster index of its exchange partner; pairing[i] == i means isolated."""

    farthest: np.ndarray  # M int64


@dataclass
class GridIndex:
    """Uniform spatial hash over a fixed point set.

    Each point lands in exactly one cell keyed by floor(position /
    cell), so the union of all cells is the indexed set.
    """

    cell: float
    positions: np.ndarray
    cells: dict = field(default_factory=dict)

    def query(self, center, radius: float) -> np.ndarray:
        """Ascending indices of all points within `radius` of `center`."""
        center = np.asarray(center, dtype=np.float64).reshape(3)
        lo = np.floor((center - radius) / self.cell).astype(np.int64)
        hi = np.floor((center + radius) / self.cell).astype(np.int64)
        buckets = []
        for cx in range(lo[0], hi[0] + 1):
            for cy in range(lo[1], hi[1] + 1):
                for cz in range(lo[2], hi[2] + 1):
                    hit = self.cells.get((cx, cy, cz))
                    if hit is not None:
                        buckets.append(hit)
        if not buckets:
            return np.empty(0, dtype=np.int64)
        cand = np.concatenate(buckets)
        d2 = ((self.positions[cand] - center) ** 2).sum(axis=1)
        keep = cand[d2 <= radius * radius]
        keep.sort()
        return keep


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between two position sets, MxN."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite positions")
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=2)


def derive_seed(seed: int, *salts: int) -> int:
    """A child seed that is a pure function of (seed, salts)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(s) for s in salts]])
    return int(ss.generate_state(1)[0])


def dfps(cloud: PointCloud, m: int, seed: int) -> np.ndarray:
    """Distance-based farthest point sampling.

    The first index is a seeded uniform draw; each following index
    maximizes the minimum squared distance to everything already
    selected, ties broken by smallest index. Duplicated positions are
    selected at most as often as they occur, never re-selected.
    """
    n = cloud.n
    if m == 0:
        raise ValueError("empty request")
    if m > n:
        raise ValueError("insufficient points")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    selected = np.empty(m, dtype=np.int64)
    selected[0] = first
    pos = cloud.positions
    min_d2 = ((pos - pos[first]) ** 2).sum(axis=1)
    min_d2[first] = -1.0  # mark selected so it can never win again
    for t in range(1, m):
        nxt = int(np.argmax(min_d2))
        selected[t] = nxt
        d2 = ((pos - pos[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -1.0
    return selected


def build_grid(cloud: PointCloud, cell: float) -> GridIndex:
    if cell <= 0:
        raise ValueError("cell size must be positive")
    keys = np.floor(cloud.positions / cell).astype(np.int64)
    cells: dict = {}
    for i, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(i)
    cells = {k: np.asarray(v, dtype=np.int64) for k, v in cells.items()}
    return GridIndex(cell=float(cell), positions=cloud.positions, cells=cells)


def _radius_sets(cloud: PointCloud, centers: np.ndarray, radius: float) -> list[np.ndarray]:
    """Per-center ascending index arrays of in-radius points (inclusive)."""
    if cloud.n >= _GRID_MIN_POINTS:
        grid = build_grid(cloud, cell=radius)
        return [grid.query(c, radius) for c in centers]
    d2 = pairwise_sq_dist(centers, cloud.positions)
    r2 = radius * radius
    return [np.flatnonzero(row <= r2) for row in d2]


def ball_query(
    cloud: PointCloud,
    centers: np.ndarray,
    radius: float,
    k: int,
    seed: int,
    self_indices: np.ndarray | None = None,
) -> NeighborTable:
    """Radius-bounded neighbor sampling with a fixed budget of K slots.

    Slot 0 always holds the anchor point. When `self_indices` is None
    each center must coincide exactly with a cloud point, which becomes
    the anchor; otherwise the given indices are used (the anchor is then
    exempt from the radius bound, which supports querying around shifted
    candidate positions). The remaining slots are a seeded uniform
    sample without replacement of the other in-radius points; short rows
    are padded by duplicating slot 0 with valid False.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    m = centers.shape[0]

    in_radius = _radius_sets(cloud, centers, radius)

    if self_indices is None:
        anchors = np.empty(m, dtype=np.int64)
        for i, center in enumerate(centers):
            d2 = ((cloud.positions - center) ** 2).sum(axis=1)
            zero = np.flatnonzero(d2 == 0.0)
            if zero.size == 0:
                raise ValueError(f"center {i} does not coincide with any cloud point")
            anchors[i] = zero[0]
    else:
        anchors = np.asarray(self_indices, dtype=np.int64).reshape(-1)
        if anchors.shape[0] != m:
            raise ValueError("self_indices length must match center count")
        if anchors.size and (anchors.min() < 0 or anchors.max() >= cloud.n):
            raise ValueError("self index out of range")

    rng = np.random.default_rng(seed)
    indices = np.empty((m, k), dtype=np.int64)
    valid = np.zeros((m, k), dtype=bool)
    for i in range(m):
        anchor = anchors[i]
        others = in_radius[i][in_radius[i] != anchor]
        if others.size > k - 1:
            others = rng.choice(others, size=k - 1, replace=False)
        row = np.concatenate(([anchor], others))
        indices[i, : row.size] = row
        valid[i, : row.size] = True
        if row.size < k:
            indices[i, row.size :] = anchor
    return NeighborTable(indices=indices, valid=valid, radius=float(radius))


def farthest_neighbor_pairing(
    clusters: PointCloud, r_prime: float, k: int, seed: int
) -> Pairing:
    """Pair each cluster with the most distant of its sampled in-range neighbors.

    Candidates come from ball_query with radius r_prime; the pairing
    falls back to the cluster itself when no other cluster lies within
    range. Equal distances resolve to the smallest cluster index.
    """
    table = ball_query(
        clusters,
        clusters.positions,
        radius=r_prime,
        k=k,
        seed=seed,
        self_indices=np.arange(clusters.n),
    )
    return pairing_from_table(clusters.positions, table, mode="farthest")


def pairing_from_table(
    positions: np.ndarray, table: NeighborTable, mode: str, scores: np.ndarray | None = None
) -> Pairing:
    """Resolve a pairing from sampled candidates by distance or external score.

    mode 'farthest'/'nearest' ranks candidates by squared distance to
    the center; mode 'score' ranks by scores[candidate index], larger
    wins. Ties break to the smallest candidate index; rows without a
    non-self candidate pair with themselves.
    """
    m = table.indices.shape[0]
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        cand = table.indices[i][table.valid[i]][1:]  # drop the slot-0 anchor
        if cand.size == 0:
            out[i] = table.indices[i, 0]
            continue
        if mode == "farthest":
            key = ((positions[cand] - positions[table.indices[i, 0]]) ** 2).sum(axis=1)
        elif mode == "nearest":
            key = -((positions[cand] - positions[table.indices[i, 0]]) ** 2).sum(axis=1)
        elif mode == "score":
            if scores is None:
                raise ValueError("mode 'score' requires a score array")
            key = scores[cand]
        else:
            raise ValueError(f"unknown pairing mode {mode!r}")
        best = key.max()
        out[i] = cand[key == best].min()
    return Pairing(farthest=out)
