"""Spot adjacency and spatial autocorrelation.

Adjacency is binary and symmetric, stored as a deduplicated (i, j) edge
list with i < j.  Three geometries are supported:

  hex_array     neighbors at array offsets (0, +-2), (+-1, +-1); the
                column axis advances in steps of two so interior spots
                have six neighbors
  square_grid   neighbors at offsets (0, +-1), (+-1, 0)
  auto_radius   neighbors within 1.3 times the minimum pairwise pixel
                distance

Autocorrelation per gene map x over N spots with weight sum W:

    I = (N / W) * sum_ij w_ij (x_i - mean) (x_j - mean) / sum_i (x_i - mean)^2

With binary symmetric weights W is twice the edge count, so the score
reduces to an edge-list sum.  A constant map has no defined score and
yields None rather than a number.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    DegenerateCoordinates,
    EmptyAdjacency,
    ExpressionMatrix,
    GeneSetMismatch,
    ShapeMismatch,
    SpotRecord,
    TooFewGenes,
    ValidationError,
)

AUTO_RADIUS_FACTOR = 1.3

_HEX_OFFSETS = ((0, 2), (1, 1), (1, -1))
_SQUARE_OFFSETS = ((0, 1), (1, 0))


@dataclass(frozen=True)
class Adjacency:
    """Symmetric binary neighbor structure over one slide's spots."""

    slide_id: str
    n_spots: int
    edges: np.ndarray  # [m, 2] int64, i < j, lexicographically sorted
    geometry: str

    def __post_init__(self) -> None:
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if (e[:, 0] >= e[:, 1]).any():
                raise ValidationError("edges must satisfy i < j")
            if e.min() < 0 or e.max() >= self.n_spots:
                raise ValidationError("edge endpoint out of range")
        e = np.array(e, copy=True)
        e.flags.writeable = False
        object.__setattr__(self, "edges", e)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_spots, dtype=np.int64)
        if self.edges.size:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def neighbor_lists(self) -> list[np.ndarray]:
        """Sorted neighbor array per node."""
        lists: list[list[int]] = [[] for _ in range(self.n_spots)]
        for i, j in self.edges:
            lists[int(i)].append(int(j))
            lists[int(j)].append(int(i))
        return [np.array(sorted(l), dtype=np.int64) for l in lists]


def _sorted_edges(pairs: set[tuple[int, int]]) -> np.ndarray:
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    arr = np.array(sorted(pairs), dtype=np.int64)
    return arr


def pairwise_pixel_distances(spots: Sequence[SpotRecord]) -> np.ndarray:
    xs = np.array([s.pixel_x for s in spots], dtype=np.float64)
    ys = np.array([s.pixel_y for s in spots], dtype=np.float64)
    return np.hypot(xs[:, None] - xs[None, :], ys[:, None] - ys[None, :])


def build_adjacency(spots: Sequence[SpotRecord], geometry: str) -> Adjacency:
    """Connect spots under the named geometry.  Spots must already be in
    canonical order (their list index is the node id)."""
    spots = list(spots)
    n = len(spots)
    if n < 2:
        raise DegenerateCoordinates(
            f"adjacency needs at least 2 spots, got {n}")
    slide_id = spots[0].slide_id

    if geometry in ("hex_array", "square_grid"):
        offsets = _HEX_OFFSETS if geometry == "hex_array" else _SQUARE_OFFSETS
        by_pos = {(s.array_row, s.array_col): i for i, s in enumerate(spots)}
        if len(by_pos) != n:
            raise DegenerateCoordinates(
                f"{slide_id!r}: duplicate array positions")
        pairs: set[tuple[int, int]] = set()
        for i, s in enumerate(spots):
            for dr, dc in offsets:
                j = by_pos.get((s.array_row + dr, s.array_col + dc))
                if j is not None:
                    pairs.add((i, j) if i < j else (j, i))
        return Adjacency(slide_id, n, _sorted_edges(pairs), geometry)

    if geometry == "auto_radius":
        dist = pairwise_pixel_distances(spots)
        np.fill_diagonal(dist, np.inf)
        dmin = float(dist.min())
        if dmin <= 0.0:
            raise DegenerateCoordinates(
                f"{slide_id!r}: two spots share a pixel position")
        cutoff = AUTO_RADIUS_FACTOR * dmin
        ii, jj = np.nonzero(dist <= cutoff)
        pairs = {(int(a), int(b)) for a, b in zip(ii, jj) if a < b}
        return Adjacency(slide_id, n, _sorted_edges(pairs), geometry)

    raise ValidationError(f"unknown geometry {geometry!r}")


def morans_i(values: np.ndarray, adjacency: Adjacency) -> float | None:
    """Autocorrelation score of one gene map, or None on a constant map."""
    scores = morans_i_many(values.reshape(-1, 1), adjacency)
    return scores[0]


def morans_i_many(values: np.ndarray, adjacency: Adjacency
                  ) -> list[float | None]:
    """Column-wise autocorrelation over a [n_spots, n_genes] matrix."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != adjacency.n_spots:
        raise ShapeMismatch(
            f"expected [{adjacency.n_spots}, n_genes] values, "
            f"got {values.shape}")
    if adjacency.n_edges == 0:
        raise EmptyAdjacency(
            f"{adjacency.slide_id!r}: no edges, score undefined")
    n = adjacency.n_spots
    m = adjacency.n_edges
    z = values - values.mean(axis=0, keepdims=True)
    ss = (z * z).sum(axis=0)
    cross = (z[adjacency.edges[:, 0], :] * z[adjacency.edges[:, 1], :]).sum(axis=0)
    out: list[float | None] = []
    for j in range(values.shape[1]):
        if ss[j] == 0.0:
            out.append(None)
        else:
            out.append(float(n * cross[j] / (m * ss[j])))
    return out


@dataclass(frozen=True)
class GeneScore:
    """Per-gene selection record: slide scores, their mean, and the verdict."""

    gene_id: str
    per_slide: tuple[float | None, ...]
    mean_score: float | None
    selected: bool


def select_genes(matrices: Sequence[ExpressionMatrix],
                 adjacencies: Sequence[Adjacency],
                 n_genes: int) -> tuple[list[str], list[GeneScore]]:
    """Rank genes by mean autocorrelation over slides and keep the top n.

    A gene's mean skips slides where its map is constant; genes constant
    on every slide rank below all scored genes.  Ties and the unscored
    tail order lexicographically by gene id.  Returns (selected ids in
    rank order, per-gene records in panel order).
    """
    if not matrices or len(matrices) != len(adjacencies):
        raise ValidationError("need one adjacency per matrix")
    genes = matrices[0].gene_ids
    for m in matrices[1:]:
        if m.gene_ids != genes:
            raise GeneSetMismatch(
                f"slide {m.slide_id!r} gene panel differs")
    if n_genes > len(genes):
        raise TooFewGenes(
            f"cannot select {n_genes} genes from a panel of {len(genes)}")
    if n_genes < 1:
        raise ValidationError("must select at least one gene")

    per_slide: list[list[float | None]] = []
    for m, adj in zip(matrices, adjacencies):
        if m.n_spots != adj.n_spots:
            raise ShapeMismatch(
                f"adjacency for {adj.slide_id!r} covers {adj.n_spots} spots, "
                f"matrix has {m.n_spots}")
        per_slide.append(morans_i_many(m.values, adj))

    means: list[float | None] = []
    for j in range(len(genes)):
        defined = [per_slide[k][j] for k in range(len(matrices))
                   if per_slide[k][j] is not None]
        means.append(float(np.mean(defined)) if defined else None)

    scored = [(g, means[j]) for j, g in enumerate(genes)]
    ranked = sorted(
        (t for t in scored if t[1] is not None),
        key=lambda t: (-t[1], t[0]))
    unscored = sorted(t[0] for t in scored if t[1] is None)
    order = [g for g, _ in ranked] + unscored
    chosen = set(order[:n_genes])

    records = [GeneScore(
        gene_id=g,
        per_slide=tuple(per_slide[k][j] for k in range(len(matrices))),
        mean_score=means[j],
        selected=g in chosen,
    ) for j, g in enumerate(genes)]
    return order[:n_genes], records
