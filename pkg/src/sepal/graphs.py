"""Per-spot local graphs: k-hop neighborhoods with positional features.

Each training example is the subgraph induced by the spots within m hops
of a center spot.  Nodes are ordered center first, then hop 1 ascending by
spot index, then hop 2, and so on, which fixes node ids for batching and
serialization.  Node features combine the spot's patch embedding with a
sinusoidal encoding of its array offset from the center:

    pe[2i]     = sin(p / 10000^(4i / d))      i in [0, d/4)
    pe[2i + 1] = cos(p / 10000^(4i / d))

with p = rel_col over the first half of the vector and p = rel_row over
the second half.  The two are either summed (width d_emb) or concatenated
(width 2 d_emb).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    EmbeddingTable,
    ShapeMismatch,
    Slide,
    SpotRecord,
    ValidationError,
    WidthNotDivisible,
)
from .spatial import Adjacency

AGGREGATIONS = ("sum", "concat")


@dataclass(frozen=True)
class Subgraph:
    """Node set and induced edges of one k-hop neighborhood."""

    center: int
    nodes: np.ndarray   # global spot indices, center first
    hops: np.ndarray    # hop distance per node
    edges: np.ndarray   # [m, 2] local indices, i < j, sorted


def khop_subgraph(adjacency: Adjacency, center: int, hops: int,
                  neighbor_lists: Sequence[np.ndarray] | None = None
                  ) -> Subgraph:
    """Breadth-first expansion to the given hop count, with induced edges."""
    if not 0 <= center < adjacency.n_spots:
        raise ValidationError(f"center {center} out of range")
    if hops < 1:
        raise ValidationError(f"hop count must be >= 1, got {hops}")
    if neighbor_lists is None:
        neighbor_lists = adjacency.neighbor_lists()

    hop_of = {center: 0}
    order = [center]
    frontier = [center]
    for h in range(1, hops + 1):
        nxt: set[int] = set()
        for u in frontier:
            for v in neighbor_lists[u]:
                v = int(v)
                if v not in hop_of:
                    nxt.add(v)
        frontier = sorted(nxt)
        for v in frontier:
            hop_of[v] = h
        order.extend(frontier)
        if not frontier:
            break

    local = {g: k for k, g in enumerate(order)}
    edges = []
    for i, j in adjacency.edges:
        i, j = int(i), int(j)
        if i in local and j in local:
            a, b = local[i], local[j]
            edges.append((a, b) if a < b else (b, a))
    edges.sort()
    return Subgraph(
        center=center,
        nodes=np.array(order, dtype=np.int64),
        hops=np.array([hop_of[g] for g in order], dtype=np.int64),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
    )


def positional_encoding(rel_row: float, rel_col: float, d_emb: int
                        ) -> np.ndarray:
    """Sinusoidal encoding of an array offset; d_emb must divide by 4."""
    if d_emb < 4 or d_emb % 4 != 0:
        raise WidthNotDivisible(
            f"positional encoding width must be a positive multiple of 4, "
            f"got {d_emb}")
    half = d_emb // 2
    q = half // 2
    out = np.empty(d_emb, dtype=np.float64)
    freqs = 10000.0 ** (4.0 * np.arange(q) / d_emb)
    for offset, p in ((0, rel_col), (half, rel_row)):
        angles = p / freqs
        out[offset + 0:offset + half:2] = np.sin(angles)
        out[offset + 1:offset + half:2] = np.cos(angles)
    return out


@dataclass(frozen=True)
class SpotGraph:
    """A ready-to-train example: features plus local graph structure."""

    slide_id: str
    center_spot_id: str
    nodes: np.ndarray
    hops: np.ndarray
    edges: np.ndarray
    features: np.ndarray  # [n_nodes, d_feat]

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])


def assemble_graph(slide_spots: Sequence[SpotRecord],
                   embeddings: EmbeddingTable,
                   subgraph: Subgraph,
                   aggregation: str) -> SpotGraph:
    """Attach features to a subgraph: embedding plus positional encoding,
    summed or concatenated per the aggregation mode."""
    if aggregation not in AGGREGATIONS:
        raise ValidationError(f"unknown aggregation {aggregation!r}")
    d = embeddings.d_emb
    if aggregation == "sum" and (d < 4 or d % 4):
        raise WidthNotDivisible(
            f"sum aggregation needs d_emb divisible by 4, got {d}")
    if embeddings.vectors.shape[0] != len(slide_spots):
        raise ShapeMismatch("embeddings not aligned with spots")

    center = slide_spots[subgraph.center]
    feats = np.empty((len(subgraph.nodes),
                      d if aggregation == "sum" else 2 * d))
    for k, g in enumerate(subgraph.nodes):
        s = slide_spots[int(g)]
        pe = positional_encoding(s.array_row - center.array_row,
                                 s.array_col - center.array_col, d)
        emb = embeddings.vectors[int(g)]
        feats[k] = emb + pe if aggregation == "sum" else np.concatenate(
            [emb, pe])
    return SpotGraph(
        slide_id=center.slide_id,
        center_spot_id=center.spot_id,
        nodes=subgraph.nodes,
        hops=subgraph.hops,
        edges=subgraph.edges,
        features=feats,
    )


def build_spot_graphs(slide: Slide, adjacency: Adjacency, hops: int,
                      aggregation: str) -> list[SpotGraph]:
    """One SpotGraph per spot of the slide, in canonical spot order."""
    if adjacency.n_spots != len(slide.spots):
        raise ShapeMismatch(
            f"adjacency covers {adjacency.n_spots} spots, slide has "
            f"{len(slide.spots)}")
    lists = adjacency.neighbor_lists()
    out = []
    for i in range(len(slide.spots)):
        sub = khop_subgraph(adjacency, i, hops, lists)
        out.append(assemble_graph(slide.spots, slide.embeddings, sub,
                                  aggregation))
    return out
