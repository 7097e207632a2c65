"""Count filtering, normalization, and the delta-supervision transforms.

The preprocessing chain runs in a fixed order on raw count matrices:

  1. filter_by_counts      drop spots, then genes, whose total counts fall
                           outside configured [min, max] ranges
  2. filter_by_sparsity    drop genes expressed in too few spots, judged
                           both pooled over all slides and per slide
  3. tpm_normalize         length-normalized rate scaled to one million
  4. log_transform         log2(x + 1)
  5. center_per_slide      optional per-slide gene mean removal

Gene totals and sparsity are judged over the pooled spot population of all
slides; spot totals are judged within each slide.  Downstream supervision
works on deltas against the train-split gene means, see to_delta/from_delta.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (
    AllGenesRemoved,
    AllSpotsRemoved,
    DatasetManifest,
    EmptyTrainSplit,
    ExpressionMatrix,
    GeneSetMismatch,
    ShapeMismatch,
    TrainMeanVector,
    ValidationError,
)


@dataclass(frozen=True)
class FilterThresholds:
    """Count-range and sparsity settings for the two filter passes."""

    count_min_spot: float
    count_max_spot: float
    count_min_gene: float
    count_max_gene: float
    eps_total: float
    eps_wsi: float

    def __post_init__(self) -> None:
        if self.count_min_spot > self.count_max_spot:
            raise ValidationError("count_min_spot exceeds count_max_spot")
        if self.count_min_gene > self.count_max_gene:
            raise ValidationError("count_min_gene exceeds count_max_gene")
        for name in ("eps_total", "eps_wsi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValidationError(f"{name} must lie in [0, 100], got {v}")

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "FilterThresholds":
        return cls(
            count_min_spot=manifest.count_min_spot,
            count_max_spot=manifest.count_max_spot,
            count_min_gene=manifest.count_min_gene,
            count_max_gene=manifest.count_max_gene,
            eps_total=manifest.eps_total,
            eps_wsi=manifest.eps_wsi,
        )


def _common_genes(matrices: Sequence[ExpressionMatrix]) -> tuple[str, ...]:
    genes = matrices[0].gene_ids
    for m in matrices[1:]:
        if m.gene_ids != genes:
            raise GeneSetMismatch(
                f"slide {m.slide_id!r} gene panel differs from "
                f"{matrices[0].slide_id!r}")
    return genes


def filter_by_counts(
    matrices: Sequence[ExpressionMatrix],
    thresholds: FilterThresholds,
) -> tuple[list[ExpressionMatrix], list[tuple[str, str, str, float]]]:
    """Drop out-of-range spots per slide, then out-of-range genes pooled.

    Returns the filtered matrices (stage "filtered") and a removal log of
    (kind, slide_id, item_id, total_counts) rows, spots first, in input
    order.  Gene totals are computed after spot removal, pooled across
    slides.  Raises AllSpotsRemoved / AllGenesRemoved when a slide or the
    panel empties out.
    """
    if not matrices:
        raise ValidationError("no matrices to filter")
    genes = _common_genes(matrices)
    removed: list[tuple[str, str, str, float]] = []

    kept_spots: list[ExpressionMatrix] = []
    for m in matrices:
        if m.stage != "raw_counts":
            raise ValidationError(
                f"count filter expects raw_counts, got {m.stage!r}")
        totals = m.values.sum(axis=1)
        keep = ((totals >= thresholds.count_min_spot)
                & (totals <= thresholds.count_max_spot))
        for i in np.nonzero(~keep)[0]:
            removed.append(("spot", m.slide_id, m.spot_ids[i],
                            float(totals[i])))
        if not keep.any():
            raise AllSpotsRemoved(
                f"count filter removed every spot of {m.slide_id!r}")
        kept_spots.append(m.subset_spots(np.nonzero(keep)[0]))

    gene_totals = np.zeros(len(genes), dtype=np.float64)
    for m in kept_spots:
        gene_totals += m.values.sum(axis=0)
    keep_genes = ((gene_totals >= thresholds.count_min_gene)
                  & (gene_totals <= thresholds.count_max_gene))
    for j in np.nonzero(~keep_genes)[0]:
        removed.append(("gene", "*", genes[j], float(gene_totals[j])))
    if not keep_genes.any():
        raise AllGenesRemoved("count filter removed every gene")
    kept_ids = [g for g, k in zip(genes, keep_genes) if k]

    out = []
    for m in kept_spots:
        sub = m.subset_genes(kept_ids)
        out.append(sub.with_values(sub.values, "filtered"))
    return out, removed


def filter_by_sparsity(
    matrices: Sequence[ExpressionMatrix],
    eps_total: float,
    eps_wsi: float,
) -> tuple[list[str], list[tuple[str, str, float, float]]]:
    """Keep genes detected in at least eps_total percent of all spots
    pooled, and at least eps_wsi percent of the spots of every slide.

    Detection means a strictly positive value.  Returns (kept gene ids in
    panel order, removal log of (gene_id, failed_scope, pct, threshold)).
    """
    if not matrices:
        raise ValidationError("no matrices to filter")
    genes = _common_genes(matrices)

    n_total = sum(m.n_spots for m in matrices)
    pos_total = np.zeros(len(genes), dtype=np.float64)
    per_slide_pct: list[tuple[str, np.ndarray]] = []
    for m in matrices:
        pos = (m.values > 0).sum(axis=0).astype(np.float64)
        pos_total += pos
        per_slide_pct.append((m.slide_id, 100.0 * pos / m.n_spots))
    total_pct = 100.0 * pos_total / n_total

    kept: list[str] = []
    removed: list[tuple[str, str, float, float]] = []
    for j, g in enumerate(genes):
        if total_pct[j] < eps_total:
            removed.append((g, "total", float(total_pct[j]), eps_total))
            continue
        low = [(sid, pct[j]) for sid, pct in per_slide_pct
               if pct[j] < eps_wsi]
        if low:
            sid, pct = min(low, key=lambda t: (t[1], t[0]))
            removed.append((g, sid, float(pct), eps_wsi))
            continue
        kept.append(g)
    if not kept:
        raise AllGenesRemoved("sparsity filter removed every gene")
    return kept, removed


def apply_gene_subset(matrices: Sequence[ExpressionMatrix],
                      gene_ids: Sequence[str]) -> list[ExpressionMatrix]:
    return [m.subset_genes(gene_ids) for m in matrices]


def tpm_normalize(matrix: ExpressionMatrix,
                  gene_lengths: Mapping[str, float] | None = None
                  ) -> ExpressionMatrix:
    """Scale each spot to transcripts-per-million.

    Each count is divided by its gene length (default 1 for every gene,
    which reduces to counts-per-million), and each spot row is scaled so
    the length-normalized rates sum to 1e6.  Spots with zero total stay
    all-zero rather than dividing by zero.
    """
    if matrix.stage not in ("raw_counts", "filtered"):
        raise ValidationError(
            f"tpm expects count data, got stage {matrix.stage!r}")
    if gene_lengths is None:
        lengths = np.ones(matrix.n_genes, dtype=np.float64)
    else:
        missing = [g for g in matrix.gene_ids if g not in gene_lengths]
        if missing:
            raise GeneSetMismatch(
                f"no length for genes {missing[:5]} in {matrix.slide_id}")
        lengths = np.array([float(gene_lengths[g]) for g in matrix.gene_ids])
        if np.any(lengths <= 0):
            raise ValidationError("gene lengths must be positive")
    rates = matrix.values / lengths[None, :]
    totals = rates.sum(axis=1, keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    out = rates / safe * 1e6
    return matrix.with_values(out, "tpm")


def log_transform(matrix: ExpressionMatrix) -> ExpressionMatrix:
    """Elementwise log2(x + 1) on a tpm matrix."""
    if matrix.stage != "tpm":
        raise ValidationError(
            f"log transform expects tpm, got stage {matrix.stage!r}")
    return matrix.with_values(np.log2(matrix.values + 1.0), "log1p")


def center_per_slide(matrices: Sequence[ExpressionMatrix]
                     ) -> list[ExpressionMatrix]:
    """Subtract each slide's own per-gene mean.  Output stays at the
    input stage tag only if already "denoised"; centered log1p values can
    go negative so the result is tagged "denoised"."""
    out = []
    for m in matrices:
        centered = m.values - m.values.mean(axis=0, keepdims=True)
        out.append(ExpressionMatrix(m.slide_id, m.gene_ids, m.spot_ids,
                                    centered, "denoised"))
    return out


def compute_train_mean(matrices: Sequence[ExpressionMatrix],
                       splits: Mapping[str, str]) -> TrainMeanVector:
    """Per-gene mean over every spot of every train-split slide, pooled."""
    train = [m for m in matrices if splits.get(m.slide_id) == "train"]
    if not train:
        raise EmptyTrainSplit("no train-split matrices")
    genes = _common_genes(train)
    total = np.zeros(len(genes), dtype=np.float64)
    n = 0
    for m in train:
        total += m.values.sum(axis=0)
        n += m.n_spots
    return TrainMeanVector(genes, total / n)


def to_delta(matrix: ExpressionMatrix, mean: TrainMeanVector
             ) -> ExpressionMatrix:
    """Subtract the train mean from every spot row."""
    if matrix.gene_ids != mean.gene_ids:
        raise GeneSetMismatch("delta transform on a different gene panel")
    return ExpressionMatrix(matrix.slide_id, matrix.gene_ids, matrix.spot_ids,
                            matrix.values - mean.means[None, :], "denoised")


def from_delta(matrix: ExpressionMatrix, mean: TrainMeanVector
               ) -> ExpressionMatrix:
    """Add the train mean back onto every spot row."""
    if matrix.gene_ids != mean.gene_ids:
        raise GeneSetMismatch("delta transform on a different gene panel")
    return ExpressionMatrix(matrix.slide_id, matrix.gene_ids, matrix.spot_ids,
                            matrix.values + mean.means[None, :], "denoised")
