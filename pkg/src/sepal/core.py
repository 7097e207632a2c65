"""Shared domain types for the expression-prediction pipeline.

Everything downstream (filtering, denoising, graph construction, training,
evaluation) speaks in terms of the containers defined here.  The containers
are frozen dataclasses over float64 numpy arrays and validate their own
invariants on construction, so a matrix that exists is a matrix that is
well-formed for its processing stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

STAGES = ("raw_counts", "filtered", "tpm", "log1p", "denoised")
GEOMETRIES = ("hex_array", "square_grid", "auto_radius")
SPLITS = ("train", "val", "test")


class PipelineError(Exception):
    """Base class for every error this package raises on purpose."""


class ValidationError(PipelineError):
    """Bad inputs or broken invariants.  CLI maps these to exit code 1."""


class IoFailure(PipelineError):
    """Unreadable or unwritable artifacts.  CLI maps these to exit code 2."""


class DuplicateSpot(ValidationError):
    pass


class MissingEmbedding(ValidationError):
    pass


class GeneSetMismatch(ValidationError):
    pass


class SpotSetMismatch(ValidationError):
    pass


class MalformedRow(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class WidthMismatch(ValidationError):
    pass


class EmptySlide(ValidationError):
    pass


class AllSpotsRemoved(ValidationError):
    pass


class AllGenesRemoved(ValidationError):
    pass


class NegativeValue(ValidationError):
    pass


class EmptyTrainSplit(ValidationError):
    pass


class DegenerateCoordinates(ValidationError):
    pass


class EmptyAdjacency(ValidationError):
    pass


class TooFewGenes(ValidationError):
    pass


class WidthNotDivisible(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class NoRecordedForward(PipelineError):
    pass


class EmptySplit(ValidationError):
    pass


class DivergedLoss(PipelineError):
    pass


class AllMasked(ValidationError):
    pass


class AllGenesExcluded(ValidationError):
    pass


class AllPatchesExcluded(ValidationError):
    pass


class StageOrderViolation(ValidationError):
    pass


class BadStageTag(ValidationError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SpotRecord:
    """One measured spot: identity, pixel position, and array position."""

    spot_id: str
    slide_id: str
    pixel_x: float
    pixel_y: float
    array_row: int
    array_col: int


def canonical_order(spots: Iterable[SpotRecord]) -> list[SpotRecord]:
    """Sort spots by (array_row, array_col, spot_id), the order used
    everywhere a slide's spots are enumerated."""
    return sorted(spots, key=lambda s: (s.array_row, s.array_col, s.spot_id))


def _find_duplicate(ids: Sequence[str]) -> str | None:
    seen: set[str] = set()
    for x in ids:
        if x in seen:
            return x
        seen.add(x)
    return None


@dataclass(frozen=True)
class ExpressionMatrix:
    """A spots x genes value matrix tagged with its processing stage.

    Rows follow the slide's canonical spot order.  Stage-specific
    invariants are enforced on construction: raw counts must be
    non-negative integers, tpm and log1p values must be non-negative,
    and every stage requires finite values.
    """

    slide_id: str
    gene_ids: tuple[str, ...]
    spot_ids: tuple[str, ...]
    values: np.ndarray
    stage: str

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise BadStageTag(f"unknown stage {self.stage!r}")
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "spot_ids", tuple(self.spot_ids))
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeMismatch(f"expression values must be 2-d, got {v.ndim}-d")
        if v.shape != (len(self.spot_ids), len(self.gene_ids)):
            raise ShapeMismatch(
                f"values shape {v.shape} does not match "
                f"{len(self.spot_ids)} spots x {len(self.gene_ids)} genes"
            )
        dup = _find_duplicate(self.gene_ids)
        if dup is not None:
            raise GeneSetMismatch(f"duplicate gene id {dup!r} in {self.slide_id}")
        dup = _find_duplicate(self.spot_ids)
        if dup is not None:
            raise DuplicateSpot(f"duplicate spot id {dup!r} in {self.slide_id}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue(f"non-finite expression value in {self.slide_id}")
        if self.stage in ("raw_counts", "filtered"):
            if np.any(v < 0):
                raise NegativeValue(f"negative count in {self.slide_id}")
            if np.any(v != np.rint(v)):
                raise ValidationError(f"non-integral count in {self.slide_id}")
        elif self.stage in ("tpm", "log1p"):
            if np.any(v < 0):
                raise NegativeValue(
                    f"negative value in {self.stage} matrix for {self.slide_id}"
                )
        object.__setattr__(self, "values", _readonly(v))

    @property
    def n_spots(self) -> int:
        return len(self.spot_ids)

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    def gene_index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.gene_ids)}

    def with_values(self, values: np.ndarray, stage: str) -> "ExpressionMatrix":
        return ExpressionMatrix(self.slide_id, self.gene_ids, self.spot_ids,
                                values, stage)

    def subset_genes(self, gene_ids: Sequence[str]) -> "ExpressionMatrix":
        index = self.gene_index()
        missing = [g for g in gene_ids if g not in index]
        if missing:
            raise GeneSetMismatch(
                f"genes {missing[:5]} absent from {self.slide_id}")
        cols = np.array([index[g] for g in gene_ids], dtype=np.int64)
        return ExpressionMatrix(self.slide_id, tuple(gene_ids), self.spot_ids,
                                self.values[:, cols], self.stage)

    def subset_spots(self, rows: np.ndarray) -> "ExpressionMatrix":
        spot_ids = tuple(self.spot_ids[i] for i in rows)
        return ExpressionMatrix(self.slide_id, self.gene_ids, spot_ids,
                                self.values[rows, :], self.stage)


@dataclass(frozen=True)
class ImputationMask:
    """Boolean spots x genes matrix; True marks a cell filled by the denoiser."""

    slide_id: str
    gene_ids: tuple[str, ...]
    spot_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "spot_ids", tuple(self.spot_ids))
        v = np.asarray(self.values)
        if v.dtype != np.bool_:
            u = np.unique(v)
            if not np.all(np.isin(u, (0, 1))):
                raise ValidationError("mask values must be 0 or 1")
            v = v.astype(np.bool_)
        if v.shape != (len(self.spot_ids), len(self.gene_ids)):
            raise ShapeMismatch(
                f"mask shape {v.shape} does not match "
                f"{len(self.spot_ids)} spots x {len(self.gene_ids)} genes")
        object.__setattr__(self, "values", _readonly(v))

    def subset_genes(self, gene_ids: Sequence[str]) -> "ImputationMask":
        index = {g: i for i, g in enumerate(self.gene_ids)}
        missing = [g for g in gene_ids if g not in index]
        if missing:
            raise GeneSetMismatch(
                f"genes {missing[:5]} absent from mask for {self.slide_id}")
        cols = np.array([index[g] for g in gene_ids], dtype=np.int64)
        return ImputationMask(self.slide_id, tuple(gene_ids), self.spot_ids,
                              self.values[:, cols])


def assert_mask_matches(matrix: ExpressionMatrix, mask: ImputationMask) -> None:
    if matrix.gene_ids != mask.gene_ids or matrix.spot_ids != mask.spot_ids:
        raise ShapeMismatch(
            f"mask for {mask.slide_id} is not aligned with its matrix")


@dataclass(frozen=True)
class EmbeddingTable:
    """Per-spot patch embedding vectors, rows in canonical spot order."""

    slide_id: str
    spot_ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "spot_ids", tuple(self.spot_ids))
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeMismatch("embedding vectors must be 2-d")
        if v.shape[0] != len(self.spot_ids):
            raise ShapeMismatch(
                f"{v.shape[0]} embedding rows for {len(self.spot_ids)} spots")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue(f"non-finite embedding in {self.slide_id}")
        object.__setattr__(self, "vectors", _readonly(v))

    @property
    def d_emb(self) -> int:
        return int(self.vectors.shape[1])

    def rows_for(self, spot_ids: Sequence[str]) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.spot_ids)}
        missing = [s for s in spot_ids if s not in index]
        if missing:
            raise MissingEmbedding(
                f"spot {missing[0]!r} in {self.slide_id} has no embedding row")
        return np.array([index[s] for s in spot_ids], dtype=np.int64)


@dataclass(frozen=True)
class TrainMeanVector:
    """Per-gene mean over all training spots, used for delta supervision."""

    gene_ids: tuple[str, ...]
    means: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim != 1 or m.shape[0] != len(self.gene_ids):
            raise ShapeMismatch("one mean per gene required")
        if not np.all(np.isfinite(m)):
            raise NonFiniteValue("non-finite train mean")
        object.__setattr__(self, "means", _readonly(m))


@dataclass(frozen=True)
class SlideEntry:
    """One slide's file paths and split assignment inside a manifest."""

    slide_id: str
    coords_path: str
    expr_path: str
    emb_path: str
    split: str

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValidationError(
                f"slide {self.slide_id!r} has unknown split {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    """Dataset description: slides, geometry, and preprocessing thresholds."""

    name: str
    geometry: str
    n_genes_select: int
    eps_total: float
    eps_wsi: float
    count_min_spot: float
    count_max_spot: float
    count_min_gene: float
    count_max_gene: float
    slides: tuple[SlideEntry, ...]

    def __post_init__(self) -> None:
        if self.geometry not in GEOMETRIES:
            raise ValidationError(f"unknown geometry {self.geometry!r}")
        if self.n_genes_select < 1:
            raise ValidationError("n_genes_select must be positive")
        for name in ("eps_total", "eps_wsi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValidationError(f"{name} must lie in [0, 100], got {v}")
        if self.count_min_spot > self.count_max_spot:
            raise ValidationError("count_min_spot exceeds count_max_spot")
        if self.count_min_gene > self.count_max_gene:
            raise ValidationError("count_min_gene exceeds count_max_gene")
        object.__setattr__(self, "slides", tuple(self.slides))
        ids = [s.slide_id for s in self.slides]
        dup = _find_duplicate(ids)
        if dup is not None:
            raise ValidationError(f"slide id {dup!r} listed twice in manifest")
        if not any(s.split == "train" for s in self.slides):
            raise EmptyTrainSplit("manifest assigns no slide to the train split")

    def slides_for(self, split: str) -> tuple[SlideEntry, ...]:
        return tuple(s for s in self.slides if s.split == split)


@dataclass
class Slide:
    """A fully aligned slide: spots, expression, embeddings, optional mask.

    All four views share one canonical spot order.  Built with align_slide,
    never by hand.
    """

    spots: tuple[SpotRecord, ...]
    expression: ExpressionMatrix
    embeddings: EmbeddingTable
    mask: ImputationMask | None = None

    @property
    def slide_id(self) -> str:
        return self.expression.slide_id


def align_slide(spots: Sequence[SpotRecord],
                expression: ExpressionMatrix,
                embeddings: EmbeddingTable,
                mask: ImputationMask | None = None) -> Slide:
    """Reorder everything to canonical spot order and check coverage.

    The expression matrix defines which spots exist; coordinates and
    embeddings may cover a superset and are subset to match.
    """
    ordered = canonical_order(spots)
    dup = _find_duplicate([s.spot_id for s in ordered])
    if dup is not None:
        raise DuplicateSpot(f"duplicate spot id {dup!r} in coordinates")
    pos = _find_duplicate([f"{s.array_row},{s.array_col}" for s in ordered])
    if pos is not None:
        raise DuplicateSpot(f"two spots share array position ({pos})")

    have_coords = {s.spot_id for s in ordered}
    for sid in expression.spot_ids:
        if sid not in have_coords:
            raise SpotSetMismatch(
                f"spot {sid!r} has expression but no coordinates")
    keep = [s for s in ordered if s.spot_id in set(expression.spot_ids)]
    order = [sid for sid in (s.spot_id for s in keep)]

    expr_index = {s: i for i, s in enumerate(expression.spot_ids)}
    expr = expression.subset_spots(
        np.array([expr_index[s] for s in order], dtype=np.int64))
    emb_rows = embeddings.rows_for(order)
    emb = EmbeddingTable(embeddings.slide_id, tuple(order),
                         embeddings.vectors[emb_rows, :])
    if mask is not None:
        mask_index = {s: i for i, s in enumerate(mask.spot_ids)}
        missing = [s for s in order if s not in mask_index]
        if missing:
            raise SpotSetMismatch(
                f"spot {missing[0]!r} missing from imputation mask")
        rows = np.array([mask_index[s] for s in order], dtype=np.int64)
        mask = ImputationMask(mask.slide_id, mask.gene_ids, tuple(order),
                              mask.values[rows, :])
        assert_mask_matches(expr, mask)
    return Slide(tuple(keep), expr, emb, mask)


@dataclass(frozen=True)
class DatasetReport:
    """Summary emitted by validate_dataset when everything checks out."""

    n_slides: int
    n_genes: int
    d_emb: int
    spots_per_slide: tuple[tuple[str, int], ...]
    splits: tuple[tuple[str, str], ...]


def validate_dataset(
    manifest: DatasetManifest,
    parts: Mapping[str, tuple[Sequence[SpotRecord], ExpressionMatrix,
                              EmbeddingTable]],
) -> DatasetReport:
    """Cross-slide consistency checks before any processing starts.

    Verifies that every manifest slide was loaded, that all slides carry
    the identical gene panel in identical order, that embedding widths
    agree, and that every expression spot has coordinates and an
    embedding row (by aligning each slide, which raises otherwise).
    """
    missing = [s.slide_id for s in manifest.slides if s.slide_id not in parts]
    if missing:
        raise ValidationError(f"manifest slide {missing[0]!r} was not loaded")

    gene_ref: tuple[str, ...] | None = None
    d_ref: int | None = None
    spot_counts: list[tuple[str, int]] = []
    for entry in manifest.slides:
        spots, expr, emb = parts[entry.slide_id]
        if expr.n_spots == 0:
            raise EmptySlide(f"slide {entry.slide_id!r} has no spots")
        if gene_ref is None:
            gene_ref = expr.gene_ids
        elif expr.gene_ids != gene_ref:
            raise GeneSetMismatch(
                f"slide {entry.slide_id!r} gene panel differs from "
                f"{manifest.slides[0].slide_id!r}")
        if d_ref is None:
            d_ref = emb.d_emb
        elif emb.d_emb != d_ref:
            raise WidthMismatch(
                f"slide {entry.slide_id!r} embedding width {emb.d_emb} "
                f"differs from {d_ref}")
        align_slide(spots, expr, emb)
        spot_counts.append((entry.slide_id, expr.n_spots))

    return DatasetReport(
        n_slides=len(manifest.slides),
        n_genes=len(gene_ref or ()),
        d_emb=int(d_ref or 0),
        spots_per_slide=tuple(spot_counts),
        splits=tuple((s.slide_id, s.split) for s in manifest.slides),
    )
