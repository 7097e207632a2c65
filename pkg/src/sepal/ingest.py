"""File formats: TSV tables, dataset manifests, checkpoints, heatmaps.

Every artifact the pipeline writes is deterministic down to the byte for a
fixed input: floats are serialized with repr (shortest round-trip form),
newlines are always "\\n", and row order is always the canonical spot order.

Formats:
  coordinates   TSV: spot_id slide_id pixel_x pixel_y array_row array_col
  expression    TSV: spot_id then one column per gene; #stage= comment
  embeddings    TSV: spot_id then e0..e{d-1}
  mask          TSV: spot_id then one 0/1 column per gene
  manifest      sectioned key = value text (toml-like subset)
  checkpoint    SEPALCKPT1 magic, meta lines, text tensors with shape headers
  heatmap       binary P6 PPM plus a CSV of the plotted values
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    BadStageTag,
    DatasetManifest,
    DuplicateSpot,
    EmbeddingTable,
    EmptySlide,
    ExpressionMatrix,
    ImputationMask,
    IoFailure,
    MalformedRow,
    NonFiniteValue,
    ShapeMismatch,
    SlideEntry,
    SpotRecord,
    ValidationError,
    WidthMismatch,
    canonical_order,
)

FORMAT_VERSION = "1"
CHECKPOINT_MAGIC = "SEPALCKPT1"

COORD_COLUMNS = ("spot_id", "slide_id", "pixel_x", "pixel_y",
                 "array_row", "array_col")


def fmt_float(x: float) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(x))


def fmt_value(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return fmt_float(x)
    return str(x)


def _open_read(path):
    try:
        return open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def _open_write(path, binary: bool = False):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        if binary:
            return open(path, "wb")
        return open(path, "w", encoding="utf-8", newline="\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _parse_tsv(path) -> tuple[dict[str, str], list[str], list[tuple[int, list[str]]]]:
    """Split a TSV file into (comments, header, [(line_no, fields), ...])."""
    comments: dict[str, str] = {}
    header: list[str] | None = None
    rows: list[tuple[int, list[str]]] = []
    with _open_read(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:]
                if "=" in body:
                    k, _, v = body.partition("=")
                    comments[k.strip()] = v.strip()
                continue
            fields = line.split("\t")
            if header is None:
                header = fields
            else:
                rows.append((line_no, fields))
    if header is None:
        raise MalformedRow(f"{path}: no header row")
    return comments, header, rows


def _slide_id_for(path, comments: Mapping[str, str]) -> str:
    if "slide" in comments:
        return comments["slide"]
    name = Path(path).name
    return name.split(".", 1)[0]


def _parse_float(text: str, path, line_no: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise MalformedRow(
            f"{path}:{line_no}: {text!r} is not a number") from None
    if not math.isfinite(v):
        raise NonFiniteValue(f"{path}:{line_no}: non-finite value {text!r}")
    return v


def _parse_int(text: str, path, line_no: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise MalformedRow(
            f"{path}:{line_no}: {text!r} is not an integer") from None


def read_coordinates(path) -> list[SpotRecord]:
    """Read a coordinates TSV; returns spots in canonical order."""
    _, header, rows = _parse_tsv(path)
    if tuple(header) != COORD_COLUMNS:
        raise MalformedRow(
            f"{path}: header must be {' '.join(COORD_COLUMNS)}")
    spots: list[SpotRecord] = []
    for line_no, fields in rows:
        if len(fields) != 6:
            raise MalformedRow(
                f"{path}:{line_no}: expected 6 columns, got {len(fields)}")
        spots.append(SpotRecord(
            spot_id=fields[0],
            slide_id=fields[1],
            pixel_x=_parse_float(fields[2], path, line_no),
            pixel_y=_parse_float(fields[3], path, line_no),
            array_row=_parse_int(fields[4], path, line_no),
            array_col=_parse_int(fields[5], path, line_no),
        ))
    if not spots:
        raise EmptySlide(f"{path}: no spots")
    slide_ids = {s.slide_id for s in spots}
    if len(slide_ids) > 1:
        raise MalformedRow(
            f"{path}: mixed slide ids {sorted(slide_ids)[:3]}")
    seen_ids: set[str] = set()
    seen_pos: set[tuple[int, int]] = set()
    for s in spots:
        if s.spot_id in seen_ids:
            raise DuplicateSpot(f"{path}: duplicate spot id {s.spot_id!r}")
        seen_ids.add(s.spot_id)
        pos = (s.array_row, s.array_col)
        if pos in seen_pos:
            raise DuplicateSpot(f"{path}: two spots at array position {pos}")
        seen_pos.add(pos)
    return canonical_order(spots)


def write_coordinates(path, spots: Sequence[SpotRecord]) -> None:
    with _open_write(path) as fh:
        fh.write(f"#format_version={FORMAT_VERSION}\n#kind=coordinates\n")
        fh.write("\t".join(COORD_COLUMNS) + "\n")
        for s in canonical_order(spots):
            fh.write("\t".join((
                s.spot_id, s.slide_id, fmt_float(s.pixel_x),
                fmt_float(s.pixel_y), str(s.array_row), str(s.array_col),
            )) + "\n")


def _read_value_table(path, kind: str):
    comments, header, rows = _parse_tsv(path)
    if not header or header[0] != "spot_id":
        raise MalformedRow(f"{path}: first column must be spot_id")
    col_ids = header[1:]
    n_cols = len(col_ids)
    spot_ids: list[str] = []
    values = np.empty((len(rows), n_cols), dtype=np.float64)
    for r, (line_no, fields) in enumerate(rows):
        if len(fields) != n_cols + 1:
            if kind == "embeddings":
                raise WidthMismatch(
                    f"{path}:{line_no}: {len(fields) - 1} values under a "
                    f"{n_cols}-wide header")
            raise MalformedRow(
                f"{path}:{line_no}: expected {n_cols + 1} columns, "
                f"got {len(fields)}")
        spot_ids.append(fields[0])
        for c, text in enumerate(fields[1:]):
            values[r, c] = _parse_float(text, path, line_no)
    return comments, col_ids, spot_ids, values


def read_expression(path, default_stage: str = "raw_counts") -> ExpressionMatrix:
    """Read an expression TSV.  Stage comes from the #stage= comment."""
    comments, gene_ids, spot_ids, values = _read_value_table(path, "expression")
    stage = comments.get("stage", default_stage)
    return ExpressionMatrix(_slide_id_for(path, comments), tuple(gene_ids),
                            tuple(spot_ids), values, stage)


def write_expression(path, matrix: ExpressionMatrix) -> None:
    integral = matrix.stage in ("raw_counts", "filtered")
    with _open_write(path) as fh:
        fh.write(f"#format_version={FORMAT_VERSION}\n#kind=expression\n")
        fh.write(f"#stage={matrix.stage}\n#slide={matrix.slide_id}\n")
        fh.write("spot_id\t" + "\t".join(matrix.gene_ids) + "\n")
        for i, sid in enumerate(matrix.spot_ids):
            row = matrix.values[i]
            if integral:
                cells = [str(int(v)) for v in row]
            else:
                cells = [fmt_float(v) for v in row]
            fh.write(sid + "\t" + "\t".join(cells) + "\n")


def read_embeddings(path) -> EmbeddingTable:
    comments, col_ids, spot_ids, values = _read_value_table(path, "embeddings")
    for i, name in enumerate(col_ids):
        if name != f"e{i}":
            raise MalformedRow(
                f"{path}: embedding column {i + 1} must be named e{i}, "
                f"got {name!r}")
    return EmbeddingTable(_slide_id_for(path, comments), tuple(spot_ids), values)


def write_embeddings(path, table: EmbeddingTable) -> None:
    with _open_write(path) as fh:
        fh.write(f"#format_version={FORMAT_VERSION}\n#kind=embeddings\n")
        fh.write(f"#slide={table.slide_id}\n")
        fh.write("spot_id\t" + "\t".join(
            f"e{i}" for i in range(table.d_emb)) + "\n")
        for i, sid in enumerate(table.spot_ids):
            fh.write(sid + "\t" + "\t".join(
                fmt_float(v) for v in table.vectors[i]) + "\n")


def read_mask(path) -> ImputationMask:
    comments, gene_ids, spot_ids, values = _read_value_table(path, "mask")
    if values.size and not np.all(np.isin(values, (0.0, 1.0))):
        raise MalformedRow(f"{path}: mask cells must be 0 or 1")
    return ImputationMask(_slide_id_for(path, comments), tuple(gene_ids),
                          tuple(spot_ids), values.astype(np.bool_))


def write_mask(path, mask: ImputationMask) -> None:
    with _open_write(path) as fh:
        fh.write(f"#format_version={FORMAT_VERSION}\n#kind=mask\n")
        fh.write(f"#slide={mask.slide_id}\n")
        fh.write("spot_id\t" + "\t".join(mask.gene_ids) + "\n")
        for i, sid in enumerate(mask.spot_ids):
            fh.write(sid + "\t" + "\t".join(
                "1" if v else "0" for v in mask.values[i]) + "\n")


def write_table(path, kind: str, columns: Sequence[str],
                rows: Iterable[Sequence], extra_comments: Sequence[str] = ()) -> None:
    """Write a generic report table with the standard comment prologue."""
    with _open_write(path) as fh:
        fh.write(f"#format_version={FORMAT_VERSION}\n#kind={kind}\n")
        for c in extra_comments:
            fh.write(f"#{c}\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(fmt_value(v) for v in row) + "\n")


def read_table(path) -> tuple[dict[str, str], list[str], list[list[str]]]:
    comments, header, rows = _parse_tsv(path)
    return comments, header, [fields for _, fields in rows]


# ---------------------------------------------------------------------------
# manifest

_MANIFEST_SCALARS = {
    "name": str,
    "geometry": str,
    "n_genes_select": int,
    "eps_total": float,
    "eps_wsi": float,
    "count_min_spot": float,
    "count_max_spot": float,
    "count_min_gene": float,
    "count_max_gene": float,
}
_SLIDE_KEYS = ("coords", "expr", "emb", "split")


def _manifest_value(text: str, path, line_no: int):
    text = text.strip()
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        return text[1:-1]
    if text in ("inf", "+inf"):
        return math.inf
    try:
        if any(c in text for c in ".eE") and not text.lstrip("+-").isdigit():
            return float(text)
        return int(text)
    except ValueError:
        raise MalformedRow(
            f"{path}:{line_no}: cannot parse value {text!r}") from None


def read_manifest(path) -> DatasetManifest:
    """Parse a manifest file.  # 3.10 has no stdlib toml reader; the format
    is a small fixed subset (scalars plus [slide.<id>] sections) so we
    parse it directly."""
    path = Path(path)
    base = path.parent
    scalars: dict[str, object] = {}
    slides: list[tuple[str, dict[str, object]]] = []
    section: dict[str, object] | None = None
    with _open_read(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("["):
                if not line.endswith("]"):
                    raise MalformedRow(f"{path}:{line_no}: unterminated section")
                name = line[1:-1].strip()
                if not name.startswith("slide."):
                    raise ValidationError(
                        f"{path}:{line_no}: unknown section [{name}]")
                sid = name[len("slide."):]
                if not sid:
                    raise ValidationError(f"{path}:{line_no}: empty slide id")
                section = {}
                slides.append((sid, section))
                continue
            if "=" not in line:
                raise MalformedRow(f"{path}:{line_no}: expected key = value")
            key, _, rest = line.partition("=")
            key = key.strip()
            value = _manifest_value(rest, path, line_no)
            if section is None:
                if key not in _MANIFEST_SCALARS:
                    raise ValidationError(
                        f"{path}:{line_no}: unknown manifest key {key!r}")
                scalars[key] = value
            else:
                if key not in _SLIDE_KEYS:
                    raise ValidationError(
                        f"{path}:{line_no}: unknown slide key {key!r}")
                section[key] = value

    missing = [k for k in _MANIFEST_SCALARS if k not in scalars]
    if missing:
        raise ValidationError(f"{path}: manifest missing keys {missing}")
    for key, want in _MANIFEST_SCALARS.items():
        v = scalars[key]
        if want is float and isinstance(v, int):
            scalars[key] = float(v)
        elif not isinstance(v, want):
            raise ValidationError(
                f"{path}: manifest key {key!r} has wrong type")
    if not slides:
        raise ValidationError(f"{path}: manifest lists no slides")

    entries = []
    for sid, section in slides:
        lost = [k for k in _SLIDE_KEYS if k not in section]
        if lost:
            raise ValidationError(
                f"{path}: slide {sid!r} missing keys {lost}")
        entries.append(SlideEntry(
            slide_id=sid,
            coords_path=str(base / str(section["coords"])),
            expr_path=str(base / str(section["expr"])),
            emb_path=str(base / str(section["emb"])),
            split=str(section["split"]),
        ))
    return DatasetManifest(slides=tuple(entries), **scalars)  # type: ignore[arg-type]


def write_manifest(path, manifest: DatasetManifest) -> None:
    """Write a manifest; slide paths are stored relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: str) -> str:
        q = Path(p)
        try:
            return q.resolve().relative_to(base).as_posix()
        except ValueError:
            return q.as_posix()

    def scalar(v) -> str:
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, float):
            return "inf" if math.isinf(v) else fmt_float(v)
        return str(v)

    with _open_write(path) as fh:
        fh.write(f"# dataset manifest, format_version={FORMAT_VERSION}\n")
        for key in _MANIFEST_SCALARS:
            fh.write(f"{key} = {scalar(getattr(manifest, key))}\n")
        for s in manifest.slides:
            fh.write(f"\n[slide.{s.slide_id}]\n")
            fh.write(f'coords = "{rel(s.coords_path)}"\n')
            fh.write(f'expr = "{rel(s.expr_path)}"\n')
            fh.write(f'emb = "{rel(s.emb_path)}"\n')
            fh.write(f'split = "{s.split}"\n')


def load_dataset(manifest: DatasetManifest):
    """Read every slide's three files.  Returns {slide_id: (spots, expr, emb)}."""
    parts = {}
    for entry in manifest.slides:
        spots = read_coordinates(entry.coords_path)
        expr = read_expression(entry.expr_path)
        emb = read_embeddings(entry.emb_path)
        # file-level slide ids must agree with the manifest section name
        for got, where in ((spots[0].slide_id, "coordinates"),
                           (expr.slide_id, "expression"),
                           (emb.slide_id, "embeddings")):
            if got != entry.slide_id:
                raise ValidationError(
                    f"{where} file for {entry.slide_id!r} carries slide id "
                    f"{got!r}")
        parts[entry.slide_id] = (spots, expr, emb)
    return parts


# ---------------------------------------------------------------------------
# checkpoints

def write_checkpoint(path, meta: Mapping[str, str],
                     tensors: Mapping[str, np.ndarray]) -> None:
    """Text checkpoint: magic line, meta lines, then shape-headed tensors."""
    with _open_write(path) as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        fh.write(f"meta\tformat_version\t{FORMAT_VERSION}\n")
        for k, v in meta.items():
            if "\t" in k or "\n" in str(v):
                raise ValidationError(f"checkpoint meta {k!r} not serializable")
            fh.write(f"meta\t{k}\t{v}\n")
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype=np.float64)
            if a.ndim not in (1, 2):
                raise ShapeMismatch(
                    f"tensor {name!r} must be 1-d or 2-d, got {a.ndim}-d")
            shape = ",".join(str(d) for d in a.shape)
            fh.write(f"tensor\t{name}\t{shape}\n")
            rows = a.reshape(1, -1) if a.ndim == 1 else a
            for row in rows:
                fh.write("\t".join(fmt_float(v) for v in row) + "\n")


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    with _open_read(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: bad checkpoint magic {first!r}")
        pending: tuple[str, tuple[int, ...]] | None = None
        collected: list[list[float]] = []

        def flush():
            nonlocal pending, collected
            if pending is None:
                return
            name, shape = pending
            flat = np.array(collected, dtype=np.float64)
            want_rows = 1 if len(shape) == 1 else shape[0]
            if flat.shape[0] != want_rows:
                raise MalformedRow(
                    f"{path}: tensor {name!r} has {flat.shape[0]} rows, "
                    f"expected {want_rows}")
            tensors[name] = flat.reshape(shape)
            pending, collected = None, []

        for line_no, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if fields[0] == "meta":
                flush()
                if len(fields) != 3:
                    raise MalformedRow(f"{path}:{line_no}: bad meta line")
                meta[fields[1]] = fields[2]
            elif fields[0] == "tensor":
                flush()
                if len(fields) != 3:
                    raise MalformedRow(f"{path}:{line_no}: bad tensor header")
                try:
                    shape = tuple(int(d) for d in fields[2].split(","))
                except ValueError:
                    raise MalformedRow(
                        f"{path}:{line_no}: bad tensor shape "
                        f"{fields[2]!r}") from None
                pending = (fields[1], shape)
            else:
                if pending is None:
                    raise MalformedRow(
                        f"{path}:{line_no}: data outside any tensor")
                width = pending[1][-1]
                if len(fields) != width:
                    raise MalformedRow(
                        f"{path}:{line_no}: {len(fields)} values, "
                        f"expected {width}")
                collected.append(
                    [_parse_float(t, path, line_no) for t in fields])
        flush()
    return meta, tensors


# ---------------------------------------------------------------------------
# heatmaps

_VIRIDIS_ANCHORS = (
    (68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37),
)
_MISSING_RGB = (128, 128, 128)
_DISC_TARGET_PX = 6
_MAX_IMAGE_DIM = 4096


def color_ramp() -> np.ndarray:
    """256 x 3 uint8 ramp, linear interpolation between fixed anchors."""
    out = np.empty((256, 3), dtype=np.uint8)
    n_seg = len(_VIRIDIS_ANCHORS) - 1
    for i in range(256):
        t = i / 255.0 * n_seg
        k = min(int(t), n_seg - 1)
        frac = t - k
        lo = _VIRIDIS_ANCHORS[k]
        hi = _VIRIDIS_ANCHORS[k + 1]
        for c in range(3):
            out[i, c] = int(round(lo[c] + (hi[c] - lo[c]) * frac))
    return out


def write_heatmap(ppm_path, spots: Sequence[SpotRecord], values: np.ndarray,
                  missing: np.ndarray | None = None) -> tuple[Path, Path]:
    """Render one gene map as colored discs at the spots' pixel positions.

    Writes a binary PPM and a same-named CSV with the plotted values.
    Spots with missing=True are drawn gray and get an empty CSV cell.
    Returns (ppm_path, csv_path).
    """
    ppm_path = Path(ppm_path)
    csv_path = ppm_path.with_suffix(".csv")
    spots = list(spots)
    n = len(spots)
    if n == 0:
        raise EmptySlide("heatmap over zero spots")
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (n,):
        raise ShapeMismatch(f"heatmap needs {n} values, got {values.shape}")
    if missing is None:
        missing = np.zeros(n, dtype=np.bool_)
    else:
        missing = np.asarray(missing, dtype=np.bool_)
        if missing.shape != (n,):
            raise ShapeMismatch("missing flags must match spot count")

    xs = np.array([s.pixel_x for s in spots])
    ys = np.array([s.pixel_y for s in spots])
    if n > 1:
        diff = np.hypot(xs[:, None] - xs[None, :], ys[:, None] - ys[None, :])
        np.fill_diagonal(diff, np.inf)
        dmin = float(diff.min())
        if dmin <= 0.0:
            raise ValidationError("two spots share a pixel position")
        scale = 2.0 * _DISC_TARGET_PX / dmin
    else:
        scale = 1.0
    extent = max(float(xs.max() - xs.min()), float(ys.max() - ys.min()), 1.0)
    if extent * scale > _MAX_IMAGE_DIM:
        scale = _MAX_IMAGE_DIM / extent
    if n > 1:
        radius = max(1, int(round(dmin * scale / 2.0)))
    else:
        radius = _DISC_TARGET_PX
    margin = radius + 2

    width = int(math.ceil((xs.max() - xs.min()) * scale)) + 2 * margin + 1
    height = int(math.ceil((ys.max() - ys.min()) * scale)) + 2 * margin + 1
    img = np.full((height, width, 3), 255, dtype=np.uint8)

    present = ~missing
    if present.any():
        vmin = float(values[present].min())
        vmax = float(values[present].max())
    else:
        vmin = vmax = 0.0
    span = vmax - vmin
    ramp = color_ramp()

    dy = np.arange(-radius, radius + 1)
    dx = np.arange(-radius, radius + 1)
    disc = (dy[:, None] ** 2 + dx[None, :] ** 2) <= radius ** 2

    for i in range(n):
        cx = margin + int(round((xs[i] - xs.min()) * scale))
        cy = margin + int(round((ys[i] - ys.min()) * scale))
        if missing[i]:
            rgb = np.array(_MISSING_RGB, dtype=np.uint8)
        else:
            t = 0.5 if span == 0.0 else (values[i] - vmin) / span
            idx = min(255, max(0, int(round(t * 255.0))))
            rgb = ramp[idx]
        y0, y1 = cy - radius, cy + radius + 1
        x0, x1 = cx - radius, cx + radius + 1
        tile = img[y0:y1, x0:x1]
        tile[disc] = rgb

    with _open_write(ppm_path, binary=True) as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())

    with _open_write(csv_path) as fh:
        fh.write(f"#format_version={FORMAT_VERSION}\n#kind=heatmap_grid\n")
        fh.write("spot_id,array_row,array_col,pixel_x,pixel_y,value\n")
        for i, s in enumerate(spots):
            val = "" if missing[i] else fmt_float(values[i])
            fh.write(f"{s.spot_id},{s.array_row},{s.array_col},"
                     f"{fmt_float(s.pixel_x)},{fmt_float(s.pixel_y)},{val}\n")
    return ppm_path, csv_path
