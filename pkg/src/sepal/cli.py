"""Command line front end for the pipeline.

Each subcommand is a thin wrapper over one library module and writes its
outputs into a stage directory under the run directory given by --out:

    preprocess/   filtered, normalized, log-space expression
    denoise/      imputed expression plus the imputation masks
    select/       autocorrelation ranking and the reduced gene panel
    graphs/       neighborhood summary and graph-construction settings
    train/        checkpoints, training histories, the train-mean vector
    eval/         metric tables and per-slide predictions
    figures/      correlation histogram and example heatmaps

Every run writes the fully resolved configuration to a config.tsv next
to its outputs, so a run can be reproduced from the lockfile alone.
Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, ingest, metrics, preprocess, spatial, synth
from . import denoise as denoise_mod
from . import graphs as graphs_mod
from . import train as train_mod
from .core import (
    DatasetManifest,
    EmptySplit,
    ExpressionMatrix,
    GEOMETRIES,
    ImputationMask,
    IoFailure,
    PipelineError,
    SpotSetMismatch,
    StageOrderViolation,
    TrainMeanVector,
    ValidationError,
    align_slide,
    validate_dataset,
)
from .graphs import AGGREGATIONS
from .nn import ModelSpec, OPERATORS, POOLINGS
from .train import TrainConfig

PRESETS = {
    "stnet-like": {
        "hops": 1, "aggregation": "sum", "operator": "graphconv",
        "pre_mlp": (), "hidden": (256,), "post_mlp": (),
        "lr": 1e-4, "batch": 256,
    },
    "visium-like": {
        "hops": 3, "aggregation": "concat", "operator": "gcn",
        "pre_mlp": (512,), "hidden": (256, 128), "post_mlp": (256,),
        "lr": 1e-5, "batch": 256,
    },
}

THREADS_ENV = "SEPAL_THREADS"


class _Parser(argparse.ArgumentParser):
    """Argument errors are validation failures, not I/O failures."""

    def error(self, message):
        raise ValidationError(message)


def _widths(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    try:
        out = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ValidationError(f"bad width list {text!r}") from None
    if any(w < 1 for w in out):
        raise ValidationError(f"widths must be positive, got {text!r}")
    return out


def _fmt_widths(widths) -> str:
    return ",".join(str(w) for w in widths)


def _resolve_threads(args) -> int:
    raw = args.threads
    if raw is None:
        raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except (TypeError, ValueError):
        raise ValidationError(f"bad thread count {raw!r}") from None
    if n < 1:
        raise ValidationError("thread count must be positive")
    return n


def _from_preset(args, key, fallback):
    """Explicit flag wins, then the preset, then the fallback."""
    value = getattr(args, key.replace("-", "_"))
    if value is not None:
        return value
    if args.preset is not None:
        return PRESETS[args.preset][key]
    return fallback


def _write_lock(outdir: Path, command: str, pairs: dict,
                name: str = "config.tsv") -> None:
    rows = [("command", command), ("version", __version__)]
    rows += sorted(pairs.items())
    ingest.write_table(outdir / name, "config", ("key", "value"), rows)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise StageOrderViolation(
            f"missing {path}; run `sepal {producer}` first")
    return path


def _manifest(args) -> DatasetManifest:
    return ingest.read_manifest(args.manifest)


def _spots_for(entry, spot_ids) -> list:
    """Coordinate records reordered to a matrix's row order."""
    by_id = {s.spot_id: s for s in ingest.read_coordinates(entry.coords_path)}
    missing = [sid for sid in spot_ids if sid not in by_id]
    if missing:
        raise SpotSetMismatch(
            f"spot {missing[0]!r} of slide {entry.slide_id!r} has no "
            f"coordinates")
    return [by_id[sid] for sid in spot_ids]


def _embedding_rows(entry, spot_ids) -> np.ndarray:
    table = ingest.read_embeddings(entry.emb_path)
    return table.vectors[table.rows_for(spot_ids)]


def _read_stage_matrix(path: Path, want_stage: str, producer: str
                       ) -> ExpressionMatrix:
    _require(path, producer)
    m = ingest.read_expression(path, default_stage=want_stage)
    if m.stage != want_stage:
        raise StageOrderViolation(
            f"{path} carries stage {m.stage!r}, expected {want_stage!r}; "
            f"run `sepal {producer}` first")
    return m


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    cfg = synth.SynthConfig(
        grid_rows=args.rows, grid_cols=args.cols, d_emb=args.d_emb,
        n_genes=args.genes, n_smooth=args.smooth, noise_sd=args.noise_sd,
        zero_fraction=args.zero_fraction,
        field_amplitude=args.field_amplitude, geometry=args.geometry,
        n_slides=args.slides, n_select=args.n_select, counts=args.counts,
        seed=args.seed)
    dataset = synth.generate_dataset(cfg)
    out = Path(args.out)
    manifest_path = synth.write_dataset(dataset, out)
    _write_lock(out, "synth", {
        "rows": cfg.grid_rows, "cols": cfg.grid_cols, "d_emb": cfg.d_emb,
        "genes": cfg.n_genes, "smooth": cfg.n_smooth,
        "noise_sd": cfg.noise_sd, "zero_fraction": cfg.zero_fraction,
        "field_amplitude": cfg.field_amplitude, "geometry": cfg.geometry,
        "slides": cfg.n_slides,
        "n_select": "" if cfg.n_select is None else cfg.n_select,
        "counts": cfg.counts, "seed": cfg.seed,
        "threads": _resolve_threads(args),
    })
    print(manifest_path)


def cmd_preprocess(args) -> None:
    manifest = _manifest(args)
    parts = ingest.load_dataset(manifest)
    validate_dataset(manifest, parts)
    aligned = [align_slide(*parts[e.slide_id]) for e in manifest.slides]
    matrices = [s.expression for s in aligned]

    stage = matrices[0].stage
    log_rows = []
    if stage == "raw_counts":
        thresholds = preprocess.FilterThresholds.from_manifest(manifest)
        filtered, count_log = preprocess.filter_by_counts(
            matrices, thresholds)
        for kind, slide, item, total in count_log:
            log_rows.append((kind, slide, item, total, ""))
        kept, sparsity_log = preprocess.filter_by_sparsity(
            filtered, manifest.eps_total, manifest.eps_wsi)
        for gene, scope, pct, threshold in sparsity_log:
            log_rows.append(("gene_sparsity", scope, gene, pct, threshold))
        filtered = preprocess.apply_gene_subset(filtered, kept)
        out_matrices = [preprocess.log_transform(preprocess.tpm_normalize(m))
                        for m in filtered]
    elif stage == "log1p":
        # already log-space: only the sparsity rule still applies
        kept, sparsity_log = preprocess.filter_by_sparsity(
            matrices, manifest.eps_total, manifest.eps_wsi)
        for gene, scope, pct, threshold in sparsity_log:
            log_rows.append(("gene_sparsity", scope, gene, pct, threshold))
        out_matrices = preprocess.apply_gene_subset(matrices, kept)
    else:
        raise StageOrderViolation(
            f"preprocess expects raw_counts or log1p input, got {stage!r}")

    outdir = Path(args.out) / "preprocess"
    outdir.mkdir(parents=True, exist_ok=True)
    for m in out_matrices:
        ingest.write_expression(outdir / f"{m.slide_id}_log1p.tsv", m)
    ingest.write_table(outdir / "filter_log.tsv", "filter_log",
                       ("kind", "scope", "item_id", "value", "threshold"),
                       log_rows)
    _write_lock(outdir, "preprocess", {
        "manifest": str(args.manifest),
        "input_stage": stage,
        "eps_total": manifest.eps_total,
        "eps_wsi": manifest.eps_wsi,
        "count_min_spot": manifest.count_min_spot,
        "count_max_spot": manifest.count_max_spot,
        "count_min_gene": manifest.count_min_gene,
        "count_max_gene": manifest.count_max_gene,
        "threads": _resolve_threads(args),
    })
    print(f"preprocess: {len(out_matrices)} slides, "
          f"{out_matrices[0].values.shape[1]} genes kept")


def cmd_denoise(args) -> None:
    manifest = _manifest(args)
    pre = Path(args.out) / "preprocess"
    matrices, spot_lists = [], []
    for entry in manifest.slides:
        m = _read_stage_matrix(pre / f"{entry.slide_id}_log1p.tsv",
                               "log1p", "preprocess")
        matrices.append(m)
        spot_lists.append(_spots_for(entry, m.spot_ids))

    denoised, masks, reports, pooled = denoise_mod.denoise_dataset(
        matrices, spot_lists)
    if args.center_slides:
        denoised = preprocess.center_per_slide(denoised)

    outdir = Path(args.out) / "denoise"
    outdir.mkdir(parents=True, exist_ok=True)
    for m, mask in zip(denoised, masks):
        ingest.write_expression(outdir / f"{m.slide_id}_denoised.tsv", m)
        ingest.write_mask(outdir / f"{m.slide_id}_mask.tsv", mask)
    rows = [(r.slide_id, r.n_cells, r.n_zero, r.n_imputed, r.n_fallback,
             r.imputed_fraction, len(r.genes_nothing_to_impute))
            for r in reports]
    rows.append(("*", sum(r.n_cells for r in reports),
                 sum(r.n_zero for r in reports),
                 sum(r.n_imputed for r in reports),
                 sum(r.n_fallback for r in reports), pooled,
                 sum(len(r.genes_nothing_to_impute) for r in reports)))
    ingest.write_table(outdir / "report.tsv", "denoise_report",
                       ("slide_id", "n_cells", "n_zero", "n_imputed",
                        "n_fallback", "imputed_fraction", "n_empty_genes"),
                       rows)
    _write_lock(outdir, "denoise", {
        "manifest": str(args.manifest),
        "center_slides": args.center_slides,
        "threads": _resolve_threads(args),
    })
    print(f"denoise: imputed fraction {pooled:.4f} over "
          f"{len(denoised)} slides")


def cmd_select(args) -> None:
    manifest = _manifest(args)
    den = Path(args.out) / "denoise"
    matrices, adjacencies, spot_lists = [], [], []
    for entry in manifest.slides:
        m = _read_stage_matrix(den / f"{entry.slide_id}_denoised.tsv",
                               "denoised", "denoise")
        spots = _spots_for(entry, m.spot_ids)
        matrices.append(m)
        spot_lists.append(spots)
        adjacencies.append(spatial.build_adjacency(spots,
                                                   manifest.geometry))
    n_genes = args.n_genes if args.n_genes is not None \
        else manifest.n_genes_select
    selected, scores = spatial.select_genes(matrices, adjacencies, n_genes)

    outdir = Path(args.out) / "select"
    outdir.mkdir(parents=True, exist_ok=True)
    subset = preprocess.apply_gene_subset(matrices, selected)
    for m in subset:
        ingest.write_expression(outdir / f"{m.slide_id}_selected.tsv", m)
    for entry, m in zip(manifest.slides, matrices):
        mask = ingest.read_mask(den / f"{entry.slide_id}_mask.tsv")
        idx = [mask.gene_ids.index(g) for g in selected]
        ingest.write_mask(
            outdir / f"{entry.slide_id}_mask.tsv",
            ImputationMask(mask.slide_id, tuple(selected), mask.spot_ids,
                           mask.values[:, idx]))
    ingest.write_table(outdir / "genes.tsv", "gene_scores",
                       ("gene_id", "mean_score", "selected"),
                       [(s.gene_id, s.mean_score, s.selected)
                        for s in scores])
    _write_lock(outdir, "select", {
        "manifest": str(args.manifest),
        "n_genes": n_genes,
        "geometry": manifest.geometry,
        "threads": _resolve_threads(args),
    })
    print(f"select: kept {len(selected)} of {len(scores)} genes")


def _slide_for_graphs(entry, matrix: ExpressionMatrix):
    spots = ingest.read_coordinates(entry.coords_path)
    emb = ingest.read_embeddings(entry.emb_path)
    return align_slide(spots, matrix, emb)


def cmd_build_graphs(args) -> None:
    manifest = _manifest(args)
    sel = Path(args.out) / "select"
    hops = _from_preset(args, "hops", 1)
    aggregation = _from_preset(args, "aggregation", "sum")
    if hops < 1:
        raise ValidationError("hops must be positive")
    if aggregation not in AGGREGATIONS:
        raise ValidationError(f"unknown aggregation {aggregation!r}")

    rows = []
    width = None
    for entry in manifest.slides:
        m = _read_stage_matrix(sel / f"{entry.slide_id}_selected.tsv",
                               "denoised", "select")
        slide = _slide_for_graphs(entry, m)
        adjacency = spatial.build_adjacency(slide.spots, manifest.geometry)
        built = graphs_mod.build_spot_graphs(slide, adjacency, hops,
                                             aggregation)
        width = built[0].features.shape[1]
        for g in built:
            rows.append((entry.slide_id, g.center_spot_id,
                         len(g.nodes), g.edges.shape[0]))

    outdir = Path(args.out) / "graphs"
    outdir.mkdir(parents=True, exist_ok=True)
    ingest.write_table(outdir / "summary.tsv", "graph_summary",
                       ("slide_id", "spot_id", "n_nodes", "n_edges"), rows)
    ingest.write_table(outdir / "meta.tsv", "graphs_meta",
                       ("key", "value"),
                       [("aggregation", aggregation),
                        ("feature_width", width),
                        ("hops", hops)])
    _write_lock(outdir, "build-graphs", {
        "manifest": str(args.manifest),
        "hops": hops,
        "aggregation": aggregation,
        "preset": args.preset or "",
        "threads": _resolve_threads(args),
    })
    print(f"build-graphs: {len(rows)} graphs, hops={hops}, "
          f"aggregation={aggregation}")


def _graphs_meta(out: Path) -> dict:
    path = _require(Path(out) / "graphs" / "meta.tsv", "build-graphs")
    _, _, rows = ingest.read_table(path)
    return {r[0]: r[1] for r in rows}


def _load_split_data(manifest, out: Path):
    """Selected matrices, masks, spots, and embeddings per slide."""
    sel = Path(out) / "select"
    data = {}
    for entry in manifest.slides:
        m = _read_stage_matrix(sel / f"{entry.slide_id}_selected.tsv",
                               "denoised", "select")
        mask = ingest.read_mask(sel / f"{entry.slide_id}_mask.tsv")
        data[entry.slide_id] = (entry, m, mask)
    return data


def _stack_split(manifest, data, split, field):
    """Concatenate one per-slide field over a split, manifest order."""
    out = [field(data[e.slide_id]) for e in manifest.slides
           if e.split == split]
    return out


def _train_common(args):
    manifest = _manifest(args)
    out = Path(args.out)
    data = _load_split_data(manifest, out)
    gene_ids = next(iter(data.values()))[1].gene_ids
    splits = {e.slide_id: e.split for e in manifest.slides}
    return manifest, out, data, gene_ids, splits


def _train_config(args, lr_fallback: float) -> TrainConfig:
    lr = _from_preset(args, "lr", lr_fallback)
    batch = _from_preset(args, "batch", 256)
    return TrainConfig(learning_rate=lr, batch_size=batch,
                       max_epochs=args.epochs, patience=args.patience,
                       seed=args.seed, max_steps=args.max_steps)


def _write_history(path, history) -> None:
    ingest.write_table(path, "history",
                       ("epoch", "train_mse", "val_mse", "wall_seconds"),
                       [(r.epoch, r.train_mse, r.val_mse, r.wall_seconds)
                        for r in history])


def cmd_train(args) -> None:
    manifest, out, data, gene_ids, splits = _train_common(args)
    matrices = [data[e.slide_id][1] for e in manifest.slides]
    train_dir = out / "train"
    train_dir.mkdir(parents=True, exist_ok=True)

    if args.stage == 1:
        mean = preprocess.compute_train_mean(matrices, splits)
        deltas = {m.slide_id: preprocess.to_delta(m, mean).values
                  for m in matrices}
        embs = {e.slide_id: _embedding_rows(e, data[e.slide_id][1].spot_ids)
                for e in manifest.slides}

        def gather(split):
            xs = [embs[e.slide_id] for e in manifest.slides
                  if e.split == split]
            ys = [deltas[e.slide_id] for e in manifest.slides
                  if e.split == split]
            if not xs:
                return None, None
            return np.vstack(xs), np.vstack(ys)

        x_train, y_train = gather("train")
        if x_train is None:
            raise EmptySplit("no train-split slides in the manifest")
        x_val, y_val = gather("val")
        cfg = _train_config(args, 1e-3)
        result = train_mod.stage1_train(x_train, y_train, x_val, y_val, cfg)
        train_mod.save_stage1_checkpoint(train_dir / "stage1.ckpt", result,
                                         gene_ids, cfg.seed)
        _write_history(train_dir / "stage1_history.tsv", result.history)
        ingest.write_table(train_dir / "train_mean.tsv", "train_mean",
                           ("gene_id", "mean"),
                           list(zip(mean.gene_ids, mean.means)))
        _write_lock(train_dir, "train", {
            "manifest": str(args.manifest), "stage": 1,
            "lr": cfg.learning_rate, "batch": cfg.batch_size,
            "epochs": cfg.max_epochs, "patience": cfg.patience,
            "seed": cfg.seed,
            "max_steps": "" if cfg.max_steps is None else cfg.max_steps,
            "threads": _resolve_threads(args),
        }, name="stage1_config.tsv")
        val_txt = ("none" if result.best_val_mse is None
                   else f"{result.best_val_mse:.6f}")
        print(f"train stage 1: {result.n_steps} steps, "
              f"best val MSE {val_txt}")
        return

    # stage 2
    head_w, head_b, ckpt_genes = train_mod.load_stage1_checkpoint(
        _require(train_dir / "stage1.ckpt", "train --stage 1"))
    if ckpt_genes != gene_ids:
        raise ValidationError(
            "stage-1 checkpoint gene panel does not match select outputs")
    mean = _read_train_mean(train_dir, gene_ids)
    meta = _graphs_meta(out)
    hops = int(meta["hops"])
    aggregation = meta["aggregation"]

    graph_lists, delta_hats, targets = {}, {}, {}
    for entry in manifest.slides:
        if entry.split not in ("train", "val"):
            continue
        m = data[entry.slide_id][1]
        slide = _slide_for_graphs(entry, m)
        adjacency = spatial.build_adjacency(slide.spots, manifest.geometry)
        graph_lists[entry.slide_id] = graphs_mod.build_spot_graphs(
            slide, adjacency, hops, aggregation)
        x = _embedding_rows(entry, m.spot_ids)
        delta_hats[entry.slide_id] = train_mod.linear_prediction(
            x, head_w, head_b)
        targets[entry.slide_id] = preprocess.to_delta(m, mean).values

    def gather(split):
        gs, dh, tg = [], [], []
        for e in manifest.slides:
            if e.split != split or e.slide_id not in graph_lists:
                continue
            gs.extend(graph_lists[e.slide_id])
            dh.append(delta_hats[e.slide_id])
            tg.append(targets[e.slide_id])
        if not gs:
            return None, None, None
        return gs, np.vstack(dh), np.vstack(tg)

    train_graphs, dh_train, y_train = gather("train")
    if train_graphs is None:
        raise EmptySplit("no train-split slides in the manifest")
    val_graphs, dh_val, y_val = gather("val")

    in_width = train_graphs[0].features.shape[1]
    n_genes = len(gene_ids)
    pre = _from_preset(args, "pre_mlp", ())
    hidden = list(_from_preset(args, "hidden", (256,)))
    post = list(_from_preset(args, "post_mlp", ()))
    # the network's last layer always maps onto the gene panel
    if post:
        post[-1] = n_genes
    else:
        hidden[-1] = n_genes
    spec = ModelSpec(
        in_width=in_width, n_genes=n_genes, pre_widths=tuple(pre),
        operator=_from_preset(args, "operator", "graphconv"),
        gnn_widths=tuple(hidden), pooling=args.pooling,
        sag_ratio=args.sag_ratio, post_widths=tuple(post))
    cfg = _train_config(args, 1e-4)
    result = train_mod.stage2_train(train_graphs, dh_train, y_train,
                                    val_graphs, dh_val, y_val, spec, cfg)
    train_mod.save_stage2_checkpoint(train_dir / "stage2.ckpt", head_w,
                                     head_b, result.state, gene_ids, hops,
                                     aggregation)
    _write_history(train_dir / "stage2_history.tsv", result.history)
    _write_lock(train_dir, "train", {
        "manifest": str(args.manifest), "stage": 2,
        "hops": hops, "aggregation": aggregation,
        "operator": spec.operator,
        "pre_mlp": _fmt_widths(spec.pre_widths),
        "hidden": _fmt_widths(spec.gnn_widths),
        "post_mlp": _fmt_widths(spec.post_widths),
        "pooling": spec.pooling, "sag_ratio": spec.sag_ratio,
        "preset": args.preset or "",
        "lr": cfg.learning_rate, "batch": cfg.batch_size,
        "epochs": cfg.max_epochs, "patience": cfg.patience,
        "seed": cfg.seed,
        "max_steps": "" if cfg.max_steps is None else cfg.max_steps,
        "threads": _resolve_threads(args),
    }, name="stage2_config.tsv")
    initial = result.initial_val_mse
    best = result.best_val_mse
    print("train stage 2: "
          f"{result.n_steps} steps, initial val MSE "
          f"{'none' if initial is None else f'{initial:.6f}'}, best "
          f"{'none' if best is None else f'{best:.6f}'}")


def _read_train_mean(train_dir: Path, gene_ids) -> TrainMeanVector:
    path = _require(train_dir / "train_mean.tsv", "train --stage 1")
    _, _, rows = ingest.read_table(path)
    got = tuple(r[0] for r in rows)
    if got != tuple(gene_ids):
        raise ValidationError(
            "train_mean.tsv gene panel does not match select outputs")
    return TrainMeanVector(got, np.array([float(r[1]) for r in rows]))


def _load_model(train_dir: Path):
    stage2 = train_dir / "stage2.ckpt"
    if stage2.exists():
        return train_mod.load_stage2_checkpoint(stage2)
    stage1 = _require(train_dir / "stage1.ckpt", "train --stage 1")
    w, b, genes = train_mod.load_stage1_checkpoint(stage1)
    return train_mod.TrainedModel(genes, w, b, None, 1, "sum")


def _test_predictions(manifest, out: Path, data, model, mean):
    """Per-test-slide (slide_id, pred, truth, mask_values, spots)."""
    results = []
    for entry in manifest.slides:
        if entry.split != "test":
            continue
        m = data[entry.slide_id][1]
        mask = data[entry.slide_id][2]
        x = _embedding_rows(entry, m.spot_ids)
        if model.state is not None:
            slide = _slide_for_graphs(entry, m)
            adjacency = spatial.build_adjacency(slide.spots,
                                                manifest.geometry)
            gs = graphs_mod.build_spot_graphs(slide, adjacency, model.hops,
                                              model.aggregation)
        else:
            gs = None
        pred = train_mod.predict_expression(model, x, gs, mean.means)
        spots = _spots_for(entry, m.spot_ids)
        results.append((entry.slide_id, pred, m, mask, spots))
    if not results:
        raise EmptySplit("no test-split slides in the manifest")
    return results


def cmd_eval(args) -> None:
    manifest, out, data, gene_ids, _ = _train_common(args)
    train_dir = out / "train"
    model = _load_model(train_dir)
    if model.gene_ids != gene_ids:
        raise ValidationError(
            "checkpoint gene panel does not match select outputs")
    mean = _read_train_mean(train_dir, gene_ids)
    results = _test_predictions(manifest, out, data, model, mean)

    eval_dir = out / "eval"
    pred_dir = eval_dir / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)

    per_slide_rows = []
    preds, truths, masks, spot_ids = [], [], [], []
    for slide_id, pred, m, mask, _ in results:
        # truth in delta-free space: the denoised matrix itself
        ingest.write_expression(
            pred_dir / f"{slide_id}_pred.tsv",
            ExpressionMatrix(slide_id, gene_ids, m.spot_ids, pred,
                             "denoised"))
        rep = metrics.evaluate(pred, m.values, mask.values, gene_ids,
                               m.spot_ids)
        per_slide_rows.append(
            (slide_id, rep.mse, rep.mae, rep.pcc_gene, rep.pcc_patch,
             rep.r2_gene, rep.r2_patch, rep.n_excluded_genes,
             rep.n_excluded_patches, rep.n_masked))
        preds.append(pred)
        truths.append(m.values)
        masks.append(mask.values)
        spot_ids.extend(f"{slide_id}:{sid}" for sid in m.spot_ids)

    pooled = metrics.evaluate(np.vstack(preds), np.vstack(truths),
                              np.vstack(masks), gene_ids, spot_ids)
    metrics.write_metrics_table(eval_dir / "metrics.tsv", pooled)
    metrics.write_per_gene_table(eval_dir / "per_gene.tsv", pooled)
    metrics.write_per_patch_table(eval_dir / "per_patch.tsv", pooled)
    ingest.write_table(eval_dir / "per_slide.tsv", "per_slide",
                       ("slide_id", "mse", "mae", "pcc_gene", "pcc_patch",
                        "r2_gene", "r2_patch", "n_excluded_genes",
                        "n_excluded_patches", "n_masked"),
                       per_slide_rows)
    _write_lock(eval_dir, "eval", {
        "manifest": str(args.manifest),
        "model": "stage2" if model.state is not None else "stage1",
        "threads": _resolve_threads(args),
    })
    print(f"eval: MSE {pooled.mse:.6f}, MAE {pooled.mae:.6f}, "
          f"PCC-Gene {pooled.pcc_gene:.4f}")


def cmd_figures(args) -> None:
    manifest, out, data, gene_ids, _ = _train_common(args)
    eval_dir = out / "eval"
    _require(eval_dir / "metrics.tsv", "eval")
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)

    preds, truths, masks = [], [], []
    per_slide = []
    for entry in manifest.slides:
        if entry.split != "test":
            continue
        m = data[entry.slide_id][1]
        mask = data[entry.slide_id][2]
        pred = ingest.read_expression(
            _require(eval_dir / "predictions" /
                     f"{entry.slide_id}_pred.tsv", "eval"))
        if pred.spot_ids != m.spot_ids or pred.gene_ids != gene_ids:
            raise ValidationError(
                f"predictions for {entry.slide_id!r} are not aligned")
        spots = _spots_for(entry, m.spot_ids)
        per_slide.append((entry.slide_id, pred.values, m, mask, spots))
        preds.append(pred.values)
        truths.append(m.values)
        masks.append(mask.values)
    if not per_slide:
        raise EmptySplit("no test-split slides in the manifest")

    pooled = metrics.evaluate(np.vstack(preds), np.vstack(truths),
                              np.vstack(masks), gene_ids)
    written = []
    with open(fig_dir / "pcc_hist.csv", "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("bin_left,bin_right,count\n")
        for left, right, count in metrics.pcc_histogram(pooled):
            fh.write(f"{ingest.fmt_float(left)},"
                     f"{ingest.fmt_float(right)},{count}\n")
    written.append(fig_dir / "pcc_hist.csv")
    for slide_id, pred, m, mask, spots in per_slide:
        rep = metrics.evaluate(pred, m.values, mask.values, gene_ids,
                               m.spot_ids)
        written += metrics.emit_figures(rep, pred, m.values, mask.values,
                                        spots, fig_dir / slide_id)
    _write_lock(fig_dir, "figures", {
        "manifest": str(args.manifest),
        "threads": _resolve_threads(args),
    })
    print(f"figures: wrote {len(written)} files under {fig_dir}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="sepal", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", required=True,
                       help="dataset manifest path")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--threads", default=None,
                       help=f"worker count (default ${THREADS_ENV} or 1); "
                            "results are identical for any value")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=20)
    p.add_argument("--cols", type=int, default=20)
    p.add_argument("--d-emb", type=int, default=16)
    p.add_argument("--genes", type=int, default=32)
    p.add_argument("--smooth", type=int, default=8)
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--zero-fraction", type=float, default=0.0)
    p.add_argument("--field-amplitude", type=float, default=0.5)
    p.add_argument("--geometry", choices=("square_grid", "hex_array"),
                   default="square_grid")
    p.add_argument("--slides", type=int, default=3)
    p.add_argument("--n-select", type=int, default=None)
    p.add_argument("--counts", action="store_true",
                   help="emit raw counts instead of log-space values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter, normalize, log-transform")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("denoise", help="impute zeros in every gene map")
    common(p)
    p.add_argument("--center-slides", action="store_true",
                   help="subtract each slide's per-gene mean afterwards")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("select", help="rank genes by spatial "
                                      "autocorrelation and keep the top n")
    common(p)
    p.add_argument("--n-genes", type=int, default=None,
                   help="override the manifest's n_genes_select")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("build-graphs", help="assemble per-spot neighborhood "
                                            "graphs")
    common(p)
    p.add_argument("--hops", type=int, default=None)
    p.add_argument("--aggregation", choices=AGGREGATIONS, default=None)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("train", help="fit the linear head (stage 1) or the "
                                     "graph correction (stage 2)")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--operator", choices=OPERATORS, default=None)
    p.add_argument("--pooling", choices=POOLINGS, default="sag_mean")
    p.add_argument("--sag-ratio", type=float, default=0.5)
    p.add_argument("--pre-mlp", type=_widths, default=None,
                   help="comma-separated widths, empty for none")
    p.add_argument("--hidden", type=_widths, default=None)
    p.add_argument("--post-mlp", type=_widths, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="masked metrics on the test split")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("figures", help="correlation histogram and heatmaps")
    common(p)
    p.set_defaults(func=cmd_figures)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if hasattr(args, "threads"):
            args.threads = _resolve_threads(args)
        args.func(args)
    except IoFailure as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
