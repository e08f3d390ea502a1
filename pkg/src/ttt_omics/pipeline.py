"""End-to-end pipeline commands behind the CLI.

Each command reads the declarative config, does one batch step of the
workflow, and writes its outputs under the configured output directory:

  synth       -> rna/ adt/ (Matrix Market triples), labels.csv, annotation TSVs
  preprocess  -> normalized matrices in sorted token order, ordering
                 manifests, provenance.json
  train       -> stageN.ckpt + loss_stageN.csv
  embed       -> embeddings.csv (cell_id, e0..e{d-1})
  evaluate    -> metrics.json (the ten-metric battery) + clusters.csv

All outputs are deterministic given the same config and seed: reruns are
byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import cluster as cl
from . import data
from . import embedding as emb
from .config import PipelineConfig
from .errors import ConfigError
from .model import FusionModel
from .training import PairedDataset, run_stage

_EMBED_BATCH = 64


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.data.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: str | Path, what: str) -> Path:
    if not str(path):
        raise ConfigError(f"config does not set a path for {what}")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _fmt(x: float) -> str:
    return np.format_float_positional(np.float64(x), trim="0")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: PipelineConfig) -> dict[str, Path]:
    """Generate a paired synthetic dataset in the loader's own formats."""
    out = _out_dir(cfg)
    s = cfg.synth
    rna, adt, labels = data.generate_synthetic(s.n_cells, s.n_genes, s.n_proteins,
                                               s.n_classes, s.separation, s.seed)
    order_rows, protein_map, lengths = data.synthetic_annotations(
        rna.feature_names, adt.feature_names, s.seed)

    data.write_matrix_market(rna, out / "rna")
    data.write_matrix_market(adt, out / "adt")
    data.write_labels_csv(rna.cell_ids, [f"class_{k}" for k in labels], out / "labels.csv")
    data.write_gene_order_tsv(order_rows, out / "gene_order.tsv")
    data.write_protein_map_tsv(protein_map, out / "protein_map.tsv")
    data.write_gene_lengths_tsv(lengths, out / "gene_lengths.tsv")
    return {"rna": out / "rna", "adt": out / "adt", "labels": out / "labels.csv",
            "gene_order": out / "gene_order.tsv", "protein_map": out / "protein_map.tsv",
            "gene_lengths": out / "gene_lengths.tsv"}


# ---------------------------------------------------------------------------
# preprocess


def _ordering_manifest(ordering: emb.FeatureOrdering, input_names: list[str]) -> dict:
    return {
        "input_names": input_names,
        "sorted_names": ordering.sorted_names,
        "permutation": ordering.permutation.tolist(),
        "unmapped_count": ordering.unmapped_count,
    }


def cmd_preprocess(cfg: PipelineConfig) -> dict[str, Path]:
    """Normalize, select genes, sort features; write matrices in token order."""
    rna_path = _require(cfg.data.rna, "RNA matrix")
    adt_path = _require(cfg.data.adt, "ADT matrix")
    order_path = _require(cfg.data.gene_order, "gene order table")
    map_path = _require(cfg.data.protein_map, "protein map")
    lengths = None
    if cfg.data.gene_lengths:
        lengths = data.load_gene_lengths(_require(cfg.data.gene_lengths, "gene length table"))
    out = _out_dir(cfg)

    rna = data.load_matrix(rna_path, "RNA")
    adt = data.load_matrix(adt_path, "ADT")
    rna_n = data.rna_normalize(rna, lengths, log_transform=cfg.data.log1p)
    rna_n = data.select_hvg(rna_n, cfg.data.n_top_genes)
    adt_n = data.clr_normalize(adt, cfg.data.pseudocount)
    if rna_n.cell_ids != adt_n.cell_ids:
        dropped = set(rna.cell_ids) - set(rna_n.cell_ids)
        keep = [cid not in dropped for cid in adt_n.cell_ids]
        adt_n = data.ExpressionMatrix(adt_n.values[np.asarray(keep)],
                                      adt_n.feature_names,
                                      [cid for cid, k in zip(adt_n.cell_ids, keep) if k],
                                      "ADT", normalized=True)

    table = emb.load_gene_order(order_path)
    protein_map = emb.load_protein_map(map_path)
    rna_ordering = emb.sort_features(rna_n.feature_names, table,
                                     mode=cfg.model.order_mode, seed=cfg.model.seed)
    if cfg.model.order_mode == "shuffled":
        adt_ordering = emb.sort_features(adt_n.feature_names, table,
                                         mode="shuffled", seed=cfg.model.seed + 1)
    else:
        adt_ordering = emb.sort_proteins(adt_n.feature_names, protein_map, table)
        if cfg.model.order_mode == "reverse":
            n = adt_ordering.n_features
            adt_ordering = emb.FeatureOrdering(
                permutation=n - 1 - adt_ordering.permutation,
                unmapped_count=adt_ordering.unmapped_count,
                sorted_names=adt_ordering.sorted_names[::-1])

    rna_sorted = data.ExpressionMatrix(rna_ordering.apply(rna_n.values),
                                       rna_ordering.sorted_names, rna_n.cell_ids,
                                       "RNA", normalized=True)
    adt_sorted = data.ExpressionMatrix(adt_ordering.apply(adt_n.values),
                                       adt_ordering.sorted_names, adt_n.cell_ids,
                                       "ADT", normalized=True)
    data.write_dense_csv(rna_sorted, out / "rna_normalized.csv")
    data.write_dense_csv(adt_sorted, out / "adt_normalized.csv")
    (out / "ordering_rna.json").write_text(
        json.dumps(_ordering_manifest(rna_ordering, rna_n.feature_names), indent=1) + "\n")
    (out / "ordering_adt.json").write_text(
        json.dumps(_ordering_manifest(adt_ordering, adt_n.feature_names), indent=1) + "\n")
    provenance = {
        "config_hash": cfg.config_hash(),
        "seeds": {"model": cfg.model.seed},
        "n_cells": rna_sorted.n_cells,
        "n_genes": rna_sorted.n_features,
        "n_proteins": adt_sorted.n_features,
        "dropped_cells": rna_n.dropped_cells,
        "order_mode": cfg.model.order_mode,
    }
    (out / "provenance.json").write_text(json.dumps(provenance, sort_keys=True, indent=1) + "\n")
    return {"rna": out / "rna_normalized.csv", "adt": out / "adt_normalized.csv",
            "ordering_rna": out / "ordering_rna.json", "ordering_adt": out / "ordering_adt.json",
            "provenance": out / "provenance.json"}


# ---------------------------------------------------------------------------
# train


def _load_preprocessed(cfg: PipelineConfig, need_adt: bool
                       ) -> tuple[data.ExpressionMatrix, data.ExpressionMatrix | None]:
    out = _out_dir(cfg)
    rna_path = out / "rna_normalized.csv"
    if not rna_path.exists():
        raise ConfigError(f"preprocessed matrix missing: {rna_path} (run preprocess first)")
    rna = data.load_matrix(rna_path, "RNA", normalized=True)
    adt = None
    if need_adt:
        adt_path = out / "adt_normalized.csv"
        if not adt_path.exists():
            raise ConfigError(f"preprocessed matrix missing: {adt_path} (run preprocess first)")
        adt = data.load_matrix(adt_path, "ADT", normalized=True)
    return rna, adt


def _load_labels(cfg: PipelineConfig) -> dict[str, str]:
    labels_path = _require(cfg.data.labels, "labels CSV")
    return data.load_labels_csv(labels_path)


def _checkpoint_path(cfg: PipelineConfig, stage: int) -> Path:
    return _out_dir(cfg) / f"stage{stage}.ckpt"


def _load_stage_model(cfg: PipelineConfig, stage: int) -> FusionModel:
    path = _checkpoint_path(cfg, stage)
    if not path.exists():
        raise ConfigError(f"missing prerequisite checkpoint: {path}")
    return FusionModel.load(path)


def cmd_train(cfg: PipelineConfig, stage: int) -> tuple[Path, list[float]]:
    """Train one stage; writes the checkpoint and the loss trace CSV."""
    if stage not in (1, 2, 3):
        raise ConfigError(f"stage must be 1, 2, or 3, got {stage}")
    need_adt = stage in (1, 2)
    rna, adt = _load_preprocessed(cfg, need_adt)

    if stage == 1:
        model = FusionModel.initialize(cfg.model, rna.feature_names,
                                       adt.feature_names)
        labels = None
    else:
        model = _load_stage_model(cfg, stage - 1)
        if model.rna_features != rna.feature_names:
            raise ConfigError("checkpoint gene set does not match the preprocessed matrix")
        if need_adt and model.adt_features != adt.feature_names:
            raise ConfigError("checkpoint protein set does not match the preprocessed matrix")
        labels = _load_labels(cfg)

    dataset = PairedDataset(rna=rna.values, adt=None if adt is None else adt.values,
                            cell_ids=rna.cell_ids, labels=labels)
    model, trace = run_stage(cfg.stage(stage), dataset, model)

    ckpt = _checkpoint_path(cfg, stage)
    model.save(ckpt)
    loss_csv = _out_dir(cfg) / f"loss_stage{stage}.csv"
    with open(loss_csv, "w", encoding="utf-8") as fh:
        fh.write("epoch,stage,loss\n")
        for epoch, value in enumerate(trace):
            fh.write(f"{epoch},{stage},{_fmt(value)}\n")
    return ckpt, trace


# ---------------------------------------------------------------------------
# embed


def _pick_checkpoint(cfg: PipelineConfig, checkpoint: str | Path | None) -> Path:
    if checkpoint is not None:
        return _require(checkpoint, "checkpoint")
    for stage in (3, 2):
        path = _checkpoint_path(cfg, stage)
        if path.exists():
            return path
    raise ConfigError(f"no stage2/stage3 checkpoint under {_out_dir(cfg)}; train first")


def cmd_embed(cfg: PipelineConfig, checkpoint: str | Path | None = None) -> Path:
    """Write one embedding row per cell from a stage-2 or stage-3 checkpoint."""
    model = FusionModel.load(_pick_checkpoint(cfg, checkpoint))
    if model.stage < 2:
        raise ConfigError("stage-1 checkpoints expose no cell embedding; train stage 2 first")
    unimodal = model.stage >= 3
    rna, adt = _load_preprocessed(cfg, need_adt=not unimodal)
    if model.rna_features != rna.feature_names:
        raise ConfigError("checkpoint gene set does not match the preprocessed matrix")

    out = _out_dir(cfg) / "embeddings.csv"
    d = model.config.d
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("cell_id," + ",".join(f"e{i}" for i in range(d)) + "\n")
        for start in range(0, rna.n_cells, _EMBED_BATCH):
            stop = min(start + _EMBED_BATCH, rna.n_cells)
            block = model.embed_cells(rna.values[start:stop],
                                      None if unimodal else adt.values[start:stop])
            for cid, row in zip(rna.cell_ids[start:stop], block):
                fh.write(cid + "," + ",".join(_fmt(v) for v in row) + "\n")
    return out


def load_embeddings_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[0] != "cell_id":
            raise ConfigError(f"{path}: expected an embeddings CSV with a cell_id column")
        ids, rows = [], []
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return ids, np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(cfg: PipelineConfig, embeddings: str | Path | None = None,
                 labels: str | Path | None = None) -> tuple[dict, Path, Path]:
    """Cluster the embeddings and score them against the ground-truth labels."""
    emb_path = Path(embeddings) if embeddings else _out_dir(cfg) / "embeddings.csv"
    if not emb_path.exists():
        raise ConfigError(f"embeddings not found: {emb_path} (run embed first)")
    label_map = data.load_labels_csv(
        _require(labels if labels is not None else cfg.data.labels, "labels CSV"))

    cell_ids, matrix = load_embeddings_csv(emb_path)
    missing = [cid for cid in cell_ids if cid not in label_map]
    if missing:
        raise ConfigError(f"{len(missing)} embedded cells have no label, "
                          f"e.g. {missing[:5]}")
    truth = cl.Partition.from_labels([label_map[cid] for cid in cell_ids])

    graph = cl.build_knn(matrix, k=cfg.eval.k)
    pred = cl.leiden_cluster(graph, resolution=cfg.eval.resolution, seed=cfg.eval.seed)
    report = cl.MetricReport.compute(matrix, truth, pred)

    out = _out_dir(cfg)
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(report.to_json_dict(), indent=1) + "\n")
    clusters_path = out / "clusters.csv"
    with open(clusters_path, "w", encoding="utf-8") as fh:
        fh.write("cell_id,cluster\n")
        for cid, comm in zip(cell_ids, pred.assignment):
            fh.write(f"{cid},{comm}\n")
    return report.to_json_dict(), metrics_path, clusters_path
