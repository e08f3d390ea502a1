"""Dataset ingestion, normalization, gene selection, synthetic data.

Matrices load either from a 10x-style Matrix Market triple
(matrix.mtx + features.tsv + barcodes.tsv, features x cells) or from a
dense CSV (cells x features, first column cell ids). Proteomics counts
get centered-log-ratio normalization; transcriptomics counts get RPKM
when gene lengths are available and counts-per-million otherwise, both
followed by log1p by default.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

logger = logging.getLogger(__name__)

_MTX_BANNER = "%%MatrixMarket matrix coordinate"


@dataclass
class ExpressionMatrix:
    """One modality's cells-by-features matrix."""

    values: np.ndarray          # [n_cells, n_features] float64
    feature_names: list[str]
    cell_ids: list[str]
    modality: str               # "RNA" or "ADT"
    normalized: bool = False
    dropped_cells: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError(f"expression values must be 2-d, got shape {self.values.shape}")
        n_cells, n_features = self.values.shape
        if len(self.feature_names) != n_features:
            raise ContractError(f"{len(self.feature_names)} feature names for {n_features} columns")
        if len(self.cell_ids) != n_cells:
            raise ContractError(f"{len(self.cell_ids)} cell ids for {n_cells} rows")
        if len(set(self.feature_names)) != n_features:
            raise ContractError("feature names must be unique")
        if self.modality not in ("RNA", "ADT"):
            raise ContractError(f"modality must be RNA or ADT, got {self.modality!r}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("expression values must be finite")
        if not self.normalized and np.any(self.values < 0):
            raise ContractError("raw counts must be non-negative")

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# loaders and writers


def _load_mtx_triple(directory: Path, modality: str) -> ExpressionMatrix:
    mtx = directory / "matrix.mtx"
    features_path = directory / "features.tsv"
    barcodes_path = directory / "barcodes.tsv"
    for p in (mtx, features_path, barcodes_path):
        if not p.exists():
            raise ParseError(f"missing {p}")

    with open(features_path, encoding="utf-8") as fh:
        feature_rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    feature_names = [row[1] if len(row) > 1 else row[0] for row in feature_rows]
    with open(barcodes_path, encoding="utf-8") as fh:
        cell_ids = [line.strip() for line in fh if line.strip()]

    with open(mtx, encoding="utf-8") as fh:
        banner = fh.readline().rstrip("\n")
        if not banner.startswith(_MTX_BANNER):
            raise ParseError(f"{mtx}:1: bad Matrix Market banner {banner!r}")
        lineno = 1
        dims = None
        for line in fh:
            lineno += 1
            if line.startswith("%"):
                continue
            dims = line.split()
            break
        if dims is None or len(dims) != 3:
            raise ParseError(f"{mtx}:{lineno}: expected 'rows cols nnz' size line")
        try:
            n_feat, n_cell, nnz = (int(x) for x in dims)
        except ValueError:
            raise ParseError(f"{mtx}:{lineno}: non-integer size line")
        if n_feat != len(feature_names):
            raise ParseError(
                f"{mtx}: header says {n_feat} features but features.tsv has {len(feature_names)}")
        if n_cell != len(cell_ids):
            raise ParseError(
                f"{mtx}: header says {n_cell} cells but barcodes.tsv has {len(cell_ids)}")
        values = np.zeros((n_cell, n_feat), dtype=np.float64)
        seen = 0
        for line in fh:
            lineno += 1
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"{mtx}:{lineno}: expected 'feature cell value'")
            try:
                i, j = int(parts[0]), int(parts[1])
                v = float(parts[2])
            except ValueError:
                raise ParseError(f"{mtx}:{lineno}: malformed entry {line.strip()!r}")
            if not (1 <= i <= n_feat and 1 <= j <= n_cell):
                raise ParseError(f"{mtx}:{lineno}: index ({i}, {j}) out of range")
            if v < 0:
                raise ParseError(f"{mtx}:{lineno}: negative count {v}")
            values[j - 1, i - 1] = v  # 1-based (feature, cell) -> 0-based [cell, feature]
            seen += 1
        if seen != nnz:
            raise ParseError(f"{mtx}: header promised {nnz} entries, found {seen}")
    return ExpressionMatrix(values, feature_names, cell_ids, modality)


def _load_dense_csv(path: Path, modality: str, normalized: bool = False) -> ExpressionMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header:
            raise ParseError(f"{path}:1: empty header")
        feature_names = header.split(",")[1:]
        cell_ids = []
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(feature_names) + 1:
                raise ParseError(f"{path}:{lineno}: expected {len(feature_names) + 1} fields")
            cell_ids.append(parts[0])
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value")
    values = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, len(feature_names)))
    return ExpressionMatrix(values, feature_names, cell_ids, modality, normalized=normalized)


def load_matrix(path_spec: str | Path, modality: str, normalized: bool = False) -> ExpressionMatrix:
    """Load a matrix from a 10x triple directory or a dense CSV file."""
    path = Path(path_spec)
    if path.is_dir():
        return _load_mtx_triple(path, modality)
    if path.suffix == ".csv":
        return _load_dense_csv(path, modality, normalized=normalized)
    raise ParseError(f"{path}: expected a directory with matrix.mtx or a .csv file")


def write_matrix_market(m: ExpressionMatrix, directory: str | Path) -> None:
    """Write the 10x-style triple; float values keep full precision."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cells, feats = np.nonzero(m.values)
    with open(directory / "matrix.mtx", "w", encoding="utf-8") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{m.n_features} {m.n_cells} {cells.size}\n")
        for c, f in zip(cells, feats):
            fh.write(f"{f + 1} {c + 1} {np.format_float_positional(m.values[c, f], trim='0')}\n")
    with open(directory / "features.tsv", "w", encoding="utf-8") as fh:
        for name in m.feature_names:
            fh.write(f"{name}\t{name}\n")
    with open(directory / "barcodes.tsv", "w", encoding="utf-8") as fh:
        fh.write("".join(f"{cid}\n" for cid in m.cell_ids))


def write_dense_csv(m: ExpressionMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("cell_id," + ",".join(m.feature_names) + "\n")
        for cid, row in zip(m.cell_ids, m.values):
            fh.write(cid + "," + ",".join(np.format_float_positional(v, trim="0") for v in row) + "\n")


def load_gene_lengths(path: str | Path) -> dict[str, float]:
    """Load the gene length TSV (gene_symbol, length in bases)."""
    lengths: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != ["gene_symbol", "length"]:
            raise ParseError(f"{path}: expected header gene_symbol\\tlength")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields")
            try:
                length = float(parts[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric length")
            if length <= 0:
                raise ParseError(f"{path}:{lineno}: gene length must be positive")
            lengths[parts[0]] = length
    return lengths


def load_labels_csv(path: str | Path) -> dict[str, str]:
    """Load the cell label CSV (cell_id, cell_type)."""
    labels: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split(",")[:2] != ["cell_id", "cell_type"]:
            raise ParseError(f"{path}: expected header cell_id,cell_type")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields")
            labels[parts[0]] = parts[1]
    return labels


def write_labels_csv(cell_ids: list[str], class_names: list[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("cell_id,cell_type\n")
        for cid, name in zip(cell_ids, class_names):
            fh.write(f"{cid},{name}\n")


# ---------------------------------------------------------------------------
# normalization


def clr_normalize(m: ExpressionMatrix, pseudocount: float = 1.0) -> ExpressionMatrix:
    """Centered log ratio per cell: log((x + pc) / geometric mean of (x + pc)).

    Computed as log(x + pc) minus the row mean of logs, so every output row
    sums to zero up to rounding.
    """
    if m.modality != "ADT":
        raise ContractError(f"CLR applies to ADT matrices, got {m.modality}")
    if pseudocount <= 0:
        raise ContractError("pseudocount must be positive")
    if m.n_features == 0:
        raise ContractError("cannot CLR-normalize a matrix with zero features")
    logs = np.log(m.values + pseudocount)
    centered = logs - logs.mean(axis=1, keepdims=True)
    return ExpressionMatrix(centered, list(m.feature_names), list(m.cell_ids),
                            "ADT", normalized=True)


def rna_normalize(m: ExpressionMatrix, lengths: dict[str, float] | None = None,
                  *, log_transform: bool = True) -> ExpressionMatrix:
    """Depth-normalize RNA counts: RPKM with gene lengths, else CPM.

    Cells with zero total counts cannot be normalized; they are dropped and
    recorded on the result's ``dropped_cells``.
    """
    if m.modality != "RNA":
        raise ContractError(f"RNA normalization applies to RNA matrices, got {m.modality}")
    totals = m.values.sum(axis=1)
    keep = totals > 0
    dropped = [cid for cid, ok in zip(m.cell_ids, keep) if not ok]
    if dropped:
        logger.warning("dropping %d cells with zero total counts: %s",
                       len(dropped), ", ".join(dropped[:5]) + ("..." if len(dropped) > 5 else ""))
    values = m.values[keep]
    totals = totals[keep]

    if lengths is not None:
        missing = [g for g in m.feature_names if g not in lengths]
        if missing:
            raise ContractError(f"gene length table is missing {len(missing)} genes, "
                                f"e.g. {missing[:3]}")
        len_vec = np.array([lengths[g] for g in m.feature_names])
        out = values * 1e9 / (totals[:, None] * len_vec[None, :])
    else:
        out = values * 1e6 / totals[:, None]
    if log_transform:
        out = np.log1p(out)
    return ExpressionMatrix(out, list(m.feature_names),
                            [cid for cid, ok in zip(m.cell_ids, keep) if ok],
                            "RNA", normalized=True, dropped_cells=dropped)


def select_hvg(m: ExpressionMatrix, n_top: int = 4000) -> ExpressionMatrix:
    """Keep the n_top highest-variance genes (ties by ascending index)."""
    if n_top <= 0:
        raise ContractError("n_top must be positive")
    if not m.normalized:
        raise ContractError("select high-variance genes on a normalized matrix")
    if m.n_features <= n_top:
        return m
    variances = m.values.var(axis=0)
    order = np.lexsort((np.arange(m.n_features), -variances))
    keep = np.sort(order[:n_top])
    return ExpressionMatrix(m.values[:, keep], [m.feature_names[i] for i in keep],
                            list(m.cell_ids), m.modality, normalized=True,
                            dropped_cells=list(m.dropped_cells))


# ---------------------------------------------------------------------------
# synthetic data


def _class_mean_profiles(rng: np.random.Generator, n_features: int, n_classes: int,
                         separation: float, base_loc: float) -> np.ndarray:
    """Per-class mean count profiles; separation scales the class log-shifts."""
    base_log = rng.normal(base_loc, 0.4, n_features)
    shifts = rng.normal(0.0, 0.35, (n_classes, n_features))
    return np.exp(base_log[None, :] + separation * shifts)


def _nb_counts(rng: np.random.Generator, means: np.ndarray, dispersion: float) -> np.ndarray:
    p = dispersion / (dispersion + means)
    return rng.negative_binomial(dispersion, p).astype(np.float64)


def generate_synthetic(n_cells: int, n_genes: int, n_proteins: int, n_classes: int,
                       separation: float, seed: int
                       ) -> tuple[ExpressionMatrix, ExpressionMatrix, np.ndarray]:
    """Paired class-structured count matrices with shared cells and labels.

    Counts are negative-binomial draws around per-class mean profiles whose
    between-class distance grows with ``separation``; separation 0 makes the
    classes identical in expectation.
    """
    if min(n_cells, n_genes, n_proteins, n_classes) < 1:
        raise ContractError("all extents must be >= 1")
    if separation < 0:
        raise ContractError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(n_classes), n_cells // n_classes + 1)[:n_cells]
    rng.shuffle(labels)

    gene_mu = _class_mean_profiles(rng, n_genes, n_classes, separation, base_loc=1.0)
    prot_mu = _class_mean_profiles(rng, n_proteins, n_classes, separation, base_loc=3.0)
    rna_counts = _nb_counts(rng, gene_mu[labels], dispersion=2.0)
    adt_counts = _nb_counts(rng, prot_mu[labels], dispersion=10.0)

    width = len(str(max(n_cells, 1)))
    cell_ids = [f"CELL{i:0{width}d}" for i in range(n_cells)]
    gene_names = [f"GENE{i:04d}" for i in range(n_genes)]
    protein_names = [f"PROT{i:03d}" for i in range(n_proteins)]
    rna = ExpressionMatrix(rna_counts, gene_names, cell_ids, "RNA")
    adt = ExpressionMatrix(adt_counts, protein_names, cell_ids, "ADT")
    return rna, adt, labels


def synthetic_annotations(gene_names: list[str], protein_names: list[str], seed: int
                          ) -> tuple[list[tuple[str, str, int]], dict[str, str], dict[str, float]]:
    """Companion gene-order rows, protein map, and gene lengths for synthetic data.

    Genes get random chromosome assignments and positions so genome-order
    sorting is a non-trivial permutation; each protein maps to a distinct gene.
    """
    rng = np.random.default_rng(seed + 104729)
    chromosomes = [f"chr{i}" for i in range(1, 23)] + ["chrX", "chrY"]
    order_rows = []
    for name in gene_names:
        chrom = chromosomes[int(rng.integers(len(chromosomes)))]
        start = int(rng.integers(1, 250_000_000))
        order_rows.append((name, chrom, start))
    source_genes = rng.choice(len(gene_names), size=min(len(protein_names), len(gene_names)),
                              replace=False)
    protein_map = {prot: gene_names[int(g)]
                   for prot, g in zip(protein_names, source_genes)}
    lengths = {name: float(rng.integers(500, 50_000)) for name in gene_names}
    return order_rows, protein_map, lengths


def write_gene_order_tsv(rows: list[tuple[str, str, int]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene_symbol\tchromosome\tstart_position\n")
        for symbol, chrom, start in rows:
            fh.write(f"{symbol}\t{chrom}\t{start}\n")


def write_protein_map_tsv(mapping: dict[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("protein\tgene_symbol\n")
        for protein, gene in mapping.items():
            fh.write(f"{protein}\t{gene}\n")


def write_gene_lengths_tsv(lengths: dict[str, float], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene_symbol\tlength\n")
        for gene, length in lengths.items():
            fh.write(f"{gene}\t{np.format_float_positional(length, trim='0')}\n")
