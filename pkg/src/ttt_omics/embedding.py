"""Input layer: genome-order feature sorting, token construction, masking.

Genes are arranged on chromosomes and the model consumes them in that
order, so expression vectors are permuted by a genome-wide order table
before token building. Features whose symbol is absent from the table
(alias mismatches are common) keep their relative input order and are
placed at the front of the sequence. Proteins inherit the rank of the
gene they are translated from.

Each feature becomes one token: its scalar expression value scaled onto a
learnable per-feature direction vector, plus a learnable per-feature
symbol embedding. Random masking hides a fixed fraction of tokens from
the encoder; the mask record carries what the decoder needs to reinsert
them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, TensorNode
from .errors import ContractError, DimensionError, ParseError

_CHROM_SPECIAL = {"X": 23, "Y": 24, "M": 25, "MT": 25}


def _chromosome_key(chrom: str) -> tuple:
    """Natural chromosome order: chr1..chr22, chrX, chrY, chrM, then others."""
    name = chrom[3:] if chrom.lower().startswith("chr") else chrom
    if re.fullmatch(r"\d+", name):
        num = int(name)
        if 1 <= num <= 22:
            return (0, num, "")
    upper = name.upper()
    if upper in _CHROM_SPECIAL:
        return (0, _CHROM_SPECIAL[upper], "")
    return (1, 0, chrom)


@dataclass
class GeneOrderTable:
    """Genome-wide positional order of gene symbols."""

    entries: list[tuple[str, str, int]]  # (symbol, chromosome, start), sorted
    lookup: dict[str, int]               # symbol -> rank

    def __len__(self) -> int:
        return len(self.entries)

    def rank(self, symbol: str) -> int | None:
        return self.lookup.get(symbol)

    @classmethod
    def from_rows(cls, rows: list[tuple[str, str, int]]) -> "GeneOrderTable":
        seen = set()
        for symbol, _, _ in rows:
            if symbol in seen:
                raise ParseError(f"duplicate gene symbol {symbol!r} in order table")
            seen.add(symbol)
        ordered = sorted(rows, key=lambda r: (_chromosome_key(r[1]), r[2]))
        return cls(entries=ordered, lookup={sym: i for i, (sym, _, _) in enumerate(ordered)})


def load_gene_order(path: str | Path) -> GeneOrderTable:
    """Load a gene order TSV (gene_symbol, chromosome, start_position)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != ["gene_symbol", "chromosome", "start_position"]:
            raise ParseError(f"{path}: expected header gene_symbol\\tchromosome\\tstart_position")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            symbol, chrom, start_text = parts
            try:
                start = int(start_text)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: start_position {start_text!r} is not an integer")
            if start < 0:
                raise ParseError(f"{path}:{lineno}: negative start_position")
            rows.append((symbol, chrom, start))
    return GeneOrderTable.from_rows(rows)


def load_protein_map(path: str | Path) -> dict[str, str]:
    """Load the protein -> source gene TSV."""
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != ["protein", "gene_symbol"]:
            raise ParseError(f"{path}: expected header protein\\tgene_symbol")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 tab-separated fields")
            protein, gene = parts
            if protein in mapping:
                raise ParseError(f"{path}:{lineno}: duplicate protein {protein!r}")
            mapping[protein] = gene
    return mapping


@dataclass
class FeatureOrdering:
    """Bijection from input feature index to sorted sequence position."""

    permutation: np.ndarray  # permutation[input_index] = sorted position
    unmapped_count: int
    sorted_names: list[str]

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.intp)
        n = perm.size
        if n == 0 or not np.array_equal(np.sort(perm), np.arange(n)):
            raise ContractError("permutation must be a bijection on feature indices")
        self.permutation = perm

    @property
    def n_features(self) -> int:
        return self.permutation.size

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Permute the feature axis (last) into sorted order."""
        values = np.asarray(values)
        out = np.empty_like(values)
        out[..., self.permutation] = values
        return out

    def invert(self, values: np.ndarray) -> np.ndarray:
        """Permute a sorted-order array back to input feature order."""
        return np.asarray(values)[..., self.permutation]


def _ordering_from_keys(names: list[str], rank_of: list[int | None]) -> FeatureOrdering:
    """Unmapped features first (stable), then by ascending rank (stable)."""
    indices = range(len(names))
    unmapped = [i for i in indices if rank_of[i] is None]
    mapped = sorted((i for i in indices if rank_of[i] is not None),
                    key=lambda i: (rank_of[i], i))
    order = unmapped + mapped  # order[pos] = input index
    perm = np.empty(len(names), dtype=np.intp)
    for pos, idx in enumerate(order):
        perm[idx] = pos
    return FeatureOrdering(permutation=perm, unmapped_count=len(unmapped),
                           sorted_names=[names[i] for i in order])


def sort_features(feature_names: list[str], table: GeneOrderTable,
                  mode: str = "genome_order", seed: int = 0) -> FeatureOrdering:
    """Order features by genome position; modes: genome_order, reverse, shuffled."""
    if not feature_names:
        raise ContractError("feature list is empty")
    if mode == "shuffled":
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(feature_names))
        perm = np.empty(len(feature_names), dtype=np.intp)
        perm[order] = np.arange(len(feature_names))
        return FeatureOrdering(permutation=perm, unmapped_count=0,
                               sorted_names=[feature_names[i] for i in order])

    ordering = _ordering_from_keys(feature_names, [table.rank(n) for n in feature_names])
    if mode == "genome_order":
        return ordering
    if mode == "reverse":
        n = ordering.n_features
        return FeatureOrdering(permutation=n - 1 - ordering.permutation,
                               unmapped_count=ordering.unmapped_count,
                               sorted_names=ordering.sorted_names[::-1])
    raise ContractError(f"unknown order mode {mode!r}")


def sort_proteins(protein_names: list[str], protein_to_gene: dict[str, str],
                  table: GeneOrderTable) -> FeatureOrdering:
    """Order proteins by the genome rank of their source gene."""
    if not protein_names:
        raise ContractError("protein list is empty")
    ranks: list[int | None] = []
    for name in protein_names:
        gene = protein_to_gene.get(name)
        ranks.append(None if gene is None else table.rank(gene))
    return _ordering_from_keys(protein_names, ranks)


@dataclass
class MaskPlan:
    """Deterministic choice of masked positions for one sequence length."""

    masked_indices: np.ndarray
    ratio: float
    seed: int
    n_features: int

    @property
    def visible_indices(self) -> np.ndarray:
        keep = np.ones(self.n_features, dtype=bool)
        keep[self.masked_indices] = False
        return np.flatnonzero(keep)


def make_mask_plan(n_features: int, ratio: float, seed: int) -> MaskPlan:
    if not 0.0 <= ratio < 1.0:
        raise ContractError(f"mask ratio must be in [0, 1), got {ratio}")
    count = int(np.floor(ratio * n_features))
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.permutation(n_features)[:count])
    return MaskPlan(masked_indices=masked, ratio=ratio, seed=seed, n_features=n_features)


@dataclass
class EmbeddingParams:
    """Per-modality learnable tables, indexed by sorted feature position."""

    direction: TensorNode   # [n, d]; expression value scales this row
    symbol: TensorNode      # [n, d]; one row per sorted feature
    mask_token: TensorNode  # [d]; shared offset marking masked positions


def init_embedding_arrays(n_features: int, d: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "direction": rng.normal(0.0, 0.02, (n_features, d)),
        "symbol": rng.normal(0.0, 0.02, (n_features, d)),
        "mask_token": rng.normal(0.0, 0.02, d),
    }


def bind_embedding(tape: Tape, arrays: dict[str, np.ndarray], *, trainable: bool = True) -> EmbeddingParams:
    return EmbeddingParams(
        direction=tape.tensor(arrays["direction"], requires_grad=trainable),
        symbol=tape.tensor(arrays["symbol"], requires_grad=trainable),
        mask_token=tape.tensor(arrays["mask_token"], requires_grad=trainable),
    )


@dataclass
class TokenSequence:
    """Embedded tokens for one cell (or a batch) in sorted feature order."""

    expression_embedding: TensorNode  # [..., n, d]
    symbol_embedding: TensorNode      # [n, d]
    combined: TensorNode              # [..., n, d]
    n_features: int
    d: int


@dataclass
class MaskRecord:
    """What the decoder needs to reinsert masked positions."""

    masked_positions: np.ndarray
    visible_positions: np.ndarray
    masked_symbols: TensorNode | None  # [n_masked, d]
    n_features: int


def build_tokens(expr_row, ordering: FeatureOrdering, embed: EmbeddingParams) -> TokenSequence:
    """Embed a normalized expression vector (or [batch, n] stack of them).

    The expression values are permuted into sorted order, each value scales
    its feature's direction row, and the symbol row is added:
    token_i = expr_sorted_i * direction_i + symbol_i.
    """
    tape = embed.direction.tape
    if isinstance(expr_row, TensorNode):
        raise ContractError("build_tokens expects raw expression values, not a node")
    expr = np.asarray(expr_row, dtype=np.float64)
    n, d = embed.direction.values.shape
    if expr.shape[-1] != ordering.n_features or ordering.n_features != n:
        raise DimensionError(
            f"expression length {expr.shape[-1]} vs ordering {ordering.n_features} vs table {n}")
    sorted_expr = tape.tensor(ordering.apply(expr))
    expr_emb = ad.scale_rows(embed.direction, sorted_expr)
    combined = ad.add_bcast(expr_emb, embed.symbol)
    return TokenSequence(expression_embedding=expr_emb, symbol_embedding=embed.symbol,
                         combined=combined, n_features=n, d=d)


def apply_mask(tokens: TokenSequence, plan: MaskPlan) -> tuple[TensorNode, MaskRecord]:
    """Split a token sequence into encoder-visible tokens and a mask record."""
    if plan.ratio >= 1.0:
        raise ContractError("mask ratio must be < 1")
    if plan.n_features != tokens.n_features:
        raise DimensionError(f"mask plan for {plan.n_features} features, tokens have {tokens.n_features}")
    visible_idx = plan.visible_indices
    visible = ad.take_rows(tokens.combined, visible_idx)
    masked_symbols = (ad.take_rows(tokens.symbol_embedding, plan.masked_indices)
                      if plan.masked_indices.size else None)
    record = MaskRecord(masked_positions=plan.masked_indices,
                        visible_positions=visible_idx,
                        masked_symbols=masked_symbols,
                        n_features=tokens.n_features)
    return visible, record
