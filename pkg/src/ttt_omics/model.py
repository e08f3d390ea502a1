"""The full fusion network and its checkpoints.

Topology (stage 1): each modality's expression vector becomes a token
sequence, a random subset of tokens is hidden, the visible tokens run
through a stack of TTT blocks, the two encoder outputs are fused twice
(once per target modality: concatenate with the target placed last, run
a TTT block over the joint sequence, read the target's tail positions,
and add back to the target with a learnable weight), the masked tokens
are reinserted, and per-modality decoders reconstruct the full
expression vectors.

Stages 2 and 3 drop the decoders entirely: the fused sequences are
pooled into a fixed-width cell embedding for the classification head.
Stage 3 is unimodal; the fusion term is absent and the embedding comes
from the RNA branch alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import embedding as emb
from . import ttt
from .autodiff import Tape, TensorNode
from .errors import ConfigError, ContractError, DimensionError, ParseError

CHECKPOINT_VERSION = 1

_FUSION_MODES = ("fusion_ttt", "attention", "element_add")
_ORDER_MODES = ("genome_order", "reverse", "shuffled")
_POOLINGS = ("mean", "last")


@dataclass
class ModelConfig:
    """Architecture knobs; defaults follow the reference setup (d = 128)."""

    d: int = 128
    n_blocks_encoder: int = 2
    n_blocks_decoder: int = 2
    n_blocks_fusion: int = 1
    mask_ratio: float = 0.15
    fusion_mode: str = "fusion_ttt"
    order_mode: str = "genome_order"
    lambda_init: float = 0.5
    activation: str = "gelu"
    rms_eps: float = 1e-6
    seed: int = 0
    # 0.1 makes the per-token update expansive once 2*eta*E||k||^2 > 1
    # (E||k||^2 ~ d/3 for unit-RMS rows); 0.01 is stable through d = 128
    eta_init: float = 0.01
    learn_eta: bool = True
    pooling: str = "mean"

    def validate(self) -> "ModelConfig":
        if self.d < 1:
            raise ConfigError("model width d must be >= 1")
        for name in ("n_blocks_encoder", "n_blocks_decoder", "n_blocks_fusion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if self.fusion_mode not in _FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {_FUSION_MODES}")
        if self.order_mode not in _ORDER_MODES:
            raise ConfigError(f"order_mode must be one of {_ORDER_MODES}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError("activation must be gelu or relu")
        if self.pooling not in _POOLINGS:
            raise ConfigError(f"pooling must be one of {_POOLINGS}")
        if self.eta_init < 0:
            raise ConfigError("eta_init must be >= 0")
        return self


@dataclass
class FusionOutputs:
    """Encoder and fusion activations for one forward pass."""

    e_rna_out: np.ndarray
    e_adt_out: np.ndarray | None
    ft_rna: np.ndarray
    ft_adt: np.ndarray | None
    cell_embedding: np.ndarray | None = None


# ---------------------------------------------------------------------------
# fusion operations (node level)


def encode_modality(tokens: TensorNode, blocks: list[ttt.TTTBlockParams]) -> TensorNode:
    """Run a stack of TTT blocks over (visible) tokens."""
    h = tokens
    for block in blocks:
        h = ttt.ttt_block_forward(h, block)
    return h


def fusion_ttt(e_first: TensorNode, e_second: TensorNode,
               blocks: list[ttt.TTTBlockParams], *, return_joint: bool = False):
    """Cross-modal fusion: joint sequence with the target modality last.

    The fast weight accumulates the first modality's information before it
    reaches the target positions, so only the last n2 rows are returned.
    """
    if e_first.values.shape[-1] != e_second.values.shape[-1]:
        raise DimensionError(f"fusion widths differ: {e_first.values.shape} vs {e_second.values.shape}")
    joint = ad.concat_rows([e_first, e_second])
    h = encode_modality(joint, blocks)
    n2 = e_second.values.shape[-2]
    total = h.values.shape[-2]
    tail = ad.slice_rows(h, total - n2, total)
    return (tail, h) if return_joint else tail


def attention_fusion(e_first: TensorNode, e_second: TensorNode,
                     wq: TensorNode, wk: TensorNode, wv: TensorNode) -> TensorNode:
    """Single softmax cross-attention: queries from the target modality."""
    d = wq.values.shape[0]
    q = ad.matmul(e_second, wq)
    k = ad.matmul(e_first, wk)
    v = ad.matmul(e_first, wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    return ad.matmul(ad.softmax_rows(scores), v)


def fuse_with_residual(e_target: TensorNode, fused: TensorNode, lam: TensorNode) -> TensorNode:
    """FT = E_target + lambda * fused, with a learnable scalar lambda."""
    if e_target.values.shape != fused.values.shape:
        raise DimensionError(f"residual shapes differ: {e_target.values.shape} vs {fused.values.shape}")
    return ad.add(e_target, ad.scale(fused, lam))


def fusion_variant(e_first: TensorNode, e_second: TensorNode, mode: str,
                   params: dict[str, TensorNode] | list[ttt.TTTBlockParams]) -> TensorNode:
    """Dispatch between the fusion module and its ablation variants."""
    if mode == "fusion_ttt":
        return fusion_ttt(e_first, e_second, params)
    if mode == "attention":
        return attention_fusion(e_first, e_second, params["wq"], params["wk"], params["wv"])
    if mode == "element_add":
        if e_first.values.shape[-2] != e_second.values.shape[-2]:
            raise ContractError(
                f"element_add needs equal sequence lengths, got "
                f"{e_first.values.shape[-2]} and {e_second.values.shape[-2]}")
        return ad.add(e_first, e_second)
    raise ContractError(f"unknown fusion mode {mode!r}")


def decode_modality(d_in: TensorNode, blocks: list[ttt.TTTBlockParams],
                    readout_w: TensorNode, readout_b: TensorNode,
                    mask_record: emb.MaskRecord, mask_token: TensorNode) -> TensorNode:
    """Reinsert masked tokens, decode, and project each token to a scalar."""
    n_vis = mask_record.visible_positions.size
    n_mask = mask_record.masked_positions.size
    if d_in.values.shape[-2] != n_vis or n_vis + n_mask != mask_record.n_features:
        raise ContractError(
            f"decoder input rows {d_in.values.shape[-2]} do not match mask record "
            f"({n_vis} visible + {n_mask} masked of {mask_record.n_features})")
    if n_mask:
        masked_tokens = ad.add_bcast(mask_record.masked_symbols, mask_token)
        if d_in.values.ndim == 3:
            masked_tokens = ad.expand_batch(masked_tokens, d_in.values.shape[0])
        full = ad.interleave_rows(d_in, masked_tokens,
                                  mask_record.visible_positions, mask_record.masked_positions)
    else:
        full = d_in
    h = encode_modality(full, blocks)
    recon = ad.add_bcast(ad.matmul(h, readout_w), readout_b)
    return ad.reshape(recon, recon.values.shape[:-1])


def pool_rows(ft_rna: TensorNode, ft_adt: TensorNode | None, pooling: str) -> TensorNode:
    """Pool fused sequences to one embedding per cell."""
    seq = ft_rna if ft_adt is None else ad.concat_rows([ft_rna, ft_adt])
    if pooling == "mean":
        return ad.mean_rows(seq)
    n = seq.values.shape[-2]
    last = ad.slice_rows(seq, n - 1, n)
    return ad.reshape(last, last.values.shape[:-2] + (last.values.shape[-1],))


def cell_representation(outputs: FusionOutputs, stage: int, pooling: str = "mean") -> np.ndarray:
    """Fixed-width cell embedding from the fused sequences (stages 2 and 3)."""
    if stage == 1:
        raise ContractError("stage 1 is pretraining only and exposes no cell embedding")
    if stage not in (2, 3):
        raise ContractError(f"stage must be 1, 2, or 3, got {stage}")
    parts = [np.asarray(outputs.ft_rna)]
    if outputs.ft_adt is not None:
        parts.append(np.asarray(outputs.ft_adt))
    seq = np.concatenate(parts, axis=-2)
    if pooling == "mean":
        return seq.mean(axis=-2)
    if pooling == "last":
        return seq[..., -1, :]
    raise ContractError(f"unknown pooling {pooling!r}")


# ---------------------------------------------------------------------------
# the assembled model


def _identity_ordering(names: list[str]) -> emb.FeatureOrdering:
    return emb.FeatureOrdering(permutation=np.arange(len(names)),
                               unmapped_count=0, sorted_names=list(names))


class FusionModel:
    """Parameter store plus forward builders for every training stage.

    Parameters live as named float64 arrays; each forward pass binds them
    onto a fresh tape. Expression inputs must already be in sorted token
    order and match the stored feature name lists.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 rna_features: list[str], adt_features: list[str],
                 class_names: list[str] | None = None, stage: int = 0):
        self.config = config.validate()
        self.params = params
        self.rna_features = list(rna_features)
        self.adt_features = list(adt_features)
        self.class_names = list(class_names) if class_names is not None else None
        self.stage = stage

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, config: ModelConfig, rna_features: list[str],
                   adt_features: list[str]) -> "FusionModel":
        config.validate()
        rng = np.random.default_rng(config.seed)
        params: dict[str, np.ndarray] = {}

        def add_block_stack(prefix: str, count: int) -> None:
            for i in range(count):
                arrays = ttt.init_ttt_block_arrays(config.d, rng, eta=config.eta_init,
                                                   learn_eta=config.learn_eta)
                for key, val in arrays.items():
                    params[f"{prefix}.b{i}.{key}"] = val

        for modality, features in (("rna", rna_features), ("adt", adt_features)):
            for key, val in emb.init_embedding_arrays(len(features), config.d, rng).items():
                params[f"embed.{modality}.{key}"] = val
            add_block_stack(f"enc.{modality}", config.n_blocks_encoder)
            if config.fusion_mode == "fusion_ttt":
                add_block_stack(f"fus.{modality}", config.n_blocks_fusion)
            elif config.fusion_mode == "attention":
                bound = 1.0 / np.sqrt(config.d)
                for key in ("wq", "wk", "wv"):
                    params[f"fus.{modality}.{key}"] = rng.uniform(-bound, bound,
                                                                  (config.d, config.d))
            params[f"lam.{modality}"] = np.asarray(float(config.lambda_init))
            add_block_stack(f"dec.{modality}", config.n_blocks_decoder)
            params[f"readout.{modality}.w"] = rng.uniform(-1.0 / np.sqrt(config.d),
                                                          1.0 / np.sqrt(config.d),
                                                          (config.d, 1))
            params[f"readout.{modality}.b"] = np.zeros(1)
        return cls(config, params, rna_features, adt_features)

    def ensure_head(self, class_names: list[str]) -> None:
        """Create (or validate) the classification head for these classes."""
        if self.class_names is not None:
            if self.class_names != list(class_names):
                raise ConfigError(f"checkpoint classes {self.class_names} != labels {list(class_names)}")
            return
        if len(class_names) < 2:
            raise ContractError("classification needs at least 2 classes")
        self.class_names = list(class_names)
        self.params["head.w"] = np.zeros((self.config.d, len(class_names)))
        self.params["head.b"] = np.zeros(len(class_names))

    # -- binding ------------------------------------------------------------

    def bind(self, tape: Tape, prefixes: tuple[str, ...] | None = None,
             trainable: bool = True) -> dict[str, TensorNode]:
        nodes = {}
        for name, arr in self.params.items():
            if prefixes is not None and not name.startswith(prefixes):
                continue
            rg = trainable and not name.endswith(".eta")
            nodes[name] = tape.tensor(arr, requires_grad=rg)
        return nodes

    def _blocks(self, nodes: dict[str, TensorNode], prefix: str, count: int
                ) -> list[ttt.TTTBlockParams]:
        out = []
        for i in range(count):
            key = f"{prefix}.b{i}."
            sub = {name[len(key):]: node for name, node in nodes.items()
                   if name.startswith(key)}
            out.append(ttt.ttt_block_from_nodes(sub, activation=self.config.activation,
                                                rms_eps=self.config.rms_eps))
        return out

    def _embedding(self, nodes: dict[str, TensorNode], modality: str) -> emb.EmbeddingParams:
        return emb.EmbeddingParams(direction=nodes[f"embed.{modality}.direction"],
                                   symbol=nodes[f"embed.{modality}.symbol"],
                                   mask_token=nodes[f"embed.{modality}.mask_token"])

    def _fusion_params(self, nodes: dict[str, TensorNode], modality: str):
        if self.config.fusion_mode == "fusion_ttt":
            return self._blocks(nodes, f"fus.{modality}", self.config.n_blocks_fusion)
        if self.config.fusion_mode == "attention":
            return {key: nodes[f"fus.{modality}.{key}"] for key in ("wq", "wk", "wv")}
        return None

    def _check_features(self, expr: np.ndarray, modality: str) -> None:
        expected = len(self.rna_features if modality == "rna" else self.adt_features)
        if expr.shape[-1] != expected:
            raise DimensionError(f"{modality} expression has {expr.shape[-1]} features, "
                                 f"model expects {expected}")

    # -- forward passes -----------------------------------------------------

    def _encode(self, nodes, modality: str, expr: np.ndarray,
                plan: emb.MaskPlan | None) -> tuple[TensorNode, emb.MaskRecord | None, emb.EmbeddingParams]:
        self._check_features(expr, modality)
        features = self.rna_features if modality == "rna" else self.adt_features
        embed = self._embedding(nodes, modality)
        tokens = emb.build_tokens(expr, _identity_ordering(features), embed)
        record = None
        if plan is not None:
            visible, record = emb.apply_mask(tokens, plan)
        else:
            visible = tokens.combined
        encoded = encode_modality(visible, self._blocks(nodes, f"enc.{modality}",
                                                        self.config.n_blocks_encoder))
        return encoded, record, embed

    def _fuse_both(self, nodes, e_rna: TensorNode, e_adt: TensorNode
                   ) -> tuple[TensorNode, TensorNode]:
        mode = self.config.fusion_mode
        fused_rna = fusion_variant(e_adt, e_rna, mode, self._fusion_params(nodes, "rna"))
        fused_adt = fusion_variant(e_rna, e_adt, mode, self._fusion_params(nodes, "adt"))
        ft_rna = fuse_with_residual(e_rna, fused_rna, nodes["lam.rna"])
        ft_adt = fuse_with_residual(e_adt, fused_adt, nodes["lam.adt"])
        return ft_rna, ft_adt

    def forward_pretrain(self, tape: Tape, rna_expr: np.ndarray, adt_expr: np.ndarray,
                         rna_plan: emb.MaskPlan, adt_plan: emb.MaskPlan,
                         nodes: dict[str, TensorNode] | None = None
                         ) -> tuple[TensorNode, TensorNode, dict[str, TensorNode]]:
        """Masked reconstruction pass; returns (recon_rna, recon_adt, nodes)."""
        if nodes is None:
            nodes = self.bind(tape)
        e_rna, rec_rna, emb_rna = self._encode(nodes, "rna", rna_expr, rna_plan)
        e_adt, rec_adt, emb_adt = self._encode(nodes, "adt", adt_expr, adt_plan)
        ft_rna, ft_adt = self._fuse_both(nodes, e_rna, e_adt)
        d_rna = ad.add(e_rna, ft_rna)
        d_adt = ad.add(e_adt, ft_adt)
        recon_rna = decode_modality(
            d_rna, self._blocks(nodes, "dec.rna", self.config.n_blocks_decoder),
            nodes["readout.rna.w"], nodes["readout.rna.b"], rec_rna, emb_rna.mask_token)
        recon_adt = decode_modality(
            d_adt, self._blocks(nodes, "dec.adt", self.config.n_blocks_decoder),
            nodes["readout.adt.w"], nodes["readout.adt.b"], rec_adt, emb_adt.mask_token)
        return recon_rna, recon_adt, nodes

    def forward_embed(self, tape: Tape, rna_expr: np.ndarray,
                      adt_expr: np.ndarray | None,
                      nodes: dict[str, TensorNode] | None = None,
                      ) -> tuple[TensorNode, FusionOutputs, dict[str, TensorNode]]:
        """Unmasked pass to the pooled cell embedding (stages 2 and 3).

        With ``adt_expr`` None the ADT branch and the fusion term are absent:
        the fused RNA sequence is the encoder output itself.
        """
        if nodes is None:
            if adt_expr is None:
                prefixes: tuple[str, ...] = ("embed.rna.", "enc.rna.")
            else:
                prefixes = ("embed.", "enc.", "fus.", "lam.")
            nodes = self.bind(tape, prefixes=prefixes)
        e_rna, _, _ = self._encode(nodes, "rna", rna_expr, None)
        if adt_expr is None:
            ft_rna, e_adt, ft_adt = e_rna, None, None
        else:
            e_adt, _, _ = self._encode(nodes, "adt", adt_expr, None)
            ft_rna, ft_adt = self._fuse_both(nodes, e_rna, e_adt)
        pooled = pool_rows(ft_rna, ft_adt, self.config.pooling)
        outputs = FusionOutputs(
            e_rna_out=e_rna.values, e_adt_out=None if e_adt is None else e_adt.values,
            ft_rna=ft_rna.values, ft_adt=None if ft_adt is None else ft_adt.values,
            cell_embedding=pooled.values)
        return pooled, outputs, nodes

    def embed_cells(self, rna_expr: np.ndarray, adt_expr: np.ndarray | None) -> np.ndarray:
        """Cell embeddings as plain arrays (no gradients kept)."""
        tape = Tape()
        pooled, _, _ = self.forward_embed(tape, rna_expr, adt_expr)
        return pooled.values

    # -- checkpoints ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """JSON header line + little-endian float64 payload; bit-exact."""
        entries = []
        offset = 0
        for name, arr in self.params.items():
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 8
        header = {
            "format_version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "config": asdict(self.config),
            "rna_features": self.rna_features,
            "adt_features": self.adt_features,
            "class_names": self.class_names,
            "params": entries,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            for arr in self.params.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "FusionModel":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ParseError(f"{path}: checkpoint header is not valid JSON")
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        try:
            config = ModelConfig(**header["config"])
        except TypeError as exc:
            raise ParseError(f"{path}: bad config block: {exc}")
        params: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = entry["offset"]
            stop = start + size * 8
            if stop > len(payload):
                raise ParseError(f"{path}: payload truncated at parameter {entry['name']}")
            arr = np.frombuffer(payload[start:stop], dtype="<f8").reshape(entry["shape"]).copy()
            params[entry["name"]] = arr
        model = cls(config, params, header["rna_features"], header["adt_features"],
                    class_names=header["class_names"], stage=header["stage"])
        return model
