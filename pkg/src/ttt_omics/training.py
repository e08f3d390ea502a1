"""Three-stage training: masked pretraining, supervised fine-tuning, transfer.

Stage 1 minimizes the weighted masked-reconstruction error of both
modalities. Stage 2 starts from the stage-1 weights, drops the decoders,
and trains a softmax head on a stratified labeled subset (30% of the
labeled cells by default). Stage 3 starts from the stage-2 weights and
fine-tunes the RNA branch alone on a unimodal dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import embedding as emb
from .autodiff import Tape, TensorNode
from .errors import ConfigError, ContractError, DimensionError
from .model import FusionModel

_PROB_CLAMP = 1e-12
_IMPROVE_TOL = 1e-12


@dataclass
class StageConfig:
    """One stage's hyperparameters."""

    stage: int
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    alpha: float = 0.5
    beta: float = 0.5
    label_fraction: float = 0.30
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int = 10

    def validate(self) -> "StageConfig":
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2, or 3, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.stage == 1 and self.alpha + self.beta <= 0:
            raise ConfigError("stage 1 needs alpha + beta > 0")
        if self.stage in (2, 3) and not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must be in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        return self


@dataclass
class LabelSet:
    """Cell labels with a deterministic stratified train/eval split."""

    cell_ids: list[str]
    class_index: np.ndarray
    class_names: list[str]
    train_mask: np.ndarray

    def class_of(self, cell_id: str) -> int:
        return self.class_index[self.cell_ids.index(cell_id)]

    @property
    def train_ids(self) -> list[str]:
        return [cid for cid, keep in zip(self.cell_ids, self.train_mask) if keep]

    @property
    def eval_ids(self) -> list[str]:
        return [cid for cid, keep in zip(self.cell_ids, self.train_mask) if not keep]


def split_labels(labels: dict[str, str], fraction: float, seed: int) -> LabelSet:
    """Stratified split: round(fraction * class size) per class, at least 1."""
    if not labels:
        raise ContractError("label set is empty")
    if not 0.0 < fraction <= 1.0:
        raise ContractError("label fraction must be in (0, 1]")
    cell_ids = list(labels.keys())
    class_names = sorted(set(labels.values()))
    name_to_idx = {name: i for i, name in enumerate(class_names)}
    class_index = np.array([name_to_idx[labels[cid]] for cid in cell_ids])
    train_mask = np.zeros(len(cell_ids), dtype=bool)
    rng = np.random.default_rng(seed)
    for k in range(len(class_names)):
        members = np.flatnonzero(class_index == k)
        take = max(1, round(fraction * members.size))
        chosen = rng.permutation(members)[:take]
        train_mask[chosen] = True
    return LabelSet(cell_ids=cell_ids, class_index=class_index,
                    class_names=class_names, train_mask=train_mask)


# ---------------------------------------------------------------------------
# losses and head


def _node_of(value, tape: Tape | None) -> tuple[TensorNode, Tape]:
    if isinstance(value, TensorNode):
        return value, value.tape
    if tape is None:
        tape = Tape()
    return tape.tensor(np.asarray(value, dtype=np.float64)), tape


def loss_pretrain(x_rna, d_rna, x_adt, d_adt, alpha: float, beta: float) -> TensorNode:
    """alpha * MSE(rna) + beta * MSE(adt), means over all elements."""
    tape = next((v.tape for v in (x_rna, d_rna, x_adt, d_adt)
                 if isinstance(v, TensorNode)), None)
    x_rna, tape = _node_of(x_rna, tape)
    d_rna, _ = _node_of(d_rna, tape)
    x_adt, _ = _node_of(x_adt, tape)
    d_adt, _ = _node_of(d_adt, tape)
    for x, d in ((x_rna, d_rna), (x_adt, d_adt)):
        if x.values.shape != d.values.shape:
            raise DimensionError(f"reconstruction shape {d.values.shape} != target {x.values.shape}")
    term_rna = ad.mean_all(ad.square(ad.sub(x_rna, d_rna)))
    term_adt = ad.mean_all(ad.square(ad.sub(x_adt, d_adt)))
    return ad.add(ad.scale(term_rna, alpha), ad.scale(term_adt, beta))


def loss_classification(true_labels, predicted_probs) -> TensorNode:
    """Mean categorical cross-entropy with probabilities clamped at 1e-12."""
    probs, _ = _node_of(predicted_probs, None)
    p = probs.values
    if p.ndim != 2 or p.shape[1] < 2:
        raise ContractError(f"probabilities must be [n, classes >= 2], got shape {p.shape}")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ContractError("probabilities must lie in [0, 1]")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-6:
        raise ContractError("probability rows must sum to 1")
    y = np.asarray(true_labels, dtype=np.intp)
    if y.shape != (p.shape[0],):
        raise DimensionError(f"{y.shape[0] if y.ndim else 0} labels for {p.shape[0]} rows")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise ContractError("label index out of range")
    onehot = np.zeros_like(p)
    onehot[np.arange(y.size), y] = 1.0
    picked = ad.mul(probs.tape.tensor(onehot), ad.log(ad.clamp_min(probs, _PROB_CLAMP)))
    return ad.scale(ad.sum_all(picked), -1.0 / y.size)


def classification_head(cell_embedding: TensorNode, w: TensorNode, b: TensorNode) -> TensorNode:
    """Linear map to class logits followed by a row softmax."""
    x = cell_embedding
    if x.values.ndim == 1:
        x = ad.reshape(x, (1, x.values.shape[0]))
    return ad.softmax_rows(ad.add_bcast(ad.matmul(x, w), b))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, config: StageConfig) -> None:
    """Adam (default) or SGD update, in place on the parameter store."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ContractError(f"non-finite gradient for parameter {name!r}; step rejected")
        if params[name].shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter {params[name].shape} for {name!r}")
    state.step_count += 1
    lr = config.learning_rate
    if config.optimizer == "sgd":
        for name, g in grads.items():
            params[name] = params[name] - lr * g
        return
    t = state.step_count
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + config.eps)


# ---------------------------------------------------------------------------
# stage runner


@dataclass
class PairedDataset:
    """Preprocessed expression in sorted token order, plus optional labels."""

    rna: np.ndarray                    # [n_cells, n_genes]
    adt: np.ndarray | None             # [n_cells, n_proteins] or None (unimodal)
    cell_ids: list[str]
    labels: dict[str, str] | None = None

    @property
    def n_cells(self) -> int:
        return self.rna.shape[0]


def _mask_seed(seed: int, epoch: int, step: int, modality: int) -> int:
    return int(np.random.SeedSequence((seed, epoch, step, modality)).generate_state(1)[0])


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]


def run_stage(stage_cfg: StageConfig, dataset: PairedDataset, model: FusionModel
              ) -> tuple[FusionModel, list[float]]:
    """Train one stage in place; returns the model and per-epoch mean losses."""
    cfg = stage_cfg.validate()
    required_prior = cfg.stage - 1
    if model.stage < required_prior:
        raise ConfigError(f"stage {cfg.stage} requires a stage-{required_prior} checkpoint, "
                          f"model is at stage {model.stage}")
    if cfg.stage in (1, 2) and dataset.adt is None:
        raise ConfigError(f"stage {cfg.stage} needs paired RNA and ADT data")

    if cfg.stage in (2, 3):
        if dataset.labels is None:
            raise ConfigError(f"stage {cfg.stage} needs cell labels")
        known = [cid for cid in dataset.cell_ids if cid in dataset.labels]
        if not known:
            raise ConfigError("no dataset cells present in the label file")
        split = split_labels({cid: dataset.labels[cid] for cid in known},
                             cfg.label_fraction, cfg.seed)
        model.ensure_head(split.class_names)
        row_of = {cid: i for i, cid in enumerate(dataset.cell_ids)}
        train_rows = np.array([row_of[cid] for cid in split.train_ids])
        y_all = {row_of[cid]: split.class_index[i]
                 for i, cid in enumerate(split.cell_ids)}
    else:
        train_rows = np.arange(dataset.n_cells)
        y_all = None

    rng = np.random.default_rng(cfg.seed)
    opt_state = OptimizerState()
    trace: list[float] = []
    best = np.inf
    stall = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(train_rows)
        total, weight = 0.0, 0
        for step, rows in enumerate(_batches(order, cfg.batch_size)):
            tape = Tape()
            if cfg.stage == 1:
                nodes = model.bind(tape)
                rna_b = dataset.rna[rows]
                adt_b = dataset.adt[rows]
                plan_rna = emb.make_mask_plan(rna_b.shape[1], model.config.mask_ratio,
                                              _mask_seed(cfg.seed, epoch, step, 0))
                plan_adt = emb.make_mask_plan(adt_b.shape[1], model.config.mask_ratio,
                                              _mask_seed(cfg.seed, epoch, step, 1))
                recon_rna, recon_adt, _ = model.forward_pretrain(
                    tape, rna_b, adt_b, plan_rna, plan_adt, nodes=nodes)
                loss = loss_pretrain(rna_b, recon_rna, adt_b, recon_adt,
                                     cfg.alpha, cfg.beta)
            else:
                if cfg.stage == 2:
                    prefixes: tuple[str, ...] = ("embed.", "enc.", "fus.", "lam.", "head.")
                    adt_b = dataset.adt[rows]
                else:
                    prefixes = ("embed.rna.", "enc.rna.", "head.")
                    adt_b = None
                nodes = model.bind(tape, prefixes=prefixes)
                pooled, _, _ = model.forward_embed(tape, dataset.rna[rows], adt_b, nodes=nodes)
                probs = classification_head(pooled, nodes["head.w"], nodes["head.b"])
                labels_b = np.array([y_all[r] for r in rows])
                loss = loss_classification(labels_b, probs)

            ad.backward(tape, loss)
            grads = {name: node.grad for name, node in nodes.items() if node.requires_grad}
            optimizer_step(model.params, grads, opt_state, cfg)
            total += loss.values.item() * rows.size
            weight += rows.size
        epoch_loss = total / weight
        trace.append(epoch_loss)
        if epoch_loss < best - _IMPROVE_TOL:
            best = epoch_loss
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    model.stage = max(model.stage, cfg.stage)
    return model, trace
