"""Test-time-training sequence layer with a linear fast weight.

The hidden state of the layer is itself a weight matrix W. For every token
x_t the layer takes one gradient-descent step on a self-supervised
reconstruction loss

    loss(W; x_t) = || W (theta_k x_t) - theta_v x_t ||^2
    W_t = W_{t-1} - eta * 2 (W_{t-1} k - v) k^T        (k, v = projections)

and then emits z_t = W_t (theta_q x_t). The whole recurrence is recorded
on the tape, so outer-loop training differentiates through every inner
step. Sequences may be a single [n, d] matrix or a batched [batch, n, d]
stack; the fast weight then carries one matrix per batch element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, TensorNode
from .errors import ContractError, DimensionError

_ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu}


@dataclass
class TTTLayerParams:
    """Outer-loop parameters of one TTT layer (all nodes on one tape)."""

    theta_k: TensorNode  # training-view projection [d, d]
    theta_v: TensorNode  # label-view projection [d, d]
    theta_q: TensorNode  # test-view projection [d, d]
    w0: TensorNode       # initial fast weight [d, d]
    eta: TensorNode      # inner learning rate, scalar node (>= 0)
    d: int

    def __post_init__(self):
        for name in ("theta_k", "theta_v", "theta_q", "w0"):
            node = getattr(self, name)
            if node.values.shape != (self.d, self.d):
                raise DimensionError(f"{name} must be [{self.d}, {self.d}], got {node.values.shape}")
        if self.eta.values.item() < 0.0:
            raise ContractError("inner learning rate must be >= 0")


@dataclass
class TTTState:
    """Per-sequence fast-weight state after ``step`` tokens."""

    w: TensorNode
    step: int = 0


@dataclass
class TTTBlockParams:
    """One residual block: TTT layer plus MLP, each behind an RMSNorm."""

    ttt: TTTLayerParams
    norm1: TensorNode   # [d]
    norm2: TensorNode   # [d]
    mlp_w1: TensorNode  # [d, hidden]
    mlp_b1: TensorNode  # [hidden]
    mlp_w2: TensorNode  # [hidden, d]
    mlp_b2: TensorNode  # [d]
    activation: str = "gelu"
    rms_eps: float = 1e-6


def init_ttt_layer_arrays(d: int, rng: np.random.Generator,
                          eta: float = 0.1, learn_eta: bool = True) -> dict[str, np.ndarray]:
    """Fresh numpy parameter arrays for one TTT layer.

    Projections and the initial fast weight are uniform(-1/sqrt(d), 1/sqrt(d));
    a learnable eta is stored in log space so gradient steps keep it positive.
    """
    bound = 1.0 / np.sqrt(d)
    arrays = {name: rng.uniform(-bound, bound, (d, d))
              for name in ("theta_k", "theta_v", "theta_q", "w0")}
    if learn_eta and eta > 0.0:
        arrays["log_eta"] = np.asarray(np.log(eta))
    else:
        arrays["eta"] = np.asarray(float(eta))
    return arrays


def init_ttt_block_arrays(d: int, rng: np.random.Generator, *, hidden_mult: int = 4,
                          eta: float = 0.1, learn_eta: bool = True) -> dict[str, np.ndarray]:
    """Fresh arrays for a TTT block: layer params, norm gains, and the MLP."""
    arrays = {f"ttt.{k}": v for k, v in init_ttt_layer_arrays(d, rng, eta, learn_eta).items()}
    hidden = hidden_mult * d
    arrays["norm1"] = np.ones(d)
    arrays["norm2"] = np.ones(d)
    arrays["mlp_w1"] = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), (d, hidden))
    arrays["mlp_b1"] = np.zeros(hidden)
    arrays["mlp_w2"] = rng.uniform(-1.0 / np.sqrt(hidden), 1.0 / np.sqrt(hidden), (hidden, d))
    arrays["mlp_b2"] = np.zeros(d)
    return arrays


def ttt_layer_from_nodes(nodes: dict[str, TensorNode]) -> TTTLayerParams:
    """Assemble layer params from already-bound nodes (log_eta or fixed eta)."""
    eta = ad.exp(nodes["log_eta"]) if "log_eta" in nodes else nodes["eta"]
    d = nodes["theta_k"].values.shape[0]
    return TTTLayerParams(nodes["theta_k"], nodes["theta_v"], nodes["theta_q"],
                          nodes["w0"], eta, d)


def ttt_block_from_nodes(nodes: dict[str, TensorNode], *, activation: str = "gelu",
                         rms_eps: float = 1e-6) -> TTTBlockParams:
    layer = ttt_layer_from_nodes({k[4:]: v for k, v in nodes.items() if k.startswith("ttt.")})
    return TTTBlockParams(layer, nodes["norm1"], nodes["norm2"],
                          nodes["mlp_w1"], nodes["mlp_b1"], nodes["mlp_w2"], nodes["mlp_b2"],
                          activation=activation, rms_eps=rms_eps)


def _bind_arrays(tape: Tape, arrays: dict[str, np.ndarray], trainable: bool) -> dict[str, TensorNode]:
    return {key: tape.tensor(val, requires_grad=trainable and key.split(".")[-1] != "eta")
            for key, val in arrays.items()}


def bind_ttt_layer(tape: Tape, arrays: dict[str, np.ndarray], *, trainable: bool = True) -> TTTLayerParams:
    """Materialize stored arrays as nodes on ``tape``."""
    return ttt_layer_from_nodes(_bind_arrays(tape, arrays, trainable))


def bind_ttt_block(tape: Tape, arrays: dict[str, np.ndarray], *, activation: str = "gelu",
                   rms_eps: float = 1e-6, trainable: bool = True) -> TTTBlockParams:
    return ttt_block_from_nodes(_bind_arrays(tape, arrays, trainable),
                                activation=activation, rms_eps=rms_eps)


def _as_column(x_t: TensorNode, d: int) -> TensorNode:
    """Accept a token as [d], [d, 1], or [batch, d, 1] and return a column."""
    shape = x_t.values.shape
    if shape == (d,):
        return ad.reshape(x_t, (d, 1))
    if shape[-2:] == (d, 1):
        return x_t
    raise DimensionError(f"token must be a length-{d} vector, got shape {shape}")


def inner_loss(w: TensorNode, x_t: TensorNode, params: TTTLayerParams) -> TensorNode:
    """Self-supervised reconstruction loss of the fast weight on one token."""
    x = _as_column(x_t, params.d)
    k = ad.matmul(params.theta_k, x)
    v = ad.matmul(params.theta_v, x)
    err = ad.sub(ad.matmul(w, k), v)
    return ad.sum_all(ad.square(err))


def state_update(state: TTTState, x_t: TensorNode, params: TTTLayerParams,
                 *, two_eta: TensorNode | None = None) -> TTTState:
    """One inner gradient step: W <- W - eta * 2 (W k - v) k^T."""
    x = _as_column(x_t, params.d)
    k = ad.matmul(params.theta_k, x)
    v = ad.matmul(params.theta_v, x)
    err = ad.sub(ad.matmul(state.w, k), v)
    outer = ad.matmul(err, ad.transpose(k))
    if two_eta is None:
        two_eta = ad.scale(params.eta, 2.0)
    step_term = ad.scale(outer, two_eta)
    w_new = ad.sub(state.w, step_term)
    return TTTState(w=w_new, step=state.step + 1)


def forward_sequence(tokens: TensorNode, params: TTTLayerParams) -> tuple[TensorNode, TTTState]:
    """Run the fast-weight recurrence over a token sequence.

    ``tokens`` is [n, d] or [batch, n, d]; returns the per-token outputs of
    the same shape and the final state. Each token first updates the fast
    weight, then the updated weight produces the output.
    """
    shape = tokens.values.shape
    if shape[-1] != params.d:
        raise DimensionError(f"token width {shape[-1]} != layer width {params.d}")
    n = shape[-2] if len(shape) >= 2 else 0
    if len(shape) < 2 or n < 1:
        raise ContractError(f"forward_sequence needs at least one token, got shape {shape}")

    w = params.w0
    if len(shape) == 3:
        w = ad.expand_batch(w, shape[0])
    state = TTTState(w=w, step=0)
    two_eta = ad.scale(params.eta, 2.0)

    outputs = []
    for t in range(n):
        x = ad.transpose(ad.slice_rows(tokens, t, t + 1))  # [..., d, 1]
        state = state_update(state, x, params, two_eta=two_eta)
        q = ad.matmul(params.theta_q, x)
        z = ad.matmul(state.w, q)
        outputs.append(ad.transpose(z))  # [..., 1, d]
    return ad.concat_rows(outputs), state


def ttt_block_forward(x: TensorNode, params: TTTBlockParams) -> TensorNode:
    """Two pre-normalized residual sub-layers: TTT layer, then the MLP."""
    if x.values.shape[-1] != params.ttt.d:
        raise DimensionError(f"block width {params.ttt.d} != input width {x.values.shape[-1]}")
    act = _ACTIVATIONS[params.activation]

    h = ad.rms_norm(x, params.norm1, params.rms_eps)
    seq_out, _ = forward_sequence(h, params.ttt)
    x1 = ad.add(seq_out, x)

    h2 = ad.rms_norm(x1, params.norm2, params.rms_eps)
    m = ad.add_bcast(ad.matmul(h2, params.mlp_w1), params.mlp_b1)
    m = act(m)
    m = ad.add_bcast(ad.matmul(m, params.mlp_w2), params.mlp_b2)
    return ad.add(m, x1)
