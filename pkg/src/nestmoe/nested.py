"""Nested MLP experts: width table, importance reordering, sliced evaluation.

An expert is a prefix slice of one MLP layer's weight pair, so expert e is
contained in every larger expert and the last expert is the full layer.

Accumulation-order note: every multi-expert evaluation path computes the
hidden layer in the same per-expert column blocks and accumulates expert
outputs block by block in ascending order. BLAS products are bit-stable
under *row* subsetting but not under *column* subsetting, so sharing the
block boundaries is what lets routed inference (which processes token
subsets) reproduce training-time activations bit-exactly. The direct
single-product route (`expert_forward`) is the plain reference and may
differ from the block route by float reassociation only.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor


def expert_widths(hidden_dim, num_experts):
    """Hidden width of each nested expert: floor((e+1)/E * H), last == H."""
    if num_experts < 1:
        raise ConfigError(f"num_experts must be >= 1, got {num_experts}")
    if num_experts > hidden_dim:
        raise ConfigError(
            f"num_experts {num_experts} > hidden_dim {hidden_dim} would create a zero-width expert")
    return [(e + 1) * hidden_dim // num_experts for e in range(num_experts)]


@dataclass
class NestedMlp:
    """One layer's weight pair plus its expert-width table.

    w_in: (H, D); w_out: (D, H); widths: strictly increasing, ending at H.
    """

    w_in: Tensor
    w_out: Tensor
    widths: list
    activation: str = "silu"

    def __post_init__(self):
        h = self.w_in.shape[0]
        if self.w_out.shape[1] != h:
            raise ContractError(
                f"w_in rows {h} and w_out columns {self.w_out.shape[1]} disagree")
        if list(self.widths) != expert_widths(h, len(self.widths)):
            raise ContractError(
                f"widths {self.widths} are not the nested table for H={h}, E={len(self.widths)}")

    @property
    def num_experts(self):
        return len(self.widths)


def expert_forward(mlp: NestedMlp, x, e):
    """Single-expert output via direct slicing: act(x @ w_in[:H_e].T) @ w_out[:, :H_e].T."""
    if not 0 <= e < mlp.num_experts:
        raise IndexError(f"expert index {e} out of range [0, {mlp.num_experts})")
    act = T.activation(mlp.activation)
    w = mlp.widths[e]
    h = act(T.matmul(x, T.transpose(T.slice_axis(mlp.w_in, 0, 0, w))))
    return T.matmul(h, T.transpose(T.slice_axis(mlp.w_out, 1, 0, w)))


def all_expert_outputs(mlp: NestedMlp, x):
    """Outputs of every expert for the same input, sharing all compute.

    Each hidden block is computed once and expert outputs accumulate over
    ascending W_OUT column blocks, so the total cost equals one full-width
    pass. Element e equals expert_forward(mlp, x, e) up to reassociation
    of the block sums.
    """
    act = T.activation(mlp.activation)
    outputs = []
    y = None
    prev = 0
    for w in mlp.widths:
        h_block = act(T.matmul(x, T.transpose(T.slice_axis(mlp.w_in, 0, prev, w))))
        y_block = T.matmul(h_block, T.transpose(T.slice_axis(mlp.w_out, 1, prev, w)))
        y = y_block if y is None else T.add(y, y_block)
        outputs.append(y)
        prev = w
    return outputs


def prefix_output_data(w_in_data, w_out_data, widths, x_data, e, activation="silu"):
    """Raw-array mirror of all_expert_outputs for a single target expert.

    Used by routed inference on per-expert token groups; computes exactly
    the blocks 0..e with the same block boundaries and accumulation order
    as the graph path, so a row subset reproduces training activations
    bit-for-bit.
    """
    act = _RAW_ACTIVATIONS[activation]
    y = None
    prev = 0
    for w in widths[: e + 1]:
        h_block = act(np.matmul(x_data, w_in_data[prev:w].T))
        y_block = np.matmul(h_block, w_out_data[:, prev:w].T)
        y = y_block if y is None else y + y_block
        prev = w
    return y


def _silu_data(x):
    return x * T._sigmoid(x)


def _relu_data(x):
    return np.maximum(x, 0.0)


_RAW_ACTIVATIONS = {"silu": _silu_data, "relu": _relu_data}


# ---------------------------------------------------------------------------
# importance scoring and reordering


@dataclass
class ImportanceScores:
    """Per-layer aggregate of absolute post-activation hidden values."""

    scores: list  # one (H,) non-negative vector per layer
    token_count: int

    def __post_init__(self):
        if self.token_count <= 0:
            raise ContractError("importance aggregation needs a non-empty calibration set")


def importance_scores(model, calib_batches):
    """Sum |hidden| per neuron over calibration tokens, for every layer.

    `model` must be a plain dense checkpoint (pre-nesting); hidden values
    are taken after the activation function.
    """
    if model.widths is not None:
        raise ContractError("importance calibration runs on the dense checkpoint, before nesting")
    sums = [np.zeros(model.config.hidden_dim) for _ in range(model.config.num_layers)]
    count = 0

    def hook(layer, hidden_data):
        sums[layer] += np.abs(hidden_data).sum(axis=0)

    for batch in calib_batches:
        batch = np.asarray(batch)
        model.forward(batch, hidden_hook=hook)
        count += batch.size
    if count == 0:
        raise ContractError("importance aggregation needs a non-empty calibration set")
    return ImportanceScores(scores=sums, token_count=count)


def importance_permutation(scores):
    """Hidden-unit order by descending score; ties keep ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def reorder_mlp(mlp: NestedMlp, scores):
    """Permute w_in rows / w_out columns so high-score units come first.

    The full-width function is unchanged up to float reassociation (hidden
    units are permutation-symmetric).
    """
    scores = np.asarray(scores)
    if scores.shape != (mlp.w_in.shape[0],):
        raise ContractError(
            f"scores length {scores.shape} does not match hidden dim {mlp.w_in.shape[0]}")
    perm = importance_permutation(scores)
    return NestedMlp(
        w_in=Tensor(mlp.w_in.data[perm].copy(), requires_grad=mlp.w_in.requires_grad),
        w_out=Tensor(mlp.w_out.data[:, perm].copy(), requires_grad=mlp.w_out.requires_grad),
        widths=list(mlp.widths),
        activation=mlp.activation,
    )


def reorder_model(model, importance: ImportanceScores):
    """Apply importance reordering to every layer's MLP weights, in place."""
    if len(importance.scores) != model.config.num_layers:
        raise ContractError(
            f"importance has {len(importance.scores)} layers, model has {model.config.num_layers}")
    for i, scores in enumerate(importance.scores):
        w_in = model.params[f"layers.{i}.mlp.w_in"]
        w_out = model.params[f"layers.{i}.mlp.w_out"]
        if np.asarray(scores).shape != (w_in.shape[0],):
            raise ContractError(f"layer {i}: scores do not match hidden dim {w_in.shape[0]}")
        perm = importance_permutation(scores)
        w_in.data = np.ascontiguousarray(w_in.data[perm])
        w_out.data = np.ascontiguousarray(w_out.data[:, perm])
    model.meta["reordered"] = True
