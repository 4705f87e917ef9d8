"""Evaluation instruments for adapted checkpoints.

Routed inference (only the predicted expert's slice is computed per
token), router confusion against freshly derived labels, per-layer expert
usage with entropies, activated-parameter accounting, and held-out
perplexity. Emitters write the delimited/JSON report files; figure
rendering lives in figures.py and is driven by the CLI.
"""

import json
from dataclasses import dataclass

import numpy as np

from .adapt import AdaptConfig, adapt_forward
from .errors import ConfigError
from .labels import label_distribution
from .model import TransformerLm, eval_windows, lm_loss
from .nested import prefix_output_data
from .router import predict_expert, router_forward_data
from .tensor import Tensor


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (E, E); rows = derived label, cols = prediction
    accuracy: float
    adjacent_error_fraction: float
    total: int
    errors: int


@dataclass
class UsageReport:
    fractions: np.ndarray  # (layers, E), rows sum to 1
    entropy: np.ndarray    # (layers,), natural log
    mean_entropy: float


def _require_adapted(model):
    if model.widths is None or model.routers is None:
        raise ConfigError("analysis needs an adapted checkpoint (nested experts + routers)")


def routed_mlp_fn(model, choices_sink=None, force_expert=None, choices_override=None):
    """Per-layer MLP path that computes only each token's chosen expert slice.

    Tokens are grouped by the router's predicted expert; each group runs
    the block-accumulated prefix evaluation on its rows only, which is
    bit-identical to the training-time activations for the same choices.
    """
    layer_counter = [0]

    def mlp_fn(i, xn):
        x = xn.data
        if choices_override is not None:
            choice = np.asarray(choices_override[layer_counter[0]])
        elif force_expert is not None:
            choice = np.full(x.shape[0], force_expert, dtype=np.int64)
        else:
            choice = predict_expert(router_forward_data(model.routers[i], x))
        layer_counter[0] += 1
        w_in = model.params[f"layers.{i}.mlp.w_in"].data
        w_out = model.params[f"layers.{i}.mlp.w_out"].data
        out = np.zeros_like(x)
        for e in np.unique(choice):
            rows = np.nonzero(choice == e)[0]
            out[rows] = prefix_output_data(
                w_in, w_out, model.widths, x[rows], int(e), model.config.activation)
        if choices_sink is not None:
            choices_sink.append(choice)
        return Tensor(out)

    return mlp_fn


def routed_forward(model, tokens, force_expert=None, choices_override=None):
    """Router-directed forward. Returns (logits, choices (L, B, T))."""
    _require_adapted(model)
    tokens = np.asarray(tokens)
    sink = []
    logits = model.forward(
        tokens,
        mlp_fn=routed_mlp_fn(model, choices_sink=sink,
                             force_expert=force_expert, choices_override=choices_override),
    )
    b, t = tokens.shape
    choices = np.stack(sink).reshape(model.config.num_layers, b, t)
    return logits, choices


def _eval_batches(tokens, seq_len, batch_size, max_windows=None):
    windows = eval_windows(tokens, seq_len)
    if max_windows is not None:
        windows = windows[:max_windows]
    for i in range(0, len(windows), batch_size):
        yield windows[i : i + batch_size]


def collect_choices(model, tokens, seq_len=128, batch_size=16, max_windows=None,
                    force_expert=None):
    """Routed choices over a held-out stream, flattened to (L, tokens)."""
    _require_adapted(model)
    per_layer = [[] for _ in range(model.config.num_layers)]
    for batch in _eval_batches(tokens, seq_len, batch_size, max_windows):
        _, choices = routed_forward(model, batch, force_expert=force_expert)
        for i in range(model.config.num_layers):
            per_layer[i].append(choices[i].ravel())
    return np.stack([np.concatenate(c) for c in per_layer])


def collect_label_prediction_pairs(model, tokens, theta=None, seq_len=128, batch_size=16,
                                   max_windows=None):
    """Derived labels and router predictions over a held-out stream.

    Runs the adaptation-time forward (teacher-forced trunk, fresh labels)
    without training. theta defaults to the checkpoint's training theta.
    """
    _require_adapted(model)
    if theta is None:
        theta = model.meta.get("theta")
        if theta is None:
            raise ConfigError("checkpoint carries no theta; pass one explicitly")
    cfg = AdaptConfig(theta=theta, num_experts=len(model.widths),
                      ablation_mode=False, lambda_router=1.0)
    labels, preds = [], []
    for batch in _eval_batches(tokens, seq_len, batch_size, max_windows):
        fwd = adapt_forward(model, batch, cfg)
        labels.append(fwd.labels)
        preds.append(fwd.predictions)
    return np.concatenate(labels, axis=1), np.concatenate(preds, axis=1)


def confusion_from_pairs(labels, predictions, num_experts):
    """Tabulate (label, prediction) pairs into a confusion matrix."""
    labels = np.asarray(labels).ravel()
    predictions = np.asarray(predictions).ravel()
    counts = np.zeros((num_experts, num_experts), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    total = int(counts.sum())
    correct = int(np.trace(counts))
    errors = total - correct
    if errors:
        adjacent = sum(
            int(counts[i, j]) for i in range(num_experts) for j in range(num_experts)
            if i != j and abs(i - j) == 1
        )
        adjacent_fraction = adjacent / errors
    else:
        adjacent_fraction = 1.0  # no errors to classify
    return ConfusionMatrix(
        counts=counts,
        accuracy=correct / total if total else 0.0,
        adjacent_error_fraction=adjacent_fraction,
        total=total,
        errors=errors,
    )


def confusion(model, eval_tokens, theta=None, seq_len=128, batch_size=16, max_windows=None):
    """Router confusion matrix over all layers of a held-out stream."""
    labels, preds = collect_label_prediction_pairs(
        model, eval_tokens, theta=theta, seq_len=seq_len,
        batch_size=batch_size, max_windows=max_windows)
    return confusion_from_pairs(labels, preds, len(model.widths))


def usage_from_choices(choices, num_experts):
    """Per-layer expert-usage fractions and entropy from a choice table."""
    choices = np.asarray(choices)
    num_layers = choices.shape[0]
    fractions = label_distribution(choices, num_layers, num_experts)
    entropy = np.zeros(num_layers)
    for i in range(num_layers):
        p = fractions[i][fractions[i] > 0]
        entropy[i] = float(-(p * np.log(p)).sum())
    return UsageReport(fractions=fractions, entropy=entropy,
                       mean_entropy=float(entropy.mean()))


def expert_usage(model, eval_tokens, seq_len=128, batch_size=16, max_windows=None,
                 force_expert=None):
    """How often the router sends tokens to each expert, per layer."""
    choices = collect_choices(model, eval_tokens, seq_len=seq_len, batch_size=batch_size,
                              max_windows=max_windows, force_expert=force_expert)
    return usage_from_choices(choices, len(model.widths))


def shared_param_count(model):
    """Parameters active for every token: everything except the MLP pairs."""
    mc = model.config
    mlp_total = mc.num_layers * 2 * mc.embed_dim * mc.hidden_dim
    return model.param_count() - mlp_total


def activated_params_from_choices(model, choices):
    """Mean per-token activated parameters given routing choices (L, N)."""
    choices = np.asarray(choices)
    widths = np.asarray(model.widths)
    per_expert = 2 * model.config.embed_dim * widths
    per_token_mlp = per_expert[choices].sum(axis=0)
    return float(shared_param_count(model) + per_token_mlp.mean())


def activated_params(model, eval_tokens, seq_len=128, batch_size=16, max_windows=None,
                     force_expert=None):
    """Mean activated parameters per token over a held-out stream."""
    _require_adapted(model)
    choices = collect_choices(model, eval_tokens, seq_len=seq_len, batch_size=batch_size,
                              max_windows=max_windows, force_expert=force_expert)
    return activated_params_from_choices(model, choices)


def perplexity(model, tokens, mode="dense", seq_len=128, batch_size=16, max_windows=None):
    """exp(mean next-token cross-entropy) over deterministic windows."""
    if mode not in ("dense", "routed"):
        raise ConfigError(f"perplexity mode must be dense or routed, got {mode!r}")
    if mode == "routed":
        _require_adapted(model)
    total, count = 0.0, 0
    for batch in _eval_batches(tokens, seq_len, batch_size, max_windows):
        if mode == "routed":
            logits, _ = routed_forward(model, batch)
        else:
            logits = model.forward(batch)
        total += lm_loss(logits, batch).item() * len(batch)
        count += len(batch)
    return float(np.exp(total / count))


def usage_entropy_compare(model_with_loss, model_ablated, eval_tokens, seq_len=128,
                          batch_size=16, max_windows=None):
    """Mean per-layer usage entropy of the default vs ablated checkpoints."""
    with_loss = expert_usage(model_with_loss, eval_tokens, seq_len=seq_len,
                             batch_size=batch_size, max_windows=max_windows)
    ablated = expert_usage(model_ablated, eval_tokens, seq_len=seq_len,
                           batch_size=batch_size, max_windows=max_windows)
    return with_loss.mean_entropy, ablated.mean_entropy


# ---------------------------------------------------------------------------
# report emission (field-by-field formats documented in README)


def write_confusion_csv(cm: ConfusionMatrix, path):
    e = cm.counts.shape[0]
    with open(path, "w", newline="") as f:
        f.write("label," + ",".join(f"pred_{j}" for j in range(e)) + "\n")
        for i in range(e):
            f.write(",".join([str(i)] + [str(int(c)) for c in cm.counts[i]]) + "\n")


def write_usage_csv(report: UsageReport, path):
    e = report.fractions.shape[1]
    with open(path, "w", newline="") as f:
        f.write("layer," + ",".join(f"expert_{j}" for j in range(e)) + ",entropy\n")
        for i, row in enumerate(report.fractions):
            cells = [str(i)] + [repr(float(x)) for x in row] + [repr(float(report.entropy[i]))]
            f.write(",".join(cells) + "\n")


def write_metrics_json(metrics: dict, path):
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
