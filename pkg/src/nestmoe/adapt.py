"""Post-training adaptation: frozen-trunk fine-tuning with derived labels.

Each step recomputes all expert outputs per layer, derives the difficulty
labels at the configured threshold, trains the router on those labels,
and routes every token through its *label's* expert (teacher forcing), so
each expert trains on exactly the population it will serve. The combined
objective weights the language-model loss and the router loss.

Gradient isolation: the router reads a detached copy of the layer input,
so the router loss updates only router weights and the LM loss updates
only MLP weights. Ablation mode routes by the router's own predictions
instead and scales the chosen expert's output by its softmax probability,
which is the only gradient path into the router there.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .labels import derive_labels, similarity_matrix
from .model import TransformerLm, eval_windows, lm_loss, sample_batch
from .nested import NestedMlp, all_expert_outputs, expert_widths, importance_scores, reorder_model
from .optim import AdamW
from .router import Router, predict_expert, router_forward, router_loss
from .tensor import Graph


@dataclass
class AdaptConfig:
    theta: float = 0.8
    lambda_llm: float = 0.2
    lambda_router: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    seq_len: int = 128
    lr: float = 3e-4
    weight_decay: float = 0.0
    freeze_attention: bool = True
    ablation_mode: bool = False
    num_experts: int = 4
    router_hidden: int = 64
    router_nonlinearity: str = "relu"
    seed: int = 0

    def validate(self):
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must lie strictly in (0, 1), got {self.theta}")
        if self.lambda_llm < 0 or self.lambda_router < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.ablation_mode and self.lambda_router != 0:
            raise ConfigError("ablation_mode trains without the router loss; set lambda_router=0")
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        return self


@dataclass
class AdaptForward:
    llm_loss: object
    router_loss: object
    labels: np.ndarray       # (layers, tokens)
    predictions: np.ndarray  # (layers, tokens)


def attach_nested(model: TransformerLm, cfg: AdaptConfig):
    """Give a dense model its expert-width table and per-layer routers."""
    cfg.validate()
    mc = model.config
    model.widths = expert_widths(mc.hidden_dim, cfg.num_experts)
    dtype = model.dtype
    model.routers = [
        Router(mc.embed_dim, cfg.router_hidden, cfg.num_experts, cfg.router_nonlinearity,
               rng=np.random.default_rng([cfg.seed, 0x40175, i]), dtype=dtype)
        for i in range(mc.num_layers)
    ]
    model.meta.update(
        theta=cfg.theta,
        num_experts=cfg.num_experts,
        router_hidden=cfg.router_hidden,
        router_nonlinearity=cfg.router_nonlinearity,
        ablation_mode=cfg.ablation_mode,
    )
    return model


def adapt_forward(model: TransformerLm, tokens, cfg: AdaptConfig, force_expert=None):
    """One adapted forward pass: losses plus per-layer labels/predictions.

    force_expert overrides both the label and the prediction for every
    token (diagnostic knob; force_expert = E-1 reproduces the dense
    forward bit-exactly).
    """
    if model.widths is None or model.routers is None:
        raise ConfigError("model has no nested experts/routers; call attach_nested first")
    theta = cfg.theta
    labels_by_layer = []
    preds_by_layer = []
    ce_terms = []

    def mlp_fn(i, xn):
        mlp = NestedMlp(
            model.params[f"layers.{i}.mlp.w_in"],
            model.params[f"layers.{i}.mlp.w_out"],
            model.widths,
            model.config.activation,
        )
        ys = all_expert_outputs(mlp, xn)
        if force_expert is None:
            s = similarity_matrix([y.data for y in ys])
            labels = derive_labels(s, theta)
        else:
            labels = np.full(xn.shape[0], force_expert, dtype=np.int64)
        logits = router_forward(model.routers[i], xn.detach())
        preds = predict_expert(logits.data) if force_expert is None else labels
        ce_terms.append(router_loss(logits, labels))
        labels_by_layer.append(labels)
        preds_by_layer.append(preds)
        if cfg.ablation_mode:
            chosen = preds
            scale = T.take_per_row(T.softmax(logits), chosen)
            return T.mul(T.select_rows(ys, chosen), scale)
        return T.select_rows(ys, labels)

    logits = model.forward(tokens, mlp_fn=mlp_fn)
    llm = lm_loss(logits, tokens)
    total_ce = ce_terms[0]
    for term in ce_terms[1:]:
        total_ce = T.add(total_ce, term)
    router_ce = T.mul(total_ce, 1.0 / len(ce_terms))
    return AdaptForward(
        llm_loss=llm,
        router_loss=router_ce,
        labels=np.stack(labels_by_layer),
        predictions=np.stack(preds_by_layer),
    )


def combined_loss(llm_loss, router_loss, cfg: AdaptConfig):
    """lambda_llm * L_llm + lambda_router * L_router.

    Zero-weighted terms are dropped from the graph entirely, so a zeroed
    loss contributes no gradient anywhere (not even exact zeros).
    """
    terms = []
    if cfg.lambda_llm != 0.0:
        terms.append(T.mul(llm_loss, cfg.lambda_llm))
    if cfg.lambda_router != 0.0:
        terms.append(T.mul(router_loss, cfg.lambda_router))
    if not terms:
        return T.mul(llm_loss, 0.0)
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total


def trainable_params(model: TransformerLm, cfg: AdaptConfig):
    """MLP and router tensors train; everything else is frozen.

    Frozen tensors get requires_grad=False so no gradient is even
    computed for them, which also guarantees bit-identity across steps.
    """
    trainable = []
    for name, t in model.named_params():
        is_mlp = ".mlp." in name
        is_router = ".router." in name
        t.requires_grad = is_mlp or is_router or not cfg.freeze_attention
        if t.requires_grad:
            trainable.append(t)
    return trainable


@dataclass
class AdaptResult:
    model: TransformerLm
    history: list = field(default_factory=list)  # (step, llm, router, acc)


def adapt(model: TransformerLm, tokens, cfg: AdaptConfig, log_path=None,
          auto_reorder=False, calib_tokens=4096, log_every=1):
    """Adapt a dense checkpoint into a nested-expert model (in place).

    The model must already be importance-reordered, unless auto_reorder
    is set, in which case calibration and reordering run here first.
    """
    cfg.validate()
    if not model.meta.get("reordered"):
        if not auto_reorder:
            raise ConfigError(
                "model is not importance-reordered; run the reorder stage or pass auto_reorder")
        calibrate_and_reorder(model, tokens, calib_tokens, cfg.seq_len)
    if model.widths is None:
        attach_nested(model, cfg)
    params = trainable_params(model, cfg)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0xADA91])
    history = []
    for step in range(cfg.steps):
        batch = sample_batch(tokens, cfg.batch_size, cfg.seq_len, rng)
        with Graph() as g:
            fwd = adapt_forward(model, batch, cfg)
            total = combined_loss(fwd.llm_loss, fwd.router_loss, cfg)
            g.backward(total)
        opt.step()
        opt.zero_grad()
        if step % log_every == 0 or step == cfg.steps - 1:
            acc = float(np.mean(fwd.predictions == fwd.labels))
            history.append((step, fwd.llm_loss.item(), fwd.router_loss.item(), acc))
    model.meta["adapt_steps"] = cfg.steps
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "llm_loss", "router_loss", "router_acc"])
            w.writerows(history)
    return AdaptResult(model=model, history=history)


def calibrate_and_reorder(model: TransformerLm, tokens, calib_tokens, seq_len):
    """Importance calibration on a deterministic corpus prefix, then reorder."""
    windows = eval_windows(tokens, seq_len)
    n_windows = max(1, min(len(windows), -(-int(calib_tokens) // seq_len)))
    batches = [windows[i : i + 16] for i in range(0, n_windows, 16)]
    reorder_model(model, importance_scores(model, batches))
    return model


def build_family(model: TransformerLm, tokens, thetas, cfg: AdaptConfig,
                 calib_tokens=4096, log_path_for=None):
    """One adaptation per threshold from a single shared reordered base."""
    if not thetas:
        raise ConfigError("family needs at least one theta")
    for theta in thetas:
        if not 0.0 < theta < 1.0:
            raise ConfigError(f"family thetas must lie in (0, 1), got {theta}")
    base = model.copy()
    if not base.meta.get("reordered"):
        calibrate_and_reorder(base, tokens, calib_tokens, cfg.seq_len)
    results = []
    for theta in thetas:
        member_cfg = replace(cfg, theta=theta).validate()
        member = base.copy()
        log_path = log_path_for(theta) if log_path_for is not None else None
        results.append(adapt(member, tokens, member_cfg, log_path=log_path))
    return results
