"""Tiny decoder-only transformer and its pretraining loop.

Pre-norm blocks with learned-scale RMS normalization, multi-head causal
attention, and a two-matrix MLP (no gate, no biases anywhere). The MLP
input dimension is `embed_dim`, its hidden dimension `hidden_dim`.

A block's MLP path is pluggable (`mlp_fn`): the adaptation and analysis
code swap in nested-expert routing while reusing the same trunk.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .optim import AdamW
from .tensor import Graph, Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 128
    hidden_dim: int = 512
    num_layers: int = 4
    num_heads: int = 4
    max_seq_len: int = 128
    activation: str = "silu"
    seed: int = 0

    def validate(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "num_layers", "num_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        return self

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class TransformerLm:
    """Decoder-only LM whose parameters live in a flat named-tensor dict.

    `widths` and `routers` stay None for the plain dense model; adaptation
    attaches them (see adapt.py). Once `widths` is set, full-width MLP
    evaluation switches to the fixed per-expert block accumulation so that
    dense-mode, training-mode, and routed-mode forwards agree bit-exactly.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32, init=True):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.params: dict[str, Tensor] = {}
        self.widths: list[int] | None = None
        self.routers = None  # list[Router] after adaptation
        self.meta: dict = {}
        if init:
            self._init_params()

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, h = cfg.embed_dim, cfg.hidden_dim

        def normal(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

        p = self.params
        p["tok_embed"] = normal((cfg.vocab_size, d), 0.02)
        p["pos_embed"] = normal((cfg.max_seq_len, d), 0.02)
        for i in range(cfg.num_layers):
            for proj in ("wq", "wk", "wv", "wo"):
                p[f"layers.{i}.attn.{proj}"] = normal((d, d), d**-0.5)
            p[f"layers.{i}.norm1.gain"] = ones((d,))
            p[f"layers.{i}.norm2.gain"] = ones((d,))
            p[f"layers.{i}.mlp.w_in"] = normal((h, d), d**-0.5)
            p[f"layers.{i}.mlp.w_out"] = normal((d, h), h**-0.5)
        p["final_norm.gain"] = ones((d,))
        p["head.w"] = normal((cfg.vocab_size, d), d**-0.5)

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self):
        items = list(self.params.items())
        if self.routers is not None:
            for i, r in enumerate(self.routers):
                items.append((f"layers.{i}.router.w1", r.w1))
                items.append((f"layers.{i}.router.w2", r.w2))
        return items

    def param_count(self):
        return sum(t.size for _, t in self.named_params())

    def copy(self):
        clone = TransformerLm(self.config, dtype=self.dtype, init=False)
        for name, t in self.params.items():
            clone.params[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        clone.widths = None if self.widths is None else list(self.widths)
        if self.routers is not None:
            clone.routers = [r.copy() for r in self.routers]
        clone.meta = dict(self.meta)
        return clone

    # -- forward --------------------------------------------------------------

    def _causal_mask(self, t):
        mask = np.zeros((t, t), dtype=self.dtype)
        mask[np.triu_indices(t, k=1)] = -np.inf
        return mask

    def forward(self, tokens, mlp_fn=None, hidden_hook=None):
        """Causal logits for an integer token batch.

        tokens: int array (B, T). Returns a (B, T, vocab) tensor.
        mlp_fn(layer_index, normed_input) may replace the MLP path per layer;
        hidden_hook(layer_index, hidden_data) observes post-activation MLP
        hiddens on the plain dense path (used for importance calibration).
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be a (batch, time) array, got shape {tokens.shape}")
        b, t = tokens.shape
        cfg = self.config
        if t > cfg.max_seq_len:
            raise ContractError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")

        p = self.params
        x = T.embedding(p["tok_embed"], tokens)
        x = T.add(x, T.slice_axis(p["pos_embed"], 0, 0, t))
        x = T.reshape(x, (b * t, cfg.embed_dim))
        mask = self._causal_mask(t)
        for i in range(cfg.num_layers):
            x = T.add(x, self._attention(i, x, b, t, mask))
            xn = T.rmsnorm(x, p[f"layers.{i}.norm2.gain"])
            if mlp_fn is not None:
                y = mlp_fn(i, xn)
            else:
                y = self._full_mlp(i, xn, hidden_hook)
            x = T.add(x, y)
        x = T.rmsnorm(x, p["final_norm.gain"])
        logits = T.linear(x, p["head.w"])
        return T.reshape(logits, (b, t, cfg.vocab_size))

    def _attention(self, i, x, b, t, mask):
        cfg = self.config
        nh = cfg.num_heads
        hd = cfg.embed_dim // nh
        p = self.params
        xn = T.rmsnorm(x, p[f"layers.{i}.norm1.gain"])

        def heads(name):
            v = T.linear(xn, p[f"layers.{i}.attn.{name}"])
            return T.transpose(T.reshape(v, (b, t, nh, hd)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        scores = T.mul(T.matmul(q, T.transpose(k)), hd**-0.5)
        attn = T.softmax(T.add(scores, mask))
        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b * t, cfg.embed_dim))
        return T.linear(ctx, p[f"layers.{i}.attn.wo"])

    def _full_mlp(self, i, xn, hidden_hook=None):
        act = T.activation(self.config.activation)
        w_in = self.params[f"layers.{i}.mlp.w_in"]
        w_out = self.params[f"layers.{i}.mlp.w_out"]
        if self.widths is not None:
            # Adapted model: full width == last nested expert, evaluated with
            # the same block accumulation as every other mode.
            from .nested import NestedMlp, all_expert_outputs

            return all_expert_outputs(NestedMlp(w_in, w_out, self.widths, self.config.activation), xn)[-1]
        h = act(T.matmul(xn, T.transpose(w_in)))
        if hidden_hook is not None:
            hidden_hook(i, h.data)
        return T.matmul(h, T.transpose(w_out))


def forward_dense(model: TransformerLm, tokens):
    """Full-width forward: every MLP evaluated at its complete hidden width."""
    return model.forward(tokens)


def lm_loss(logits, tokens):
    """Next-token cross-entropy, mean over batch x (T-1) positions."""
    tokens = np.asarray(tokens)
    b, t = tokens.shape
    if t < 2:
        raise ContractError("next-token loss needs sequences of length >= 2")
    v = logits.shape[-1]
    preds = T.reshape(T.slice_axis(logits, 1, 0, t - 1), (b * (t - 1), v))
    return T.cross_entropy(preds, tokens[:, 1:].ravel())


def sample_batch(tokens, batch_size, seq_len, rng):
    """Random contiguous windows from a token stream."""
    n = len(tokens)
    if n < seq_len + 1:
        raise ConfigError(f"corpus too small: {n} tokens < seq_len {seq_len} + 1")
    starts = rng.integers(0, n - seq_len, size=batch_size)
    return np.stack([tokens[s : s + seq_len] for s in starts])


def eval_windows(tokens, seq_len):
    """Deterministic non-overlapping windows covering a held-out stream."""
    n = (len(tokens) // seq_len) * seq_len
    if n == 0:
        raise ConfigError(f"held-out stream too small: {len(tokens)} tokens < seq_len {seq_len}")
    return np.asarray(tokens[:n]).reshape(-1, seq_len)


def eval_loss(model, tokens, seq_len=128, batch_size=16, max_windows=None, mlp_fn_factory=None):
    """Mean next-token loss over deterministic held-out windows (no grad)."""
    windows = eval_windows(tokens, seq_len)
    if max_windows is not None:
        windows = windows[:max_windows]
    losses = []
    for i in range(0, len(windows), batch_size):
        chunk = windows[i : i + batch_size]
        mlp_fn = mlp_fn_factory() if mlp_fn_factory is not None else None
        logits = model.forward(chunk, mlp_fn=mlp_fn)
        losses.append(lm_loss(logits, chunk).item() * len(chunk))
    return sum(losses) / len(windows)


@dataclass
class PretrainResult:
    model: TransformerLm
    history: list = field(default_factory=list)  # (step, loss) pairs


def pretrain(tokens, config: ModelConfig, steps, batch_size=8, seq_len=128, lr=1e-3,
             weight_decay=0.0, dtype=np.float32, log_path=None, log_every=1):
    """Train a dense LM from scratch on a token stream.

    Deterministic given (config.seed, arguments): batch order comes from a
    dedicated seeded stream, and all math is fixed-order (see tensor.py).
    """
    model = TransformerLm(config, dtype=dtype)
    rng = np.random.default_rng([config.seed, 0xBA7C4])
    opt = AdamW([t for _, t in model.named_params()], lr=lr, weight_decay=weight_decay)
    history = []
    for step in range(steps):
        batch = sample_batch(tokens, batch_size, seq_len, rng)
        with Graph() as g:
            loss = lm_loss(model.forward(batch), batch)
            g.backward(loss)
        opt.step()
        opt.zero_grad()
        if step % log_every == 0 or step == steps - 1:
            history.append((step, loss.item()))
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            w.writerows(history)
    return PretrainResult(model=model, history=history)
