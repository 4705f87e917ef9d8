"""Run configuration: one flat document validated before any compute.

Precedence: built-in defaults < config file < CLI flags. The resolved
merge is persisted beside every run's outputs so any experiment can be
reconstructed from its emitted config alone.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .adapt import AdaptConfig
from .errors import ConfigError
from .model import ModelConfig
from .router import NONLINEARITIES

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class RunConfig:
    # io / corpus
    corpus: str | None = None
    out_dir: str | None = None
    split_fraction: float = 0.95
    precision: str = "float32"
    seed: int = 0
    # model
    embed_dim: int = 128
    hidden_dim: int = 512
    num_layers: int = 4
    num_heads: int = 4
    max_seq_len: int = 128
    activation: str = "silu"
    # pretraining
    pretrain_steps: int = 2000
    batch_size: int = 8
    seq_len: int = 128
    pretrain_lr: float = 1e-3
    weight_decay: float = 0.0
    # adaptation
    theta: float = 0.8
    thetas: list = field(default_factory=lambda: [0.7, 0.8, 0.9])
    lambda_llm: float = 0.2
    lambda_router: float = 1.0
    adapt_steps: int = 2000
    adapt_lr: float = 3e-4
    freeze_attention: bool = True
    num_experts: int = 4
    router_hidden: int = 64
    router_nonlinearity: str = "relu"
    calib_fraction: float = 0.001
    auto_reorder: bool = False
    # evaluation
    eval_max_windows: int | None = None
    log_every: int = 10

    def validate(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if self.seq_len > self.max_seq_len:
            raise ConfigError(f"seq_len {self.seq_len} exceeds max_seq_len {self.max_seq_len}")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2 for next-token training")
        if self.router_nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"router_nonlinearity must be one of {NONLINEARITIES}")
        for name in ("pretrain_steps", "adapt_steps", "batch_size", "log_every"):
            if getattr(self, name) < (1 if name in ("batch_size", "log_every") else 0):
                raise ConfigError(f"{name} out of range: {getattr(self, name)}")
        if not self.thetas:
            raise ConfigError("thetas must not be empty")
        for theta in [self.theta, *self.thetas]:
            if not 0.0 < theta < 1.0:
                raise ConfigError(f"theta values must lie strictly in (0, 1), got {theta}")
        if not 0.0 < self.calib_fraction <= 1.0:
            raise ConfigError(f"calib_fraction must lie in (0, 1], got {self.calib_fraction}")
        # defer the rest to the dataclasses that own the fields
        self.model_config(vocab_size=2)  # placeholder; real vocab comes from the corpus
        self.adapt_config().validate()
        return self

    # -- derived views --------------------------------------------------------

    def model_config(self, vocab_size):
        return ModelConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            max_seq_len=self.max_seq_len,
            activation=self.activation,
            seed=self.seed,
        ).validate()

    def adapt_config(self, theta=None, ablation_mode=False):
        return AdaptConfig(
            theta=self.theta if theta is None else theta,
            lambda_llm=self.lambda_llm,
            lambda_router=0.0 if ablation_mode else self.lambda_router,
            steps=self.adapt_steps,
            batch_size=self.batch_size,
            seq_len=self.seq_len,
            lr=self.adapt_lr,
            weight_decay=self.weight_decay,
            freeze_attention=self.freeze_attention,
            ablation_mode=ablation_mode,
            num_experts=self.num_experts,
            router_hidden=self.router_hidden,
            router_nonlinearity=self.router_nonlinearity,
            seed=self.seed,
        )

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def calib_tokens(self):
        budget = self.pretrain_steps * self.batch_size * self.seq_len
        return max(2048, int(self.calib_fraction * budget))

    # -- serialization --------------------------------------------------------

    @classmethod
    def field_names(cls):
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls().merged(raw, source=str(path))

    def merged(self, overrides: dict, source="overrides"):
        known = self.field_names()
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def to_dict(self):
        return dataclasses.asdict(self)

    def write(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
