"""Per-layer difficulty router: two biasless projections D -> U -> E.

The hidden nonlinearity defaults to ReLU; `nonlinearity="none"` gives the
purely linear composition for comparison. Predictions are argmax with
ties resolved toward the smaller (cheaper) expert.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

NONLINEARITIES = ("relu", "none")


class Router:
    def __init__(self, embed_dim, hidden_dim, num_experts, nonlinearity="relu",
                 rng=None, dtype=np.float32):
        if nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"router nonlinearity must be one of {NONLINEARITIES}")
        rng = rng or np.random.default_rng(0)
        dtype = np.dtype(dtype).type
        self.nonlinearity = nonlinearity
        self.w1 = Tensor(rng.normal(0.0, embed_dim**-0.5, size=(hidden_dim, embed_dim)).astype(dtype),
                         requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, hidden_dim**-0.5, size=(num_experts, hidden_dim)).astype(dtype),
                         requires_grad=True)

    @property
    def num_experts(self):
        return self.w2.shape[0]

    def copy(self):
        clone = Router.__new__(Router)
        clone.nonlinearity = self.nonlinearity
        clone.w1 = Tensor(self.w1.data.copy(), requires_grad=self.w1.requires_grad)
        clone.w2 = Tensor(self.w2.data.copy(), requires_grad=self.w2.requires_grad)
        return clone


def router_forward(router: Router, x):
    """Logits over experts for each input row: rho(x @ w1.T) @ w2.T."""
    h = T.linear(x, router.w1)
    if router.nonlinearity == "relu":
        h = T.relu(h)
    return T.linear(h, router.w2)


def router_forward_data(router: Router, x_data):
    """Raw-array mirror of router_forward (inference paths, no graph)."""
    h = np.matmul(x_data, router.w1.data.T)
    if router.nonlinearity == "relu":
        h = np.maximum(h, 0.0)
    return np.matmul(h, router.w2.data.T)


def router_loss(logits, labels):
    """Mean cross-entropy of router logits against derived labels."""
    return T.cross_entropy(logits, np.asarray(labels))


def predict_expert(logits_data):
    """Argmax over the expert axis; ties go to the smaller index."""
    return np.argmax(np.asarray(logits_data), axis=-1)


def router_param_count(embed_dim, hidden_dim, num_experts, num_layers):
    """Total biasless router parameters across layers: L * (D*U + U*E)."""
    if min(embed_dim, hidden_dim, num_experts) < 1 or num_layers < 0:
        raise ConfigError("router dimensions must be positive")
    return num_layers * (embed_dim * hidden_dim + hidden_dim * num_experts)
