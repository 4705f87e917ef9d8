"""Derived token-difficulty labels.

A token's difficulty is judged by how small an expert already reproduces
the full MLP output: the similarity of expert output Y_e to the full
output Y_full is their dot product normalized by <Y_full, Y_full>, and
the label is the smallest expert index whose similarity clears the
threshold. The last column of any similarity matrix is pinned at 1, so a
label always exists for thresholds below 1.

Labels are supervision constants: they are computed from raw arrays and
recomputed on every forward pass (expert weights move between steps).
"""

import csv

import numpy as np

from .errors import ConfigError, ContractError

ZERO_NORM_EPS = 1e-12


def similarity(y_e_row, y_full_row):
    """<y_e, y_full> / <y_full, y_full> for one token's output vectors.

    A near-zero full output makes the ratio singular; such tokens are
    declared perfectly matched (1.0) since any expert reproduces a zero
    target.
    """
    a = np.asarray(y_e_row)
    b = np.asarray(y_full_row)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ContractError(f"similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    denom = float(np.dot(b, b))
    if denom < ZERO_NORM_EPS:
        return 1.0
    return float(np.dot(a, b)) / denom


def similarity_matrix(expert_outputs):
    """Per-token similarity of every expert output to the full output.

    expert_outputs: list of E arrays (N, D), ascending width, last = full.
    Returns (N, E). The last column is exactly 1 (same dot product in
    numerator and denominator); zero-norm rows fall back to all-ones.
    """
    ys = [np.asarray(y) for y in expert_outputs]
    y_full = ys[-1]
    denom = np.einsum("nd,nd->n", y_full, y_full)
    s = np.stack([np.einsum("nd,nd->n", y, y_full) for y in ys], axis=1)
    ok = denom >= ZERO_NORM_EPS
    s[ok] /= denom[ok, None]
    s[~ok] = 1.0
    return s


def derive_labels(s, theta):
    """Smallest expert index with similarity strictly above theta, per row."""
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"theta must lie strictly in (0, 1), got {theta}")
    s = np.asarray(s)
    above = s > theta
    if s.shape[0] and not above.any(axis=1).all():
        raise ContractError(
            "some rows have no similarity above theta; the full-expert column must be pinned at 1")
    return np.argmax(above, axis=1)


def label_distribution(labels, num_layers, num_experts):
    """Fraction of tokens per expert class, one row per layer."""
    labels = np.asarray(labels).reshape(num_layers, -1)
    dist = np.zeros((num_layers, num_experts))
    for i in range(num_layers):
        counts = np.bincount(labels[i], minlength=num_experts)
        dist[i] = counts / max(1, labels[i].size)
    return dist


def dump_labels_csv(labels, path):
    """One row per (layer, token): layer,token_index,label."""
    labels = np.asarray(labels)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "token_index", "label"])
        for layer in range(labels.shape[0]):
            for tok, lab in enumerate(labels[layer]):
                w.writerow([layer, tok, int(lab)])
