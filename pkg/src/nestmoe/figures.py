"""Figure rendering for the report path (PNG files beside the CSV/JSON)."""

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def plot_training_curve(csv_path, png_path, title="training loss"):
    with open(csv_path) as f:
        rows = list(csv.reader(f))
    header, data = rows[0], rows[1:]
    steps = [int(r[0]) for r in data]
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in range(1, len(header)):
        if header[col].endswith("acc"):
            continue
        ax.plot(steps, [float(r[col]) for r in data], label=header[col])
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_confusion(counts, png_path, title="router confusion"):
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    normed = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    e = counts.shape[0]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(normed, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(e):
        for j in range(e):
            ax.text(j, i, f"{int(counts[i, j])}", ha="center", va="center",
                    color="white" if normed[i, j] > 0.5 else "black", fontsize=8)
    ax.set_xlabel("predicted expert")
    ax.set_ylabel("derived label")
    ax.set_xticks(range(e))
    ax.set_yticks(range(e))
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="row fraction")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_usage(fractions, png_path, title="expert usage per layer"):
    fractions = np.asarray(fractions)
    layers, e = fractions.shape
    x = np.arange(layers)
    fig, ax = plt.subplots(figsize=(6, 4))
    bottom = np.zeros(layers)
    for j in range(e):
        ax.bar(x, fractions[:, j], bottom=bottom, label=f"expert {j}")
        bottom += fractions[:, j]
    ax.set_xlabel("layer")
    ax.set_ylabel("fraction of tokens")
    ax.set_xticks(x)
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
