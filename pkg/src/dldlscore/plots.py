"""Training curves, label histograms and attention maps as image files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .imaging import MultispectralImage  # noqa: E402
from .model import DLDLViT, attention_rollout  # noqa: E402
from .training import DatasetIndex  # noqa: E402

__all__ = ["loss_curves", "mdo_curves", "label_histograms", "attention_maps", "layer_attention_maps"]

COMPONENTS = ("ld", "exp", "smooth", "total")


def _require(metrics: Sequence[dict]) -> list[int]:
    if not metrics:
        raise ValueError("metrics log is empty")
    return [int(m["epoch"]) for m in metrics]


def _heads(metrics: Sequence[dict]) -> list[str]:
    keys = [k for k in metrics[0] if k.startswith("val_") and k.endswith("_mdo") and k != "val_mdo"]
    return sorted(k[len("val_") : -len("_mdo")] for k in keys)


def loss_curves(metrics: Sequence[dict], path: str | Path) -> plt.Figure:
    """One panel per head; train (solid) and validation (dashed) lines for every loss component."""
    epochs = _require(metrics)
    heads = _heads(metrics)
    fig, axes = plt.subplots(1, len(heads), figsize=(5 * len(heads), 3.6), squeeze=False)
    for ax, head in zip(axes[0], heads):
        for i, comp in enumerate(COMPONENTS):
            for split, style in (("train", "-"), ("val", "--")):
                key = f"{split}_{head}_{comp}"
                if key in metrics[0]:
                    ax.plot(epochs, [m[key] for m in metrics], style, color=f"C{i}", label=f"{split} {comp}")
        ax.set_title(head)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return fig


def mdo_curves(metrics: Sequence[dict], path: str | Path) -> plt.Figure:
    epochs = _require(metrics)
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for head in _heads(metrics):
        ax.plot(epochs, [m[f"val_{head}_mdo"] for m in metrics], label=head)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation MDO")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return fig


def label_histograms(
    index: DatasetIndex, path: str | Path, labels: Sequence[str] = ("ds", "gdd", "npg"), bins: int = 30
) -> plt.Figure:
    present = [n for n in labels if index.has_labels(n)]
    if not present:
        raise ValueError("index carries none of the requested labels")
    fig, axes = plt.subplots(1, len(present), figsize=(4 * len(present), 3.2), squeeze=False)
    for ax, name in zip(axes[0], present):
        ax.hist(index.labels(name), bins=bins)
        ax.set_title(name)
        ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return fig


def layer_attention_maps(attentions: Sequence[torch.Tensor]) -> list[np.ndarray]:
    """Head-averaged class-token attention over patches, one grid per layer."""
    out = []
    for attn in attentions:
        a = attn.detach().double().numpy().mean(axis=-3)  # (..., T, T)
        row = a[..., 0, 1:]
        side = int(round(row.shape[-1] ** 0.5))
        out.append(row.reshape(*row.shape[:-1], side, side))
    return out


def attention_maps(model: DLDLViT, img: MultispectralImage, path: str | Path) -> plt.Figure:
    """Input, rollout and per-layer class-token maps for one normalized image.

    Produces ``num_layers + 2`` panels.
    """
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(img.data[None], dtype=torch.float32), collect_attention=True)
    rollout = attention_rollout(out.attentions)[0]
    layers = [m[0] for m in layer_attention_maps(out.attentions)]
    panels = [("input", img.data[: min(3, img.data.shape[0])].mean(axis=0)), ("rollout", rollout)]
    panels += [(f"layer {i + 1}", m) for i, m in enumerate(layers)]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6), squeeze=False)
    for ax, (title, data) in zip(axes[0], panels):
        ax.imshow(data, cmap="gray" if title == "input" else "magma")
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return fig
