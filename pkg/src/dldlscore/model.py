"""Multi-head label-distribution ViT: backbone, MLP neck, LDL heads with feature mixing.

The backbone embeds non-overlapping square tiles with one linear projection,
prepends a learnable class token, adds learned positional embeddings and runs
pre-LN transformer blocks. The class token's final hidden state (after the
closing layer norm) feeds a shared MLP neck. Each label has its own MLP head;
the heads' last hidden layers are concatenated and linearly mixed by a
learnable, identity-initialized matrix before each head's final layer and
softmax produce the pmf.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .labeldist import LabelSpace

__all__ = [
    "CHECKPOINT_VERSION",
    "ConfigError",
    "IncompatibleCheckpointError",
    "ViTConfig",
    "NeckConfig",
    "HeadConfig",
    "ModelOutput",
    "DLDLViT",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
    "transfer_backbone",
    "copy_backbone",
    "rollout_matrix",
    "attention_rollout",
]

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    def __init__(self, offending: Sequence[str]) -> None:
        self.offending = list(offending)
        super().__init__("incompatible tensors: " + ", ".join(self.offending))


@dataclass(frozen=True)
class ViTConfig:
    input_channels: int = 5
    image_size: int = 144
    patch_size: int = 12
    hidden_size: int = 1024
    num_layers: int = 8
    num_heads: int = 4
    intermediate_size: int = 1024
    hidden_dropout: float = 0.02
    attention_dropout: float = 0.02

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden size {self.hidden_size} not divisible by {self.num_heads} heads")
        if min(self.input_channels, self.num_layers, self.num_heads, self.intermediate_size) < 1:
            raise ConfigError("channel, layer, head and intermediate counts must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2 + 1


@dataclass(frozen=True)
class NeckConfig:
    layer_size: int = 512
    num_layers: int = 3
    dropout: float = 0.2

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("the neck needs at least one layer")


@dataclass(frozen=True)
class HeadConfig:
    """One regression head. ``label_std`` is the training label sigma."""

    label_name: str
    label_space: LabelSpace
    label_std: float
    mlp_layers: int = 2
    mlp_layer_size: int = 256
    dropout: float = 0.8

    def __post_init__(self) -> None:
        if self.mlp_layers < 1:
            raise ConfigError("a head needs at least one MLP layer")
        if not self.label_std > 0:
            raise ConfigError("label_std must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_space"] = asdict(self.label_space)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        d = dict(d)
        d["label_space"] = LabelSpace(**d["label_space"])
        return cls(**d)


@dataclass
class ModelOutput:
    pmfs: dict[str, torch.Tensor]
    logits: dict[str, torch.Tensor]
    attentions: list[torch.Tensor] | None = field(default=None)


class Attention(nn.Module):
    def __init__(self, hidden: int, heads: int, attn_dropout: float, dropout: float) -> None:
        super().__init__()
        self.heads = heads
        self.scale = (hidden // heads) ** -0.5
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.attn_drop = nn.Dropout(attn_dropout)
        self.proj_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (self.attn_drop(attn) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj_drop(self.proj(out)), attn


class Block(nn.Module):
    def __init__(self, cfg: ViTConfig) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden_size)
        self.attn = Attention(cfg.hidden_size, cfg.num_heads, cfg.attention_dropout, cfg.hidden_dropout)
        self.norm2 = nn.LayerNorm(cfg.hidden_size)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden_size, cfg.intermediate_size),
            nn.GELU(),
            nn.Dropout(cfg.hidden_dropout),
            nn.Linear(cfg.intermediate_size, cfg.hidden_size),
            nn.Dropout(cfg.hidden_dropout),
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h, attn = self.attn(self.norm1(x))
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


class Backbone(nn.Module):
    def __init__(self, cfg: ViTConfig) -> None:
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.input_channels * cfg.patch_size**2
        self.patch_embed = nn.Linear(patch_dim, cfg.hidden_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.hidden_size))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.hidden_size))
        self.dropout = nn.Dropout(cfg.hidden_dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.norm = nn.LayerNorm(cfg.hidden_size)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, N, C*p*p), patches in row-major grid order."""
        b, c, h, w = x.shape
        p = self.cfg.patch_size
        x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def forward(self, x: torch.Tensor, collect_attention: bool = False):
        tokens = self.patch_embed(self.patchify(x))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        h = self.dropout(torch.cat([cls, tokens], dim=1) + self.pos_embed)
        attentions = []
        for block in self.blocks:
            h, attn = block(h)
            if collect_attention:
                attentions.append(attn)
        h = self.norm(h)
        return h[:, 0], (attentions if collect_attention else None)


def _mlp(sizes: Sequence[int], dropout: float) -> nn.Sequential:
    layers: list[nn.Module] = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        layers += [nn.Linear(n_in, n_out), nn.ReLU(), nn.Dropout(dropout)]
    return nn.Sequential(*layers)


class DLDLViT(nn.Module):
    """ViT backbone + MLP neck + one LDL head per label."""

    def __init__(self, vit: ViTConfig, neck: NeckConfig, heads: Sequence[HeadConfig]) -> None:
        super().__init__()
        if not heads:
            raise ConfigError("at least one head is required")
        names = [h.label_name for h in heads]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate head names: {names}")
        self.vit_config = vit
        self.neck_config = neck
        self.head_configs = tuple(heads)

        self.backbone = Backbone(vit)
        self.neck = _mlp([vit.hidden_size] + [neck.layer_size] * neck.num_layers, neck.dropout)
        self.head_mlps = nn.ModuleDict(
            {h.label_name: _mlp([neck.layer_size] + [h.mlp_layer_size] * h.mlp_layers, h.dropout) for h in heads}
        )
        # Row block of the feature-mixing matrix owned by each head, so every
        # head's optimizer can own its slice.
        total = sum(h.mlp_layer_size for h in heads)
        mixing = torch.eye(total)
        self.mixing = nn.ParameterDict()
        offset = 0
        for h in heads:
            self.mixing[h.label_name] = nn.Parameter(mixing[offset : offset + h.mlp_layer_size].clone())
            offset += h.mlp_layer_size
        self.head_out = nn.ModuleDict(
            {h.label_name: nn.Linear(h.mlp_layer_size, h.label_space.num_bins) for h in heads}
        )

    @property
    def head_names(self) -> list[str]:
        return [h.label_name for h in self.head_configs]

    def head_config(self, name: str) -> HeadConfig:
        for h in self.head_configs:
            if h.label_name == name:
                return h
        raise KeyError(name)

    def feature_mixing_matrix(self) -> torch.Tensor:
        return torch.cat([self.mixing[n] for n in self.head_names], dim=0)

    def shared_parameters(self) -> list[nn.Parameter]:
        return list(self.backbone.parameters()) + list(self.neck.parameters())

    def head_parameters(self, name: str) -> list[nn.Parameter]:
        return list(self.head_mlps[name].parameters()) + [self.mixing[name]] + list(self.head_out[name].parameters())

    def forward(self, x: torch.Tensor, collect_attention: bool = False) -> ModelOutput:
        cfg = self.vit_config
        expected = (cfg.input_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input of shape (B, {expected}), got {tuple(x.shape)}")
        cls, attentions = self.backbone(x, collect_attention)
        feats = self.neck(cls)
        hidden = torch.cat([self.head_mlps[n](feats) for n in self.head_names], dim=-1)
        logits, pmfs = {}, {}
        for n in self.head_names:
            mixed = hidden @ self.mixing[n].T
            logits[n] = self.head_out[n](mixed)
            pmfs[n] = torch.softmax(logits[n], dim=-1)
        return ModelOutput(pmfs, logits, attentions)

    def config_dict(self) -> dict:
        return {
            "vit": asdict(self.vit_config),
            "neck": asdict(self.neck_config),
            "heads": [h.to_dict() for h in self.head_configs],
        }

    @classmethod
    def from_config_dict(cls, d: dict) -> "DLDLViT":
        return cls(ViTConfig(**d["vit"]), NeckConfig(**d["neck"]), [HeadConfig.from_dict(h) for h in d["heads"]])


def build_model(vit: ViTConfig, neck: NeckConfig, heads: Sequence[HeadConfig], seed: int = 0) -> DLDLViT:
    """Construct a model with initialization fully determined by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DLDLViT(vit, neck, heads)


def save_checkpoint(model: DLDLViT, path: str | Path, metadata: dict | None = None) -> None:
    """Config record, named weights and format version in one file."""
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": model.config_dict(),
            "state_dict": model.state_dict(),
            "metadata": metadata or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> DLDLViT:
    """Rebuild a model from :func:`save_checkpoint` output.

    Any stored metadata ends up in ``model.metadata``.
    """
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    model = DLDLViT.from_config_dict(blob["config"])
    model.load_state_dict(blob["state_dict"])
    model.metadata = blob.get("metadata", {})
    return model


def _shared_state(model: DLDLViT) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if k.startswith(("backbone.", "neck."))}


def copy_backbone(dst: DLDLViT, src: DLDLViT) -> None:
    """Copy backbone and neck weights from ``src`` into ``dst`` in place."""
    src_state, dst_state = _shared_state(src), _shared_state(dst)
    offending = sorted(
        k for k in set(src_state) | set(dst_state)
        if k not in src_state or k not in dst_state or src_state[k].shape != dst_state[k].shape
    )
    if offending:
        raise IncompatibleCheckpointError(offending)
    dst.load_state_dict(src_state, strict=False)


def transfer_backbone(pretrained: DLDLViT, new_heads: Sequence[HeadConfig], seed: int = 0) -> DLDLViT:
    """New model with ``pretrained``'s backbone and neck and freshly initialized heads."""
    model = build_model(pretrained.vit_config, pretrained.neck_config, new_heads, seed=seed)
    copy_backbone(model, pretrained)
    return model


def rollout_matrix(attentions: Sequence) -> np.ndarray:
    """Joint attention over all layers.

    Each layer's attention (``(heads, T, T)`` or ``(B, heads, T, T)``) is
    averaged over heads, augmented by the identity for the residual path and
    row-normalized; the layers are chained as ``A_L @ ... @ A_1``.
    """
    if len(attentions) == 0:
        raise ValueError("attention rollout needs at least one layer")
    joint = None
    for attn in attentions:
        a = attn.detach().cpu().double().numpy() if isinstance(attn, torch.Tensor) else np.asarray(attn, float)
        a = a.mean(axis=-3)
        a = a + np.eye(a.shape[-1])
        a = a / a.sum(axis=-1, keepdims=True)
        joint = a if joint is None else a @ joint
    return joint


def attention_rollout(attentions: Sequence) -> np.ndarray:
    """Class-token row of the rollout over patch tokens, reshaped to the patch grid."""
    joint = rollout_matrix(attentions)
    row = joint[..., 0, 1:]
    side = math.isqrt(row.shape[-1])
    if side * side != row.shape[-1]:
        raise ValueError(f"{row.shape[-1]} patch tokens do not form a square grid")
    return row.reshape(*row.shape[:-1], side, side)
