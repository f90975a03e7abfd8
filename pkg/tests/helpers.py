"""Small configs and stubs shared by the test modules."""

import numpy as np
import torch
import yaml

from dldlscore.config import toy_config
from dldlscore.imaging import AugmentPolicy
from dldlscore.labeldist import LabelSpace, normal_pmfs
from dldlscore.model import HeadConfig, NeckConfig, ViTConfig, build_model

DS_SPACE = LabelSpace(-0.5, 10.5, 23)
GDD_SPACE = LabelSpace(-5.0, 3500.0, 100)
NPG_SPACE = LabelSpace(-0.5, 11.5, 100)

TINY_VIT = ViTConfig(5, 24, 12, 16, 2, 2, 32, 0.0, 0.0)
TINY_NECK = NeckConfig(16, 1, 0.0)


def ds_head(bins=23, size=8, dropout=0.0):
    return HeadConfig("ds", LabelSpace(-0.5, 10.5, bins), 0.6, 1, size, dropout)


def env_heads(size=8):
    return [
        HeadConfig("gdd", GDD_SPACE, 100.0, 1, size, 0.0),
        HeadConfig("npg", NPG_SPACE, 0.3, 1, size, 0.0),
    ]


NO_AUGMENT = AugmentPolicy.disabled()


def constant_model(pmf, bins=23):
    """Tiny DS model whose output is ``pmf`` for every input."""
    model = build_model(TINY_VIT, TINY_NECK, [ds_head(bins)], seed=0)
    pmf = np.asarray(pmf, dtype=float)
    with torch.no_grad():
        out = model.head_out["ds"]
        out.weight.zero_()
        # log(0) -> a logit whose softmax weight underflows to exactly 0
        out.bias.copy_(torch.tensor(np.log(np.maximum(pmf, 1e-300)).clip(-1e4), dtype=torch.float32))
    return model


def tiny_config_file(path):
    """Toy YAML config shrunk to 24 px and one-layer heads for fast CLI runs."""
    d = toy_config().to_dict()
    d["vit_backbone"].update(input_size=[5, 24, 24], hidden_size=16, intermediate_size=32)
    d["mlp_neck"].update(layer_size=16, layers=1)
    d["ldl_heads"].update(individual_mlp_layers=1, individual_mlp_layer_size=8)
    d["training"].update(batch_size=8, pretrain_epochs=1, finetune_epochs=2)
    d["augmentation"]["blur_strength_px"] = [1.0, 1.5]
    path.write_text(yaml.safe_dump(d))
    return path


def random_pmf_pair(rng, k):
    """Truth: discretized normal; prediction: softmax of random logits (float64)."""
    space = LabelSpace(0.0, 1.0, k)
    truth = normal_pmfs(rng.uniform(0.1, 0.9), rng.uniform(0.08, 0.3), space)
    logits = torch.tensor(rng.normal(0, 1.5, k), dtype=torch.float64)
    return torch.tensor(truth), logits, torch.tensor(space.bin_centers)


def gradient_relative_error(fn, logits, step=1e-5):
    """Relative error between the autograd gradient of ``fn(logits)`` and central differences."""
    z = logits.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(z), z)
    fd = torch.zeros_like(logits)
    for i in range(len(logits)):
        e = torch.zeros_like(logits)
        e[i] = step
        fd[i] = (fn(logits + e) - fn(logits - e)) / (2 * step)
    scale = max(float(grad.norm()), float(fd.norm()), 1e-12)
    return float((grad - fd).norm()) / scale
