"""Experiment configuration file (YAML) and the reference presets.

Key names follow the model/optimizer/scheduler tables they come from, in
snake_case. ``paper_config()`` is the full pretrain/finetune setup,
``comparison_config()`` the smaller normalization-comparison model and
``toy_config()`` a CPU-sized variant for 48 px synthetic data.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .envmodel import CERCOSPORA_NPG, SUGAR_BEET_GDD, ThermalConfig
from .imaging import NORMALIZATIONS, AugmentPolicy
from .labeldist import LabelSpace
from .model import HeadConfig, NeckConfig, ViTConfig
from .training import STAGE_LABELS, OptimizerConfig, SchedulerConfig, TrainConfig

__all__ = ["ConfigFileError", "ExperimentConfig", "paper_config", "comparison_config", "toy_config"]


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpec:
    space: LabelSpace
    std: float


@dataclass
class ExperimentConfig:
    seed: int = 0
    normalization: str = "total_standardization"
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    vit: ViTConfig = field(default_factory=ViTConfig)
    neck: NeckConfig = field(default_factory=NeckConfig)
    head_layers: int = 2
    head_layer_size: int = 256
    head_dropout: float = 0.8
    labels: dict[str, LabelSpec] = field(default_factory=dict)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scheduler: SchedulerConfig | None = field(default_factory=SchedulerConfig)
    batch_size: int = 64
    pretrain_epochs: int = 40
    finetune_epochs: int = 80
    joint_optimization: bool = False
    literal_sampler_weights: bool = False
    validation_fraction: float = 0.2
    stop_at_mdo: float | None = None
    gdd_profile: ThermalConfig = SUGAR_BEET_GDD
    npg_profile: ThermalConfig = CERCOSPORA_NPG
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.normalization not in NORMALIZATIONS:
            raise ConfigFileError(f"normalization must be one of {NORMALIZATIONS}")
        for name, spec in self.labels.items():
            if not spec.std > 0:
                raise ConfigFileError(f"label {name}: label_distribution_std must be positive")

    def heads(self, stage: str) -> list[HeadConfig]:
        out = []
        for name in STAGE_LABELS[stage]:
            if name not in self.labels:
                raise ConfigFileError(f"stage {stage} needs label settings for {name!r}")
            spec = self.labels[name]
            out.append(HeadConfig(name, spec.space, spec.std, self.head_layers, self.head_layer_size, self.head_dropout))
        return out

    def train_config(self, stage: str) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            optimizer=self.optimizer,
            scheduler=self.scheduler,
            batch_size=self.batch_size,
            epochs=self.pretrain_epochs if stage == "pretrain" else self.finetune_epochs,
            seed=self.seed,
            augment=self.augment,
            normalization=self.normalization,
            joint_optimization=self.joint_optimization,
            literal_sampler_weights=self.literal_sampler_weights,
            val_fraction=self.validation_fraction,
            stop_at_mdo=self.stop_at_mdo,
        )

    # --- YAML mapping ----------------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        v, n, a = self.vit, self.neck, self.augment
        d: dict[str, Any] = {
            "seed": self.seed,
            "normalization": self.normalization,
            "augmentation": {
                "flip_probability": a.flip_prob,
                "random_rotation": a.rotate,
                "blur_probability": a.blur_prob,
                "blur_strength_px": list(a.blur_strength_range),
                "channel_dropout_probability": a.channel_dropout_prob,
                "max_dropped_channels": a.max_dropped_channels,
            },
            "vit_backbone": {
                "input_size": [v.input_channels, v.image_size, v.image_size],
                "patch_size": v.patch_size,
                "hidden_size": v.hidden_size,
                "hidden_layers": v.num_layers,
                "attention_heads": v.num_heads,
                "intermediate_size": v.intermediate_size,
                "activation_hidden_layers": "GELU",
                "dropout_hidden_layers": v.hidden_dropout,
                "dropout_attention": v.attention_dropout,
            },
            "mlp_neck": {"layer_size": n.layer_size, "layers": n.num_layers, "activation": "ReLU", "dropout": n.dropout},
            "ldl_heads": {
                "individual_mlp_layers": self.head_layers,
                "individual_mlp_layer_size": self.head_layer_size,
                "activation": "ReLU",
                "dropout": self.head_dropout,
                "labels": {
                    name: {
                        "quantization_steps": s.space.num_bins,
                        "regression_limits": [s.space.lower, s.space.upper],
                        "label_distribution_std": s.std,
                    }
                    for name, s in self.labels.items()
                },
            },
            "optimizer": {
                "algorithm": self.optimizer.algorithm,
                "initial_learning_rate": self.optimizer.initial_lr,
                "weight_decay": self.optimizer.weight_decay,
            },
            "learning_rate_scheduler": None,
            "training": {
                "batch_size": self.batch_size,
                "pretrain_epochs": self.pretrain_epochs,
                "finetune_epochs": self.finetune_epochs,
                "joint_optimization": self.joint_optimization,
                "literal_sampler_weights": self.literal_sampler_weights,
                "validation_fraction": self.validation_fraction,
                "stop_at_mdo": self.stop_at_mdo,
            },
            "gdd": {"t_base": self.gdd_profile.t_base, "t_upper": self.gdd_profile.t_upper},
            "npg": {
                "t_base": self.npg_profile.t_base,
                "t_upper": self.npg_profile.t_upper,
                "incubation_thermal_sum": self.npg_profile.incubation_thermal_sum,
            },
            "paths": dict(self.paths),
        }
        if self.scheduler is not None:
            s = self.scheduler
            d["learning_rate_scheduler"] = {
                "strategy": "cyclic_linear",
                "interval": "step",
                "maximum_lr": s.max_lr,
                "step_size": s.step_size,
                "mode": s.mode,
                "gamma": s.gamma,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        try:
            return cls._from_dict(d)
        except (KeyError, TypeError) as exc:
            raise ConfigFileError(f"invalid experiment config: {exc!r}") from None

    @classmethod
    def _from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        base = cls()
        aug = d.get("augmentation") or {}
        augment = AugmentPolicy(
            flip_prob=aug.get("flip_probability", base.augment.flip_prob),
            rotate=aug.get("random_rotation", base.augment.rotate),
            blur_prob=aug.get("blur_probability", base.augment.blur_prob),
            blur_strength_range=tuple(aug.get("blur_strength_px", base.augment.blur_strength_range)),
            channel_dropout_prob=aug.get("channel_dropout_probability", base.augment.channel_dropout_prob),
            max_dropped_channels=aug.get("max_dropped_channels", base.augment.max_dropped_channels),
        )
        vb = d["vit_backbone"]
        c, h, w = vb["input_size"]
        if h != w:
            raise ConfigFileError("input images must be square")
        vit = ViTConfig(
            input_channels=c,
            image_size=h,
            patch_size=vb["patch_size"],
            hidden_size=vb["hidden_size"],
            num_layers=vb["hidden_layers"],
            num_heads=vb["attention_heads"],
            intermediate_size=vb["intermediate_size"],
            hidden_dropout=vb.get("dropout_hidden_layers", 0.0),
            attention_dropout=vb.get("dropout_attention", 0.0),
        )
        nk = d["mlp_neck"]
        neck = NeckConfig(nk["layer_size"], nk["layers"], nk.get("dropout", 0.0))
        hd = d["ldl_heads"]
        labels = {}
        for name, s in hd["labels"].items():
            lo, hi = s["regression_limits"]
            space = LabelSpace(float(lo), float(hi), int(s["quantization_steps"]))
            labels[name] = LabelSpec(space, float(s["label_distribution_std"]))
        op = d.get("optimizer") or {}
        optimizer = OptimizerConfig(
            op.get("algorithm", "AdamW"),
            float(op.get("initial_learning_rate", base.optimizer.initial_lr)),
            float(op.get("weight_decay", base.optimizer.weight_decay)),
        )
        sc = d.get("learning_rate_scheduler")
        scheduler = None
        if sc:
            if sc.get("strategy", "cyclic_linear") != "cyclic_linear" or sc.get("interval", "step") != "step":
                raise ConfigFileError("only a per-step linear cyclic scheduler is supported")
            scheduler = SchedulerConfig(
                float(sc["maximum_lr"]), int(sc["step_size"]), sc.get("mode", "exp_range"), float(sc.get("gamma", 1.0))
            )
        tr = d.get("training") or {}
        gdd = d.get("gdd") or {}
        npg = d.get("npg") or {}
        return cls(
            seed=int(d.get("seed", 0)),
            normalization=d.get("normalization", base.normalization),
            augment=augment,
            vit=vit,
            neck=neck,
            head_layers=hd.get("individual_mlp_layers", base.head_layers),
            head_layer_size=hd.get("individual_mlp_layer_size", base.head_layer_size),
            head_dropout=hd.get("dropout", base.head_dropout),
            labels=labels,
            optimizer=optimizer,
            scheduler=scheduler,
            batch_size=tr.get("batch_size", base.batch_size),
            pretrain_epochs=tr.get("pretrain_epochs", base.pretrain_epochs),
            finetune_epochs=tr.get("finetune_epochs", base.finetune_epochs),
            joint_optimization=tr.get("joint_optimization", False),
            literal_sampler_weights=tr.get("literal_sampler_weights", False),
            validation_fraction=tr.get("validation_fraction", 0.2),
            stop_at_mdo=tr.get("stop_at_mdo"),
            gdd_profile=ThermalConfig(gdd.get("t_base", SUGAR_BEET_GDD.t_base), gdd.get("t_upper", SUGAR_BEET_GDD.t_upper)),
            npg_profile=ThermalConfig(
                npg.get("t_base", CERCOSPORA_NPG.t_base),
                npg.get("t_upper", CERCOSPORA_NPG.t_upper),
                npg.get("incubation_thermal_sum", CERCOSPORA_NPG.incubation_thermal_sum),
            ),
            paths={k: str(v) for k, v in (d.get("paths") or {}).items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            d = yaml.safe_load(fh)
        if not isinstance(d, dict):
            raise ConfigFileError(f"{path}: expected a mapping at top level")
        return cls.from_dict(d)

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(copy.deepcopy(self), **{k: v for k, v in kw.items() if v is not None})


def paper_config() -> ExperimentConfig:
    """Full-size pretrain (GDD, NPG) and finetune (DS) configuration."""
    return ExperimentConfig(
        labels={
            "npg": LabelSpec(LabelSpace(-0.5, 11.5, 100), 0.3),
            "gdd": LabelSpec(LabelSpace(-5.0, 3500.0, 100), 100.0),
            "ds": LabelSpec(LabelSpace(-0.5, 10.5, 89), 0.6),
        },
    )


def comparison_config() -> ExperimentConfig:
    """Smaller model used to compare the four normalization variants."""
    return ExperimentConfig(
        vit=ViTConfig(hidden_size=512, num_layers=4, num_heads=4, intermediate_size=512),
        labels={"ds": LabelSpec(LabelSpace(-0.5, 10.5, 111), 0.6)},
        optimizer=OptimizerConfig("AdamW", 1e-3, 0.1),
        scheduler=None,
        finetune_epochs=80,
    )


def toy_config() -> ExperimentConfig:
    """48 px, hidden 64, 2 layers, 2 attention heads; minutes on one CPU core."""
    return ExperimentConfig(
        augment=AugmentPolicy(blur_strength_range=(1.0, 2.0)),
        vit=ViTConfig(
            input_channels=5, image_size=48, patch_size=12, hidden_size=64, num_layers=2, num_heads=2,
            intermediate_size=128, hidden_dropout=0.0, attention_dropout=0.0,
        ),
        neck=NeckConfig(64, 2, 0.1),
        head_layers=2,
        head_layer_size=64,
        head_dropout=0.1,
        labels={
            "npg": LabelSpec(LabelSpace(-0.5, 11.5, 100), 0.3),
            "gdd": LabelSpec(LabelSpace(-5.0, 3500.0, 100), 100.0),
            "ds": LabelSpec(LabelSpace(-0.5, 10.5, 23), 0.6),
        },
        batch_size=32,
        pretrain_epochs=10,
        finetune_epochs=30,
    )
