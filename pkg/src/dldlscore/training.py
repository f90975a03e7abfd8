"""Dataset index, weighted sampling, cyclic LR and the per-head training loop."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import torch

from .imaging import AugmentPolicy, MultispectralImage, augment_train, load_image, normalize
from .labeldist import LabelSpace, full_kl_loss_t, normal_pmfs
from .model import DLDLViT, save_checkpoint

__all__ = [
    "INDEX_COLUMNS",
    "StageError",
    "NumericalError",
    "DatasetIndex",
    "read_index",
    "write_index",
    "OptimizerConfig",
    "SchedulerConfig",
    "TrainConfig",
    "build_sampler",
    "split_indices",
    "lr_at",
    "PreparedData",
    "prepare_data",
    "train_stage",
    "TrainResult",
    "validate",
    "epochs_to_threshold",
    "write_metrics",
    "read_metrics",
]

log = logging.getLogger(__name__)

INDEX_COLUMNS = ("image_path", "dataset_id", "recording_date", "ds_label", "gdd", "npg")
STAGE_LABELS = {"pretrain": ("gdd", "npg"), "finetune": ("ds",)}
# head name -> index column
LABEL_COLUMNS = {"ds": "ds_label", "gdd": "gdd", "npg": "npg"}


class StageError(ValueError):
    """The index lacks labels required by the training stage."""


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class DatasetIndex:
    """Per-image rows with paths relative to ``root``."""

    frame: pd.DataFrame
    root: Path = Path(".")

    def __post_init__(self) -> None:
        missing = [c for c in INDEX_COLUMNS if c not in self.frame.columns]
        if missing:
            raise ValueError(f"dataset index lacks columns {missing}")
        self.frame = self.frame.reset_index(drop=True)
        self.root = Path(self.root)
        ds = self.frame["ds_label"].dropna()
        if ((ds < 0) | (ds > 10)).any():
            raise ValueError("ds_label must lie in [0, 10]")

    def __len__(self) -> int:
        return len(self.frame)

    def path(self, i: int) -> Path:
        return self.root / self.frame.at[i, "image_path"]

    def subset(self, rows) -> "DatasetIndex":
        return DatasetIndex(self.frame.iloc[np.asarray(rows)].copy(), self.root)

    def labels(self, name: str) -> np.ndarray:
        return self.frame[LABEL_COLUMNS.get(name, name)].to_numpy(dtype=float)

    def has_labels(self, name: str) -> bool:
        col = LABEL_COLUMNS.get(name, name)
        return col in self.frame.columns and not self.frame[col].isna().any()


def read_index(path: str | Path) -> DatasetIndex:
    path = Path(path)
    types = {"image_path": str, "dataset_id": str, "recording_date": str, "ds_label": float, "gdd": float, "npg": float}
    frame = pd.read_csv(path, dtype=types)
    return DatasetIndex(frame, path.parent)


def write_index(index: DatasetIndex, path: str | Path) -> None:
    index.frame.to_csv(path, columns=list(INDEX_COLUMNS), index=False, float_format="%.10g")


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "AdamW"
    initial_lr: float = 5e-4
    weight_decay: float = 0.1

    def __post_init__(self) -> None:
        if self.algorithm != "AdamW":
            raise ValueError(f"unsupported optimizer {self.algorithm!r}")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")


@dataclass(frozen=True)
class SchedulerConfig:
    """Linear cyclic schedule; ``step_size`` is the half period in optimizer steps."""

    max_lr: float = 1e-3
    step_size: int = 500
    mode: str = "exp_range"
    gamma: float = 0.9999

    def __post_init__(self) -> None:
        if self.mode not in ("triangular", "exp_range"):
            raise ValueError(f"unsupported cyclic mode {self.mode!r}")
        if not self.max_lr > 0 or self.step_size < 1:
            raise ValueError("max_lr and step_size must be positive")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scheduler: SchedulerConfig | None = field(default_factory=SchedulerConfig)
    batch_size: int = 64
    epochs: int = 80
    seed: int = 0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    normalization: str = "total_standardization"
    joint_optimization: bool = False
    literal_sampler_weights: bool = False
    val_fraction: float = 0.2
    stop_at_mdo: float | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGE_LABELS:
            raise ValueError(f"stage must be one of {tuple(STAGE_LABELS)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


def _cell_keys(index: DatasetIndex, labels: Sequence[str], label_spaces: Mapping[str, LabelSpace]) -> list[tuple]:
    columns = [index.frame["dataset_id"].astype(str).to_numpy()]
    for name in labels:
        values = index.labels(name)
        if np.isnan(values).any():
            raise StageError(f"label {name!r} missing for some rows")
        if name == "ds":
            columns.append(np.clip(np.rint(values), 0, 10).astype(int))
        else:
            columns.append(label_spaces[name].nearest_bin(values))
    return list(zip(*columns))


def build_sampler(
    index: DatasetIndex,
    labels: Sequence[str] = ("ds",),
    label_spaces: Mapping[str, LabelSpace] | None = None,
    literal: bool = False,
) -> np.ndarray:
    """Per-row sampling probabilities that balance (dataset, label) cells.

    Rows are grouped by dataset and binned label (DS rounded to its integer
    class, other labels to their nearest bin). With the default weighting
    ``1 / n(cell)`` each non-empty cell is drawn equally often in
    expectation. ``literal=True`` instead uses ``1 / (N_label * S_dataset)``,
    the inverse label abundance times the dataset size.
    """
    if len(index) == 0:
        raise ValueError("cannot build a sampler for an empty index")
    keys = _cell_keys(index, labels, label_spaces or {})
    if literal:
        n_label = Counter(k[1:] for k in keys)
        n_set = Counter(k[0] for k in keys)
        w = np.array([1.0 / (n_label[k[1:]] * n_set[k[0]]) for k in keys])
    else:
        n_cell = Counter(keys)
        w = np.array([1.0 / n_cell[k] for k in keys])
    return w / w.sum()


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, seed-reproducible train/validation row split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ValueError("split leaves no training rows")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate after ``step`` optimizer steps.

    Triangular wave between the initial and the maximum rate with half
    period ``step_size``; in ``exp_range`` mode the amplitude decays as
    ``gamma**step``.
    """
    base = cfg.optimizer.initial_lr
    sched = cfg.scheduler
    if sched is None:
        return base
    cycle = math.floor(1 + step / (2 * sched.step_size))
    x = abs(step / sched.step_size - 2 * cycle + 1)
    scale = sched.gamma**step if sched.mode == "exp_range" else 1.0
    return base + (sched.max_lr - base) * max(0.0, 1.0 - x) * scale


@dataclass
class PreparedData:
    """Normalized images and truth pmfs of an index, held in memory."""

    index: DatasetIndex
    images: np.ndarray  # (N, C, H, W) float32
    truths: dict[str, np.ndarray]  # head -> (N, K)


def _cache_path(path: Path, method: str) -> Path | None:
    cache = os.environ.get("DLDL_CACHE_DIR")
    if not cache:
        return None
    stat = path.stat()
    key = hashlib.sha1(f"{path.resolve()}|{stat.st_mtime_ns}|{stat.st_size}|{method}".encode()).hexdigest()
    return Path(cache) / f"{key}.npy"


def load_normalized(path: Path, method: str) -> np.ndarray:
    """Load and normalize one image, through ``$DLDL_CACHE_DIR`` when set."""
    cached = _cache_path(path, method)
    if cached is not None and cached.exists():
        return np.load(cached)
    data = normalize(load_image(path), method).data.astype(np.float32)
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        np.save(cached, data)
    return data


def prepare_data(index: DatasetIndex, model: DLDLViT, normalization: str) -> PreparedData:
    images = np.stack([load_normalized(index.path(i), normalization) for i in range(len(index))])
    truths = {}
    for head in model.head_configs:
        values = index.labels(head.label_name)
        if np.isnan(values).any():
            raise StageError(f"label {head.label_name!r} missing for some rows")
        truths[head.label_name] = normal_pmfs(values, head.label_std, head.label_space).astype(np.float32)
    return PreparedData(index, images, truths)


def _check_stage(model: DLDLViT, index: DatasetIndex, cfg: TrainConfig) -> None:
    required = STAGE_LABELS[cfg.stage]
    if set(model.head_names) != set(required):
        raise StageError(f"{cfg.stage} trains heads {required}, model has {model.head_names}")
    for name in required:
        if not index.has_labels(name):
            raise StageError(f"{cfg.stage} needs {LABEL_COLUMNS[name]} on every row")


def _centers(model: DLDLViT) -> dict[str, torch.Tensor]:
    return {h.label_name: torch.tensor(h.label_space.bin_centers, dtype=torch.float32) for h in model.head_configs}


@torch.no_grad()
def _evaluate_rows(model: DLDLViT, data: PreparedData, rows: np.ndarray, batch_size: int) -> dict[str, float]:
    model.eval()
    centers = _centers(model)
    sums: dict[str, float] = {}
    for start in range(0, len(rows), batch_size):
        sel = rows[start : start + batch_size]
        out = model(torch.from_numpy(data.images[sel]))
        for name in model.head_names:
            truth = torch.from_numpy(data.truths[name][sel])
            pred = out.pmfs[name]
            parts = full_kl_loss_t(truth, pred, centers[name], reduction="sum")
            y = centers[name]
            stats = {
                "ld": float(parts["ld"]),
                "exp": float(parts["exp"]),
                "smooth": float(parts["smooth"]),
                "mdo": float(torch.minimum(truth, pred).sum(-1).sum()),
                "mae": float(((truth * y).sum(-1) - (pred * y).sum(-1)).abs().sum()),
            }
            for k, v in stats.items():
                sums[f"{name}_{k}"] = sums.get(f"{name}_{k}", 0.0) + v
    n = len(rows)
    metrics = {k: v / n for k, v in sums.items()}
    for name in model.head_names:
        metrics[f"{name}_total"] = metrics[f"{name}_ld"] + metrics[f"{name}_exp"] + metrics[f"{name}_smooth"]
    metrics["loss"] = sum(metrics[f"{n}_total"] for n in model.head_names)
    metrics["mdo"] = float(np.mean([metrics[f"{n}_mdo"] for n in model.head_names]))
    return metrics


def _weighted_draw(weights: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(len(weights), size=size, replace=True, p=weights)


def validate(model: DLDLViT, index: DatasetIndex, cfg: TrainConfig, data: PreparedData | None = None) -> dict[str, float]:
    """Loss components, MDO and MAE per head on a weighted resample of ``index``.

    Augmentation and dropout are off; the resample is seeded by ``cfg.seed``.
    """
    if len(index) == 0:
        raise ValueError("empty validation set")
    data = data or prepare_data(index, model, cfg.normalization)
    spaces = {h.label_name: h.label_space for h in model.head_configs}
    w = build_sampler(index, model.head_names, spaces, cfg.literal_sampler_weights)
    rows = _weighted_draw(w, len(index), np.random.default_rng(cfg.seed))
    return _evaluate_rows(model, data, rows, cfg.batch_size)


@dataclass
class TrainResult:
    model: DLDLViT
    metrics: list[dict]
    best_loss_state: dict
    best_mdo_state: dict
    best_loss_epoch: int
    best_mdo_epoch: int
    train_rows: np.ndarray
    val_rows: np.ndarray

    def model_with(self, which: str = "mdo") -> DLDLViT:
        """Copy of the model carrying the best-by-``which`` weights."""
        m = copy.deepcopy(self.model)
        m.load_state_dict(self.best_mdo_state if which == "mdo" else self.best_loss_state)
        return m


def _optimizers(model: DLDLViT, cfg: TrainConfig):
    opt_cfg = cfg.optimizer
    if cfg.joint_optimization:
        groups = {"__joint__": list(model.parameters())}
    else:
        groups = {n: model.head_parameters(n) + model.shared_parameters() for n in model.head_names}
    optimizers = {
        k: torch.optim.AdamW(params, lr=opt_cfg.initial_lr, weight_decay=opt_cfg.weight_decay)
        for k, params in groups.items()
    }
    schedulers = {}
    if cfg.scheduler is not None:
        s = cfg.scheduler
        for k, opt in optimizers.items():
            schedulers[k] = torch.optim.lr_scheduler.CyclicLR(
                opt,
                base_lr=opt_cfg.initial_lr,
                max_lr=s.max_lr,
                step_size_up=s.step_size,
                mode=s.mode,
                gamma=s.gamma,
                cycle_momentum=False,
            )
    return optimizers, schedulers


def _augment_batch(images: np.ndarray, policy: AugmentPolicy, seeds: np.ndarray) -> np.ndarray:
    if policy == AugmentPolicy.disabled():
        return images
    out = np.empty_like(images)
    for i, (img, seed) in enumerate(zip(images, seeds)):
        out[i] = augment_train_array(img, policy, int(seed))
    return out


def augment_train_array(data: np.ndarray, policy: AugmentPolicy, seed: int) -> np.ndarray:
    return augment_train(MultispectralImage(data), policy, seed).data.astype(np.float32)


def _raise_nan(epoch: int, batch: int, head: str, parts: dict) -> None:
    detail = ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items())
    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {batch}, head {head!r}: {detail}")


def train_stage(
    model: DLDLViT,
    index: DatasetIndex,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    data: PreparedData | None = None,
    reproducible: bool = True,
) -> TrainResult:
    """Train ``model`` in place for one stage.

    Each head owns an AdamW optimizer over its own parameters plus the shared
    backbone and neck; per batch the heads run forward, backward and step in
    declaration order. With ``cfg.joint_optimization`` one optimizer steps on
    the summed loss instead. Best weights by validation loss and by
    validation MDO are tracked separately and, with ``out_dir``, written as
    ``best_loss.pt`` / ``best_mdo.pt`` next to ``metrics.jsonl``.
    """
    _check_stage(model, index, cfg)
    data = data or prepare_data(index, model, cfg.normalization)
    cfg.augment.validate_for(data.images.shape[1:])
    train_rows, val_rows = split_indices(len(index), cfg.val_fraction, cfg.seed)
    spaces = {h.label_name: h.label_space for h in model.head_configs}
    heads = model.head_names
    w_train = build_sampler(index.subset(train_rows), heads, spaces, cfg.literal_sampler_weights)
    w_val = build_sampler(index.subset(val_rows), heads, spaces, cfg.literal_sampler_weights)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    val_sample = val_rows[_weighted_draw(w_val, len(val_rows), np.random.default_rng(cfg.seed + 1))]
    optimizers, schedulers = _optimizers(model, cfg)
    centers = _centers(model)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    metrics: list[dict] = []
    best_loss = best_mdo = None
    best_loss_state = best_mdo_state = None
    best_loss_epoch = best_mdo_epoch = -1
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = train_rows[_weighted_draw(w_train, len(train_rows), rng)]
        aug_seeds = rng.integers(0, 2**31 - 1, size=len(order))
        sums = {f"{n}_{k}": 0.0 for n in heads for k in ("ld", "exp", "smooth")}
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            sel = order[start : start + cfg.batch_size]
            x = torch.from_numpy(_augment_batch(data.images[sel], cfg.augment, aug_seeds[start : start + cfg.batch_size]))
            truths = {n: torch.from_numpy(data.truths[n][sel]) for n in heads}
            if cfg.joint_optimization:
                out = model(x)
                total = 0.0
                for n in heads:
                    parts = full_kl_loss_t(truths[n], out.pmfs[n], centers[n])
                    if not torch.isfinite(parts["total"]):
                        _raise_nan(epoch, b, n, parts)
                    total = total + parts["total"]
                    for k in ("ld", "exp", "smooth"):
                        sums[f"{n}_{k}"] += parts[k].item() * len(sel)
                opt = optimizers["__joint__"]
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
            else:
                for n in heads:
                    out = model(x)
                    parts = full_kl_loss_t(truths[n], out.pmfs[n], centers[n])
                    if not torch.isfinite(parts["total"]):
                        _raise_nan(epoch, b, n, parts)
                    opt = optimizers[n]
                    opt.zero_grad(set_to_none=True)
                    parts["total"].backward()
                    opt.step()
                    for k in ("ld", "exp", "smooth"):
                        sums[f"{n}_{k}"] += parts[k].item() * len(sel)
            for sched in schedulers.values():
                sched.step()
            step += 1

        record: dict = {"epoch": epoch, "stage": cfg.stage, "lr": lr_at(step, cfg)}
        for n in heads:
            for k in ("ld", "exp", "smooth"):
                record[f"train_{n}_{k}"] = sums[f"{n}_{k}"] / len(order)
            record[f"train_{n}_total"] = sum(record[f"train_{n}_{k}"] for k in ("ld", "exp", "smooth"))
        record["train_loss"] = sum(record[f"train_{n}_total"] for n in heads)
        val = _evaluate_rows(model, data, val_sample, cfg.batch_size)
        record.update({f"val_{k}": v for k, v in val.items()})
        if not reproducible:
            record["wall_time_s"] = time.perf_counter() - t0
        metrics.append(record)
        log.info("epoch %d: train %.4f val %.4f mdo %.4f", epoch, record["train_loss"], val["loss"], val["mdo"])

        if best_loss is None or val["loss"] < best_loss:
            best_loss, best_loss_epoch = val["loss"], epoch
            best_loss_state = copy.deepcopy(model.state_dict())
        if best_mdo is None or val["mdo"] > best_mdo:
            best_mdo, best_mdo_epoch = val["mdo"], epoch
            best_mdo_state = copy.deepcopy(model.state_dict())
        if out_dir is not None:
            write_metrics(metrics, out_dir / "metrics.jsonl")
        if cfg.stop_at_mdo is not None and val["mdo"] >= cfg.stop_at_mdo:
            break

    result = TrainResult(
        model, metrics, best_loss_state, best_mdo_state, best_loss_epoch, best_mdo_epoch, train_rows, val_rows
    )
    if out_dir is not None:
        meta = {"stage": cfg.stage, "normalization": cfg.normalization, "seed": cfg.seed}
        save_checkpoint(result.model_with("loss"), out_dir / "best_loss.pt", {**meta, "epoch": best_loss_epoch})
        save_checkpoint(result.model_with("mdo"), out_dir / "best_mdo.pt", {**meta, "epoch": best_mdo_epoch})
    return result


def epochs_to_threshold(metrics: Sequence[dict], threshold: float, key: str = "val_mdo") -> float:
    """First epoch whose ``key`` reaches ``threshold``; ``inf`` if never."""
    for rec in metrics:
        if rec[key] >= threshold:
            return rec["epoch"]
    return math.inf


def write_metrics(metrics: Sequence[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
