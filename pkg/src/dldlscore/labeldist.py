"""Label spaces, discretized normal label distributions, KLD losses and metrics.

The loss family has three parts, all Kullback-Leibler divergences and hence
free of weighting hyperparameters:

``ld``
    KL(truth || pred) between the two pmfs.
``exp``
    KL between two normal distributions matched to the first two moments
    of truth and prediction.
``smooth``
    Symmetric KL between the prediction and a copy shifted by one bin.

The differentiable versions live in the ``*_t`` functions and work on
batched torch tensors of shape ``(..., K)``. The plain functions accept
:class:`LabelDistribution` objects and return floats.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

__all__ = [
    "EPS",
    "LabelSpaceError",
    "DegeneratePredictionError",
    "LabelSpace",
    "LabelDistribution",
    "GaussianLabel",
    "discretize_normal",
    "normal_pmfs",
    "expectation",
    "spread",
    "gaussian_kl",
    "floor_pmf_t",
    "moments_t",
    "ld_loss_t",
    "exp_loss_t",
    "smooth_loss_t",
    "full_kl_loss_t",
    "loss_label_distribution",
    "loss_expectation",
    "loss_smoothness",
    "total_loss",
    "LossBreakdown",
    "mdo",
    "mae",
]

# pmfs entering a logarithm are floored at EPS and renormalized
EPS = 1e-12


class LabelSpaceError(ValueError):
    """Two distributions live on different label spaces."""


class DegeneratePredictionError(ValueError):
    """Predicted distribution has zero spread, so the expectation loss is undefined."""


@dataclass(frozen=True)
class LabelSpace:
    """Evenly spaced bin centers from ``lower`` to ``upper``, both included."""

    lower: float
    upper: float
    num_bins: int

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise ValueError(f"lower ({self.lower}) must be below upper ({self.upper})")
        if self.num_bins < 2:
            raise ValueError("a label space needs at least 2 bins")

    @property
    def bin_centers(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.num_bins)

    @property
    def spacing(self) -> float:
        return (self.upper - self.lower) / (self.num_bins - 1)

    def affine(self, a: float, b: float) -> "LabelSpace":
        """The space relabeled by ``y -> a*y + b`` (``a > 0``)."""
        if a <= 0:
            raise ValueError("affine relabeling needs a positive scale")
        return LabelSpace(a * self.lower + b, a * self.upper + b, self.num_bins)

    def nearest_bin(self, y) -> np.ndarray:
        idx = np.rint((np.asarray(y, dtype=float) - self.lower) / self.spacing)
        return np.clip(idx, 0, self.num_bins - 1).astype(int)


@dataclass(frozen=True)
class GaussianLabel:
    mu: float
    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass
class LabelDistribution:
    pmf: np.ndarray
    space: LabelSpace
    out_of_range: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        self.pmf = np.asarray(self.pmf, dtype=float)
        if self.pmf.shape != (self.space.num_bins,):
            raise ValueError(f"pmf of length {self.pmf.shape} does not match {self.space.num_bins} bins")
        if np.any(self.pmf < 0):
            raise ValueError("pmf entries must be non-negative")
        if abs(self.pmf.sum() - 1.0) > 1e-6:
            raise ValueError(f"pmf sums to {self.pmf.sum()}, not 1")

    def transported(self, space: LabelSpace) -> "LabelDistribution":
        """Same bin masses on another space with the same bin count."""
        if space.num_bins != self.space.num_bins:
            raise LabelSpaceError("transport needs equal bin counts")
        return LabelDistribution(self.pmf, space, self.out_of_range)


def normal_pmfs(mu, sigma, space: LabelSpace) -> np.ndarray:
    """Discretized normal pmfs for an array of means, shape ``(*mu.shape, K)``.

    Evaluated in the log domain so narrow distributions collapse cleanly to
    one-hot instead of underflowing to 0/0.
    """
    mu = np.asarray(mu, dtype=float)[..., None]
    sigma = np.asarray(sigma, dtype=float)[..., None]
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    logp = -((space.bin_centers - mu) ** 2) / (2.0 * sigma**2)
    logp -= logp.max(axis=-1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=-1, keepdims=True)


def discretize_normal(label: GaussianLabel, space: LabelSpace) -> LabelDistribution:
    """Normal density sampled at the bin centers and renormalized.

    ``out_of_range`` is set (and a warning emitted) when the mean lies more
    than three standard deviations outside the space, where truncation
    distorts the distribution badly.
    """
    pmf = normal_pmfs(label.mu, label.sigma, space)
    far = not (space.lower - 3 * label.sigma <= label.mu <= space.upper + 3 * label.sigma)
    if far:
        warnings.warn(f"label mean {label.mu} lies far outside [{space.lower}, {space.upper}]", stacklevel=2)
    return LabelDistribution(pmf, space, out_of_range=far)


def expectation(dist: LabelDistribution) -> float:
    return float(np.dot(dist.space.bin_centers, dist.pmf))


def spread(dist: LabelDistribution) -> float:
    mu = expectation(dist)
    var = float(np.dot((dist.space.bin_centers - mu) ** 2, dist.pmf))
    return math.sqrt(max(var, 0.0))


def gaussian_kl(mu: float, sigma: float, mu_hat: float, sigma_hat: float) -> float:
    """KL(N(mu, sigma^2) || N(mu_hat, sigma_hat^2)) in closed form."""
    return math.log(sigma_hat / sigma) - 0.5 + (sigma**2 + (mu_hat - mu) ** 2) / (2.0 * sigma_hat**2)


# --- differentiable batch versions ---------------------------------------------------


def floor_pmf_t(p: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    p = p.clamp_min(eps)
    return p / p.sum(dim=-1, keepdim=True)


def moments_t(p: torch.Tensor, centers: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and standard deviation of pmfs along the last axis."""
    mu = (p * centers).sum(dim=-1)
    var = (p * (centers - mu.unsqueeze(-1)) ** 2).sum(dim=-1)
    return mu, var.sqrt()


def ld_loss_t(truth: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    # both sides floored, so identical inputs give exactly 0
    truth, pred = floor_pmf_t(truth), floor_pmf_t(pred)
    return (truth * (truth.log() - pred.log())).sum(dim=-1)


def exp_loss_t(truth: torch.Tensor, pred: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    mu, sigma = moments_t(floor_pmf_t(truth), centers)
    mu_hat, sigma_hat = moments_t(floor_pmf_t(pred), centers)
    return (sigma_hat / sigma).log() - 0.5 + (sigma**2 + (mu_hat - mu) ** 2) / (2.0 * sigma_hat**2)


def shift_pmf_t(p: torch.Tensor) -> torch.Tensor:
    """Shift one bin toward higher labels, replicating the lowest bin, renormalized."""
    shifted = torch.cat([p[..., :1], p[..., :-1]], dim=-1)
    return shifted / shifted.sum(dim=-1, keepdim=True)


def smooth_loss_t(pred: torch.Tensor) -> torch.Tensor:
    p = floor_pmf_t(pred)
    ps = shift_pmf_t(p)
    return 0.5 * ((p - ps) * (p.log() - ps.log())).sum(dim=-1)


def full_kl_loss_t(
    truth: torch.Tensor, pred: torch.Tensor, centers: torch.Tensor, reduction: str = "mean"
) -> dict[str, torch.Tensor]:
    """All three components plus their sum, reduced over the batch."""
    parts = {
        "ld": ld_loss_t(truth, pred),
        "exp": exp_loss_t(truth, pred, centers),
        "smooth": smooth_loss_t(pred),
    }
    if reduction == "mean":
        parts = {k: v.mean() for k, v in parts.items()}
    elif reduction == "sum":
        parts = {k: v.sum() for k, v in parts.items()}
    elif reduction != "none":
        raise ValueError(f"unknown reduction {reduction!r}")
    parts["total"] = parts["ld"] + parts["exp"] + parts["smooth"]
    return parts


# --- scalar API on LabelDistribution ------------------------------------------------


def _as_t(dist: LabelDistribution) -> torch.Tensor:
    return torch.as_tensor(dist.pmf, dtype=torch.float64)


def _same_space(a: LabelDistribution, b: LabelDistribution) -> None:
    if a.space != b.space:
        raise LabelSpaceError(f"label spaces differ: {a.space} vs {b.space}")


def loss_label_distribution(truth: LabelDistribution, pred: LabelDistribution) -> float:
    _same_space(truth, pred)
    return float(ld_loss_t(_as_t(truth), _as_t(pred)))


def loss_expectation(truth: LabelDistribution, pred: LabelDistribution) -> float:
    _same_space(truth, pred)
    centers = torch.as_tensor(truth.space.bin_centers, dtype=torch.float64)
    _, sigma_hat = moments_t(floor_pmf_t(_as_t(pred)), centers)
    if not float(sigma_hat) > 0:
        raise DegeneratePredictionError("predicted distribution has zero spread")
    return float(exp_loss_t(_as_t(truth), _as_t(pred), centers))


def loss_smoothness(pred: LabelDistribution) -> float:
    return float(smooth_loss_t(_as_t(pred)))


@dataclass(frozen=True)
class LossBreakdown:
    ld: float
    exp: float
    smooth: float

    @property
    def total(self) -> float:
        return self.ld + self.exp + self.smooth

    def as_dict(self) -> dict[str, float]:
        return {"ld": self.ld, "exp": self.exp, "smooth": self.smooth, "total": self.total}


def total_loss(truth: LabelDistribution, pred: LabelDistribution) -> LossBreakdown:
    return LossBreakdown(
        loss_label_distribution(truth, pred),
        loss_expectation(truth, pred),
        loss_smoothness(pred),
    )


# --- metrics --------------------------------------------------------------------------


def _stack(batch, space: LabelSpace | None = None) -> tuple[np.ndarray, LabelSpace | None]:
    if isinstance(batch, np.ndarray) or isinstance(batch, torch.Tensor):
        arr = np.asarray(batch, dtype=float)
        return (arr[None] if arr.ndim == 1 else arr), space
    batch = list(batch)
    if batch and isinstance(batch[0], LabelDistribution):
        spaces = {d.space for d in batch}
        if len(spaces) > 1:
            raise LabelSpaceError("batch mixes label spaces")
        return np.stack([d.pmf for d in batch]), batch[0].space
    return np.asarray(batch, dtype=float), space


def _paired(truths, preds, space=None) -> tuple[np.ndarray, np.ndarray, LabelSpace | None]:
    t, ts = _stack(truths, space)
    p, ps = _stack(preds, space)
    if t.shape[0] == 0:
        raise ValueError("empty batch")
    if t.shape != p.shape:
        raise ValueError(f"batch shapes differ: {t.shape} vs {p.shape}")
    if ts is not None and ps is not None and ts != ps:
        raise LabelSpaceError("truth and prediction spaces differ")
    return t, p, ts or ps


def mdo(truths: Sequence[LabelDistribution] | np.ndarray, preds) -> float:
    """Mean distribution overlap: batch mean of sum(min(truth, pred))."""
    t, p, _ = _paired(truths, preds)
    return float(np.minimum(t, p).sum(axis=-1).mean())


def mae(truths, preds, space: LabelSpace | None = None) -> float:
    """Mean absolute difference of expectations.

    ``space`` is only needed when plain arrays are passed.
    """
    t, p, space = _paired(truths, preds, space)
    if space is None:
        raise ValueError("mae on raw arrays needs the label space")
    y = space.bin_centers
    return float(np.abs(t @ y - p @ y).mean())
