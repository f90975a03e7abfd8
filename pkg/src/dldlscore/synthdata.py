"""Procedural multispectral "plant" datasets with known DS, GDD and NPG labels.

Each image shows one lobed plant on soil. Disease severity drives lesion-spot
density, an outer necrotic ring and a chlorotic tint of the leaf spectrum;
DS 10 is a small fresh regrowth blob inside dead leaf remnants. Plant size
grows with GDD. Every dataset gets an hourly weather series from which the
stored GDD/NPG labels are computed with :mod:`dldlscore.envmodel`, so the
labels can be recomputed from the written weather files.

Recording dates are matched to DS so that severity rises through the season,
which gives the environmental labels something to share with DS.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

from .envmodel import CERCOSPORA_NPG, SUGAR_BEET_GDD, WeatherSeries, env_labels, write_weather_csv
from .imaging import DEFAULT_BANDS, MultispectralImage, save_image
from .training import DatasetIndex, write_index

__all__ = [
    "BALANCE_PROFILES",
    "SynthSpec",
    "SynthData",
    "class_counts",
    "synth_weather",
    "render_plant",
    "generate_arrays",
    "generate",
    "ReferenceEstimator",
]

DS_CLASSES = np.arange(11)
BALANCE_PROFILES = {
    "uniform": np.full(11, 1.0 / 11),
    # skewed toward low DS like typical season-long field recordings
    "paper_like": np.array([0.22, 0.2, 0.14, 0.1, 0.08, 0.06, 0.05, 0.04, 0.03, 0.03, 0.05]),
}

# reflectance of the B, G, R, REDGE, NIR bands
SPECTRA = {
    "soil": np.array([0.10, 0.13, 0.17, 0.21, 0.25]),
    "healthy": np.array([0.03, 0.09, 0.04, 0.25, 0.50]),
    "chlorotic": np.array([0.05, 0.12, 0.10, 0.24, 0.36]),
    "spot": np.array([0.15, 0.16, 0.17, 0.18, 0.20]),
    "necrotic": np.array([0.07, 0.11, 0.20, 0.26, 0.30]),
    "fresh": np.array([0.05, 0.16, 0.07, 0.33, 0.62]),
}
NECROSIS = np.array([0, 0, 0, 0, 0, 0.10, 0.22, 0.38, 0.55, 0.75])
SPOT_DENSITY = np.array([0, 0.03, 0.07, 0.12, 0.18, 0.22, 0.26, 0.3, 0.34, 0.38])
FULL_SIZE_GDD = 1500.0


@dataclass(frozen=True)
class SynthSpec:
    num_datasets: int = 3
    images_per_dataset: int = 100
    image_size: int = 48
    channels: int = 5
    class_balance: str | tuple[float, ...] = "uniform"
    noise: float = 0.1
    seed: int = 0
    num_dates: int = 12
    season_days: int = 150

    def __post_init__(self) -> None:
        if min(self.num_datasets, self.images_per_dataset, self.channels, self.num_dates) < 1:
            raise ValueError("counts must be at least 1")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16 px")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.season_days < self.num_dates + 30:
            raise ValueError("season too short for the number of recording dates")
        self.balance()

    def balance(self) -> np.ndarray:
        if isinstance(self.class_balance, str):
            if self.class_balance not in BALANCE_PROFILES:
                raise ValueError(f"unknown balance profile {self.class_balance!r}")
            p = BALANCE_PROFILES[self.class_balance]
        else:
            p = np.asarray(self.class_balance, dtype=float)
            if p.shape != (11,) or np.any(p < 0) or p.sum() <= 0:
                raise ValueError("class_balance needs 11 non-negative weights")
        return p / p.sum()


def class_counts(spec: SynthSpec) -> np.ndarray:
    """Images per DS class in one dataset (largest-remainder rounding)."""
    raw = spec.balance() * spec.images_per_dataset
    counts = np.floor(raw).astype(int)
    remainder = spec.images_per_dataset - counts.sum()
    order = np.lexsort((DS_CLASSES, -(raw - counts)))
    counts[order[:remainder]] += 1
    return counts


def _band_spectrum(name: str, channels: int) -> np.ndarray:
    s = SPECTRA[name]
    if channels == len(s):
        return s
    return np.interp(np.linspace(0, len(s) - 1, channels), np.arange(len(s)), s)


def synth_weather(sowing: dt.date, days: int, rng: np.random.Generator) -> WeatherSeries:
    """Hourly temperature/humidity with seasonal and diurnal cycles."""
    start = np.datetime64(sowing, "h")
    hours = np.arange(days * 24)
    day = hours / 24.0
    hod = hours % 24
    seasonal = 9.0 + 9.0 * np.sin(np.pi * np.minimum(day, 200) / 200.0)
    diurnal = 6.0 * np.sin(2 * np.pi * (hod - 9) / 24.0)
    temp = seasonal + diurnal + rng.normal(0, 2.0, size=hours.size)
    rh = 72.0 - 18.0 * np.sin(2 * np.pi * (hod - 9) / 24.0) + rng.normal(0, 8.0, size=hours.size)
    return WeatherSeries(start + hours.astype("timedelta64[h]"), np.round(temp, 2), np.round(np.clip(rh, 5, 100), 1))


def _latent_seed(seed: int, ds: int, gdd: float) -> int:
    digest = hashlib.sha256(f"{seed}|{ds}|{gdd:.6f}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def render_plant(
    ds: int,
    gdd: float,
    size: int = 48,
    channels: int = 5,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Reflectance raster ``(channels, size, size)`` of one plant.

    With ``noise == 0`` the raster depends on ``(ds, gdd, seed)`` only.
    Otherwise layout randomness comes from ``rng`` and continuous
    perturbations scale with ``noise``.
    """
    if not 0 <= ds <= 10:
        raise ValueError("ds must lie in [0, 10]")
    ds = int(round(ds))
    layout = rng if (noise > 0 and rng is not None) else np.random.default_rng(_latent_seed(seed, ds, gdd))
    jitter = rng if (noise > 0 and rng is not None) else None

    def spec(name):
        return _band_spectrum(name, channels)[:, None, None]

    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    cy = cx = (size - 1) / 2.0
    growth = min(1.0, max(gdd, 0.0) / FULL_SIZE_GDD)
    radius = size * (0.14 + 0.24 * growth)
    if jitter is not None:
        cy += jitter.normal(0, noise * size / 12)
        cx += jitter.normal(0, noise * size / 12)
        radius *= 1.0 + 0.08 * noise * jitter.standard_normal()
    phase = layout.uniform(0, 2 * np.pi)
    n_lobes = int(layout.integers(5, 8))
    r = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)
    outline = radius * (0.72 + 0.28 * np.abs(np.cos(n_lobes * (theta - phase) / 2)))
    rho = r / outline
    plant = rho <= 1.0

    img = np.broadcast_to(spec("soil"), (channels, size, size)).copy()
    if ds == 10:
        remnants = plant & (layout.random((size, size)) < 0.55)
        img[:, remnants] = spec("necrotic")[:, 0]
        fresh = r <= 0.45 * radius
        img[:, fresh] = spec("fresh")[:, 0]
    else:
        tint = ds / 9.0
        leaf = (1 - tint) * spec("healthy") + tint * spec("chlorotic")
        img = np.where(plant, leaf, img)
        necrotic = plant & (rho > 1.0 - NECROSIS[ds])
        img[:, necrotic] = spec("necrotic")[:, 0]
        living = plant & ~necrotic
        n_living = int(living.sum())
        target = SPOT_DENSITY[ds] * n_living
        spots = np.zeros((size, size), dtype=bool)
        candidates = np.argwhere(living)
        while spots[living].sum() < target and len(candidates):
            y, x = candidates[layout.integers(len(candidates))]
            spots[max(y - 1, 0) : y + 2, x] = True
            spots[y, max(x - 1, 0) : x + 2] = True
        spots &= living
        img[:, spots] = spec("spot")[:, 0]

    img = ndimage.gaussian_filter(img, sigma=(0, 0.5, 0.5), mode="nearest")
    if jitter is not None:
        img = img * (1.0 + 0.05 * noise * jitter.standard_normal())
        img = img + 0.01 * noise * jitter.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class SynthData:
    frame: pd.DataFrame  # index rows, image_path relative
    images: np.ndarray  # (N, C, H, W)
    weather: dict[str, WeatherSeries]
    sowing: dict[str, dt.date]


def generate_arrays(spec: SynthSpec) -> SynthData:
    """Everything :func:`generate` writes, kept in memory."""
    counts = class_counts(spec)
    rows, images = [], []
    weather, sowing = {}, {}
    for d in range(spec.num_datasets):
        dataset_id = f"D{d:02d}"
        d_rng = np.random.default_rng([spec.seed, d])
        sow = dt.date(2021, 4, 1) + dt.timedelta(days=7 * d)
        series = synth_weather(sow, spec.season_days, d_rng)
        offsets = np.linspace(30, spec.season_days - 1, spec.num_dates).round().astype(int)
        dates = [sow + dt.timedelta(days=int(o)) for o in offsets]
        labels = env_labels(series, SUGAR_BEET_GDD.starting(sow), CERCOSPORA_NPG.starting(sow), dates)
        weather[dataset_id], sowing[dataset_id] = series, sow

        ds_values = np.repeat(DS_CLASSES, counts)
        date_idx = np.rint(ds_values / 10.0 * (spec.num_dates - 1) + d_rng.normal(0, 1.0, ds_values.size))
        date_idx = np.clip(date_idx, 0, spec.num_dates - 1).astype(int)
        for i, (ds, di) in enumerate(zip(ds_values, date_idx)):
            env = labels[di]
            img = render_plant(
                int(ds), env.gdd, spec.image_size, spec.channels, spec.noise,
                np.random.default_rng([spec.seed, d, i]), spec.seed,
            )
            images.append(img)
            rows.append(
                {
                    "image_path": f"images/{dataset_id}/{i:05d}.npz",
                    "dataset_id": dataset_id,
                    "recording_date": env.date.isoformat(),
                    "ds_label": float(ds),
                    "gdd": env.gdd,
                    "npg": env.npg,
                }
            )
    return SynthData(pd.DataFrame(rows), np.stack(images), weather, sowing)


def generate(spec: SynthSpec, out_dir: str | Path) -> DatasetIndex:
    """Write ``index.csv``, image containers, weather CSVs and ``datasets.json``."""
    out_dir = Path(out_dir)
    data = generate_arrays(spec)
    bands = DEFAULT_BANDS if spec.channels == len(DEFAULT_BANDS) else None
    for rel, img in zip(data.frame["image_path"], data.images):
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        save_image(MultispectralImage(img, bands), path)
    (out_dir / "weather").mkdir(parents=True, exist_ok=True)
    datasets = {}
    for dataset_id, series in data.weather.items():
        write_weather_csv(series, out_dir / "weather" / f"{dataset_id}.csv")
        datasets[dataset_id] = {"sowing_date": data.sowing[dataset_id].isoformat(), "weather": f"weather/{dataset_id}.csv"}
    with open(out_dir / "datasets.json", "w") as fh:
        json.dump({"spec": asdict(spec), "datasets": datasets}, fh, indent=2, sort_keys=True)
    index = DatasetIndex(data.frame, out_dir)
    write_index(index, out_dir / "index.csv")
    return index


class ReferenceEstimator:
    """Spot-fraction thresholding baseline on raw reflectance.

    Pixels are assigned to the nearest reference spectrum. A plant with more
    fresh than green leaf pixels is called DS 10; otherwise the damaged
    (spot or necrotic) share of plant pixels is thresholded at midpoints
    between the per-class mean shares seen in :meth:`fit`.
    """

    _names = ("soil", "healthy", "chlorotic", "spot", "necrotic", "fresh")

    def __init__(self) -> None:
        self.thresholds: np.ndarray | None = None

    def features(self, img: np.ndarray) -> tuple[float, float]:
        c = img.shape[0]
        refs = np.stack([_band_spectrum(n, c) for n in self._names])
        dist = ((img[None] - refs[:, :, None, None]) ** 2).sum(axis=1)
        label = dist.argmin(axis=0)
        count = np.bincount(label.ravel(), minlength=len(self._names))
        green = count[1] + count[2]
        damaged = count[3] + count[4]
        plant = max(green + damaged + count[5], 1)
        return damaged / plant, count[5] / max(green, 1)

    def fit(self, images: Sequence[np.ndarray], ds: Sequence[float]) -> "ReferenceEstimator":
        shares = np.array([self.features(im)[0] for im in images])
        ds = np.rint(np.asarray(ds)).astype(int)
        self.classes = np.array([k for k in range(10) if np.any(ds == k)])
        means = np.array([shares[ds == k].mean() for k in self.classes])
        self.thresholds = (means[:-1] + means[1:]) / 2
        return self

    def predict(self, img: np.ndarray) -> float:
        if self.thresholds is None:
            raise RuntimeError("fit the estimator first")
        share, fresh_ratio = self.features(img)
        if fresh_ratio > 1.0:
            return 10.0
        return float(self.classes[np.searchsorted(self.thresholds, share)])
