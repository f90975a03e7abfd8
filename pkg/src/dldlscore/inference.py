"""Field application: dihedral-averaged prediction, confidence, test tables and export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import torch

from .imaging import MultispectralImage, dihedral_variants, load_image, normalize
from .labeldist import LabelDistribution, LabelSpace, expectation, normal_pmfs, spread
from .model import DLDLViT
from .training import DatasetIndex

__all__ = [
    "PREDICTION_COLUMNS",
    "PLANT_LIST_COLUMNS",
    "PredictionRecord",
    "predict_augmented",
    "predict_pmfs",
    "EvalTable",
    "evaluation_table",
    "evaluate_test",
    "export_predictions",
    "read_predictions",
    "read_plant_list",
    "predict_plants",
]

PREDICTION_COLUMNS = ("plant_id", "x", "y", "ds_pred", "sigma_pred", "confidence", "model_id")
PLANT_LIST_COLUMNS = ("plant_id", "x", "y", "image_path")


@dataclass
class PredictionRecord:
    plant_id: str
    x: float
    y: float
    pmf: LabelDistribution
    ds_pred: float
    sigma_pred: float
    confidence: float
    model_id: str = ""


def _head(model: DLDLViT, head: str | None) -> str:
    return head if head is not None else model.head_names[0]


@torch.no_grad()
def predict_pmfs(model: DLDLViT, images: np.ndarray, head: str | None = None, batch_size: int = 64) -> np.ndarray:
    """Plain forward pass in eval mode on already normalized ``(N, C, H, W)`` images."""
    model.eval()
    head = _head(model, head)
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(np.asarray(images[start : start + batch_size]), dtype=torch.float32)
        out.append(model(x).pmfs[head].double().numpy())
    return np.concatenate(out)


def _averaged_pmf(model: DLDLViT, img: MultispectralImage, head: str) -> np.ndarray:
    variants = np.stack([v.data for v in dihedral_variants(img)])
    pmfs = predict_pmfs(model, variants, head)
    # sum of the 8 pmfs divided by its total mass
    summed = pmfs.sum(axis=0)
    return summed / summed.sum()


def predict_augmented(
    model: DLDLViT,
    img: MultispectralImage,
    sigma_train: float | None = None,
    head: str | None = None,
    normalization: str | None = "total_standardization",
    plant_id: str = "",
    x: float = 0.0,
    y: float = 0.0,
    model_id: str = "",
) -> PredictionRecord:
    """Average the pmfs predicted for all 8 dihedral variants of ``img``.

    ``normalization=None`` means ``img`` is already normalized. The
    confidence ratio is the predicted spread over ``sigma_train`` (the
    head's training label sigma by default); 1 means the prediction is as
    wide as the training labels, larger values mean less certainty.
    """
    head = _head(model, head)
    cfg = model.head_config(head)
    if sigma_train is None:
        sigma_train = cfg.label_std
    if normalization is not None:
        img = normalize(img, normalization)
    dist = LabelDistribution(_averaged_pmf(model, img, head), cfg.label_space)
    mu, sd = expectation(dist), spread(dist)
    return PredictionRecord(plant_id, float(x), float(y), dist, mu, sd, sd / sigma_train, model_id)


@dataclass
class EvalTable:
    """Per-class MAE/MDO rows plus plain and abundance-corrected totals."""

    table: pd.DataFrame  # index: "0".."10", "total", "total (corr.)"; columns: n, mae, mdo
    omitted: list[int]

    def to_csv(self, path: str | Path) -> None:
        frame = self.table.copy()
        frame.index.name = "true_ds"
        frame.to_csv(path, float_format="%.10g")


def evaluation_table(
    true_ds: Sequence[float], truths: np.ndarray, preds: np.ndarray, space: LabelSpace
) -> EvalTable:
    """Group rows by rounded true DS and summarize MAE and MDO.

    ``total`` averages over all rows; ``total (corr.)`` averages the class
    rows so every class counts equally. Classes without rows are left out
    and listed in ``omitted``.
    """
    true_ds = np.asarray(true_ds, dtype=float)
    if len(true_ds) == 0:
        raise ValueError("empty test set")
    y = space.bin_centers
    abs_err = np.abs(truths @ y - preds @ y)
    overlap = np.minimum(truths, preds).sum(axis=1)
    classes = np.clip(np.rint(true_ds), 0, 10).astype(int)
    rows, omitted = {}, []
    for k in range(11):
        sel = classes == k
        if not sel.any():
            omitted.append(k)
            continue
        rows[str(k)] = {"n": int(sel.sum()), "mae": abs_err[sel].mean(), "mdo": overlap[sel].mean()}
    frame = pd.DataFrame.from_dict(rows, orient="index")
    frame.loc["total"] = {"n": len(true_ds), "mae": abs_err.mean(), "mdo": overlap.mean()}
    per_class = frame.drop(index="total")
    frame.loc["total (corr.)"] = {"n": len(true_ds), "mae": per_class["mae"].mean(), "mdo": per_class["mdo"].mean()}
    frame["n"] = frame["n"].astype(int)
    return EvalTable(frame, omitted)


def evaluate_test(
    model: DLDLViT,
    index: DatasetIndex,
    head: str = "ds",
    normalization: str = "total_standardization",
    augmented: bool = True,
) -> EvalTable:
    """Table-style evaluation on a labeled test index, unweighted."""
    if len(index) == 0:
        raise ValueError("empty test index")
    if not index.has_labels(head):
        raise ValueError(f"test index needs {head} labels on every row")
    cfg = model.head_config(head)
    true_ds = index.labels(head)
    truths = normal_pmfs(true_ds, cfg.label_std, cfg.label_space)
    preds = []
    for i in range(len(index)):
        img = normalize(load_image(index.path(i)), normalization)
        if augmented:
            preds.append(_averaged_pmf(model, img, head))
        else:
            preds.append(predict_pmfs(model, img.data[None], head)[0])
    return evaluation_table(true_ds, truths, np.stack(preds), cfg.label_space)


def export_predictions(records: Sequence[PredictionRecord], fmt: str, path: str | Path) -> Path:
    """Write records sorted by plant id as CSV or a GeoJSON FeatureCollection."""
    if not records:
        raise ValueError("no prediction records to export")
    records = sorted(records, key=lambda r: r.plant_id)
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(PREDICTION_COLUMNS)
            for r in records:
                writer.writerow([r.plant_id, repr(r.x), repr(r.y), repr(r.ds_pred), repr(r.sigma_pred), repr(r.confidence), r.model_id])
    elif fmt == "geojson":
        features = [
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [r.x, r.y]},
                "properties": {
                    "plant_id": r.plant_id,
                    "ds_pred": r.ds_pred,
                    "sigma_pred": r.sigma_pred,
                    "confidence": r.confidence,
                    "model_id": r.model_id,
                },
            }
            for r in records
        ]
        with open(path, "w") as fh:
            json.dump({"type": "FeatureCollection", "features": features}, fh, indent=1)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


def read_predictions(path: str | Path) -> list[dict]:
    """Read an exported CSV or GeoJSON back into flat dicts."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("{"):
        out = []
        for feat in json.loads(text)["features"]:
            props = dict(feat["properties"])
            props["x"], props["y"] = feat["geometry"]["coordinates"]
            out.append(props)
        return out
    rows = list(csv.DictReader(text.splitlines()))
    for row in rows:
        for k in ("x", "y", "ds_pred", "sigma_pred", "confidence"):
            row[k] = float(row[k])
    return rows


def read_plant_list(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"plant_id": str, "image_path": str})
    missing = [c for c in PLANT_LIST_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"plant list lacks columns {missing}")
    return frame


def predict_plants(
    model: DLDLViT,
    plants: pd.DataFrame,
    root: str | Path = ".",
    normalization: str = "total_standardization",
    head: str | None = None,
    model_id: str = "",
) -> tuple[list[PredictionRecord], list[tuple[str, str]]]:
    """Augmented prediction for every listed plant.

    Unreadable images do not abort the run; they are returned as
    ``(plant_id, reason)`` pairs next to the successful records.
    """
    records, failures = [], []
    root = Path(root)
    for row in plants.itertuples(index=False):
        try:
            img = load_image(root / row.image_path)
        except (OSError, ValueError, KeyError) as exc:
            failures.append((str(row.plant_id), f"{row.image_path}: {exc}"))
            continue
        records.append(
            predict_augmented(model, img, head=head, normalization=normalization,
                              plant_id=str(row.plant_id), x=row.x, y=row.y, model_id=model_id)
        )
    return records, failures
