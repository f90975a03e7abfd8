"""End-to-end run on synthetic data: pretrain on GDD/NPG, finetune on DS, evaluate, export.

Takes under a minute on a laptop CPU. Everything lands in ``./toy_run`` (or
the directory given as the first argument).

    python3 demos/toy_pipeline.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
import pandas as pd

from dldlscore.cli import main as dldl

out = Path(sys.argv[1] if len(sys.argv) > 1 else "toy_run")
data = out / "data"


def step(*argv):
    print("$ dldlscore", " ".join(map(str, argv)))
    code = dldl([str(a) for a in argv])
    if code != 0:
        sys.exit(code)


# 4 fields x 250 plants, 48 px, five bands
step("synth", "--out", data, "--datasets", 4, "--images", 250, "--size", 48, "--noise", 0.05, "--seed", 0)

# the weather of the first field, turned into daily thermal-time labels
step("env", "--weather", data / "weather/D00.csv", "--out", out / "env_D00.csv")
print(pd.read_csv(out / "env_D00.csv").iloc[::30].to_string(index=False))

# stage 1: environmental heads only, no disease labels involved
step("pretrain", "--preset", "toy", "--index", data / "index.csv", "--out", out / "pretrain", "--epochs", 5,
     "--reproducible")

# stage 2: fresh DS head on the pretrained backbone, and the same run from scratch
step("finetune", "--preset", "toy", "--index", data / "index.csv", "--out", out / "finetune",
     "--from", out / "pretrain/best_loss.pt", "--epochs", 8, "--reproducible")
step("finetune", "--preset", "toy", "--index", data / "index.csv", "--out", out / "scratch", "--epochs", 8,
     "--reproducible")

for name in ("finetune", "scratch"):
    log = pd.read_json(out / name / "metrics.jsonl", lines=True)
    print(f"{name:>9}: val MDO by epoch", np.round(log["val_mdo"].to_numpy(), 3))

# evaluated on the whole index here, training rows included; a real run keeps a held-out test index
step("eval", "--checkpoint", out / "finetune/best_mdo.pt", "--index", data / "index.csv", "--out", out / "eval.csv")
print(pd.read_csv(out / "eval.csv").to_string(index=False))

# a plant list with made-up field coordinates
index = pd.read_csv(data / "index.csv")
plants = index.sample(12, random_state=0)
pd.DataFrame({
    "plant_id": [f"plant{i:02d}" for i in range(len(plants))],
    "x": np.arange(len(plants)) % 4 * 0.5,
    "y": np.arange(len(plants)) // 4 * 0.5,
    "image_path": plants["image_path"].to_numpy(),
}).to_csv(data / "plants.csv", index=False)
step("predict", "--checkpoint", out / "finetune/best_mdo.pt", "--plants", data / "plants.csv",
     "--out", out / "plants.geojson", "--format", "geojson")

step("plot", "--out", out / "plots", "--metrics", out / "finetune/metrics.jsonl", "--index", data / "index.csv",
     "--checkpoint", out / "finetune/best_mdo.pt", "--image", data / plants["image_path"].iloc[0])
print("plots in", out / "plots")
