"""``dldlscore`` command line: synth, env, pretrain, finetune, eval, predict, plot.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(including partial prediction failures), 3 NaN/inf loss.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import plots
from .config import ConfigFileError, ExperimentConfig, comparison_config, paper_config, toy_config
from .envmodel import env_labels, read_weather_csv
from .imaging import NORMALIZATIONS, load_image, normalize
from .inference import evaluate_test, export_predictions, predict_plants, read_plant_list
from .model import ConfigError, IncompatibleCheckpointError, build_model, load_checkpoint, transfer_backbone
from .synthdata import BALANCE_PROFILES, SynthSpec, generate
from .training import NumericalError, StageError, read_index, read_metrics, train_stage

log = logging.getLogger("dldlscore")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PRESETS = {"paper": paper_config, "comparison": comparison_config, "toy": toy_config}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def _experiment(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset:
        cfg = PRESETS[args.preset]()
    else:
        raise UsageError("a --config file or --preset is required")
    over = {"seed": args.seed, "normalization": getattr(args, "normalization", None)}
    if getattr(args, "epochs", None) is not None:
        over["pretrain_epochs" if args.command == "pretrain" else "finetune_epochs"] = args.epochs
    return cfg.with_overrides(**over)


# --- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(
            num_datasets=args.datasets,
            images_per_dataset=args.images,
            image_size=args.size,
            channels=args.channels,
            class_balance=args.balance,
            noise=args.noise,
            seed=args.seed if args.seed is not None else 0,
            num_dates=args.dates,
            season_days=max(150, args.dates + 30),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    index = generate(spec, args.out)
    log.info("wrote %d images to %s", len(index), args.out)
    return EXIT_OK


def cmd_env(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    series = read_weather_csv(args.weather)
    sowing = args.sowing or series.first_day()
    start = args.start or sowing
    end = args.end or series.timestamps[-1].astype(dt.datetime).date()
    dates = [start + dt.timedelta(days=i) for i in range((end - start).days + 1)]
    rows = env_labels(series, cfg.gdd_profile.starting(sowing), cfg.npg_profile.starting(sowing), dates)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(("date", "gdd", "npg"))
        for r in rows:
            writer.writerow((r.date.isoformat(), repr(r.gdd), repr(r.npg)))
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def _train(args, stage: str) -> int:
    cfg = _experiment(args)
    index_path = args.index or cfg.paths.get("index")
    out_dir = args.out or cfg.paths.get("output_dir")
    if not index_path or not out_dir:
        raise UsageError("dataset index and output directory must be given by flag or config paths")
    index = read_index(index_path)
    heads = cfg.heads(stage)
    if getattr(args, "from_checkpoint", None):
        model = transfer_backbone(load_checkpoint(args.from_checkpoint), heads, cfg.seed)
    else:
        model = build_model(cfg.vit, cfg.neck, heads, cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.yaml")
    result = train_stage(model, index, cfg.train_config(stage), out_dir, reproducible=args.reproducible)
    best = max(m["val_mdo"] for m in result.metrics)
    log.info("%s done: %d epochs, best val MDO %.4f", stage, len(result.metrics), best)
    return EXIT_OK


def _normalization(args, model) -> str:
    if args.normalization:
        return args.normalization
    return (getattr(model, "metadata", None) or {}).get("normalization", "total_standardization")


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    index = read_index(args.index)
    table = evaluate_test(
        model, index, head=args.head, normalization=_normalization(args, model), augmented=not args.no_augment
    )
    table.to_csv(args.out)
    if table.omitted:
        log.warning("no test rows for DS classes %s; rows omitted", table.omitted)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    plants = read_plant_list(args.plants)
    model_id = args.model_id if args.model_id is not None else Path(args.checkpoint).stem
    records, failures = predict_plants(
        model, plants, Path(args.plants).parent, _normalization(args, model), args.head, model_id
    )
    for plant_id, reason in failures:
        log.error("plant %s skipped: %s", plant_id, reason)
    if records:
        export_predictions(records, args.format, args.out)
    return EXIT_DATA if failures else EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not (args.metrics or args.index or args.checkpoint):
        raise UsageError("nothing to plot: give --metrics, --index or --checkpoint with --image")
    if args.metrics:
        metrics = read_metrics(args.metrics)
        if not metrics:
            raise ValueError(f"{args.metrics}: metrics log is empty")
        plots.loss_curves(metrics, out / "loss_curves.png")
        plots.mdo_curves(metrics, out / "mdo_curves.png")
    if args.index:
        plots.label_histograms(read_index(args.index), out / "label_histograms.png")
    if args.checkpoint:
        if not args.image:
            raise UsageError("attention maps need --image")
        model = load_checkpoint(args.checkpoint)
        img = normalize(load_image(args.image), _normalization(args, model))
        plots.attention_maps(model, img, out / f"attention_{Path(args.image).stem}.png")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dldlscore", description="Disease-severity label-distribution ViT toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, help="single source of all randomness")
        sp.add_argument("--reproducible", action="store_true", help="suppress wall-clock fields in outputs")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--datasets", type=int, default=3)
    s.add_argument("--images", type=int, default=100, help="images per dataset")
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--channels", type=int, default=5)
    s.add_argument("--balance", choices=BALANCE_PROFILES, default="uniform")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--dates", type=int, default=12, help="recording dates per dataset")
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("env", help="daily cumulative GDD and NPG from hourly weather")
    s.add_argument("--weather", required=True)
    s.add_argument("--config", help="experiment config with gdd/npg crop profiles")
    s.add_argument("--sowing", type=_date, help="accumulation start (default: first weather day)")
    s.add_argument("--start", type=_date)
    s.add_argument("--end", type=_date)
    s.add_argument("--out", help="output CSV (default: stdout)")
    s.set_defaults(func=cmd_env)

    for stage in ("pretrain", "finetune"):
        s = sub.add_parser(stage, help=f"{stage} stage training")
        s.add_argument("--config")
        s.add_argument("--preset", choices=sorted(PRESETS))
        s.add_argument("--index")
        s.add_argument("--out", help="output directory")
        s.add_argument("--epochs", type=int)
        s.add_argument("--normalization", choices=NORMALIZATIONS)
        if stage == "finetune":
            s.add_argument("--from", dest="from_checkpoint", help="pretrained checkpoint whose backbone is reused")
        common(s)
        s.set_defaults(func=lambda a, st=stage: _train(a, st))

    s = sub.add_parser("eval", help="per-class MAE/MDO table on a labeled test index")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--head", default="ds")
    s.add_argument("--normalization", choices=NORMALIZATIONS)
    s.add_argument("--no-augment", action="store_true", help="skip dihedral averaging")
    common(s, seed=False)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="augmented DS prediction for a plant list")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--plants", required=True, help="CSV with plant_id,x,y,image_path")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("csv", "geojson"), default="csv")
    s.add_argument("--head")
    s.add_argument("--model-id")
    s.add_argument("--normalization", choices=NORMALIZATIONS)
    common(s, seed=False)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("plot", help="training curves, label histograms, attention maps")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--metrics", help="metrics.jsonl")
    s.add_argument("--index", help="dataset index for label histograms")
    s.add_argument("--checkpoint")
    s.add_argument("--image")
    s.add_argument("--normalization", choices=NORMALIZATIONS)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigFileError, ConfigError, StageError, IncompatibleCheckpointError) as exc:
        print(f"dldlscore {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dldlscore {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"dldlscore {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
