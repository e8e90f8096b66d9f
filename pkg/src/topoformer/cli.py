"""Command-line entry point: ``topoformer {generate,train,evaluate,predict-ood}``.

Every command resolves one flat configuration (defaults, then a JSON file
given with ``--config``, then explicit flags, then ``--set key=value``) and
writes it to ``config.json`` in its output directory.  Rerunning a command
with ``--config <out>/config.json`` reproduces its outputs byte for byte.

Exit codes: 0 success, 2 input or configuration error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_manifest
from .data import (
    DatasetSplit,
    NormStats,
    RejectsReport,
    make_example,
    normalize_split,
    parse_datums,
    parse_profiles,
    preprocess,
    split,
    write_datums_csv,
    write_profiles_csv,
)
from .errors import (
    ConfigurationError,
    DivergedTrainingError,
    FormatError,
    TopoformerError,
)
from .metrics import (
    PUBLISHED_TABLE,
    ReferencePredictor,
    average_reference_profile,
    evaluate_models,
    evaluate_ood,
)
from .models import VARIANTS, build_model, make_config
from .synthetic import generate_synthetic
from .training import TrainConfig, fit

log = logging.getLogger("topoformer")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3

PROFILES_FILE = "profiles.csv"
DATUMS_FILE = "datums.csv"
TRUTH_FILE = "truth.csv"
REJECTS_FILE = "rejects.csv"
CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "model.ckpt"

DEFAULTS = {
    "seed": 0,
    "out": None,
    "data.dir": None,
    "generate.sites": 3,
    "generate.profiles_per_site": 40,
    "generate.noise": 0.005,
    "generate.truncate_fraction": 0.0,
    "model.variant": "topoformer",
    "split.stratify_by_site": False,
    "train.batch_size": 32,
    "train.max_epochs": 200,
    "train.patience": 20,
    "train.learning_rate": 1e-3,
    "train.min_delta": 1e-6,
    "train.micro_batch_size": 8,
    "evaluate.checkpoints": [],
    "evaluate.include_reference": False,
    "ood.checkpoints": [],
    "ood.site": None,
    "ood.include_reference": True,
}

# Generation uses the root seed as is; later stages draw their own seeds from
# it so that, e.g., the split does not move when only initialization changes.
STAGES = {"split": 2, "init": 3, "shuffle": 4}


def stage_seed(root_seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([int(root_seed), STAGES[stage]]).generate_state(1)[0])


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_file: str | None, flags: dict, overrides: list[str]) -> dict:
    """Defaults < config file < explicit flags < ``--set`` overrides."""
    config = dict(DEFAULTS)
    if config_file:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config file {config_file}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {config_file} must hold a JSON object of dotted keys")
        config.update(loaded)
    config.update({k: v for k, v in flags.items() if v is not None})
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        config[key.strip()] = _parse_value(value)
    unknown = sorted(k for k in config if k not in DEFAULTS and not k.startswith("model."))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {unknown}")
    return config


def _require(config: dict, key: str):
    if config.get(key) in (None, "", []):
        raise ConfigurationError(f"missing required setting {key!r}")
    return config[key]


def _out_dir(config: dict) -> Path:
    out = Path(_require(config, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(config: dict, out: Path) -> None:
    (out / CONFIG_FILE).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _write_text(path: Path, writer) -> None:
    with open(path, "w", newline="") as fh:
        writer(fh)


def _hyperparameters(config: dict) -> dict:
    return {k[len("model."):]: v for k, v in config.items() if k.startswith("model.") and k != "model.variant"}


def _train_config(config: dict, shuffle_seed: int, checkpoint_dir: Path) -> TrainConfig:
    try:
        return TrainConfig(
            batch_size=int(config["train.batch_size"]),
            max_epochs=int(config["train.max_epochs"]),
            patience=int(config["train.patience"]),
            seed=shuffle_seed,
            learning_rate=float(config["train.learning_rate"]),
            checkpoint_dir=str(checkpoint_dir),
            min_delta=float(config["train.min_delta"]),
            micro_batch_size=None if config["train.micro_batch_size"] is None else int(config["train.micro_batch_size"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid training setting: {exc}") from None


# ---------------------------------------------------------------------------
# data loading shared by the commands


def _fingerprint(data_dir: Path) -> str:
    digest = hashlib.sha256()
    for name in (PROFILES_FILE, DATUMS_FILE):
        digest.update((data_dir / name).read_bytes())
    return "sha256:" + digest.hexdigest()


def load_dataset(data_dir) -> tuple:
    data_dir = Path(data_dir)
    rejects = RejectsReport()
    with open(data_dir / DATUMS_FILE, newline="") as fh:
        datums = parse_datums(fh, rejects)
    with open(data_dir / PROFILES_FILE, newline="") as fh:
        profiles = parse_profiles(fh, rejects)
    prepared = preprocess(profiles, datums, rejects)
    return prepared, rejects


def load_truth(data_dir) -> dict | None:
    path = Path(data_dir) / TRUTH_FILE
    if not path.exists():
        return None
    with open(path, newline="") as fh:
        return {p.key: p for p in parse_profiles(fh)}


def build_split(prepared, split_seed: int, stratify: bool) -> tuple[DatasetSplit, NormStats, DatasetSplit]:
    """Raw split, training-fitted statistics and the normalized split."""
    raw = split([make_example(p) for p in prepared.complete], split_seed, stratify_by_site=stratify)
    normalized, stats = normalize_split(raw)
    return raw, stats, normalized


# ---------------------------------------------------------------------------
# commands


def cmd_generate(config: dict) -> int:
    out = _out_dir(config)
    try:
        survey = generate_synthetic(int(config["generate.sites"]), int(config["generate.profiles_per_site"]),
                                    int(config["seed"]),
                                    noise_std=float(config["generate.noise"]),
                                    truncate_fraction=float(config["generate.truncate_fraction"]))
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    _write_text(out / PROFILES_FILE, lambda fh: write_profiles_csv(survey.profiles, fh))
    _write_text(out / DATUMS_FILE, lambda fh: write_datums_csv(survey.datums, fh))
    withheld = [survey.withheld[k] for k in survey.truncated_keys]
    _write_text(out / TRUTH_FILE, lambda fh: write_profiles_csv(withheld, fh))
    _echo(config, out)
    log.info("wrote %d profiles (%d truncated) for %d sites to %s",
             len(survey.profiles), len(withheld), len(survey.datums), out)
    return EXIT_OK


def cmd_train(config: dict) -> int:
    out = _out_dir(config)
    data_dir = Path(_require(config, "data.dir"))
    variant = config["model.variant"]
    model_config = make_config(variant, _hyperparameters(config))
    model_config.validate()
    prepared, rejects = load_dataset(data_dir)
    _write_text(out / REJECTS_FILE, rejects.write_csv)
    split_seed = stage_seed(config["seed"], "split")
    _, stats, data = build_split(prepared, split_seed, bool(config["split.stratify_by_site"]))
    model = build_model(variant, model_config, seed=stage_seed(config["seed"], "init"))
    train_config = _train_config(config, stage_seed(config["seed"], "shuffle"), out)
    extra = {
        "norm_stats": stats.to_dict(),
        "split_seed": split_seed,
        "stratify_by_site": bool(config["split.stratify_by_site"]),
        "root_seed": config["seed"],
        "data_fingerprint": _fingerprint(data_dir),
    }
    _echo(config, out)
    report = fit(model, data, train_config, checkpoint_extra=extra)
    best = out / "best.ckpt"
    if best.exists():
        os.replace(best, out / CHECKPOINT_FILE)
    # paths relative to the output directory keep the summary identical across reruns
    report.checkpoint_path = CHECKPOINT_FILE
    report.config["checkpoint_dir"] = "."
    _write_text(out / "training_log.csv", report.write_csv)
    report.write_summary(out / "training_summary.json")
    log.info("%s: best epoch %d, val MAE %.6f (normalized), %d epochs",
             variant, report.best_epoch, report.best_val_mae, report.epochs_run)
    return EXIT_OK


def _load_models(paths: list, data_dir: Path) -> tuple[dict, dict]:
    """Load checkpoints that agree on data, split and statistics; returns models and shared extra."""
    fingerprint = _fingerprint(data_dir)
    models, shared = {}, None
    for path in paths:
        extra = read_manifest(path)["extra"]
        identity = {k: extra.get(k) for k in ("norm_stats", "split_seed", "stratify_by_site")}
        if extra.get("data_fingerprint") != fingerprint:
            raise FormatError(f"{path} was trained on different data than {data_dir}")
        if shared is None:
            shared = identity
        elif identity != shared:
            raise FormatError(f"{path} was trained on a different split or normalization than {paths[0]}")
        model = load_checkpoint(path)
        name, n = model.variant, 2
        while name in models:
            name, n = f"{model.variant}-{n}", n + 1
        models[name] = model
    return models, shared


def _site_references(profiles) -> dict:
    by_site: dict = {}
    for p in profiles:
        by_site.setdefault(p.site_id, []).append(p)
    return {site: average_reference_profile(group) for site, group in sorted(by_site.items())}


def cmd_evaluate(config: dict) -> int:
    out = _out_dir(config)
    data_dir = Path(_require(config, "data.dir"))
    paths = list(_require(config, "evaluate.checkpoints"))
    models, shared = _load_models(paths, data_dir)
    prepared, _ = load_dataset(data_dir)
    raw, stats, data = build_split(prepared, shared["split_seed"], bool(shared["stratify_by_site"]))
    if stats != NormStats.from_dict(shared["norm_stats"]):
        raise FormatError("normalization statistics rebuilt from the data differ from the checkpoints'")
    if config["evaluate.include_reference"]:
        # history = complete surveys in the training split, so test surveys never leak in
        train_keys = {ex.key for ex in raw.train}
        history = [p for p in prepared.complete if p.key in train_keys]
        models["average_reference"] = ReferencePredictor(_site_references(history))
    report = evaluate_models(models, data.test, metadata={
        "data_fingerprint": _fingerprint(data_dir),
        "split_seed": shared["split_seed"],
        "checkpoints": [str(p) for p in paths],
    })
    _echo(config, out)
    _write_text(out / "report.csv", report.write_csv)
    _write_text(out / "per_profile_mape.csv", report.write_per_profile_mape)
    for row in report.rows:
        _write_text(out / f"predictions_{row.name}.csv", lambda fh, n=row.name: report.write_predictions(n, fh))
    (out / "report.md").write_text(report.to_markdown(PUBLISHED_TABLE))
    summary = {"best": report.best, "second_best": report.second_best, "metadata": report.metadata,
               "flags": {r.name: r.flag for r in report.rows}}
    (out / "evaluation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for row in report.rows:
        log.info("%-18s MAE %.4f m  RMSE %.4f m  params %d %s",
                 row.name, row.mae_m, row.rmse_m, row.param_count, row.flag)
    return EXIT_OK


def cmd_predict_ood(config: dict) -> int:
    out = _out_dir(config)
    data_dir = Path(_require(config, "data.dir"))
    site = _require(config, "ood.site")
    paths = list(_require(config, "ood.checkpoints"))
    models, shared = _load_models(paths, data_dir)
    stats = NormStats.from_dict(shared["norm_stats"])
    prepared, _ = load_dataset(data_dir)
    history = [p for p in prepared.complete if p.site_id == site]
    reference = average_reference_profile(history)
    if config["ood.include_reference"]:
        models["average_reference"] = ReferencePredictor({site: reference})
    targets = [p for p in prepared.truncated if p.site_id == site]
    if not targets:
        log.warning("site %s has no profiles that stop short of MLWS; writing an empty report", site)
    report = evaluate_ood(models, targets, reference, stats, withheld=load_truth(data_dir))
    _echo(config, out)
    _write_text(out / "ood_report.csv", report.write_csv)
    for name in sorted(report.predictions_m):
        _write_text(out / f"ood_predictions_{name}.csv", lambda fh, n=name: report.write_predictions(n, fh))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file of flat dotted keys (e.g. a previous run's config.json)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one dotted config key; value parsed as JSON when possible (repeatable)")
    parser.add_argument("--seed", type=int, help=f"root seed for every stage (default {DEFAULTS['seed']})")
    parser.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topoformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic profiles, datums and withheld truth CSVs")
    _common(p)
    p.add_argument("--sites", type=int, help=f"number of sites (default {DEFAULTS['generate.sites']})")
    p.add_argument("--profiles-per-site", type=int,
                   help=f"surveys per site (default {DEFAULTS['generate.profiles_per_site']})")
    p.add_argument("--noise", type=float, help=f"elevation noise std in m (default {DEFAULTS['generate.noise']})")
    p.add_argument("--truncate-fraction", type=float,
                   help=f"share of each site's surveys cut at MLWN (default {DEFAULTS['generate.truncate_fraction']})")

    p = sub.add_parser("train", help="preprocess, split and fit one model")
    _common(p)
    p.add_argument("--model", choices=sorted(VARIANTS), help=f"model variant (default {DEFAULTS['model.variant']})")
    p.add_argument("--data", help="directory holding profiles.csv and datums.csv")

    p = sub.add_parser("evaluate", help="score checkpoints on the held-out test split")
    _common(p)
    p.add_argument("--checkpoints", nargs="+", help="checkpoint files trained on the same data and seed")
    p.add_argument("--data", help="directory holding profiles.csv and datums.csv")
    p.add_argument("--include-reference", action="store_const", const=True,
                   help="add the site-average reference predictor as a row")

    p = sub.add_parser("predict-ood", help="predict MLWN->MLWS for surveys that stop at MLWN")
    _common(p)
    p.add_argument("--checkpoint", dest="checkpoints", action="append", help="checkpoint file (repeatable)")
    p.add_argument("--data", help="directory holding profiles.csv, datums.csv and optional truth.csv")
    p.add_argument("--site", help="site id to predict")
    return parser


FLAG_KEYS = {
    "generate": {"seed": "seed", "out": "out", "sites": "generate.sites",
                 "profiles_per_site": "generate.profiles_per_site", "noise": "generate.noise",
                 "truncate_fraction": "generate.truncate_fraction"},
    "train": {"seed": "seed", "out": "out", "model": "model.variant", "data": "data.dir"},
    "evaluate": {"seed": "seed", "out": "out", "checkpoints": "evaluate.checkpoints", "data": "data.dir",
                 "include_reference": "evaluate.include_reference"},
    "predict-ood": {"seed": "seed", "out": "out", "checkpoints": "ood.checkpoints", "data": "data.dir",
                    "site": "ood.site"},
}
COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict-ood": cmd_predict_ood}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        flags = {key: getattr(args, attr) for attr, key in FLAG_KEYS[args.command].items()}
        config = resolve_config(args.config, flags, args.set)
        return COMMANDS[args.command](config)
    except DivergedTrainingError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (TopoformerError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
