"""Reusable smoke and benchmark runs on synthetic surveys.

``micro_overfit`` checks that a model can drive its training MAE toward zero
on eight fixed examples.  ``synthetic_benchmark`` runs the generate -> train
-> evaluate pipeline in process and scores the trained models next to the
site-average reference predictor.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import DatasetSplit, NormStats, make_example, normalize, normalize_split, preprocess, split
from .metrics import EvaluationReport, ReferencePredictor, average_reference_profile, evaluate_models
from .models import build_model
from .synthetic import generate_synthetic
from .training import TrainConfig, TrainingReport, fit

# Small configs used by the overfit and benchmark runs; minutes on one core.
SMALL_CONFIGS = {
    "topoformer": dict(d_model=16, num_heads=2, num_blocks=2, convlstm_hidden_channels=4,
                       mlp_hidden_1=32, mlp_hidden_2=32),
    "lstm": dict(hidden_size=32),
    "bilstm": dict(hidden_size=16),
    "convlstm": dict(d_model=16, num_layers=2, hidden_channels=4, mlp_hidden=64),
    "cnn1d": dict(channels=(8, 16), dense_hidden=64),
}


def overfit_split() -> DatasetSplit:
    """Eight normalized examples used as both training and validation set."""
    survey = generate_synthetic(2, 4, seed=3)
    prepared = preprocess(survey.profiles, survey.datums_by_site())
    examples = [make_example(p) for p in prepared.complete][:8]
    stats = NormStats.fit(examples)
    examples = [normalize(ex, stats) for ex in examples]
    return DatasetSplit(examples, examples, [], 0)


def micro_overfit(variant: str, max_epochs: int = 2000, target: float = 0.01,
                  learning_rate: float = 1e-3, seed: int = 0) -> TrainingReport:
    """Full-batch training until the epoch's training MAE drops below ``target``."""
    model = build_model(variant, SMALL_CONFIGS[variant], seed=seed)
    config = TrainConfig(batch_size=8, max_epochs=max_epochs, patience=max_epochs,
                         learning_rate=learning_rate, target_train_mae=target)
    return fit(model, overfit_split(), config)


@dataclass
class BenchmarkResult:
    report: EvaluationReport
    training: dict[str, TrainingReport]
    split: DatasetSplit


def synthetic_benchmark(variants=("topoformer", "lstm", "convlstm"), sites: int = 3,
                        profiles_per_site: int = 40, seed: int = 7, train: TrainConfig | None = None,
                        configs: dict | None = None) -> BenchmarkResult:
    """Train each variant on one synthetic split and evaluate on its test set.

    The reference predictor is built from the complete surveys of the
    training split only.
    """
    configs = {**SMALL_CONFIGS, **(configs or {})}
    train = train or TrainConfig(batch_size=8, max_epochs=200, patience=50, seed=seed)
    survey = generate_synthetic(sites, profiles_per_site, seed=seed)
    prepared = preprocess(survey.profiles, survey.datums_by_site())
    raw = split([make_example(p) for p in prepared.complete], seed)
    data, _ = normalize_split(raw)
    train_keys = {ex.key for ex in raw.train}
    history: dict = {}
    for p in prepared.complete:
        if p.key in train_keys:
            history.setdefault(p.site_id, []).append(p)
    models: dict = {"average_reference": ReferencePredictor(
        {site: average_reference_profile(group) for site, group in sorted(history.items())})}
    training = {}
    for variant in variants:
        model = build_model(variant, configs[variant], seed=seed)
        training[variant] = fit(model, data, train)
        models[variant] = model
    report = evaluate_models(models, data.test, metadata={"seed": seed, "sites": sites,
                                                         "profiles_per_site": profiles_per_site})
    return BenchmarkResult(report, training, data)
