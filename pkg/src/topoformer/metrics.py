"""Evaluation: MAE/RMSE/MAPE, box-plot statistics, model comparison and the OOD protocol.

All reported metrics are in meters of elevation (MAPE in percent) after
denormalization.  MAE and RMSE pool every target element of every profile;
MAPE is computed per profile so its distribution can be box-plotted.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TextIO

import numpy as np

from .data import (
    ModelExample,
    NormStats,
    RawProfile,
    ResampledProfile,
    anchor_chainage,
    make_example,
    normalize,
    stack_examples,
)
from .errors import ContractError, DimensionError, DomainError, InsufficientHistoryError
from .layout import KNOWN_LEN, TARGET_LEN

MAPE_GUARD_M = 0.01

REPORT_COLUMNS = ("model", "mae_m", "rmse_m", "mape_min", "mape_q25", "mape_median",
                  "mape_q75", "mape_max", "params")
PREDICTION_COLUMNS = ("site_id", "survey_date", "index", "chainage_m", "elevation_true", "elevation_pred")
OOD_COLUMNS = ("model", "site_id", "survey_date", "deviation_mae_m", "truth_mae_m",
               "mlws_chainage_m", "mlws_elevation_m")

# Published comparison on a proprietary survey archive (MAE m, RMSE m,
# trainable params) and per-profile MAPE upper quartiles.  Documentation
# fixtures for report layout; never used as targets.
PUBLISHED_TABLE = {
    "DenseNet": (0.133, 0.164, 253_000),
    "LSTM": (0.031, 0.038, 387_000),
    "biLSTM": (0.062, 0.070, 186_000),
    "ConvLSTM": (0.034, 0.038, 984_000),
    "1D-CNN": (0.054, 0.064, 2_981_000),
    "2D-CNN": (0.040, 0.048, 799_000),
    "TopoFormer": (0.021, 0.026, 761_000),
}
PUBLISHED_MAPE_Q75 = {"TopoFormer": 1.6748, "LSTM": 2.4238, "ConvLSTM": 2.4287}


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if pred.size == 0:
        raise DimensionError("metrics need at least one value")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred, truth, epsilon_guard: float = MAPE_GUARD_M) -> float:
    """100 * mean(|pred - truth| / max(|truth|, guard)), in percent.

    The guard keeps elevations near 0 m from blowing the ratio up; it
    changes absolute MAPE values wherever |truth| < guard.
    """
    if not epsilon_guard > 0:
        raise DomainError("epsilon_guard must be positive")
    pred, truth = _pair(pred, truth)
    return float(100.0 * np.mean(np.abs(pred - truth) / np.maximum(np.abs(truth), epsilon_guard)))


@dataclass(frozen=True)
class MapeStats:
    min: float
    q25: float
    median: float
    q75: float
    max: float
    mean: float


def box_stats(values) -> MapeStats:
    """Five-number summary plus mean; quartiles interpolate linearly between order statistics."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise DomainError("box_stats needs at least one value")
    q25, median, q75 = np.percentile(v, [25, 50, 75], method="linear")
    return MapeStats(float(v.min()), float(q25), float(median), float(q75), float(v.max()), float(v.mean()))


# ---------------------------------------------------------------------------
# site reference profile


@dataclass(frozen=True, eq=False)
class AverageReferenceProfile:
    """Mean MLWN->MLWS segment of a site's complete surveys.

    ``chainage_offsets`` are the mean distances of the 20 target points past
    the MLWN crossing; they place predictions for surveys that stop at MLWN.
    """

    site_id: str
    elevations: np.ndarray
    chainage_offsets: np.ndarray
    count: int


def average_reference_profile(history: Sequence[ResampledProfile]) -> AverageReferenceProfile:
    complete = [p for p in history if p.reaches_mlws]
    if not complete:
        raise InsufficientHistoryError("no historical survey reaches MLWS; cannot build a reference")
    sites = {p.site_id for p in complete}
    if len(sites) != 1:
        raise ContractError(f"reference history mixes sites {sorted(sites)}")
    elevations = np.mean([p.elevation[KNOWN_LEN:] for p in complete], axis=0)
    offsets = np.mean([p.chainage[KNOWN_LEN:] - p.mlwn_chainage for p in complete], axis=0)
    return AverageReferenceProfile(sites.pop(), elevations, offsets, len(complete))


class ReferencePredictor:
    """Predicts each site's average reference segment regardless of input."""

    variant = "average_reference"

    def __init__(self, references: Mapping[str, AverageReferenceProfile]):
        self.references = dict(references)

    def param_count(self) -> int:
        return 0

    def predict_examples(self, examples: Sequence[ModelExample]) -> np.ndarray:
        missing = sorted({ex.site_id for ex in examples} - set(self.references))
        if missing:
            raise ContractError(f"no reference profile for site(s) {missing}")
        return np.stack([self.references[ex.site_id].elevations for ex in examples])


def predict_meters(model, examples: Sequence[ModelExample]) -> np.ndarray:
    """[N, 20] elevation predictions in meters for normalized examples."""
    if hasattr(model, "predict_examples"):
        pred = np.asarray(model.predict_examples(examples), dtype=np.float64)
    else:
        stats = _shared_stats(examples)
        x, _ = stack_examples(examples)
        try:
            pred = stats.denormalize_elevation(model.predict(x))
        except DimensionError as exc:
            raise ContractError(f"model is incompatible with the input contract: {exc}") from None
    if pred.shape != (len(examples), TARGET_LEN):
        raise ContractError(f"model produced shape {pred.shape}, expected {(len(examples), TARGET_LEN)}")
    return pred


def _shared_stats(examples: Sequence[ModelExample]) -> NormStats:
    stats = {ex.stats for ex in examples}
    if None in stats or len(stats) != 1:
        raise ContractError("examples must all be normalized with the same statistics")
    return stats.pop()


def _param_count(model) -> int:
    return int(model.param_count()) if hasattr(model, "param_count") else 0


# ---------------------------------------------------------------------------
# in-distribution comparison


@dataclass
class ModelRow:
    name: str
    mae_m: float
    rmse_m: float
    mape: MapeStats
    param_count: int
    per_profile_mape: np.ndarray
    predictions_m: np.ndarray
    flag: str = ""

    def csv_row(self) -> tuple:
        s = self.mape
        return (self.name, repr(self.mae_m), repr(self.rmse_m), repr(s.min), repr(s.q25),
                repr(s.median), repr(s.q75), repr(s.max), self.param_count)


@dataclass
class EvaluationReport:
    rows: list[ModelRow]
    examples: list[ModelExample]
    truth_m: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def best(self) -> str | None:
        return self.rows[0].name if self.rows else None

    @property
    def second_best(self) -> str | None:
        return self.rows[1].name if len(self.rows) > 1 else None

    def row(self, name: str) -> ModelRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def write_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow(r.csv_row())

    def write_per_profile_mape(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(("model", "site_id", "survey_date", "mape_pct"))
        for r in self.rows:
            for ex, value in zip(self.examples, r.per_profile_mape):
                writer.writerow((r.name, ex.site_id, ex.survey_date.isoformat(), repr(float(value))))

    def write_predictions(self, name: str, stream: TextIO) -> None:
        row = self.row(name)
        stats = _shared_stats(self.examples)
        chainages = [stats.denormalize_chainage(ex.chainage[KNOWN_LEN:]) for ex in self.examples]
        write_prediction_dump(stream, self.examples, chainages, self.truth_m, row.predictions_m)

    def to_markdown(self, reference: Mapping[str, tuple] | None = None) -> str:
        """Markdown comparison table; bold marks the best row, underscores the runner-up."""
        lines = ["| Model | MAE (m) | RMSE (m) | MAPE q75 (%) | Trainable params |",
                 "|---|---|---|---|---|"]
        for r in self.rows:
            name = {"best": f"**{r.name}**", "second": f"_{r.name}_"}.get(r.flag, r.name)
            lines.append(f"| {name} | {r.mae_m:.3f} | {r.rmse_m:.3f} | {r.mape.q75:.4f} | {r.param_count:,} |")
        if reference:
            lines += ["", "Published reference values (different data, context only):", "",
                      "| Model | MAE | RMSE | Trainable params |", "|---|---|---|---|"]
            for name, (m, r, p) in reference.items():
                lines.append(f"| {name} | {m:.3f} | {r:.3f} | {p:,} |")
        return "\n".join(lines) + "\n"


def evaluate_models(models: Mapping[str, object], examples: Sequence[ModelExample],
                    metadata: dict | None = None) -> EvaluationReport:
    """Score every model on normalized test examples, sorted by MAE (ties by name)."""
    examples = list(examples)
    if not examples:
        raise ContractError("evaluate_models needs at least one test example")
    stats = _shared_stats(examples)
    _, targets = stack_examples(examples)
    if targets is None:
        raise ContractError("test examples must carry targets")
    truth = stats.denormalize_elevation(targets)
    rows = []
    for name in sorted(models):
        pred = predict_meters(models[name], examples)
        per_profile = np.array([mape(p, t) for p, t in zip(pred, truth)])
        rows.append(ModelRow(name, mae(pred, truth), rmse(pred, truth), box_stats(per_profile),
                             _param_count(models[name]), per_profile, pred))
    rows.sort(key=lambda r: (r.mae_m, r.name))
    for r, flag in zip(rows, ("best", "second")):
        r.flag = flag
    meta = {"denormalized": True, "units": "m", "mape_guard_m": MAPE_GUARD_M, "n_profiles": len(examples)}
    meta.update(metadata or {})
    return EvaluationReport(rows, examples, truth, meta)


def write_prediction_dump(stream: TextIO, examples: Sequence[ModelExample], chainages: Sequence[np.ndarray],
                          truth_m: np.ndarray | None, pred_m: np.ndarray) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(PREDICTION_COLUMNS)
    for n, ex in enumerate(examples):
        for j in range(TARGET_LEN):
            true = "" if truth_m is None or not np.isfinite(truth_m[n][j]) else repr(float(truth_m[n][j]))
            writer.writerow((ex.site_id, ex.survey_date.isoformat(), KNOWN_LEN + j,
                             repr(float(chainages[n][j])), true, repr(float(pred_m[n][j]))))


# ---------------------------------------------------------------------------
# out-of-distribution protocol


@dataclass
class OODRow:
    model: str
    site_id: str
    survey_date: dt.date
    deviation_mae_m: float
    truth_mae_m: float
    mlws_chainage_m: float
    mlws_elevation_m: float

    def csv_row(self) -> tuple:
        truth = "" if math.isnan(self.truth_mae_m) else repr(self.truth_mae_m)
        return (self.model, self.site_id, self.survey_date.isoformat(), repr(self.deviation_mae_m),
                truth, repr(self.mlws_chainage_m), repr(self.mlws_elevation_m))


@dataclass
class OODReport:
    """Deviation of predictions from the site reference profile.

    ``deviation_mae_m`` is reference-relative, not an error against ground
    truth.  ``truth_mae_m`` is filled only when withheld surveys are supplied.
    """

    rows: list[OODRow]
    examples: list[ModelExample]
    chainages_m: list[np.ndarray]
    predictions_m: dict[str, np.ndarray]
    truth_m: np.ndarray | None

    def write_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(OOD_COLUMNS)
        for r in self.rows:
            writer.writerow(r.csv_row())

    def write_predictions(self, name: str, stream: TextIO) -> None:
        write_prediction_dump(stream, self.examples, self.chainages_m, self.truth_m, self.predictions_m[name])


def evaluate_ood(models: Mapping[str, object], profiles: Sequence[ResampledProfile],
                 reference: AverageReferenceProfile, stats: NormStats,
                 withheld: Mapping[tuple[str, dt.date], RawProfile] | None = None) -> OODReport:
    """Predict the missing MLWN->MLWS segment of surveys that stop at MLWN.

    Target chainages follow the reference's mean spacing past each survey's
    own MLWN crossing.  ``withheld`` maps survey keys to full raw surveys
    (unanchored) whose piecewise-linear curve is sampled at those chainages.
    """
    for p in profiles:
        if p.site_id != reference.site_id:
            raise ContractError(f"profile {p.key} is from site {p.site_id}, reference is {reference.site_id}")
        if p.reaches_mlws:
            raise ContractError(f"profile {p.key} reaches MLWS; it is not an OOD case")
    examples = [normalize(make_example(p, reference.chainage_offsets), stats) for p in profiles]
    chainages = [p.mlwn_chainage + reference.chainage_offsets for p in profiles]
    truth = None
    if withheld is not None and profiles:
        truth = np.full((len(profiles), TARGET_LEN), np.nan)
        for n, p in enumerate(profiles):
            full = withheld.get(p.key)
            if full is not None:
                full = anchor_chainage(full)
                truth[n] = np.interp(chainages[n], full.chainage, full.elevation)
    rows, predictions = [], {}
    for name in sorted(models):
        pred = predict_meters(models[name], examples) if examples else np.zeros((0, TARGET_LEN))
        predictions[name] = pred
        for n, p in enumerate(profiles):
            truth_mae = math.nan
            if truth is not None and np.all(np.isfinite(truth[n])):
                truth_mae = mae(pred[n], truth[n])
            rows.append(OODRow(name, p.site_id, p.survey_date, mae(pred[n], reference.elevations),
                               truth_mae, float(chainages[n][-1]), float(pred[n][-1])))
    return OODReport(rows, examples, chainages, predictions, truth)
