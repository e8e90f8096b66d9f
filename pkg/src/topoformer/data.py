"""Beach-profile ingestion, geometric preprocessing, normalization and splitting.

Pipeline: parse CSV -> anchor chainage at the 0 m crossing -> resample to
100 pairs (80 down to MLWN, 20 from MLWN to MLWS) -> pack 180-wide inputs
and 20-wide targets -> split 7:2:1 -> z-score with training statistics.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import (
    DegenerateStatisticsError,
    DimensionError,
    DomainError,
    InsufficientDataError,
    InvariantError,
    NotAnchorableError,
    SchemaError,
    UnusableProfileError,
)
from .layout import KNOWN_LEN, SEQ_LEN, TARGET_LEN, pack_input, unpack_input

log = logging.getLogger(__name__)

PROFILE_COLUMNS = ("site_id", "survey_date", "chainage_m", "elevation_m")
DATUM_COLUMNS = ("site_id", "mhws_m", "mhwn_m", "mlwn_m", "mlws_m")
REJECT_COLUMNS = ("site_id", "survey_date", "reason")


@dataclass(frozen=True, eq=False)
class RawProfile:
    site_id: str
    survey_date: dt.date
    chainage: np.ndarray
    elevation: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.chainage, dtype=np.float64)
        e = np.asarray(self.elevation, dtype=np.float64)
        object.__setattr__(self, "chainage", c)
        object.__setattr__(self, "elevation", e)
        if c.ndim != 1 or c.shape != e.shape:
            raise InvariantError(f"chainage {c.shape} and elevation {e.shape} must be equal-length vectors")
        if len(c) < 2:
            raise InvariantError(f"profile {self.key} has fewer than 2 points")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(e))):
            raise InvariantError(f"profile {self.key} contains non-finite values")
        if np.any(np.diff(c) <= 0):
            raise InvariantError(f"profile {self.key} chainage is not strictly increasing")

    @property
    def key(self) -> tuple[str, dt.date]:
        return self.site_id, self.survey_date


@dataclass(frozen=True)
class SiteDatums:
    site_id: str
    mhws_m: float
    mhwn_m: float
    mlwn_m: float
    mlws_m: float

    def __post_init__(self):
        if not (self.mhws_m > self.mhwn_m > self.mlwn_m > self.mlws_m):
            raise InvariantError(
                f"site {self.site_id}: datums must satisfy mhws > mhwn > mlwn > mlws, got "
                f"{self.mhws_m}, {self.mhwn_m}, {self.mlwn_m}, {self.mlws_m}")


@dataclass(frozen=True, eq=False)
class ResampledProfile:
    """100 (chainage, elevation) pairs; the last 20 are NaN unless ``reaches_mlws``."""

    site_id: str
    survey_date: dt.date
    chainage: np.ndarray
    elevation: np.ndarray
    reaches_mlws: bool

    @property
    def key(self) -> tuple[str, dt.date]:
        return self.site_id, self.survey_date

    @property
    def mlwn_chainage(self) -> float:
        return float(self.chainage[KNOWN_LEN - 1])

    def to_raw(self) -> RawProfile:
        n = SEQ_LEN if self.reaches_mlws else KNOWN_LEN
        return RawProfile(self.site_id, self.survey_date, self.chainage[:n], self.elevation[:n])


@dataclass(frozen=True)
class NormStats:
    """Training-set z-score statistics for elevation and chainage."""

    elev_mean: float
    elev_std: float
    chain_mean: float
    chain_std: float

    @classmethod
    def fit(cls, examples: Sequence["ModelExample"]) -> "NormStats":
        if not examples:
            raise InsufficientDataError("cannot fit normalization statistics on zero examples")
        if any(ex.stats is not None for ex in examples):
            raise DomainError("normalization statistics must be fitted on raw (unnormalized) examples")
        elev, chain = [], []
        for ex in examples:
            e, c = unpack_input(ex.input)
            elev.append(e)
            chain.append(c)
            if ex.target is not None:
                elev.append(ex.target)
        elev = np.concatenate(elev)
        chain = np.concatenate(chain)
        stats = cls(float(elev.mean()), float(elev.std()), float(chain.mean()), float(chain.std()))
        if not stats.elev_std > 0 or not stats.chain_std > 0:
            raise DegenerateStatisticsError(f"zero spread in training data: {stats}")
        return stats

    def normalize_input(self, x: np.ndarray) -> np.ndarray:
        e, c = unpack_input(x)
        return pack_input((e - self.elev_mean) / self.elev_std, (c - self.chain_mean) / self.chain_std)

    def denormalize_input(self, x: np.ndarray) -> np.ndarray:
        e, c = unpack_input(x)
        return pack_input(e * self.elev_std + self.elev_mean, c * self.chain_std + self.chain_mean)

    def normalize_elevation(self, e: np.ndarray) -> np.ndarray:
        return (np.asarray(e) - self.elev_mean) / self.elev_std

    def denormalize_elevation(self, e: np.ndarray) -> np.ndarray:
        return np.asarray(e) * self.elev_std + self.elev_mean

    def normalize_chainage(self, c: np.ndarray) -> np.ndarray:
        return (np.asarray(c) - self.chain_mean) / self.chain_std

    def denormalize_chainage(self, c: np.ndarray) -> np.ndarray:
        return np.asarray(c) * self.chain_std + self.chain_mean

    def to_dict(self) -> dict:
        return {"elev_mean": self.elev_mean, "elev_std": self.elev_std,
                "chain_mean": self.chain_mean, "chain_std": self.chain_std}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(float(d["elev_mean"]), float(d["elev_std"]), float(d["chain_mean"]), float(d["chain_std"]))


@dataclass(frozen=True, eq=False)
class ModelExample:
    """One model input/target pair; ``stats`` is set when values are normalized."""

    input: np.ndarray
    target: np.ndarray | None
    site_id: str
    survey_date: dt.date
    stats: NormStats | None = None

    @property
    def key(self) -> tuple[str, dt.date]:
        return self.site_id, self.survey_date

    @property
    def chainage(self) -> np.ndarray:
        return unpack_input(self.input)[1]


@dataclass
class DatasetSplit:
    train: list[ModelExample]
    val: list[ModelExample]
    test: list[ModelExample]
    seed: int


@dataclass
class RejectsReport:
    """Collected rejects; ``extend`` merges reports from parallel workers."""

    rows: list[tuple[str, str, str]] = field(default_factory=list)

    def add(self, site_id, survey_date, reason: str) -> None:
        date = survey_date.isoformat() if isinstance(survey_date, dt.date) else str(survey_date or "")
        self.rows.append((str(site_id or ""), date, reason))
        log.info("rejected %s %s: %s", site_id, date, reason)

    def extend(self, other: "RejectsReport") -> None:
        self.rows.extend(other.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(REJECT_COLUMNS)
        writer.writerows(sorted(self.rows))


# ---------------------------------------------------------------------------
# CSV ingestion


def _reader(stream: TextIO, required: Sequence[str]) -> csv.DictReader:
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"missing column(s) {missing}; header was {header}")
    return reader


def parse_profiles(stream: TextIO, rejects: RejectsReport | None = None) -> list[RawProfile]:
    """Group rows by (site_id, survey_date) into chainage-sorted profiles.

    Malformed rows and invalid profiles go to ``rejects``; for duplicate
    chainages the first row wins.
    """
    rejects = rejects if rejects is not None else RejectsReport()
    groups: dict[tuple[str, dt.date], list[tuple[float, float]]] = defaultdict(list)
    for line, row in enumerate(_reader(stream, PROFILE_COLUMNS), start=2):
        site = (row["site_id"] or "").strip()
        try:
            date = dt.date.fromisoformat((row["survey_date"] or "").strip())
            point = (float(row["chainage_m"]), float(row["elevation_m"]))
        except (TypeError, ValueError) as exc:
            rejects.add(site, row.get("survey_date"), f"malformed row {line}: {exc}")
            continue
        if not site:
            rejects.add(site, date, f"malformed row {line}: empty site_id")
            continue
        groups[(site, date)].append(point)

    profiles = []
    for (site, date), points in sorted(groups.items()):
        points.sort(key=lambda p: p[0])  # stable: equal chainages keep file order
        kept = [points[0]]
        for p in points[1:]:
            if p[0] == kept[-1][0]:
                log.warning("%s %s: duplicate chainage %.6g dropped", site, date, p[0])
                continue
            kept.append(p)
        arr = np.array(kept)
        try:
            profiles.append(RawProfile(site, date, arr[:, 0], arr[:, 1]))
        except InvariantError as exc:
            rejects.add(site, date, str(exc))
    return profiles


def parse_datums(stream: TextIO, rejects: RejectsReport | None = None) -> dict[str, SiteDatums]:
    rejects = rejects if rejects is not None else RejectsReport()
    out: dict[str, SiteDatums] = {}
    for line, row in enumerate(_reader(stream, DATUM_COLUMNS), start=2):
        site = (row["site_id"] or "").strip()
        try:
            values = [float(row[c]) for c in DATUM_COLUMNS[1:]]
            out[site] = SiteDatums(site, *values)
        except (TypeError, ValueError) as exc:
            # InvariantError is a ValueError
            rejects.add(site, "", f"datum row {line}: {exc}")
    return out


def write_profiles_csv(profiles: Iterable[RawProfile], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(PROFILE_COLUMNS)
    for p in profiles:
        date = p.survey_date.isoformat()
        for c, e in zip(p.chainage, p.elevation):
            writer.writerow((p.site_id, date, repr(float(c)), repr(float(e))))


def write_datums_csv(datums: Iterable[SiteDatums], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(DATUM_COLUMNS)
    for d in datums:
        writer.writerow((d.site_id, repr(d.mhws_m), repr(d.mhwn_m), repr(d.mlwn_m), repr(d.mlws_m)))


# ---------------------------------------------------------------------------
# geometry


def first_downward_crossing(chainage: np.ndarray, elevation: np.ndarray, level: float,
                            start: int = 0) -> tuple[int, float] | None:
    """First segment i >= start with e[i] >= level >= e[i+1] (not flat), and its crossing chainage."""
    a, b = elevation[start:-1], elevation[start + 1:]
    hits = np.flatnonzero((a >= level) & (b <= level) & (a != b))
    if hits.size == 0:
        return None
    i = start + int(hits[0])
    c0, c1, e0, e1 = chainage[i], chainage[i + 1], elevation[i], elevation[i + 1]
    return i, float(c0 + (e0 - level) * (c1 - c0) / (e0 - e1))


def anchor_chainage(profile: RawProfile) -> RawProfile:
    """Shift chainage so the first downward 0 m crossing sits at chainage 0.

    Points above 0 m end up at negative chainage.
    """
    hit = first_downward_crossing(profile.chainage, profile.elevation, 0.0)
    if hit is None:
        raise NotAnchorableError(f"profile {profile.key} never crosses 0 m")
    return replace(profile, chainage=profile.chainage - hit[1])


def resample(profile: RawProfile, datums: SiteDatums) -> ResampledProfile:
    """Resample to 80 points down to MLWN and 20 from MLWN to MLWS, uniform in chainage.

    Point 79 sits on the MLWN crossing and point 99 on the MLWS crossing.  If
    the profile stops before MLWS, the last 20 pairs are NaN.
    """
    c, e = profile.chainage, profile.elevation
    if e.min() > datums.mlwn_m:
        raise UnusableProfileError(f"profile {profile.key} never reaches MLWN ({datums.mlwn_m} m)")
    hit = first_downward_crossing(c, e, datums.mlwn_m)
    if hit is None or hit[1] <= c[0]:
        raise UnusableProfileError(f"profile {profile.key} has no descent onto MLWN from above")
    seg, c_mlwn = hit
    chain = np.full(SEQ_LEN, np.nan)
    elev = np.full(SEQ_LEN, np.nan)
    chain[:KNOWN_LEN] = np.linspace(c[0], c_mlwn, KNOWN_LEN)
    elev[:KNOWN_LEN] = np.interp(chain[:KNOWN_LEN], c, e)
    elev[KNOWN_LEN - 1] = datums.mlwn_m

    low = first_downward_crossing(c, e, datums.mlws_m, start=seg)
    reaches = low is not None and low[1] > c_mlwn
    if reaches:
        c_mlws = low[1]
        steps = np.arange(1, TARGET_LEN + 1) / TARGET_LEN
        chain[KNOWN_LEN:] = c_mlwn + (c_mlws - c_mlwn) * steps
        chain[-1] = c_mlws
        elev[KNOWN_LEN:] = np.interp(chain[KNOWN_LEN:], c, e)
        elev[-1] = datums.mlws_m
    return ResampledProfile(profile.site_id, profile.survey_date, chain, elev, bool(reaches))


def cross_sectional_area(profile, datum: float) -> float:
    """Area between the profile and ``datum`` from the first point to the datum crossing.

    ``profile`` is anything with ``chainage``/``elevation`` arrays; NaN tails are ignored.
    """
    c = np.asarray(profile.chainage, dtype=np.float64)
    e = np.asarray(profile.elevation, dtype=np.float64)
    valid = np.isfinite(c) & np.isfinite(e)
    c, e = c[valid], e[valid]
    if len(c) < 2 or not e.min() <= datum <= e.max() or e[0] < datum:
        raise DomainError(f"datum {datum} m is outside the profile's elevation range")
    hit = first_downward_crossing(c, e, datum)
    if hit is None:
        raise DomainError(f"profile never descends through datum {datum} m")
    seg, c_cross = hit
    xs = np.append(c[:seg + 1], c_cross)
    ys = np.append(e[:seg + 1], datum) - datum
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


# ---------------------------------------------------------------------------
# examples, normalization, splitting


def make_example(profile: ResampledProfile, chainage_offsets: np.ndarray | None = None) -> ModelExample:
    """Pack a resampled profile into a raw-unit example.

    Complete profiles use their own target chainages.  A truncated profile
    needs ``chainage_offsets``: 20 distances past its MLWN crossing at which
    to predict (typically the site-average spacing).
    """
    chain = profile.chainage.copy()
    target = None
    if profile.reaches_mlws:
        target = profile.elevation[KNOWN_LEN:].copy()
    else:
        if chainage_offsets is None:
            raise DomainError(f"profile {profile.key} stops at MLWN; target chainages must be supplied")
        offsets = np.asarray(chainage_offsets, dtype=np.float64)
        if offsets.shape != (TARGET_LEN,):
            raise DimensionError(f"expected {TARGET_LEN} chainage offsets, got {offsets.shape}")
        chain[KNOWN_LEN:] = profile.mlwn_chainage + offsets
    return ModelExample(pack_input(profile.elevation[:KNOWN_LEN], chain), target,
                        profile.site_id, profile.survey_date)


def normalize(example: ModelExample, stats: NormStats) -> ModelExample:
    if example.stats is not None:
        raise DomainError("example is already normalized")
    target = None if example.target is None else stats.normalize_elevation(example.target)
    return replace(example, input=stats.normalize_input(example.input), target=target, stats=stats)


def denormalize(example: ModelExample) -> ModelExample:
    stats = example.stats
    if stats is None:
        raise DomainError("example is not normalized")
    target = None if example.target is None else stats.denormalize_elevation(example.target)
    return replace(example, input=stats.denormalize_input(example.input), target=target, stats=None)


def split_sizes(n: int) -> tuple[int, int, int]:
    """floor(0.7 n), floor(0.2 n), remainder; integer arithmetic avoids float floor slips."""
    train = 7 * n // 10
    val = 2 * n // 10
    return train, val, n - train - val


def split(examples: Sequence[ModelExample], seed: int, stratify_by_site: bool = False) -> DatasetSplit:
    """Seeded 7:2:1 split; with ``stratify_by_site`` the rule is applied within each site."""
    examples = list(examples)
    if len(examples) < 10:
        raise InsufficientDataError(f"need at least 10 examples to split, got {len(examples)}")
    keys = [ex.key for ex in examples]
    if len(set(keys)) != len(keys):
        raise InvariantError("a profile appears more than once in the input")
    rng = np.random.default_rng(seed)
    if not stratify_by_site:
        groups = [list(range(len(examples)))]
    else:
        by_site: dict[str, list[int]] = defaultdict(list)
        for i, ex in enumerate(examples):
            by_site[ex.site_id].append(i)
        groups = [by_site[s] for s in sorted(by_site)]
    train, val, test = [], [], []
    for group in groups:
        order = [group[i] for i in rng.permutation(len(group))]
        n_train, n_val, _ = split_sizes(len(order))
        train += [examples[i] for i in order[:n_train]]
        val += [examples[i] for i in order[n_train:n_train + n_val]]
        test += [examples[i] for i in order[n_train + n_val:]]
    return DatasetSplit(train, val, test, seed)


def normalize_split(raw: DatasetSplit) -> tuple[DatasetSplit, NormStats]:
    """Fit statistics on the training part only and apply them everywhere."""
    stats = NormStats.fit(raw.train)
    parts = [[normalize(ex, stats) for ex in part] for part in (raw.train, raw.val, raw.test)]
    return DatasetSplit(*parts, seed=raw.seed), stats


def stack_examples(examples: Sequence[ModelExample]) -> tuple[np.ndarray, np.ndarray | None]:
    x = np.stack([ex.input for ex in examples])
    if any(ex.target is None for ex in examples):
        return x, None
    return x, np.stack([ex.target for ex in examples])


@dataclass
class PreparedProfiles:
    complete: list[ResampledProfile]
    truncated: list[ResampledProfile]
    rejects: RejectsReport


def preprocess(profiles: Iterable[RawProfile], datums: dict[str, SiteDatums],
               rejects: RejectsReport | None = None) -> PreparedProfiles:
    """Anchor and resample every profile; failures are counted in ``rejects``."""
    rejects = rejects if rejects is not None else RejectsReport()
    complete, truncated = [], []
    for p in profiles:
        site_datums = datums.get(p.site_id)
        if site_datums is None:
            rejects.add(p.site_id, p.survey_date, "no datums for site")
            continue
        try:
            r = resample(anchor_chainage(p), site_datums)
        except (NotAnchorableError, UnusableProfileError) as exc:
            rejects.add(p.site_id, p.survey_date, str(exc))
            continue
        (complete if r.reaches_mlws else truncated).append(r)
    return PreparedProfiles(complete, truncated, rejects)
