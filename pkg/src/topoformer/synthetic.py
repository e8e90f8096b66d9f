"""Synthetic beach surveys shaped like equilibrium profiles.

Each site gets an equilibrium shape ``h(x) = h_back - A * x**(2/3)`` with
``x`` the distance from the back of the beach.  Each survey perturbs the
slope coefficient and adds a seasonal sand-bar undulation, then samples
irregularly spaced points with Gaussian observation noise.  Profiles marked
for out-of-distribution use are cut at their MLWN crossing; the full survey
is kept aside as withheld truth.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np

from .data import RawProfile, SiteDatums, first_downward_crossing

START_DATE = dt.date(2010, 1, 1)
TERRACE_AMPLITUDE = 0.25


@dataclass(frozen=True)
class ProfileCurve:
    """Closed-form elevation of one survey as a function of raw chainage."""

    origin: float
    back_elevation: float
    slope_coefficient: float
    bar_amplitude: float
    bar_wavelength: float
    bar_phase: float
    terrace_amplitude: float = 0.0
    terrace_center: float = 0.0
    terrace_width: float = 1.0

    def __call__(self, chainage) -> np.ndarray:
        x = np.maximum(np.asarray(chainage, dtype=np.float64) - self.origin, 0.0)
        bar = self.bar_amplitude * np.sin(2.0 * math.pi * x / self.bar_wavelength + self.bar_phase)
        terrace = self.terrace_amplitude * np.exp(-0.5 * ((x - self.terrace_center) / self.terrace_width) ** 2)
        return self.back_elevation - self.slope_coefficient * x ** (2.0 / 3.0) + bar + terrace


@dataclass
class SyntheticSurvey:
    profiles: list[RawProfile]
    datums: list[SiteDatums]
    curves: dict[tuple[str, dt.date], ProfileCurve]
    withheld: dict[tuple[str, dt.date], RawProfile] = field(default_factory=dict)

    @property
    def truncated_keys(self) -> list[tuple[str, dt.date]]:
        return sorted(self.withheld)

    def datums_by_site(self) -> dict[str, SiteDatums]:
        return {d.site_id: d for d in self.datums}


def truncate_at(profile: RawProfile, level: float) -> RawProfile:
    """Cut a profile at its first downward crossing of ``level``."""
    hit = first_downward_crossing(profile.chainage, profile.elevation, level)
    if hit is None:
        return profile
    i, c_cross = hit
    chain, elev = profile.chainage[:i + 1], profile.elevation[:i + 1]
    if c_cross > chain[-1]:
        chain = np.append(chain, c_cross)
        elev = np.append(elev, level)
    return RawProfile(profile.site_id, profile.survey_date, chain, elev)


def _site_datums(rng: np.random.Generator, site_id: str) -> SiteDatums:
    mhws = rng.uniform(3.0, 4.5)
    mhwn = mhws - rng.uniform(0.8, 1.4)
    mlwn = -rng.uniform(0.8, 1.6)
    mlws = mlwn - rng.uniform(0.8, 1.4)
    return SiteDatums(site_id, mhws, mhwn, mlwn, mlws)


def _extent(curve: ProfileCurve, floor: float) -> float:
    x = ((curve.back_elevation - floor) / curve.slope_coefficient) ** 1.5
    while curve(curve.origin + x) > floor:
        x *= 1.05
    return x


def generate_synthetic(site_count: int, profiles_per_site: int, seed: int,
                       noise_std: float = 0.005, truncate_fraction: float = 0.0) -> SyntheticSurvey:
    """Draw ``site_count * profiles_per_site`` surveys.

    ``truncate_fraction`` of each site's surveys (rounded half up) stop at
    MLWN; their full versions go to ``withheld``.
    """
    if site_count < 1 or profiles_per_site < 1:
        raise ValueError("site_count and profiles_per_site must be positive")
    if noise_std < 0 or not 0.0 <= truncate_fraction <= 1.0:
        raise ValueError("noise_std must be >= 0 and truncate_fraction within [0, 1]")
    rng = np.random.default_rng(seed)
    survey = SyntheticSurvey(profiles=[], datums=[], curves={})
    for s in range(site_count):
        site_id = f"site{s + 1:02d}"
        datums = _site_datums(rng, site_id)
        survey.datums.append(datums)
        back = rng.uniform(5.0, 8.0)
        slope = rng.uniform(0.25, 0.4)
        origin = rng.uniform(-40.0, 40.0)
        phase0 = rng.uniform(0.0, 2.0 * math.pi)
        wavelength_factor = rng.uniform(0.9, 1.3)
        interval = int(rng.integers(25, 45))
        first_day = START_DATE + dt.timedelta(days=int(rng.integers(0, 60)))
        n_cut = int(math.floor(truncate_fraction * profiles_per_site + 0.5))
        cut = set(rng.choice(profiles_per_site, size=n_cut, replace=False).tolist()) if n_cut else set()
        for k in range(profiles_per_site):
            date = first_day + dt.timedelta(days=k * interval)
            season = 2.0 * math.pi * date.timetuple().tm_yday / 365.25
            coeff = slope * (1.0 + 0.12 * math.sin(season) + 0.04 * rng.standard_normal())
            amplitude = 0.25 * math.cos(season) + 0.08 * rng.standard_normal()
            base_extent = ((back - datums.mlws_m) / coeff) ** 1.5
            x_mlwn = ((back - datums.mlwn_m) / coeff) ** 1.5
            gap = base_extent - x_mlwn
            curve = ProfileCurve(
                origin=origin,
                back_elevation=back + 0.05 * rng.standard_normal(),
                slope_coefficient=coeff,
                bar_amplitude=amplitude,
                bar_wavelength=wavelength_factor * base_extent,
                bar_phase=phase0 + 0.3 * rng.standard_normal(),
                terrace_amplitude=TERRACE_AMPLITUDE * math.cos(season) + 0.04 * rng.standard_normal(),
                terrace_center=x_mlwn + gap * (0.5 + 0.25 * math.sin(season) + 0.05 * rng.standard_normal()),
                terrace_width=0.3 * gap,
            )
            extent = _extent(curve, datums.mlws_m - rng.uniform(0.3, 0.6))
            n = int(rng.integers(50, 90))
            x = np.linspace(0.0, extent, n)
            spacing = extent / (n - 1)
            x[1:-1] += rng.uniform(-0.3, 0.3, n - 2) * spacing
            chain = origin + x
            elev = curve(chain) + noise_std * rng.standard_normal(n)
            profile = RawProfile(site_id, date, chain, elev)
            survey.curves[profile.key] = curve
            if k in cut:
                survey.withheld[profile.key] = profile
                profile = truncate_at(profile, datums.mlwn_m)
            survey.profiles.append(profile)
    return survey
