"""Thermal-time labels from hourly field weather.

Two cumulative quantities are derived per recording date:

* growing degree days (GDD), a crop development proxy in degC*day;
* number of possible generations (NPG), the humidity-corrected thermal sum
  divided by the thermal sum of one pathogen incubation period.

Loggers deliver one reading per hour, so the hourly maximum and minimum
coincide and the daily GDD is the mean of the clamped hourly readings minus
the base temperature.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "MissingWeatherError",
    "WeatherFormatError",
    "WeatherRecord",
    "WeatherSeries",
    "ThermalConfig",
    "EnvLabels",
    "SUGAR_BEET_GDD",
    "CERCOSPORA_NPG",
    "clamp_temperature",
    "daily_gdd",
    "cumulative_gdd",
    "hourly_npg_increment",
    "cumulative_npg",
    "env_labels",
    "read_weather_csv",
    "write_weather_csv",
]

HOURS_PER_DAY = 24
HUMID_THRESHOLD_PCT = 80.0
DRY_FACTOR = 7.0 / 8.0
HUMID_FACTOR = 9.0 / 8.0
WEATHER_HEADER = ("timestamp", "temperature_c", "relative_humidity_pct")


class MissingWeatherError(ValueError):
    """Raised when a requested date range is not fully covered by hourly data."""

    def __init__(self, day: dt.date, detail: str = "") -> None:
        self.day = day
        msg = f"weather series has no complete record for {day.isoformat()}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class WeatherFormatError(ValueError):
    """Malformed weather file; carries the offending 1-based line number."""

    def __init__(self, line: int, detail: str) -> None:
        self.line = line
        super().__init__(f"line {line}: {detail}")


@dataclass(frozen=True)
class WeatherRecord:
    timestamp: dt.datetime
    temperature: float
    relative_humidity: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.relative_humidity <= 100.0:
            raise ValueError(f"relative humidity out of [0, 100]: {self.relative_humidity}")


@dataclass(frozen=True)
class ThermalConfig:
    """Temperature bounds of one thermal-time model.

    ``t_upper`` is the cap applied to every hourly reading. ``incubation_thermal_sum``
    is only needed for NPG (degC*h per incubation period).
    """

    t_base: float
    t_upper: float
    incubation_thermal_sum: float | None = None
    start_date: dt.date | None = None

    def __post_init__(self) -> None:
        if not self.t_base < self.t_upper:
            raise ValueError(f"t_base ({self.t_base}) must be below t_upper ({self.t_upper})")
        if self.incubation_thermal_sum is not None and self.incubation_thermal_sum <= 0:
            raise ValueError("incubation_thermal_sum must be positive")

    def starting(self, date: dt.date) -> "ThermalConfig":
        return ThermalConfig(self.t_base, self.t_upper, self.incubation_thermal_sum, date)


# Sugar beet development and Cercospora beticola incubation constants.
SUGAR_BEET_GDD = ThermalConfig(t_base=1.1, t_upper=30.0)
CERCOSPORA_NPG = ThermalConfig(t_base=6.3, t_upper=32.0, incubation_thermal_sum=4963.0)


@dataclass(frozen=True)
class EnvLabels:
    date: dt.date
    gdd: float
    npg: float


@dataclass
class WeatherSeries:
    """Hourly weather of one field, timestamps strictly increasing, local time."""

    timestamps: np.ndarray  # datetime64[h]
    temperature: np.ndarray
    relative_humidity: np.ndarray
    _days: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.temperature = np.asarray(self.temperature, dtype=float)
        self.relative_humidity = np.asarray(self.relative_humidity, dtype=float)
        n = len(self.timestamps)
        if len(self.temperature) != n or len(self.relative_humidity) != n:
            raise ValueError("timestamps, temperature and humidity must have equal length")
        if n > 1 and np.any(np.diff(self.timestamps).astype(np.int64) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any((self.relative_humidity < 0) | (self.relative_humidity > 100)):
            raise ValueError("relative humidity must lie in [0, 100]")

    @classmethod
    def from_records(cls, records: Iterable[WeatherRecord]) -> "WeatherSeries":
        records = list(records)
        return cls(
            np.array([np.datetime64(r.timestamp, "h") for r in records], dtype="datetime64[h]"),
            np.array([r.temperature for r in records], dtype=float),
            np.array([r.relative_humidity for r in records], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    def _index(self) -> dict:
        if self._days is None:
            days = self.timestamps.astype("datetime64[D]")
            hours = (self.timestamps - days).astype(np.int64)
            index: dict = {}
            for day in np.unique(days):
                sel = np.flatnonzero(days == day)
                if len(sel) == HOURS_PER_DAY and np.array_equal(hours[sel], np.arange(HOURS_PER_DAY)):
                    index[day.astype(dt.date)] = sel
            self._days = index
        return self._days

    def day(self, date: dt.date) -> tuple[np.ndarray, np.ndarray]:
        """Hourly (temperature, humidity) of one calendar day, 24 values each."""
        sel = self._index().get(date)
        if sel is None:
            raise MissingWeatherError(date)
        return self.temperature[sel], self.relative_humidity[sel]

    def first_day(self) -> dt.date:
        return self.timestamps[0].astype("datetime64[D]").astype(dt.date)


def clamp_temperature(t, cfg: ThermalConfig):
    """Clip temperature(s) into ``[cfg.t_base, cfg.t_upper]``."""
    out = np.clip(t, cfg.t_base, cfg.t_upper)
    return float(out) if np.ndim(out) == 0 else out


def daily_gdd(hourly_temps: Sequence[float], cfg: ThermalConfig) -> float:
    temps = np.asarray(hourly_temps, dtype=float)
    if temps.shape != (HOURS_PER_DAY,):
        raise ValueError(f"expected {HOURS_PER_DAY} hourly readings, got shape {temps.shape}")
    t_max = t_min = clamp_temperature(temps, cfg)
    return float(np.mean((t_max + t_min) / 2.0 - cfg.t_base))


def hourly_npg_increment(temperature, relative_humidity, cfg: ThermalConfig):
    """Humidity-corrected thermal increment of one hour in degC*h."""
    factor = np.where(np.asarray(relative_humidity) < HUMID_THRESHOLD_PCT, DRY_FACTOR, HUMID_FACTOR)
    out = (clamp_temperature(temperature, cfg) - cfg.t_base) * factor
    return float(out) if np.ndim(out) == 0 else out


def _date_range(start: dt.date, end: dt.date) -> list[dt.date]:
    return [start + dt.timedelta(days=i) for i in range((end - start).days + 1)]


def _start(series: WeatherSeries, cfg: ThermalConfig) -> dt.date:
    return cfg.start_date if cfg.start_date is not None else series.first_day()


def cumulative_gdd(series: WeatherSeries, cfg: ThermalConfig, date: dt.date) -> float:
    """GDD accumulated from ``cfg.start_date`` through ``date`` inclusive."""
    total = 0.0
    for day in _date_range(_start(series, cfg), date):
        total += daily_gdd(series.day(day)[0], cfg)
    return total


def cumulative_npg(series: WeatherSeries, cfg: ThermalConfig, date: dt.date) -> float:
    if cfg.incubation_thermal_sum is None:
        raise ValueError("NPG needs cfg.incubation_thermal_sum")
    total = 0.0
    for day in _date_range(_start(series, cfg), date):
        temps, rh = series.day(day)
        total += float(np.sum(hourly_npg_increment(temps, rh, cfg)))
    return total / cfg.incubation_thermal_sum


def env_labels(
    series: WeatherSeries,
    gdd_cfg: ThermalConfig,
    npg_cfg: ThermalConfig,
    dates: Iterable[dt.date],
) -> list[EnvLabels]:
    """GDD/NPG for each requested date, accumulated in a single pass.

    Both configs must share their start date (sowing). An empty ``dates``
    gives an empty list.
    """
    dates = sorted(set(dates))
    if not dates:
        return []
    start = _start(series, gdd_cfg)
    if npg_cfg.start_date is not None and npg_cfg.start_date != start:
        raise ValueError("GDD and NPG configs must start on the same date")
    if npg_cfg.incubation_thermal_sum is None:
        raise ValueError("NPG needs npg_cfg.incubation_thermal_sum")

    out = []
    gdd = npg_sum = 0.0
    day = start
    for target in dates:
        while day <= target:
            temps, rh = series.day(day)
            gdd += daily_gdd(temps, gdd_cfg)
            npg_sum += float(np.sum(hourly_npg_increment(temps, rh, npg_cfg)))
            day += dt.timedelta(days=1)
        out.append(EnvLabels(target, gdd, npg_sum / npg_cfg.incubation_thermal_sum))
    return out


def read_weather_csv(path: str | Path) -> WeatherSeries:
    """Parse ``timestamp,temperature_c,relative_humidity_pct`` hourly rows."""
    stamps, temps, rhs = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != WEATHER_HEADER:
            raise WeatherFormatError(1, f"expected header {','.join(WEATHER_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise WeatherFormatError(lineno, f"expected 3 fields, got {len(row)}")
            try:
                stamp = dt.datetime.fromisoformat(row[0].strip())
                temp = float(row[1])
                rh = float(row[2])
            except ValueError as exc:
                raise WeatherFormatError(lineno, str(exc)) from None
            if stamp.minute or stamp.second or stamp.microsecond:
                raise WeatherFormatError(lineno, "timestamps must be hour-resolution")
            if not np.isfinite(temp) or not 0.0 <= rh <= 100.0:
                raise WeatherFormatError(lineno, "temperature must be finite and humidity in [0, 100]")
            if stamps and stamp <= stamps[-1]:
                raise WeatherFormatError(lineno, "timestamps must be strictly increasing")
            stamps.append(stamp)
            temps.append(temp)
            rhs.append(rh)
    return WeatherSeries(
        np.array([np.datetime64(s, "h") for s in stamps], dtype="datetime64[h]"),
        np.array(temps, dtype=float),
        np.array(rhs, dtype=float),
    )


def write_weather_csv(series: WeatherSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(WEATHER_HEADER)
        for stamp, temp, rh in zip(series.timestamps, series.temperature, series.relative_humidity):
            writer.writerow([stamp.astype(dt.datetime).strftime("%Y-%m-%dT%H:00"), repr(float(temp)), repr(float(rh))])
