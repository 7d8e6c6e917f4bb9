"""Microgrid cluster construction.

Random streams are split with :class:`numpy.random.SeedSequence` spawn keys
``(microgrid_idx, prosumer_idx, field_tag)`` under the root seed, so the
draws for one microgrid never depend on how many others are built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .env import (
    DAYS_PER_YEAR,
    HOURS,
    HOURS_PER_YEAR,
    MicrogridEnv,
    PriceDay,
    Prosumer,
    read_profile_csv,
)

# field tags for stream splitting
TAG_PV = 1
TAG_BATTERY = 2
TAG_LOAD = 3
TAG_SOLAR = 4

CLUSTER_STREAM = 2**32 - 1  # microgrid index reserved for cluster-wide draws


@dataclass(frozen=True)
class DiversitySpec:
    mu: float = 100.0
    sigma: float = 30.0
    n_prosumers: int = 4
    n_microgrids: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n_prosumers < 1 or self.n_microgrids < 1:
            raise ValueError("n_prosumers and n_microgrids must be >= 1")


@dataclass(frozen=True)
class UtilitySchedule:
    buy: np.ndarray
    sell: np.ndarray

    def __post_init__(self) -> None:
        buy = np.asarray(self.buy, dtype=np.float64)
        sell = np.asarray(self.sell, dtype=np.float64)
        if buy.shape != (HOURS,) or sell.shape != (HOURS,):
            raise ValueError("utility schedule needs 24 buy and 24 sell prices")
        if np.any(buy < 0) or np.any(sell < 0):
            raise ValueError("utility prices must be non-negative")
        if np.any(sell > buy):
            raise ValueError("utility sell price exceeds buy price")
        object.__setattr__(self, "buy", buy)
        object.__setattr__(self, "sell", sell)

    def price_day(self) -> PriceDay:
        return PriceDay(buy=self.buy, sell=self.sell)


def tou_schedule(
    peak: float = 0.30, offpeak: float = 0.15, sell: float = 0.05, peak_start: int = 16, peak_end: int = 21
) -> UtilitySchedule:
    """Time-of-use tariff; ``peak_start``..``peak_end`` inclusive are peak hours."""
    hours = np.arange(HOURS)
    buy = np.where((hours >= peak_start) & (hours <= peak_end), peak, offpeak)
    return UtilitySchedule(buy=buy, sell=np.full(HOURS, sell))


def stream(root_seed: int, microgrid: int, prosumer: int, tag: int) -> np.random.Generator:
    ss = np.random.SeedSequence(root_seed, spawn_key=(microgrid, prosumer, tag))
    return np.random.default_rng(ss)


def _normal_int_at_least_zero(rng: np.random.Generator, mu: float, sigma: float) -> int:
    """One Normal(mu, sigma) draw clamped at zero, rounded half-up."""
    x = max(rng.normal(mu, sigma), 0.0)
    return int(math.floor(x + 0.5))


def sample_microgrid_capacities(spec: DiversitySpec, microgrid: int) -> list[tuple[int, int]]:
    out = []
    for k in range(spec.n_prosumers):
        pv = _normal_int_at_least_zero(stream(spec.seed, microgrid, k, TAG_PV), spec.mu, spec.sigma)
        bat = _normal_int_at_least_zero(stream(spec.seed, microgrid, k, TAG_BATTERY), spec.mu, spec.sigma)
        out.append((pv, bat))
    return out


def sample_capacities(spec: DiversitySpec) -> list[tuple[int, int]]:
    """``(pv_units, battery_kwh)`` for every prosumer, microgrid-major.

    Normal(mu, sigma) draws clamped at zero and rounded half-up. Clamping
    keeps the sample mean and spread close to (mu, sigma) even at wide sigma,
    where redrawing negatives would shift the mean up by several percent.
    """
    out = []
    for m in range(spec.n_microgrids):
        out.extend(sample_microgrid_capacities(spec, m))
    return out


def synth_solar(rng: np.random.Generator) -> np.ndarray:
    """One PV unit's generation: midday half-sine with seasonal and cloud modulation, 1 kWh peak."""
    hours = np.arange(HOURS)
    shape = np.clip(np.sin(np.pi * (hours - 6) / 12.0), 0.0, None)
    shape[hours < 6] = 0.0
    shape[hours > 18] = 0.0
    days = np.arange(DAYS_PER_YEAR)
    season = 0.75 + 0.25 * np.cos(2 * np.pi * (days - 172) / DAYS_PER_YEAR)
    clouds = rng.uniform(0.55, 1.0, size=DAYS_PER_YEAR)
    gen = (season * clouds)[:, None] * shape[None, :]
    return (gen / gen.max()).ravel()


def synth_load(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Office-like load: base plus morning and evening peaks plus noise, kWh per hour."""
    hours = np.arange(HOURS, dtype=np.float64)
    shape = (
        0.5
        + 0.6 * np.exp(-0.5 * ((hours - 9.0) / 2.0) ** 2)
        + 0.8 * np.exp(-0.5 * ((hours - 18.0) / 2.5) ** 2)
    )
    days = DAYS_PER_YEAR
    level = rng.uniform(0.85, 1.15, size=(days, 1))
    noise = rng.normal(0.0, 0.05, size=(days, HOURS))
    load = scale * shape[None, :] * (level + noise)
    return np.maximum(load, 0.0).ravel()


def synth_profiles(seed: int | np.random.Generator, scale: float = 30.0) -> tuple[np.ndarray, np.ndarray]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    load = synth_load(rng, scale)
    gen = synth_solar(rng)
    assert load.shape == gen.shape == (HOURS_PER_YEAR,)
    return load, gen


@dataclass(frozen=True)
class SynthSource:
    load_scale: float = 30.0


@dataclass(frozen=True)
class CsvSource:
    """Profiles from CSV files, assigned to prosumers round-robin in sorted order.

    With CSV profiles each file's generation column is used as that prosumer's unit profile.
    """

    paths: tuple[Path, ...]

    @classmethod
    def from_path(cls, path: str | Path) -> "CsvSource":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"profile source {path} does not exist")
        files = tuple(sorted(path.glob("*.csv"))) if path.is_dir() else (path,)
        if not files:
            raise FileNotFoundError(f"no profile CSVs under {path}")
        return cls(files)


@dataclass(frozen=True)
class EnvOptions:
    horizon: int | None = None
    soc_mode: str = "reset"
    soc_levels: int = 101
    power_ratio: float = 0.25


def build_microgrid(
    spec: DiversitySpec,
    schedule: UtilitySchedule,
    microgrid: int,
    profile_source: SynthSource | CsvSource | None = None,
    options: EnvOptions = EnvOptions(),
    env_id: int | None = None,
    _csv_cache: dict | None = None,
) -> MicrogridEnv:
    source = SynthSource() if profile_source is None else profile_source
    caps = sample_microgrid_capacities(spec, microgrid)
    if isinstance(source, SynthSource):
        gen = synth_solar(stream(spec.seed, CLUSTER_STREAM, 0, TAG_SOLAR))
    prosumers = []
    for k, (pv, bat) in enumerate(caps):
        if isinstance(source, SynthSource):
            load = synth_load(stream(spec.seed, microgrid, k, TAG_LOAD), source.load_scale)
            g = gen
        else:
            idx = (microgrid * spec.n_prosumers + k) % len(source.paths)
            cache = {} if _csv_cache is None else _csv_cache
            if idx not in cache:
                cache[idx] = read_profile_csv(source.paths[idx])
            load, g = cache[idx]
        prosumers.append(
            Prosumer(load, g, pv_units=pv, battery_capacity=float(bat), battery_power=options.power_ratio * bat)
        )
    return MicrogridEnv(
        prosumers,
        schedule.price_day(),
        env_id=microgrid if env_id is None else env_id,
        horizon=options.horizon,
        soc_mode=options.soc_mode,
        soc_levels=options.soc_levels,
    )


def build_cluster(
    spec: DiversitySpec,
    schedule: UtilitySchedule | None = None,
    profile_source: SynthSource | CsvSource | str | Path | None = None,
    options: EnvOptions = EnvOptions(),
    id_offset: int = 0,
) -> list[MicrogridEnv]:
    schedule = tou_schedule() if schedule is None else schedule
    if isinstance(profile_source, (str, Path)):
        profile_source = CsvSource.from_path(profile_source)
    cache: dict = {}
    return [
        build_microgrid(spec, schedule, m, profile_source, options, env_id=id_offset + m, _csv_cache=cache)
        for m in range(spec.n_microgrids)
    ]


# ----- flat key=value config files -------------------------------------------


class ConfigError(ValueError):
    def __init__(self, problems: list[str] | str):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    out: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected key = value")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            problems.append(f"{source}:{lineno}: empty key")
            continue
        out[key] = value
    if problems:
        raise ConfigError(problems)
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_kv_text(path.read_text(), str(path))


SCHEDULE_KEYS = ("buy_peak", "buy_offpeak", "sell", "peak_start", "peak_end", "buy", "sell_prices")


def _float_list(value: str) -> np.ndarray:
    return np.array([float(x) for x in value.split(",")], dtype=np.float64)


def scenario_from_kv(kv: dict[str, str]) -> tuple[DiversitySpec, UtilitySchedule]:
    """Build a scenario from flat keys; unknown keys are errors.

    Schedule overrides: ``buy_peak``, ``buy_offpeak``, ``sell``, ``peak_start``,
    ``peak_end``, or explicit comma lists ``buy`` / ``sell_prices`` of 24 values.
    """
    spec_fields = {f.name: f for f in fields(DiversitySpec)}
    problems = []
    spec_kw: dict = {}
    for key, value in kv.items():
        if key in spec_fields:
            caster = int if key in ("n_prosumers", "n_microgrids", "seed") else float
            try:
                spec_kw[key] = caster(value)
            except ValueError:
                problems.append(f"{key}: cannot parse {value!r}")
        elif key not in SCHEDULE_KEYS:
            problems.append(f"unknown scenario key {key!r}")
    sched_kw = {}
    try:
        for key, name, caster in (
            ("buy_peak", "peak", float),
            ("buy_offpeak", "offpeak", float),
            ("sell", "sell", float),
            ("peak_start", "peak_start", int),
            ("peak_end", "peak_end", int),
        ):
            if key in kv:
                sched_kw[name] = caster(kv[key])
        schedule = tou_schedule(**sched_kw)
        if "buy" in kv or "sell_prices" in kv:
            buy = _float_list(kv["buy"]) if "buy" in kv else schedule.buy
            sell = _float_list(kv["sell_prices"]) if "sell_prices" in kv else schedule.sell
            schedule = UtilitySchedule(buy=buy, sell=sell)
    except ValueError as exc:
        problems.append(f"schedule: {exc}")
        schedule = tou_schedule()
    try:
        spec = DiversitySpec(**spec_kw)
    except (ValueError, TypeError) as exc:
        problems.append(f"scenario: {exc}")
        spec = DiversitySpec()
    if problems:
        raise ConfigError(problems)
    return spec, schedule


def read_scenario_file(path: str | Path) -> tuple[DiversitySpec, UtilitySchedule]:
    return scenario_from_kv(read_kv_file(path))


def with_seed(spec: DiversitySpec, seed: int) -> DiversitySpec:
    return replace(spec, seed=seed)
