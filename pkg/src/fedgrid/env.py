"""Microgrid price-setting MDP.

An aggregator (the RL agent) and the utility both post 24 hourly buy/sell
prices. Each prosumer dispatches its battery against the best available
prices, then routes every hour's purchase and sale to whichever counterparty
is strictly better; the aggregator's reward is its trading profit with the
prosumers.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dispatch import DEFAULT_SOC_LEVELS, BatterySchedule, optimize_dispatch

HOURS = 24
DAYS_PER_YEAR = 365
HOURS_PER_YEAR = HOURS * DAYS_PER_YEAR
STATE_DIM = 5 * HOURS
ACTION_DIM = 2 * HOURS

PROFILE_HEADER = ("hour", "load_kwh", "gen_kwh_per_unit")


class HorizonError(RuntimeError):
    """Stepping an environment past its configured horizon."""


class ProfileFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class Prosumer:
    load_profile: np.ndarray
    gen_profile: np.ndarray
    pv_units: int = 0
    battery_capacity: float = 0.0
    battery_power: float | None = None

    def __post_init__(self) -> None:
        load = np.asarray(self.load_profile, dtype=np.float64)
        gen = np.asarray(self.gen_profile, dtype=np.float64)
        for name, arr in (("load_profile", load), ("gen_profile", gen)):
            if arr.shape != (HOURS_PER_YEAR,):
                raise ValueError(f"{name} must have {HOURS_PER_YEAR} entries, got {arr.shape}")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite and non-negative")
        if self.pv_units < 0 or self.battery_capacity < 0:
            raise ValueError("capacities must be non-negative")
        power = self.battery_capacity / 4.0 if self.battery_power is None else float(self.battery_power)
        if power < 0 or power > self.battery_capacity + 1e-12:
            raise ValueError("battery_power must lie in [0, battery_capacity]")
        load.setflags(write=False)
        gen.setflags(write=False)
        object.__setattr__(self, "load_profile", load)
        object.__setattr__(self, "gen_profile", gen)
        object.__setattr__(self, "battery_power", power)

    def day_slice(self, day: int) -> slice:
        d = day % DAYS_PER_YEAR
        return slice(d * HOURS, (d + 1) * HOURS)

    def demand(self, day: int) -> np.ndarray:
        return self.load_profile[self.day_slice(day)]

    def supply(self, day: int) -> np.ndarray:
        return self.pv_units * self.gen_profile[self.day_slice(day)]


@dataclass(frozen=True)
class PriceDay:
    buy: np.ndarray
    sell: np.ndarray

    def __post_init__(self) -> None:
        buy = np.asarray(self.buy, dtype=np.float64)
        sell = np.asarray(self.sell, dtype=np.float64)
        for name, arr in (("buy", buy), ("sell", sell)):
            if arr.shape != (HOURS,):
                raise ValueError(f"{name} prices must have {HOURS} entries")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} prices must be finite and non-negative")
        object.__setattr__(self, "buy", buy)
        object.__setattr__(self, "sell", sell)


@dataclass(frozen=True)
class EnvState:
    utility_sell: np.ndarray
    utility_buy: np.ndarray
    solar_forecast: np.ndarray
    prev_bought: np.ndarray
    prev_sold: np.ndarray

    def vector(self) -> np.ndarray:
        v = np.concatenate(
            [self.utility_sell, self.utility_buy, self.solar_forecast, self.prev_bought, self.prev_sold]
        )
        assert v.shape == (STATE_DIM,)
        return v


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    reward: float
    bought_from_agent: np.ndarray
    sold_to_agent: np.ndarray
    utility_imbalance_cost: float
    agent_prices: PriceDay
    # per-prosumer (24,) arrays routed to the agent, kept for auditing
    prosumer_bought: list[np.ndarray] = field(repr=False, default_factory=list)
    prosumer_sold: list[np.ndarray] = field(repr=False, default_factory=list)
    schedules: list[BatterySchedule] = field(repr=False, default_factory=list)


def effective_prices(agent: PriceDay, utility: PriceDay) -> PriceDay:
    """Best price a prosumer can get each hour from either counterparty."""
    return PriceDay(buy=np.minimum(agent.buy, utility.buy), sell=np.maximum(agent.sell, utility.sell))


def prosumer_optimize(
    prices: PriceDay,
    p: Prosumer,
    day: int,
    soc_start: float = 0.0,
    levels: int = DEFAULT_SOC_LEVELS,
) -> BatterySchedule:
    if not 0 <= day < DAYS_PER_YEAR:
        raise ValueError(f"day {day} outside [0, {DAYS_PER_YEAR - 1}]")
    if not (0.0 <= soc_start <= p.battery_capacity):
        raise ValueError(f"soc_start {soc_start} outside [0, {p.battery_capacity}]")
    return optimize_dispatch(
        prices.sell, prices.buy, p.supply(day), p.demand(day),
        p.battery_capacity, p.battery_power, soc_start, levels,
    )


def actions_to_prices(action: np.ndarray, price_cap: float) -> PriceDay:
    """Squash a raw 48-vector through a sigmoid onto ``[0, price_cap]``.

    The first 24 entries are the agent's buy prices, the last 24 its sell prices.
    """
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (ACTION_DIM,):
        raise ValueError(f"action must have {ACTION_DIM} entries")
    squashed = price_cap * 0.5 * (1.0 + np.tanh(0.5 * a))
    return PriceDay(buy=squashed[:HOURS], sell=squashed[HOURS:])


def prices_to_actions(prices: PriceDay, price_cap: float, eps: float = 1e-9) -> np.ndarray:
    """Inverse of :func:`actions_to_prices` (prices clipped into the open interval)."""
    u = np.clip(np.concatenate([prices.buy, prices.sell]) / price_cap, eps, 1.0 - eps)
    return np.log(u) - np.log1p(-u)


class MicrogridEnv:
    """One microgrid: a prosumer set facing a fixed daily utility tariff.

    ``soc_mode`` is ``"reset"`` (every day starts empty) or ``"carry"``
    (state of charge carries over between days).
    """

    def __init__(
        self,
        prosumers: list[Prosumer],
        utility: PriceDay,
        env_id: int = 0,
        horizon: int | None = None,
        soc_mode: str = "reset",
        soc_levels: int = DEFAULT_SOC_LEVELS,
        price_cap: float | None = None,
    ):
        if soc_mode not in ("reset", "carry"):
            raise ValueError(f"unknown soc_mode {soc_mode!r}")
        self.prosumers = list(prosumers)
        self.utility = utility
        self.env_id = env_id
        self.horizon = horizon
        self.soc_mode = soc_mode
        self.soc_levels = soc_levels
        self.price_cap = 2.0 * float(np.max(utility.buy)) if price_cap is None else float(price_cap)
        if self.price_cap <= 0:
            raise ValueError("price_cap must be positive")
        self._obs_scale = self._observation_scale()
        self.reset(0)

    # ----- state handling -------------------------------------------------

    def _observation_scale(self) -> np.ndarray:
        energy = 0.0
        for p in self.prosumers:
            energy += max(float(p.load_profile.max()), float(p.pv_units * p.gen_profile.max())) + p.battery_power
        energy = max(energy, 1.0)
        return np.concatenate([np.full(2 * HOURS, 1.0 / self.price_cap), np.full(3 * HOURS, 1.0 / energy)])

    def solar_forecast(self, day: int) -> np.ndarray:
        g = np.zeros(HOURS)
        for p in self.prosumers:
            g += p.supply(day)
        return g

    def _state(self) -> EnvState:
        return EnvState(
            utility_sell=self.utility.sell.copy(),
            utility_buy=self.utility.buy.copy(),
            solar_forecast=self.solar_forecast(self.day),
            prev_bought=self._prev_bought.copy(),
            prev_sold=self._prev_sold.copy(),
        )

    def reset(self, day0: int = 0) -> EnvState:
        self.day = day0 % DAYS_PER_YEAR
        self.steps = 0
        self.soc = [0.0 for _ in self.prosumers]
        self._prev_bought = np.zeros(HOURS)
        self._prev_sold = np.zeros(HOURS)
        self.state = self._state()
        return self.state

    def observe(self, state: EnvState | None = None) -> np.ndarray:
        """Scaled state vector used as network input."""
        s = self.state if state is None else state
        return s.vector() * self._obs_scale

    def clone(self) -> "MicrogridEnv":
        """Independent copy sharing the (immutable) prosumer data."""
        other = copy.copy(self)
        other.soc = list(self.soc)
        other._prev_bought = self._prev_bought.copy()
        other._prev_sold = self._prev_sold.copy()
        return other

    # ----- dynamics -------------------------------------------------------

    def _check_horizon(self) -> None:
        if self.horizon is not None and self.steps >= self.horizon:
            raise HorizonError(f"env {self.env_id}: horizon of {self.horizon} days exhausted")

    def _dispatch(self, eff: PriceDay) -> list[BatterySchedule]:
        scheds = []
        for k, p in enumerate(self.prosumers):
            scheds.append(prosumer_optimize(eff, p, self.day, self.soc[k], self.soc_levels))
        return scheds

    def _advance(self, scheds, total_bought, total_sold) -> EnvState:
        if self.soc_mode == "carry":
            self.soc = [float(s.soc[-1]) for s in scheds]
        self._prev_bought = total_bought
        self._prev_sold = total_sold
        self.day = (self.day + 1) % DAYS_PER_YEAR
        self.steps += 1
        self.state = self._state()
        return self.state

    def _settle(self, agent: PriceDay, scheds, share_bought, share_sold) -> StepOutcome:
        """Book flows given per-prosumer fractions routed to the agent."""
        e_b = np.zeros(HOURS)
        e_s = np.zeros(HOURS)
        tot_b = np.zeros(HOURS)
        tot_s = np.zeros(HOURS)
        pb, ps = [], []
        for p, sch in zip(self.prosumers, scheds):
            bought = p.demand(self.day) + sch.charge
            sold = p.supply(self.day) + sch.discharge
            b_agent = share_bought * bought
            s_agent = share_sold * sold
            pb.append(b_agent)
            ps.append(s_agent)
            e_b += b_agent
            e_s += s_agent
            tot_b += bought
            tot_s += sold
        reward = float(agent.buy @ e_b - agent.sell @ e_s)
        net = e_b - e_s
        imbalance = float(self.utility.buy @ np.maximum(net, 0.0) - self.utility.sell @ np.maximum(-net, 0.0))
        next_state = self._advance(scheds, tot_b, tot_s)
        return StepOutcome(next_state, reward, e_b, e_s, imbalance, agent, pb, ps, scheds)

    def step(self, agent_prices: PriceDay) -> StepOutcome:
        self._check_horizon()
        eff = effective_prices(agent_prices, self.utility)
        scheds = self._dispatch(eff)
        share_b = (agent_prices.buy < self.utility.buy).astype(np.float64)
        share_s = (agent_prices.sell > self.utility.sell).astype(np.float64)
        return self._settle(agent_prices, scheds, share_b, share_s)

    def step_action(self, action: np.ndarray) -> StepOutcome:
        return self.step(actions_to_prices(action, self.price_cap))

    def no_rl_step(self) -> StepOutcome:
        """Baseline day: agent copies the utility and takes half of every flow."""
        self._check_horizon()
        scheds = self._dispatch(self.utility)
        half = np.full(HOURS, 0.5)
        return self._settle(self.utility, scheds, half, half)


def env_step(env: MicrogridEnv, agent_prices: PriceDay) -> StepOutcome:
    return env.step(agent_prices)


def env_reset(env: MicrogridEnv, day0: int) -> EnvState:
    return env.reset(day0)


def no_rl_step(env: MicrogridEnv) -> StepOutcome:
    return env.no_rl_step()


# ----- profile CSV ---------------------------------------------------------


def read_profile_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    load = np.empty(HOURS_PER_YEAR)
    gen = np.empty(HOURS_PER_YEAR)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PROFILE_HEADER:
            raise ProfileFormatError(path, 1, f"expected header {','.join(PROFILE_HEADER)}")
        n = 0
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ProfileFormatError(path, lineno, f"expected 3 fields, got {len(row)}")
            try:
                hour = int(row[0])
                lv = float(row[1])
                gv = float(row[2])
            except ValueError as exc:
                raise ProfileFormatError(path, lineno, str(exc)) from None
            if hour != n:
                raise ProfileFormatError(path, lineno, f"expected hour {n}, got {hour}")
            if n >= HOURS_PER_YEAR:
                raise ProfileFormatError(path, lineno, f"more than {HOURS_PER_YEAR} data rows")
            if not (np.isfinite(lv) and np.isfinite(gv)) or lv < 0 or gv < 0:
                raise ProfileFormatError(path, lineno, "values must be finite and non-negative")
            load[n] = lv
            gen[n] = gv
            n += 1
    if n != HOURS_PER_YEAR:
        raise ProfileFormatError(path, n + 2, f"expected {HOURS_PER_YEAR} data rows, got {n}")
    return load, gen


def write_profile_csv(path: str | Path, load: np.ndarray, gen_unit: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for h in range(HOURS_PER_YEAR):
            w.writerow([h, repr(float(load[h])), repr(float(gen_unit[h]))])
