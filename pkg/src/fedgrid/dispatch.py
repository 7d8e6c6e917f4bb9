"""Prosumer battery dispatch by dynamic programming over a state-of-charge grid.

The prosumer maximises

    <sell, e_s + discharge> - <buy, e_b + charge>

subject to per-hour power limits, capacity bounds and charge/discharge
exclusivity. With exclusivity the per-hour payoff is not concave whenever
``sell > buy``, so we solve the discretised problem exactly instead of an LP.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DEFAULT_SOC_LEVELS = 101

# Relative tolerance for treating two DP values as tied.
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class BatterySchedule:
    discharge: np.ndarray
    charge: np.ndarray
    soc: np.ndarray
    objective: float

    @property
    def hours(self) -> int:
        return self.charge.shape[0]


@lru_cache(maxsize=256)
def _transition_tables(capacity: float, power: float, levels: int):
    grid = np.linspace(0.0, capacity, levels)
    delta = grid[None, :] - grid[:, None]
    feasible = np.abs(delta) <= power + 1e-12 * max(capacity, 1.0)
    charge = np.where(feasible, np.maximum(delta, 0.0), 0.0)
    discharge = np.where(feasible, np.maximum(-delta, 0.0), 0.0)
    for a in (grid, feasible, charge, discharge):
        a.setflags(write=False)
    return grid, feasible, charge, discharge


def soc_grid(capacity: float, levels: int = DEFAULT_SOC_LEVELS) -> np.ndarray:
    return np.linspace(0.0, capacity, levels)


def schedule_objective(sell, buy, e_s, e_b, charge, discharge) -> float:
    sell, buy = np.asarray(sell, float), np.asarray(buy, float)
    return float(sell @ (np.asarray(e_s, float) + discharge) - buy @ (np.asarray(e_b, float) + charge))


def optimize_dispatch(
    sell: np.ndarray,
    buy: np.ndarray,
    e_s: np.ndarray,
    e_b: np.ndarray,
    capacity: float,
    power: float,
    soc_start: float = 0.0,
    levels: int = DEFAULT_SOC_LEVELS,
) -> BatterySchedule:
    """Optimal schedule on a ``levels``-point SoC grid over ``len(sell)`` hours.

    ``soc_start`` must lie on the grid (within rounding); among tied optima the
    lexicographically smallest SoC trajectory is returned.
    """
    sell = np.asarray(sell, dtype=np.float64)
    buy = np.asarray(buy, dtype=np.float64)
    hours = sell.shape[0]
    if buy.shape != (hours,):
        raise ValueError("sell and buy must have equal length")
    if capacity < 0 or power < 0:
        raise ValueError("capacity and power must be non-negative")
    if not (-1e-9 <= soc_start <= capacity + 1e-9):
        raise ValueError(f"soc_start {soc_start} outside [0, {capacity}]")
    if levels < 2:
        raise ValueError("need at least 2 SoC levels")

    if capacity == 0 or power == 0:
        z = np.zeros(hours)
        soc = np.full(hours + 1, float(soc_start))
        return BatterySchedule(z, z.copy(), soc, schedule_objective(sell, buy, e_s, e_b, z, z))

    grid, feasible, charge, discharge = _transition_tables(float(capacity), float(power), int(levels))
    start = int(round(soc_start / capacity * (levels - 1)))
    if abs(grid[start] - soc_start) > 1e-9 * max(capacity, 1.0):
        raise ValueError(f"soc_start {soc_start} is not on the {levels}-level grid")

    # payoff[h, i, j]: battery cash flow moving from level i to level j in hour h
    payoff = sell[:, None, None] * discharge[None] - buy[:, None, None] * charge[None]
    payoff[:, ~feasible] = -np.inf

    value = np.zeros((hours + 1, levels))
    for h in range(hours - 1, -1, -1):
        value[h] = np.max(payoff[h] + value[h + 1][None, :], axis=1)

    path = np.empty(hours + 1, dtype=np.int64)
    path[0] = start
    for h in range(hours):
        q = payoff[h, path[h]] + value[h + 1]
        best = q.max()
        tol = _TIE_RTOL * max(1.0, abs(best))
        path[h + 1] = int(np.flatnonzero(q >= best - tol)[0])

    soc = grid[path]
    steps = np.diff(soc)
    ch = np.maximum(steps, 0.0)
    dis = np.maximum(-steps, 0.0)
    return BatterySchedule(dis, ch, soc, schedule_objective(sell, buy, e_s, e_b, ch, dis))
