"""Replay charging policies against driving traces and hourly prices.

Energy is carried continuously during a replay. Costs are cash costs only:
the unserved-driving penalty shapes optimal policies inside the solver but is
never charged here; stranded minutes are reported as events instead.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date
from typing import Literal, NamedTuple, Optional, Protocol, Sequence, get_args

import numpy as np
import pandas as pd

from ev_charging.data_ingest import MINUTES_PER_DAY, DrivingTrace
from ev_charging.driving_model import PARKED, REFERENCE_DATE, DrivingModel, simulate, transition_matrix_at
from ev_charging.errors import ConfigError, DataError
from ev_charging.mdp_solver import (
    ENERGY_TOL,
    KWH_PER_MWH,
    MdpConfig,
    PolicyTable,
    RollingSolution,
    ValueTable,
    actual_charge,
    actual_state,
    feasible_charge,
    stage_revenue,
    step_energy,
)

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = (
    "policy",
    "phi",
    "mean_daily_cost",
    "stranded_events",
    "energy_bought_kwh",
    "energy_sold_kwh",
)
TRACE_COLUMNS = ("t", "minute", "soc_kwh", "action_kw", "price", "driving_state")

RuleKind = Literal["naive", "night", "low_price", "v2g_quantile"]
"""Rule-of-thumb charging schemes

- `naive`: charge at full rate whenever parked
- `night`: charge during the night window or below the SOC floor
- `low_price`: charge at prices in the low quantile of the next 24 hours or below the SOC floor
- `v2g_quantile`: charge at low-quantile prices and discharge at high-quantile prices
"""

LookupMode = Literal["nearest", "lookahead"]
"""How a grid policy is applied at continuous energy

- `nearest`: the action stored at the nearest grid level
- `lookahead`: the best one-step action against the interpolated value table
"""


class Policy(Protocol):
    def decide(self, t: int, minute: int, energy: float, state: int, prices: np.ndarray) -> float:
        """Desired charge rate (kW) at replay minute `t` given per-minute `prices`."""
        ...


@dataclass
class SimulationReport:
    """Outcome of replaying one policy over one driving trace.

    `soc_trace[t]` is the energy at the start of minute t; `action_trace[t]`
    is the charge rate actually applied during it.
    """

    total_cost: float
    daily_cost_mean: float
    stranded_events: int
    stranded_minutes: int
    soc_trace: np.ndarray
    action_trace: np.ndarray
    desired_states: np.ndarray
    prices: np.ndarray
    start_minute: int
    energy_purchased: float
    energy_sold: float
    driving_consumption: float
    final_energy: float

    @property
    def initial_energy(self) -> float:
        return float(self.soc_trace[0])

    def to_frame(self) -> pd.DataFrame:
        """Per-minute trace with columns t, minute, soc_kwh, action_kw, price, driving_state."""
        n = self.soc_trace.size
        return pd.DataFrame(
            {
                "t": np.arange(n),
                "minute": (self.start_minute - 1 + np.arange(n)) % MINUTES_PER_DAY + 1,
                "soc_kwh": self.soc_trace,
                "action_kw": self.action_trace,
                "price": self.prices,
                "driving_state": self.desired_states,
            },
            columns=list(TRACE_COLUMNS),
        )


def stranded_event_count(soc_trace: np.ndarray, desired_trace: np.ndarray, e_min: float = 0.0) -> int:
    """Number of maximal runs of minutes in which the user wants to drive on an empty battery."""
    stranded = (np.asarray(desired_trace) != PARKED) & (np.asarray(soc_trace) <= e_min + ENERGY_TOL)
    if stranded.size == 0:
        return 0
    return int(stranded[0]) + int(np.count_nonzero(stranded[1:] & ~stranded[:-1]))


def simulate_policy(
    policy: Policy,
    driving: DrivingTrace,
    prices: np.ndarray,
    cfg: MdpConfig,
    initial_energy: Optional[float] = None,
) -> SimulationReport:
    """Forward replay of `policy` on an exogenous driving trace.

    Args:
        policy: Any object with a `decide` method.
        driving: Desired driving states per minute (observed 1/2 or hidden 1..N).
        prices: Per-minute prices (currency/MWh) aligned with `driving`.
        cfg: Physical parameters.
        initial_energy: Starting energy; defaults to a full battery.

    Raises:
        DataError: prices and driving trace cover different spans.
    """
    prices = np.asarray(prices, dtype=float)
    if prices.size != driving.n_minutes:
        raise DataError(
            f"driving trace covers {driving.n_minutes} minutes but prices cover {prices.size}"
        )
    cfg.validate()
    energy = cfg.e_max if initial_energy is None else float(initial_energy)
    if not cfg.e_min - ENERGY_TOL <= energy <= cfg.e_max + ENERGY_TOL:
        raise ConfigError(f"initial energy {energy} outside [{cfg.e_min}, {cfg.e_max}]")
    n_states = driving.n_symbols
    drive = cfg.drive_energy(n_states)

    n = driving.n_minutes
    soc = np.empty(n)
    applied = np.empty(n)
    consumption = 0.0
    minutes = driving.minute_of_day
    states = driving.states
    for t in range(n):
        x = int(states[t])
        soc[t] = energy
        u = float(np.clip(policy.decide(t, int(minutes[t]), energy, x, prices), cfg.u_min, cfg.u_max))
        x_a = actual_state(energy, x, cfg)
        u_a = float(feasible_charge(energy, actual_charge(energy, x, u, cfg), cfg))
        nxt = float(step_energy(energy, x_a, u_a, cfg, n_states))
        if drive[x_a - 1] > 0:
            consumption += energy - nxt
        applied[t] = u_a
        energy = nxt

    total_cost = float(np.sum(prices * applied) * cfg.omega / KWH_PER_MWH)
    stranded = (states != PARKED) & (soc <= cfg.e_min + ENERGY_TOL)
    return SimulationReport(
        total_cost=total_cost,
        daily_cost_mean=total_cost * MINUTES_PER_DAY / n,
        stranded_events=stranded_event_count(soc, states, cfg.e_min),
        stranded_minutes=int(stranded.sum()),
        soc_trace=soc,
        action_trace=applied,
        desired_states=states.copy(),
        prices=prices,
        start_minute=driving.start_minute,
        energy_purchased=float(np.sum(np.maximum(applied, 0.0)) * cfg.omega),
        energy_sold=float(np.sum(np.maximum(-applied, 0.0)) * cfg.omega),
        driving_consumption=consumption,
        final_energy=energy,
    )


class OptimalPolicy:
    """Applies a solved policy table during a replay.

    Replay minute t maps to table row `t + offset`. In `lookahead` mode the
    action is re-chosen at the continuous energy level from the value table
    of the next minute, which needs `values`, `model` and `cfg`.
    """

    def __init__(
        self,
        table: PolicyTable,
        *,
        lookup: LookupMode = "nearest",
        values: Optional[ValueTable] = None,
        model: Optional[DrivingModel] = None,
        cfg: Optional[MdpConfig] = None,
        offset: int = 0,
    ) -> None:
        if lookup not in get_args(LookupMode):
            raise ConfigError(f"Invalid lookup mode: {lookup}. Needs to be one of {get_args(LookupMode)}")
        if lookup == "lookahead" and (values is None or model is None or cfg is None):
            raise ConfigError("lookahead lookup needs values, model and cfg")
        self.table = table
        self.lookup = lookup
        self.values = values
        self.model = model
        self.cfg = cfg
        self.offset = offset
        n_actions = len(table.actions)
        self._priority = sorted(range(n_actions), key=lambda i: (abs(table.actions[i]), table.actions[i] < 0))

    def decide(self, t: int, minute: int, energy: float, state: int, prices: np.ndarray) -> float:
        row = t + self.offset
        if row >= self.table.horizon:
            raise DataError(f"policy table covers {self.table.horizon} minutes, replay reached minute {row}")
        if state > self.table.action_index.shape[2]:
            raise DataError(f"driving state {state} is not covered by the policy table")
        if self.lookup == "nearest":
            return self.table.decide(row, energy, state)
        return self._lookahead(row, minute, energy, state, float(prices[t]))

    def _lookahead(self, row: int, minute: int, energy: float, state: int, price: float) -> float:
        assert self.values is not None and self.model is not None and self.cfg is not None
        cfg = self.cfg
        n_states = self.model.structure.n_states
        following = self.values.values[row + 1]
        probs = transition_matrix_at(self.model.params, minute)[state - 1]
        grid = self.table.grid
        best_u, best_q = 0.0, -np.inf
        for i in self._priority:
            u = float(self.table.actions[i])
            x_a = actual_state(energy, state, cfg)
            u_a = float(feasible_charge(energy, actual_charge(energy, state, u, cfg), cfg))
            nxt = step_energy(energy, x_a, u_a, cfg, n_states)
            lower, weight = grid.bracket(nxt)
            continuation = (1.0 - weight) * following[lower] + weight * following[lower + 1]
            q = stage_revenue(energy, state, u_a, price, cfg) + cfg.beta * float(continuation @ probs)
            if q > best_q + 1e-12 * (1.0 + abs(best_q)):
                best_u, best_q = u, q
        return best_u


class RollingPolicy(OptimalPolicy):
    """Executes the concatenated first slices of a rolling-horizon solve."""

    def __init__(self, solution: RollingSolution) -> None:
        super().__init__(solution.executed)
        self.solution = solution


@dataclass(frozen=True)
class RuleOfThumbSpec:
    """Parameters of a rule-of-thumb policy.

    Minutes are minutes after midnight; the night window is half-open
    [night_start, night_end). `v2g_floor` is a fraction of battery capacity.
    """

    kind: RuleKind
    night_start: int = 22 * 60
    night_end: int = 6 * 60
    soc_floor: float = 0.5
    buy_quantile: Optional[float] = None
    sell_quantile: float = 0.9
    v2g_floor: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in get_args(RuleKind):
            raise ConfigError(f"Invalid rule kind: {self.kind}. Needs to be one of {get_args(RuleKind)}")
        for name in ("soc_floor", "sell_quantile", "v2g_floor"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.buy_quantile is not None and not 0 <= self.buy_quantile <= 1:
            raise ConfigError(f"buy_quantile must lie in [0, 1], got {self.buy_quantile}")
        for name in ("night_start", "night_end"):
            value = getattr(self, name)
            if not 0 <= value < MINUTES_PER_DAY:
                raise ConfigError(f"{name} must lie in [0, {MINUTES_PER_DAY}), got {value}")

    @property
    def effective_buy_quantile(self) -> float:
        if self.buy_quantile is not None:
            return self.buy_quantile
        return 0.3 if self.kind == "v2g_quantile" else 0.2

    @classmethod
    def naive(cls) -> "RuleOfThumbSpec":
        return cls("naive")

    @classmethod
    def night(cls) -> "RuleOfThumbSpec":
        return cls("night")

    @classmethod
    def low_price(cls) -> "RuleOfThumbSpec":
        return cls("low_price")

    @classmethod
    def v2g(cls, bounded: bool) -> "RuleOfThumbSpec":
        return cls("v2g_quantile", v2g_floor=0.25 if bounded else 0.0)


def hourly_quantiles(prices: np.ndarray, q: float, window_hours: int = 24) -> np.ndarray:
    """Quantile of the next `window_hours` hourly prices, one value per hour.

    The window is cut short at the end of the series.
    """
    hourly = np.asarray(prices, dtype=float)[::60]
    return np.array([np.quantile(hourly[h : h + window_hours], q) for h in range(hourly.size)])


class RuleOfThumbPolicy:
    """Threshold policy built by `make_rule_of_thumb`."""

    def __init__(self, spec: RuleOfThumbSpec, prices: np.ndarray, cfg: MdpConfig) -> None:
        if spec.kind == "v2g_quantile" and cfg.u_min >= 0:
            raise ConfigError("a V2G rule needs u_min < 0")
        self.spec = spec
        self.cfg = cfg
        self.buy_threshold = hourly_quantiles(prices, spec.effective_buy_quantile)
        self.sell_threshold = hourly_quantiles(prices, spec.sell_quantile)

    def _in_night(self, minute: int) -> bool:
        since_midnight = minute - 1
        start, end = self.spec.night_start, self.spec.night_end
        if start <= end:
            return start <= since_midnight < end
        return since_midnight >= start or since_midnight < end

    def decide(self, t: int, minute: int, energy: float, state: int, prices: np.ndarray) -> float:
        cfg, spec = self.cfg, self.spec
        if actual_state(energy, state, cfg) != PARKED:
            return 0.0
        full = energy >= cfg.e_max - ENERGY_TOL
        if full and spec.kind != "v2g_quantile":
            return 0.0
        low_soc = energy < spec.soc_floor * cfg.kappa
        price = float(prices[t])
        hour = min(t // 60, self.buy_threshold.size - 1)

        if spec.kind == "naive":
            return cfg.u_max
        if spec.kind == "night":
            return cfg.u_max if self._in_night(minute) or low_soc else 0.0
        if spec.kind == "low_price":
            return cfg.u_max if price <= self.buy_threshold[hour] or low_soc else 0.0

        if price <= self.buy_threshold[hour]:
            return 0.0 if full else cfg.u_max
        floor = max(spec.v2g_floor * cfg.kappa, cfg.e_min)
        if price >= self.sell_threshold[hour] and energy > floor + ENERGY_TOL:
            # stop exactly at the floor
            return max(cfg.u_min, -(energy - floor) * cfg.eta_d / cfg.omega)
        return 0.0


def make_rule_of_thumb(spec: RuleOfThumbSpec, prices: np.ndarray, cfg: MdpConfig) -> RuleOfThumbPolicy:
    return RuleOfThumbPolicy(spec, np.asarray(prices, dtype=float), cfg)


class PolicyEntry(NamedTuple):
    """A named policy row for comparison tables; `phi` is empty for rule-of-thumb policies."""

    name: str
    policy: Policy
    phi: Optional[float] = None


def _summary_row(entry: PolicyEntry, report: SimulationReport) -> dict[str, object]:
    return {
        "policy": entry.name,
        "phi": entry.phi,
        "mean_daily_cost": report.daily_cost_mean,
        "stranded_events": report.stranded_events,
        "energy_bought_kwh": report.energy_purchased,
        "energy_sold_kwh": report.energy_sold,
    }


def replay_all(
    policies: Sequence[PolicyEntry],
    driving: DrivingTrace,
    prices: np.ndarray,
    cfg: MdpConfig,
    initial_energy: Optional[float] = None,
) -> list[SimulationReport]:
    reports = []
    for entry in policies:
        report = simulate_policy(entry.policy, driving, prices, cfg, initial_energy)
        logger.info(
            "%-16s phi=%-6s cost/day %.4f, %d stranded events",
            entry.name, entry.phi, report.daily_cost_mean, report.stranded_events,
        )
        reports.append(report)
    return reports


def summary_frame(policies: Sequence[PolicyEntry], reports: Sequence[SimulationReport]) -> pd.DataFrame:
    rows = [_summary_row(entry, report) for entry, report in zip(policies, reports, strict=True)]
    return pd.DataFrame(rows, columns=list(SUMMARY_COLUMNS))


def evaluate_matrix(
    policies: Sequence[PolicyEntry],
    driving: DrivingTrace,
    prices: np.ndarray,
    cfg: MdpConfig,
    initial_energy: Optional[float] = None,
) -> pd.DataFrame:
    """Replay every policy on the same trace; one summary row per policy."""
    return summary_frame(policies, replay_all(policies, driving, prices, cfg, initial_energy))


@dataclass
class ScenarioSettings:
    n_scenarios: int = 200
    seed: int = 0
    threads: int = 1
    start_minute: int = 1
    start_date: date = REFERENCE_DATE
    initial_energy: Optional[float] = None


def evaluate_scenarios(
    policies: Sequence[PolicyEntry],
    model: DrivingModel,
    prices: np.ndarray,
    cfg: MdpConfig,
    settings: Optional[ScenarioSettings] = None,
) -> pd.DataFrame:
    """Replay every policy on simulated driving scenarios over the same prices.

    Returns the summary columns averaged over scenarios plus the standard
    errors `cost_se` and `events_se`. Results do not depend on `threads`.
    """
    settings = settings or ScenarioSettings()
    if settings.n_scenarios < 1:
        raise ConfigError(f"n_scenarios must be at least 1, got {settings.n_scenarios}")
    prices = np.asarray(prices, dtype=float)
    children = np.random.SeedSequence(settings.seed).spawn(settings.n_scenarios)

    def replay(child: np.random.SeedSequence) -> list[dict[str, object]]:
        path = simulate(
            model.params,
            model.structure,
            PARKED,
            settings.start_minute,
            prices.size,
            child,
            start_date=settings.start_date,
        )
        return [
            _summary_row(entry, simulate_policy(entry.policy, path.hidden, prices, cfg, settings.initial_energy))
            for entry in policies
        ]

    with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
        rows = [row for scenario in pool.map(replay, children) for row in scenario]

    frame = pd.DataFrame(rows, columns=list(SUMMARY_COLUMNS))
    frame["phi"] = frame["phi"].astype(float)
    # one row per (policy, phi): the optimal policy appears once per penalty
    grouped = frame.groupby(["policy", "phi"], sort=False, dropna=False)
    summary = grouped.agg(
        mean_daily_cost=("mean_daily_cost", "mean"),
        stranded_events=("stranded_events", "mean"),
        energy_bought_kwh=("energy_bought_kwh", "mean"),
        energy_sold_kwh=("energy_sold_kwh", "mean"),
        cost_se=("mean_daily_cost", "sem"),
        events_se=("stranded_events", "sem"),
    ).reset_index()
    summary[["cost_se", "events_se"]] = summary[["cost_se", "events_se"]].fillna(0.0)
    summary["scenarios"] = settings.n_scenarios
    return summary
