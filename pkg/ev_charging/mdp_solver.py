"""Finite-horizon charging MDP solved by backward induction.

State: (battery energy on a uniform grid, desired driving state). Decision:
desired charge rate u (kW) from a small discrete action set. The driving
state evolves exogenously with the inhomogeneous transition matrices of the
driving model; energy follows the battery dynamics and lands between grid
levels, where the continuation value is interpolated linearly.

Units: prices in currency/MWh (converted once to currency/kWh), energy in
kWh, power in kW, time in minutes with omega = 1/60 h/min.
"""

import logging
import time as _time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, get_args

import numpy as np
import pandas as pd

from ev_charging.data_ingest import MINUTES_PER_DAY
from ev_charging.driving_model import PARKED, DrivingModel, transition_matrices
from ev_charging.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

ENERGY_TOL = 1e-9
KWH_PER_MWH = 1000.0

ActionMode = Literal["charge", "v2g"]
"""Which actions the controller may take

- `charge`: charge at full rate or idle
- `v2g`: additionally discharge at full rate into the grid
"""

TerminalPrice = Literal["mean", "last", "max"]
"""Price at which leftover energy is valued at the end of the horizon

- `mean`: average price over the horizon (default)
- `last`: price of the final minute
- `max`: highest price over the horizon
"""


@dataclass
class MdpConfig:
    """Physical and economic parameters of the charging problem.

    `v` and `mu` hold one value per driving state (2..N); a single value is
    shared by all driving states.
    """

    u_max: float = 4.0
    u_min: float = 0.0
    e_max: float = 24.0
    e_min: float = 0.0
    phi: float = 10.0
    eta_c: float = 0.9
    eta_d: float = 0.9
    v: tuple[float, ...] = (40.0,)
    mu: tuple[float, ...] = (0.2,)
    kappa: float = 24.0
    omega: float = 1.0 / 60.0
    beta: float = 1.0
    horizon_minutes: int = 2 * MINUTES_PER_DAY
    terminal_price: TerminalPrice = "mean"

    def validate(self) -> None:
        """Raise ConfigError when any parameter invariant is violated."""
        if not self.e_min <= self.e_max <= self.kappa:
            raise ConfigError(
                f"storage bounds must satisfy e_min <= e_max <= kappa, got "
                f"{self.e_min} <= {self.e_max} <= {self.kappa}"
            )
        if self.e_min < 0:
            raise ConfigError(f"e_min must be non-negative, got {self.e_min}")
        if not self.u_min <= 0 <= self.u_max:
            raise ConfigError(f"charge bounds must satisfy u_min <= 0 <= u_max, got [{self.u_min}, {self.u_max}]")
        for name in ("eta_c", "eta_d"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {value}")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.phi < 0:
            raise ConfigError(f"phi must be non-negative, got {self.phi}")
        if self.omega <= 0:
            raise ConfigError(f"omega must be positive, got {self.omega}")
        if self.horizon_minutes < 1:
            raise ConfigError(f"horizon_minutes must be positive, got {self.horizon_minutes}")
        if not self.v or not self.mu:
            raise ConfigError("v and mu need at least one value")
        if any(x < 0 for x in (*self.v, *self.mu)):
            raise ConfigError("speeds and drive efficiencies must be non-negative")
        if self.terminal_price not in get_args(TerminalPrice):
            raise ConfigError(
                f"Invalid terminal price: {self.terminal_price}. Needs to be one of {get_args(TerminalPrice)}"
            )

    def drive_energy(self, n_states: int) -> np.ndarray:
        """Energy used per minute in each state 1..N (zero when parked)."""
        n_driving = n_states - 1
        v = np.broadcast_to(np.asarray(self.v, dtype=float), (n_driving,)) if len(self.v) in (1, n_driving) else None
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (n_driving,)) if len(self.mu) in (1, n_driving) else None
        if v is None or mu is None:
            raise ConfigError(
                f"v and mu need 1 or {n_driving} values, got {len(self.v)} and {len(self.mu)}"
            )
        return np.concatenate([[0.0], v * mu * self.omega])

    def with_(self, **changes: Any) -> "MdpConfig":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class EnergyGrid:
    """M equally spaced energy levels from e_min to e_max."""

    levels: np.ndarray

    @classmethod
    def from_config(cls, cfg: MdpConfig, m: int = 360) -> "EnergyGrid":
        if m < 2:
            raise ConfigError(f"the energy grid needs at least 2 levels, got {m}")
        if cfg.e_max <= cfg.e_min:
            raise ConfigError("the energy grid needs e_max > e_min")
        return cls(np.linspace(cfg.e_min, cfg.e_max, m))

    @property
    def m(self) -> int:
        return int(self.levels.size)

    @property
    def step(self) -> float:
        return float(self.levels[1] - self.levels[0])

    def bracket(self, energy: Any) -> tuple[np.ndarray, np.ndarray]:
        """Lower bracketing level index and interpolation weight of the upper level."""
        position = (np.asarray(energy, dtype=float) - self.levels[0]) / self.step
        position = np.clip(position, 0.0, self.m - 1)
        lower = np.minimum(np.floor(position).astype(np.int64), self.m - 2)
        return lower, position - lower

    def nearest(self, energy: Any) -> Any:
        lower, weight = self.bracket(energy)
        return lower + (weight >= 0.5)


def _is_empty(e: Any, cfg: MdpConfig) -> Any:
    return np.asarray(e) <= cfg.e_min + ENERGY_TOL


def actual_state(e: float, x: int, cfg: MdpConfig, grid: Optional[EnergyGrid] = None) -> int:
    """The vehicle is forced to stay parked when it would drive on an empty battery."""
    if x != PARKED and bool(_is_empty(e, cfg)):
        return PARKED
    return x


def actual_charge(e: float, x: int, u: float, cfg: MdpConfig) -> float:
    """No charging or discharging while actually driving."""
    if x != PARKED and not bool(_is_empty(e, cfg)):
        return 0.0
    return u


def feasible_charge(e: Any, u: Any, cfg: MdpConfig) -> Any:
    """Truncate u so that one minute of charging or discharging stays within storage bounds."""
    e = np.asarray(e, dtype=float)
    u = np.asarray(u, dtype=float)
    headroom = np.maximum(cfg.e_max - e, 0.0) / (cfg.eta_c * cfg.omega)
    reserve = np.maximum(e - cfg.e_min, 0.0) * cfg.eta_d / cfg.omega
    result = np.where(u > 0, np.minimum(u, headroom), np.maximum(u, -reserve))
    return float(result) if result.ndim == 0 else result


def step_energy(e: Any, x_a: Any, u_a: Any, cfg: MdpConfig, n_states: int = 2) -> Any:
    """Battery energy after one minute, clamped to [e_min, e_max]."""
    u_a = np.asarray(u_a, dtype=float)
    efficiency = np.where(u_a >= 0, cfg.eta_c, 1.0 / cfg.eta_d)
    drive = cfg.drive_energy(max(n_states, int(np.max(x_a))))[np.asarray(x_a) - 1]
    result = np.clip(np.asarray(e, dtype=float) + efficiency * cfg.omega * u_a - drive, cfg.e_min, cfg.e_max)
    return float(result) if result.ndim == 0 else result


def stage_revenue(e: Any, x: Any, u_a: Any, lambda_t: Any, cfg: MdpConfig) -> Any:
    """Cash flow of one minute minus the penalty for unserved driving."""
    stranded = (np.asarray(x) != PARKED) & _is_empty(e, cfg)
    result = (
        -np.asarray(lambda_t) / KWH_PER_MWH * cfg.omega * np.asarray(u_a)
        - stranded * cfg.omega * cfg.phi
    )
    return float(result) if np.ndim(result) == 0 else result


def terminal_price(prices: np.ndarray, cfg: MdpConfig) -> float:
    if cfg.terminal_price == "last":
        return float(prices[-1])
    if cfg.terminal_price == "max":
        return float(np.max(prices))
    return float(np.mean(prices))


def terminal_revenue(e_t: Any, prices: np.ndarray, cfg: MdpConfig) -> Any:
    """Value of leftover energy sold at the horizon's reference price."""
    result = cfg.eta_d * np.asarray(e_t, dtype=float) * terminal_price(np.asarray(prices), cfg) / KWH_PER_MWH
    return float(result) if result.ndim == 0 else result


def action_set(cfg: MdpConfig, mode: ActionMode = "charge") -> tuple[float, ...]:
    if mode not in get_args(ActionMode):
        raise ConfigError(f"Invalid action mode: {mode}. Needs to be one of {get_args(ActionMode)}")
    if mode == "charge":
        return (0.0, cfg.u_max)
    if cfg.u_min >= 0:
        raise ConfigError("v2g mode needs u_min < 0")
    return (cfg.u_min, 0.0, cfg.u_max)


@dataclass(eq=False)
class ValueTable:
    """Expected revenue-to-go V[t, m, x-1], t = 0..T."""

    values: np.ndarray


@dataclass(eq=False)
class PolicyTable:
    """Chosen action per (t, energy level, driving state).

    `action_index[t, m, x-1]` indexes `actions`; `start_minute` is the
    minute-of-day of t = 0.
    """

    action_index: np.ndarray
    actions: np.ndarray
    grid: EnergyGrid
    start_minute: int = 1

    @property
    def horizon(self) -> int:
        return int(self.action_index.shape[0])

    @property
    def u(self) -> np.ndarray:
        """Desired charge rate in kW, shape (T, M, N)."""
        return self.actions[self.action_index]

    def action_codes(self) -> np.ndarray:
        """1 = charge, 0 = idle, -1 = discharge."""
        return np.sign(self.u).astype(np.int8)

    def decide(self, t: int, energy: float, state: int) -> float:
        """Action at the nearest grid level."""
        return float(self.actions[self.action_index[t, int(self.grid.nearest(energy)), state - 1]])

    def slice(self, begin: int, stop: int) -> "PolicyTable":
        start_minute = (self.start_minute - 1 + begin) % MINUTES_PER_DAY + 1
        return PolicyTable(self.action_index[begin:stop], self.actions, self.grid, start_minute)

    def to_frame(self, values: Optional[ValueTable] = None) -> pd.DataFrame:
        """Long table with columns t, energy_idx, driving_state, action[, value]."""
        t, m, x = np.indices(self.action_index.shape)
        frame = pd.DataFrame(
            {
                "t": t.ravel(),
                "energy_idx": m.ravel(),
                "driving_state": x.ravel() + 1,
                "action": self.u.ravel(),
            }
        )
        if values is not None:
            frame["value"] = values.values[: self.horizon].ravel()
        return frame

    def heatmap_frame(self, state: int = PARKED) -> pd.DataFrame:
        """Action codes per minute (rows) and state of charge in percent (columns)."""
        soc = np.round(100.0 * self.grid.levels / self.grid.levels[-1], 2) if self.grid.levels[-1] > 0 else self.grid.levels
        frame = pd.DataFrame(self.action_codes()[:, :, state - 1], columns=[f"{v:g}" for v in soc])
        frame.insert(0, "minute", (self.start_minute - 1 + np.arange(self.horizon)) % MINUTES_PER_DAY + 1)
        return frame

    def save_npz(self, path: str | Path, values: Optional[ValueTable] = None) -> Path:
        path = Path(path)
        arrays: dict[str, np.ndarray] = {
            "action_index": self.action_index,
            "actions": self.actions,
            "levels": self.grid.levels,
            "start_minute": np.array(self.start_minute),
        }
        if values is not None:
            arrays["values"] = values.values
        np.savez_compressed(path, **arrays)
        return path

    @classmethod
    def load_npz(cls, path: str | Path) -> "PolicyTable":
        with np.load(Path(path)) as data:
            return cls(
                data["action_index"],
                data["actions"],
                EnergyGrid(data["levels"]),
                int(data["start_minute"]),
            )


@dataclass(eq=False)
class Solution:
    value: ValueTable
    policy: PolicyTable


@dataclass(eq=False)
class _ActionDynamics:
    """Time-invariant consequences of every action at every grid state."""

    flat_lower: np.ndarray  # (A, M, N) flat index into an (M, N) table
    weight: np.ndarray  # (A, M, N)
    cash_rate: np.ndarray  # (A, M, N) multiply by the price to get the cash flow
    stranded: np.ndarray  # (A, M, N) 1.0 where the desired trip is unserved
    priority: np.ndarray  # action indices, preferred first on ties


def _action_dynamics(
    actions: np.ndarray, cfg: MdpConfig, grid: EnergyGrid, n_states: int
) -> _ActionDynamics:
    energy = grid.levels[:, None] * np.ones((1, n_states))
    desired = np.broadcast_to(np.arange(1, n_states + 1), energy.shape)
    empty = _is_empty(energy, cfg)
    stranded = (desired != PARKED) & empty
    actual = np.where(stranded, PARKED, desired)
    driving = (desired != PARKED) & ~empty
    drive = cfg.drive_energy(n_states)[actual - 1]

    flat_lower, weights, cash_rate = [], [], []
    for u in actions:
        u_actual = feasible_charge(energy, np.where(driving, 0.0, u), cfg)
        gain = np.where(u_actual >= 0, cfg.eta_c, 1.0 / cfg.eta_d)
        nxt = np.clip(energy + gain * cfg.omega * u_actual - drive, cfg.e_min, cfg.e_max)
        lower, weight = grid.bracket(nxt)
        flat_lower.append(lower * n_states + desired - 1)
        weights.append(weight)
        cash_rate.append(-cfg.omega * u_actual / KWH_PER_MWH)

    priority = np.array(sorted(range(len(actions)), key=lambda i: (abs(actions[i]), actions[i] < 0)))
    n_actions = len(actions)
    return _ActionDynamics(
        np.stack(flat_lower),
        np.stack(weights),
        np.stack(cash_rate),
        np.broadcast_to(stranded.astype(float), (n_actions, *energy.shape)).copy(),
        priority,
    )


def _expected_next(table: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """W[m, x] = sum_x' P[x, x'] table[m, x']."""
    return table @ matrix.T


def _interpolate(flat: np.ndarray, dyn: _ActionDynamics, n_states: int) -> np.ndarray:
    return (1.0 - dyn.weight) * flat[dyn.flat_lower] + dyn.weight * flat[dyn.flat_lower + n_states]


def _check_inputs(
    model: DrivingModel, prices: np.ndarray, cfg: MdpConfig, actions: Sequence[float]
) -> np.ndarray:
    cfg.validate()
    cfg.drive_energy(model.structure.n_states)
    prices = np.asarray(prices, dtype=float)
    if prices.size < cfg.horizon_minutes:
        raise DataError(
            f"price series covers {prices.size} minutes, the horizon needs {cfg.horizon_minutes}"
        )
    action_arr = np.asarray(actions, dtype=float)
    if np.any(action_arr < cfg.u_min - 1e-12) or np.any(action_arr > cfg.u_max + 1e-12):
        raise ConfigError(f"actions {action_arr.tolist()} exceed [{cfg.u_min}, {cfg.u_max}]")
    assert np.any(action_arr == 0.0), "idling must always be available"
    return prices[: cfg.horizon_minutes]


def solve(
    model: DrivingModel,
    prices: np.ndarray,
    cfg: MdpConfig,
    grid: EnergyGrid,
    actions: Optional[Sequence[float]] = None,
    *,
    start_minute: int = 1,
) -> Solution:
    """Backward induction over the horizon.

    Args:
        model: Driving model supplying the transition matrices.
        prices: Per-minute prices (currency/MWh) starting at t = 0.
        cfg: Problem parameters; `cfg.horizon_minutes` sets T.
        grid: Energy discretization.
        actions: Discrete action set; defaults to charge-only.
        start_minute: Minute-of-day (1..1440) of t = 0.

    Raises:
        DataError: the price series is shorter than the horizon.
    """
    actions = action_set(cfg, "charge") if actions is None else tuple(actions)
    window = _check_inputs(model, prices, cfg, actions)
    started = _time.perf_counter()

    n_states = model.structure.n_states
    horizon = cfg.horizon_minutes
    action_arr = np.asarray(actions, dtype=float)
    dyn = _action_dynamics(action_arr, cfg, grid, n_states)
    matrices = transition_matrices(model.params)
    penalty = -cfg.omega * cfg.phi * dyn.stranded

    values = np.empty((horizon + 1, grid.m, n_states))
    chosen = np.empty((horizon, grid.m, n_states), dtype=np.int8)
    values[horizon] = terminal_revenue(grid.levels, window, cfg)[:, None]

    tie_tol = 1e-12
    for t in range(horizon - 1, -1, -1):
        minute = (start_minute - 1 + t) % MINUTES_PER_DAY
        expected = _expected_next(values[t + 1], matrices[minute]).ravel()
        q = window[t] * dyn.cash_rate + penalty + cfg.beta * _interpolate(expected, dyn, n_states)
        best_index = np.full((grid.m, n_states), dyn.priority[0], dtype=np.int8)
        best_value = q[dyn.priority[0]].copy()
        for a in dyn.priority[1:]:
            better = q[a] > best_value + tie_tol * (1.0 + np.abs(best_value))
            best_value = np.where(better, q[a], best_value)
            best_index[better] = a
        values[t] = best_value
        chosen[t] = best_index

    logger.debug(
        "Solved T=%d, M=%d, N=%d, %d actions in %.2fs",
        horizon, grid.m, n_states, len(actions), _time.perf_counter() - started,
    )
    return Solution(ValueTable(values), PolicyTable(chosen, action_arr, grid, start_minute))


@dataclass(eq=False)
class RollingSolution:
    """Executed rolling-horizon policy and the per-solve slices that form it."""

    executed: PolicyTable
    slices: list[PolicyTable] = field(default_factory=list)


def rolling_solve(
    model: DrivingModel,
    prices: np.ndarray,
    cfg: MdpConfig,
    grid: EnergyGrid,
    re_solve_every: int,
    total_span: int,
    actions: Optional[Sequence[float]] = None,
    *,
    start_minute: int = 1,
) -> RollingSolution:
    """Re-solve every `re_solve_every` minutes over the next `cfg.horizon_minutes`.

    The executed policy concatenates the first `re_solve_every` minutes of each
    solve.

    Raises:
        DataError: the prices do not reach the end of the last solve's horizon.
    """
    if re_solve_every < 1 or total_span < 1:
        raise ConfigError("re_solve_every and total_span must be positive")
    if re_solve_every > cfg.horizon_minutes:
        raise ConfigError(
            f"re_solve_every ({re_solve_every}) cannot exceed the horizon ({cfg.horizon_minutes})"
        )
    prices = np.asarray(prices, dtype=float)
    last_start = ((total_span - 1) // re_solve_every) * re_solve_every
    needed = last_start + cfg.horizon_minutes
    if prices.size < needed:
        raise DataError(
            f"rolling over {total_span} minutes with a {cfg.horizon_minutes}-minute horizon needs "
            f"{needed} minutes of prices, got {prices.size}"
        )

    started = _time.perf_counter()
    slices = []
    for begin in range(0, total_span, re_solve_every):
        minute = (start_minute - 1 + begin) % MINUTES_PER_DAY + 1
        solution = solve(model, prices[begin:], cfg, grid, actions, start_minute=minute)
        slices.append(solution.policy.slice(0, min(re_solve_every, total_span - begin)))
    executed = PolicyTable(
        np.concatenate([s.action_index for s in slices]), slices[0].actions, grid, start_minute
    )
    logger.info(
        "Rolling solve: %d solves over %d minutes in %.1fs",
        len(slices), total_span, _time.perf_counter() - started,
    )
    return RollingSolution(executed, slices)


@dataclass(eq=False)
class PolicyEvaluation:
    """Expected outcomes of following a fixed policy from every grid state at t = 0.

    `cash` includes the terminal value; `stranded_minutes` counts expected
    (discounted) minutes of unserved driving.
    """

    cash: np.ndarray
    stranded_minutes: np.ndarray


def evaluate_policy(
    policy: PolicyTable, model: DrivingModel, prices: np.ndarray, cfg: MdpConfig
) -> PolicyEvaluation:
    """Backward evaluation of a fixed policy under the solver's interpolated dynamics."""
    horizon = policy.horizon
    cfg = cfg.with_(horizon_minutes=horizon)
    window = _check_inputs(model, prices, cfg, policy.actions)
    n_states = model.structure.n_states
    grid = policy.grid
    dyn = _action_dynamics(policy.actions, cfg, grid, n_states)
    matrices = transition_matrices(model.params)

    cash = np.broadcast_to(terminal_revenue(grid.levels, window, cfg)[:, None], (grid.m, n_states)).copy()
    stranded = np.zeros((grid.m, n_states))
    for t in range(horizon - 1, -1, -1):
        matrix = matrices[(policy.start_minute - 1 + t) % MINUTES_PER_DAY]
        pick = policy.action_index[t][None].astype(np.int64)
        cash_next = _interpolate(_expected_next(cash, matrix).ravel(), dyn, n_states)
        stranded_next = _interpolate(_expected_next(stranded, matrix).ravel(), dyn, n_states)
        cash = np.take_along_axis(window[t] * dyn.cash_rate + cfg.beta * cash_next, pick, 0)[0]
        stranded = np.take_along_axis(dyn.stranded + cfg.beta * stranded_next, pick, 0)[0]
    return PolicyEvaluation(cash, stranded)
