"""Tests for policy replay, rule-of-thumb policies and comparison tables."""

from datetime import datetime

import numpy as np
import pytest

from ev_charging.data_ingest import MINUTES_PER_DAY, DrivingTrace
from ev_charging.errors import ConfigError, DataError
from ev_charging.mdp_solver import EnergyGrid, MdpConfig, action_set, rolling_solve, solve
from ev_charging.policy_sim import (
    SUMMARY_COLUMNS,
    TRACE_COLUMNS,
    OptimalPolicy,
    PolicyEntry,
    RollingPolicy,
    RuleOfThumbSpec,
    ScenarioSettings,
    SimulationReport,
    evaluate_matrix,
    evaluate_scenarios,
    hourly_quantiles,
    make_rule_of_thumb,
    simulate_policy,
    stranded_event_count,
)
from ev_charging.synthetic import generate_prices, generate_trace, ground_truth_model

MONDAY = datetime(2012, 1, 2)
V2G_CFG = MdpConfig(u_min=-4.0)


class Idle:
    def decide(self, t: int, minute: int, energy: float, state: int, prices: np.ndarray) -> float:
        return 0.0


class Constant:
    def __init__(self, u: float) -> None:
        self.u = u

    def decide(self, t: int, minute: int, energy: float, state: int, prices: np.ndarray) -> float:
        return self.u


def _ramp_prices() -> np.ndarray:
    """Two days of per-minute prices climbing from 20 at 00:00 to 66 at 23:00.

    Over any 24-hour window the 20%, 30% and 90% quantiles are 29.2, 33.8 and 61.4.
    """
    hourly = 20.0 + 2.0 * (np.arange(48) % 24)
    return np.repeat(hourly, 60)


def test_idle_from_empty_is_stranded_once() -> None:
    trace = DrivingTrace(MONDAY, np.array([1, 1, 2, 2, 2, 1, 1]))
    report = simulate_policy(Idle(), trace, np.full(7, 50.0), MdpConfig(), initial_energy=0.0)
    assert report.stranded_events == 1
    assert report.stranded_minutes == 3
    assert report.total_cost == 0.0
    assert np.all(report.soc_trace == 0.0)


def test_naive_with_full_battery_all_parked() -> None:
    trace = DrivingTrace(MONDAY, np.ones(600, dtype=int))
    policy = make_rule_of_thumb(RuleOfThumbSpec.naive(), np.full(600, 40.0), MdpConfig())
    report = simulate_policy(policy, trace, np.full(600, 40.0), MdpConfig())
    assert np.all(report.action_trace == 0.0)
    assert report.total_cost == 0.0
    assert report.final_energy == 24.0


def test_naive_charges_when_parked_below_full() -> None:
    cfg = MdpConfig()
    policy = make_rule_of_thumb(RuleOfThumbSpec.naive(), _ramp_prices(), cfg)
    assert policy.decide(0, 1, 10.0, 1, _ramp_prices()) == cfg.u_max
    assert policy.decide(0, 1, 10.0, 2, _ramp_prices()) == 0.0


@pytest.mark.parametrize(
    "minute,energy,expected",
    [
        (721, 0.8 * 24, 0.0),  # 12:00, above the floor
        (721, 0.4 * 24, 4.0),  # below the floor
        (1321, 0.8 * 24, 4.0),  # 22:00 opens the window
        (361, 0.8 * 24, 0.0),  # 06:00 closes it
        (1, 0.8 * 24, 4.0),
    ],
)
def test_night_rule(minute: int, energy: float, expected: float) -> None:
    prices = _ramp_prices()
    policy = make_rule_of_thumb(RuleOfThumbSpec.night(), prices, MdpConfig())
    assert policy.decide(0, minute, energy, 1, prices) == expected


def test_low_price_rule() -> None:
    prices = _ramp_prices()
    policy = make_rule_of_thumb(RuleOfThumbSpec.low_price(), prices, MdpConfig())
    # 20 at 00:00 is cheap, 40 at 10:00 is not
    assert policy.decide(0, 1, 20.0, 1, prices) == 4.0
    assert policy.decide(600, 601, 20.0, 1, prices) == 0.0
    assert policy.decide(600, 601, 10.0, 1, prices) == 4.0


def test_v2g_bounded_floor_binds() -> None:
    prices = _ramp_prices()
    policy = make_rule_of_thumb(RuleOfThumbSpec.v2g(bounded=True), prices, V2G_CFG)
    t = 23 * 60
    assert policy.decide(t, t + 1, 0.25 * 24, 1, prices) == 0.0
    assert policy.decide(t, t + 1, 12.0, 1, prices) == -4.0
    # close to the floor the rate stops exactly at it
    u = policy.decide(t, t + 1, 6.01, 1, prices)
    assert u == pytest.approx(-0.01 * 0.9 * 60)


def test_v2g_unbounded_rule() -> None:
    prices = _ramp_prices()
    policy = make_rule_of_thumb(RuleOfThumbSpec.v2g(bounded=False), prices, V2G_CFG)
    assert policy.decide(1380, 1381, 24.0, 1, prices) == -4.0
    assert policy.decide(0, 1, 24.0, 1, prices) == 0.0
    assert policy.decide(0, 1, 12.0, 1, prices) == 4.0
    assert policy.decide(600, 601, 12.0, 1, prices) == 0.0
    with pytest.raises(ConfigError, match="u_min < 0"):
        make_rule_of_thumb(RuleOfThumbSpec.v2g(bounded=False), prices, MdpConfig())


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "always"},
        {"kind": "night", "soc_floor": 1.5},
        {"kind": "low_price", "buy_quantile": -0.1},
        {"kind": "night", "night_start": 1440},
    ],
)
def test_rule_spec_validation(kwargs: dict) -> None:
    with pytest.raises(ConfigError):
        RuleOfThumbSpec(**kwargs)


def test_default_buy_quantiles() -> None:
    assert RuleOfThumbSpec.low_price().effective_buy_quantile == 0.2
    assert RuleOfThumbSpec.v2g(bounded=True).effective_buy_quantile == 0.3
    assert RuleOfThumbSpec("low_price", buy_quantile=0.1).effective_buy_quantile == 0.1


def test_hourly_quantiles_use_the_next_day() -> None:
    prices = np.repeat(np.arange(48, dtype=float), 60)
    q = hourly_quantiles(prices, 0.0)
    assert q.size == 48
    assert q[0] == 0.0
    assert q[30] == 30.0
    # the window shrinks at the end of the series
    assert hourly_quantiles(prices, 1.0)[47] == 47.0
    assert hourly_quantiles(prices, 1.0)[0] == 23.0


@pytest.mark.parametrize(
    "soc,desired,expected",
    [
        ([5, 5, 5, 5], [1, 2, 2, 1], 0),
        ([5] + [0] * 30 + [5], [1] + [2] * 30 + [1], 1),
        ([0, 0, 3, 0, 0], [2, 2, 2, 2, 2], 2),
        ([0, 0, 0], [2, 1, 2], 2),
    ],
)
def test_stranded_event_count(soc: list[float], desired: list[int], expected: int) -> None:
    assert stranded_event_count(np.array(soc, dtype=float), np.array(desired)) == expected


def test_span_mismatch() -> None:
    trace = DrivingTrace(MONDAY, np.ones(10, dtype=int))
    with pytest.raises(DataError, match="prices cover 9"):
        simulate_policy(Idle(), trace, np.ones(9), MdpConfig())


def test_bookkeeping_and_bounds() -> None:
    days = 3
    path = generate_trace(days, 4)
    prices = generate_prices(days * 24, 4).to_minutes()
    cfg = V2G_CFG.with_(e_max=20.0, e_min=2.0)
    policy = make_rule_of_thumb(RuleOfThumbSpec.v2g(bounded=False), prices, cfg)
    report = simulate_policy(policy, path.hidden, prices, cfg, initial_energy=10.0)

    assert report.soc_trace.size == days * MINUTES_PER_DAY
    assert report.soc_trace.min() >= cfg.e_min - 1e-9
    assert report.soc_trace.max() <= cfg.e_max + 1e-9
    assert report.energy_purchased > 0 and report.energy_sold > 0
    expected_final = (
        report.initial_energy
        + cfg.eta_c * report.energy_purchased
        - report.energy_sold / cfg.eta_d
        - report.driving_consumption
    )
    assert report.final_energy == pytest.approx(expected_final, abs=1e-9)
    cash = np.sum(prices * report.action_trace) / 1000 / 60
    assert report.total_cost == pytest.approx(cash, abs=1e-9)
    assert report.daily_cost_mean == pytest.approx(report.total_cost / days)

    frame = report.to_frame()
    assert list(frame.columns) == list(TRACE_COLUMNS)
    assert frame["minute"].iloc[0] == 1


def test_replay_is_deterministic_and_rows_identical() -> None:
    path = generate_trace(2, 9)
    prices = generate_prices(48, 9).to_minutes()
    cfg = MdpConfig()
    night = make_rule_of_thumb(RuleOfThumbSpec.night(), prices, cfg)
    policies = [PolicyEntry("night", night), PolicyEntry("night", night), PolicyEntry("idle", Idle())]
    table = evaluate_matrix(policies, path.observed, prices, cfg, initial_energy=12.0)
    again = evaluate_matrix(policies, path.observed, prices, cfg, initial_energy=12.0)

    assert list(table.columns) == list(SUMMARY_COLUMNS)
    assert table.iloc[0].drop("policy").equals(table.iloc[1].drop("policy"))
    assert table.equals(again)
    assert table.loc[2, "energy_bought_kwh"] == 0.0


def test_stranded_vehicle_charges_and_resumes() -> None:
    trace = DrivingTrace(MONDAY, np.array([2, 2, 2, 2]))
    report = simulate_policy(Constant(4.0), trace, np.full(4, 60.0), MdpConfig(), initial_energy=0.0)
    # minute 0 is stranded and charges; minute 1 drives on the charge it gained
    assert report.action_trace[0] == 4.0
    assert report.soc_trace[1] == pytest.approx(0.06)
    assert report.action_trace[1] == 0.0
    assert report.stranded_events == 2
    assert report.total_cost == pytest.approx(0.004 * 2)


def test_optimal_policy_replay() -> None:
    cfg = MdpConfig(horizon_minutes=240, phi=100.0)
    grid = EnergyGrid.from_config(cfg, m=49)
    model = ground_truth_model()
    prices = generate_prices(8, 2, start=datetime(2012, 1, 2, 6)).to_minutes()
    solution = solve(model, prices, cfg, grid, start_minute=361)
    path = generate_trace(1, 6)
    driving = path.hidden.slice(360, 360 + 240)

    nearest = OptimalPolicy(solution.policy)
    lookahead = OptimalPolicy(solution.policy, lookup="lookahead", values=solution.value, model=model, cfg=cfg)
    for policy in (nearest, lookahead):
        report = simulate_policy(policy, driving, prices[:240], cfg, initial_energy=12.0)
        assert np.all((report.action_trace >= 0.0) & (report.action_trace <= cfg.u_max))
        assert report.soc_trace.max() <= cfg.e_max + 1e-9

    with pytest.raises(ConfigError, match="lookahead"):
        OptimalPolicy(solution.policy, lookup="lookahead")
    with pytest.raises(DataError, match="policy table covers"):
        simulate_policy(nearest, path.hidden.slice(0, 241), prices[:241], cfg)


def test_rolling_policy_replay() -> None:
    cfg = MdpConfig(horizon_minutes=120)
    grid = EnergyGrid.from_config(cfg, m=13)
    model = ground_truth_model()
    prices = generate_prices(5, 8).to_minutes()
    rolled = rolling_solve(model, prices, cfg, grid, 60, 180, start_minute=1)
    driving = generate_trace(1, 3).hidden.slice(0, 180)
    report = simulate_policy(RollingPolicy(rolled), driving, prices[:180], cfg, initial_energy=6.0)
    assert report.soc_trace.size == 180


def test_scenarios_do_not_depend_on_threads() -> None:
    prices = generate_prices(24, 1).to_minutes()
    cfg = MdpConfig()
    policies = [
        PolicyEntry("naive", make_rule_of_thumb(RuleOfThumbSpec.naive(), prices, cfg)),
        PolicyEntry("idle", Idle()),
    ]
    model = ground_truth_model()
    single = evaluate_scenarios(policies, model, prices, cfg, ScenarioSettings(n_scenarios=4, seed=3, initial_energy=4.0))
    pooled = evaluate_scenarios(
        policies, model, prices, cfg, ScenarioSettings(n_scenarios=4, seed=3, threads=2, initial_energy=4.0)
    )
    assert single.equals(pooled)
    assert single["policy"].tolist() == ["naive", "idle"]
    assert (single["scenarios"] == 4).all()
    assert {"cost_se", "events_se"} <= set(single.columns)
    idle = single.set_index("policy").loc["idle"]
    assert idle["mean_daily_cost"] == 0.0
    assert idle["energy_bought_kwh"] == 0.0


def test_scenarios_keep_one_row_per_penalty() -> None:
    prices = generate_prices(3, 1).to_minutes()
    policies = [
        PolicyEntry("constant", Constant(1.0), 2.0),
        PolicyEntry("constant", Constant(2.0), 1000.0),
        PolicyEntry("idle", Idle()),
    ]
    summary = evaluate_scenarios(
        policies, ground_truth_model(), prices, MdpConfig(), ScenarioSettings(n_scenarios=3, initial_energy=4.0)
    )
    assert list(summary.columns[: len(SUMMARY_COLUMNS)]) == list(SUMMARY_COLUMNS)
    assert summary["policy"].tolist() == ["constant", "constant", "idle"]
    assert summary["phi"].iloc[:2].tolist() == [2.0, 1000.0]
    assert np.isnan(summary["phi"].iloc[2])
    low, high = summary.iloc[0], summary.iloc[1]
    assert high["energy_bought_kwh"] > low["energy_bought_kwh"]


REPLAY_DAYS = 4
REPLAY_SPAN = REPLAY_DAYS * MINUTES_PER_DAY


def _replay_days(seed: int) -> tuple[DrivingTrace, np.ndarray]:
    """A few days of hidden driving and strongly diurnal prices reaching one day past the replay."""
    driving = generate_trace(REPLAY_DAYS, seed).hidden
    prices = generate_prices(24 * (REPLAY_DAYS + 1), seed, amplitude=25.0, noise=2.0).to_minutes()
    return driving, prices


def _optimal_report(
    driving: DrivingTrace, prices: np.ndarray, cfg: MdpConfig, mode: str = "charge"
) -> SimulationReport:
    # the table runs one day past the replay so the last evening still sees the next night's prices
    cfg = cfg.with_(horizon_minutes=prices.size)
    model = ground_truth_model()
    solution = solve(model, prices, cfg, EnergyGrid.from_config(cfg, m=49), action_set(cfg, mode), start_minute=1)
    return simulate_policy(OptimalPolicy(solution.policy), driving, prices[:REPLAY_SPAN], cfg)


@pytest.mark.parametrize("seed", [1, 2])
def test_optimal_beats_rules_of_thumb(seed: int) -> None:
    driving, prices = _replay_days(seed)
    cfg = MdpConfig(phi=10.0)
    costs = {}
    for name, spec in (
        ("low_price", RuleOfThumbSpec.low_price()),
        ("night", RuleOfThumbSpec.night()),
        ("naive", RuleOfThumbSpec.naive()),
    ):
        rule = make_rule_of_thumb(spec, prices, cfg)
        costs[name] = simulate_policy(rule, driving, prices[:REPLAY_SPAN], cfg).daily_cost_mean
    optimal = _optimal_report(driving, prices, cfg)

    assert optimal.stranded_events == 0
    assert optimal.daily_cost_mean < costs["low_price"] < costs["night"] < costs["naive"]


def test_v2g_is_cheaper_than_charging_only() -> None:
    driving, prices = _replay_days(3)
    cfg = V2G_CFG.with_(phi=10.0)
    charge = _optimal_report(driving, prices, cfg, "charge")
    v2g = _optimal_report(driving, prices, cfg, "v2g")
    assert v2g.energy_sold > 0.0
    assert v2g.daily_cost_mean < charge.daily_cost_mean


def test_higher_penalty_keeps_more_charge() -> None:
    driving, prices = _replay_days(4)
    traces = [_optimal_report(driving, prices, V2G_CFG.with_(phi=phi), "v2g").soc_trace for phi in (2.0, 10.0, 100.0)]
    step = V2G_CFG.e_max / 48
    for low, high in zip(traces, traces[1:]):
        assert high.mean() >= low.mean() - 1e-9
        assert np.mean(high >= low - step) >= 0.95


def test_rolling_agrees_with_fixed_in_first_day() -> None:
    cfg = MdpConfig(horizon_minutes=2 * MINUTES_PER_DAY)
    grid = EnergyGrid.from_config(cfg, m=49)
    model = ground_truth_model()
    prices = generate_prices(96, 5).to_minutes()
    fixed = solve(model, prices, cfg, grid, start_minute=1)
    rolled = rolling_solve(model, prices, cfg, grid, 60, MINUTES_PER_DAY, start_minute=1)

    driving = generate_trace(1, 5).hidden
    first_day = prices[:MINUTES_PER_DAY]
    fixed_run = simulate_policy(OptimalPolicy(fixed.policy), driving, first_day, cfg, initial_energy=12.0)
    rolled_run = simulate_policy(RollingPolicy(rolled), driving, first_day, cfg, initial_energy=12.0)
    assert np.mean(fixed_run.action_trace == rolled_run.action_trace) >= 0.95
