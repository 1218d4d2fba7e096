"""Tests for the charging MDP: dynamics, backward induction and policy tables."""

from functools import lru_cache

import numpy as np
import pytest

from ev_charging.data_ingest import MINUTES_PER_DAY
from ev_charging.driving_model import DrivingModel, DrivingModelParams, ModelStructure
from ev_charging.errors import ConfigError, DataError
from ev_charging.mdp_solver import (
    EnergyGrid,
    MdpConfig,
    PolicyTable,
    action_set,
    actual_charge,
    actual_state,
    evaluate_policy,
    feasible_charge,
    rolling_solve,
    solve,
    stage_revenue,
    step_energy,
    terminal_revenue,
)
from ev_charging.spline_glm import DiurnalProbability
from ev_charging.synthetic import ground_truth_model


def _two_state_model(exit_prob: float | np.ndarray, hidden_row: list[float]) -> DrivingModel:
    params = DrivingModelParams(
        exit_prob=DiurnalProbability.from_values(exit_prob),
        entry_dist=np.array([1.0]),
        hidden_trans=np.array([hidden_row]),
        initial_dist=np.array([1.0, 0.0]),
    )
    return DrivingModel(ModelStructure(2), params)


@pytest.mark.parametrize(
    "e,x,expected",
    [
        (0.0, 2, 1),
        (0.0, 1, 1),
        (5.0, 2, 2),
    ],
)
def test_actual_state(e: float, x: int, expected: int) -> None:
    assert actual_state(e, x, MdpConfig()) == expected


@pytest.mark.parametrize(
    "e,x,expected",
    [
        (10.0, 2, 0.0),  # driving with charge left
        (10.0, 1, 4.0),
        (0.0, 2, 4.0),  # stranded vehicles are parked and may charge
    ],
)
def test_actual_charge(e: float, x: int, expected: float) -> None:
    assert actual_charge(e, x, 4.0, MdpConfig()) == expected


def test_step_energy_examples() -> None:
    cfg = MdpConfig()
    assert step_energy(10.0, 1, 4.0, cfg) == pytest.approx(10.06)
    assert step_energy(10.0, 2, 0.0, cfg) == pytest.approx(10.0 - 40 * 0.2 / 60)
    assert step_energy(10.0, 1, 0.0, cfg) == 10.0
    # discharging draws 1 / eta_d from the battery
    assert step_energy(10.0, 1, -4.0, cfg) == pytest.approx(10.0 - 4.0 / 60 / 0.9)
    assert step_energy(0.05, 2, 0.0, cfg) == 0.0


def test_feasible_charge_truncates_at_bounds() -> None:
    cfg = MdpConfig(u_min=-4.0)
    u = feasible_charge(23.99, 4.0, cfg)
    assert u == pytest.approx(0.01 / (0.9 / 60))
    assert step_energy(23.99, 1, u, cfg) == pytest.approx(24.0)
    assert feasible_charge(24.0, 4.0, cfg) == 0.0
    assert feasible_charge(0.01, -4.0, cfg) == pytest.approx(-0.01 * 0.9 * 60)
    assert feasible_charge(0.0, -4.0, cfg) == 0.0
    assert feasible_charge(10.0, 4.0, cfg) == 4.0


def test_stage_revenue_examples() -> None:
    cfg = MdpConfig()
    assert stage_revenue(10.0, 1, 4.0, 60.0, cfg) == pytest.approx(-0.004)
    assert stage_revenue(0.0, 2, 0.0, 60.0, cfg) == pytest.approx(-10.0 / 60)
    assert stage_revenue(0.0, 2, 4.0, 60.0, cfg) == pytest.approx(-10.0 / 60 - 0.004)
    assert stage_revenue(10.0, 2, 0.0, 60.0, cfg) == 0.0


def test_terminal_revenue() -> None:
    prices = np.array([20.0, 50.0, 80.0])
    assert terminal_revenue(10.0, prices, MdpConfig()) == pytest.approx(0.45)
    assert terminal_revenue(0.0, prices, MdpConfig()) == 0.0
    assert terminal_revenue(10.0, 2 * prices, MdpConfig()) == pytest.approx(0.9)
    assert terminal_revenue(10.0, prices, MdpConfig(terminal_price="last")) == pytest.approx(0.72)
    assert terminal_revenue(10.0, prices, MdpConfig(terminal_price="max")) == pytest.approx(0.72)


@pytest.mark.parametrize(
    "changes",
    [
        {"e_max": 30.0},
        {"e_min": 5.0, "e_max": 4.0},
        {"u_min": 1.0},
        {"eta_c": 0.0},
        {"beta": 1.5},
        {"phi": -1.0},
        {"terminal_price": "median"},
    ],
)
def test_config_validation(changes: dict) -> None:
    with pytest.raises(ConfigError):
        MdpConfig().with_(**changes).validate()


def test_action_sets() -> None:
    assert action_set(MdpConfig(), "charge") == (0.0, 4.0)
    assert action_set(MdpConfig(u_min=-4.0), "v2g") == (-4.0, 0.0, 4.0)
    with pytest.raises(ConfigError, match="u_min < 0"):
        action_set(MdpConfig(), "v2g")


def test_drive_energy_per_state() -> None:
    cfg = MdpConfig(v=(30.0, 60.0), mu=(0.2,))
    np.testing.assert_allclose(cfg.drive_energy(3), [0.0, 0.1, 0.2])
    with pytest.raises(ConfigError):
        cfg.drive_energy(4)


def test_energy_grid_bracket() -> None:
    grid = EnergyGrid.from_config(MdpConfig(), m=5)
    np.testing.assert_allclose(grid.levels, [0, 6, 12, 18, 24])
    lower, weight = grid.bracket(np.array([0.0, 9.0, 24.0]))
    assert lower.tolist() == [0, 1, 3]
    np.testing.assert_allclose(weight, [0.0, 0.5, 1.0])
    assert grid.nearest(np.array([2.9, 3.0, 23.0])).tolist() == [0, 1, 4]


# Grid-aligned instance: every action lands exactly on a level.
ORACLE_CFG = MdpConfig(
    u_max=1.0,
    u_min=-1.0,
    e_max=3.0,
    e_min=0.0,
    phi=5.0,
    eta_c=1.0,
    eta_d=1.0,
    v=(1.0,),
    mu=(1.0,),
    kappa=3.0,
    omega=1.0,
    horizon_minutes=5,
)
ORACLE_PRICES = np.array([50.0, 10.0, 80.0, 30.0, 60.0])
ORACLE_START = 1438


def _oracle_model() -> DrivingModel:
    exit_prob = np.full(MINUTES_PER_DAY, 0.3)
    exit_prob[-3:] = [0.1, 0.5, 0.8]
    exit_prob[:2] = [0.25, 0.0]
    return _two_state_model(exit_prob, [0.4, 0.6])


def _expectimax(
    model: DrivingModel,
    cfg: MdpConfig,
    actions: tuple[float, ...],
    prices: np.ndarray = ORACLE_PRICES,
    start: int = ORACLE_START,
) -> np.ndarray:
    """Exhaustive expectation-maximization over all action sequences, V[t=0][e, x].

    Energy levels are the integers 0..e_max and driving uses one level per minute.
    """
    horizon = cfg.horizon_minutes
    top = int(cfg.e_max)
    mean_price = prices[:horizon].mean()
    probs = model.params.exit_prob

    @lru_cache(maxsize=None)
    def value(t: int, e: int, x: int) -> float:
        if t == horizon:
            return cfg.eta_d * e * mean_price / 1000
        p = probs.at(start + t)
        row = [1 - p, p] if x == 1 else list(model.params.hidden_trans[0])
        stranded = x == 2 and e == 0
        drives = x == 2 and e > 0
        best = -np.inf
        for a in actions:
            u = 0.0 if drives else a
            u = min(u, top - e) if u > 0 else max(u, -e)
            nxt = int(min(max(e + u - (1 if drives else 0), 0), top))
            total = -prices[t] / 1000 * u - (cfg.phi if stranded else 0.0)
            total += sum(row[k] * value(t + 1, nxt, k + 1) for k in range(2))
            best = max(best, total)
        return best

    return np.array([[value(0, e, x) for x in (1, 2)] for e in range(top + 1)])


@pytest.mark.parametrize("actions", [(0.0, 1.0), (-1.0, 0.0, 1.0)])
def test_solve_matches_exhaustive_enumeration(actions: tuple[float, ...]) -> None:
    model = _oracle_model()
    grid = EnergyGrid.from_config(ORACLE_CFG, m=4)
    solution = solve(model, ORACLE_PRICES, ORACLE_CFG, grid, actions, start_minute=ORACLE_START)
    expected = _expectimax(model, ORACLE_CFG, actions)
    np.testing.assert_allclose(solution.value.values[0], expected, rtol=1e-9, atol=1e-12)


def test_solve_matches_enumeration_on_random_instances() -> None:
    rng = np.random.default_rng(2024)
    action_choices = [(0.0, 1.0), (-1.0, 0.0, 1.0), (0.0, 1.0, 2.0)]
    for _ in range(120):
        horizon = int(rng.integers(1, 6))
        top = int(rng.integers(1, 4))
        actions = action_choices[rng.integers(len(action_choices))]
        cfg = ORACLE_CFG.with_(
            u_max=max(actions),
            u_min=min(actions),
            e_max=float(top),
            kappa=float(top),
            phi=float(rng.uniform(0.0, 20.0)),
            horizon_minutes=horizon,
        )
        start = int(rng.integers(1, MINUTES_PER_DAY + 1))
        stay = float(rng.uniform(0.05, 0.95))
        model = _two_state_model(rng.uniform(0.0, 1.0, MINUTES_PER_DAY), [1.0 - stay, stay])
        prices = rng.uniform(-20.0, 120.0, horizon)
        grid = EnergyGrid.from_config(cfg, m=top + 1)
        solution = solve(model, prices, cfg, grid, actions, start_minute=start)
        expected = _expectimax(model, cfg, actions, prices, start)
        np.testing.assert_allclose(solution.value.values[0], expected, rtol=1e-9, atol=1e-12)


def test_v2g_value_dominates_charge_only() -> None:
    cfg = MdpConfig(horizon_minutes=360, e_max=6.0, kappa=6.0, u_min=-4.0, phi=10.0)
    grid = EnergyGrid.from_config(cfg, m=31)
    prices = 40.0 + 25.0 * np.sin(np.arange(360) / 50.0)
    model = ground_truth_model()
    charge = solve(model, prices, cfg, grid, action_set(cfg, "charge"), start_minute=600)
    v2g = solve(model, prices, cfg, grid, action_set(cfg, "v2g"), start_minute=600)
    assert np.all(v2g.value.values[0] >= charge.value.values[0] - 1e-12)


def test_penalty_trades_cost_for_availability() -> None:
    cfg = MdpConfig(horizon_minutes=480, e_max=4.0, kappa=4.0, u_min=-4.0)
    grid = EnergyGrid.from_config(cfg, m=41)
    prices = 40.0 + 20.0 * np.sin(np.arange(480) / 60.0)
    model = ground_truth_model()
    outcomes = []
    for phi in (2.0, 5.0, 10.0, 100.0, 1000.0):
        penalized = cfg.with_(phi=phi)
        policy = solve(model, prices, penalized, grid, action_set(penalized, "v2g"), start_minute=360).policy
        outcomes.append(evaluate_policy(policy, model, prices, penalized))
    for low, high in zip(outcomes, outcomes[1:]):
        assert np.all(high.stranded_minutes <= low.stranded_minutes + 1e-9)
        assert np.all(high.cash <= low.cash + 1e-9)


def test_terminal_layer_is_exact() -> None:
    cfg = MdpConfig(horizon_minutes=30)
    grid = EnergyGrid.from_config(cfg, m=13)
    prices = np.linspace(10.0, 70.0, 30)
    solution = solve(ground_truth_model(), prices, cfg, grid)
    expected = terminal_revenue(grid.levels, prices, cfg)
    for x in range(3):
        np.testing.assert_array_equal(solution.value.values[-1, :, x], expected)
    assert np.all(np.isfinite(solution.value.values))


def test_zero_prices_and_no_penalty_give_zero_value() -> None:
    cfg = MdpConfig(phi=0.0, horizon_minutes=120)
    grid = EnergyGrid.from_config(cfg, m=25)
    solution = solve(ground_truth_model(), np.zeros(120), cfg, grid, start_minute=400)
    np.testing.assert_allclose(solution.value.values, 0.0, atol=1e-15)
    # zero-cost ties resolve to idling
    assert np.all(solution.policy.u == 0.0)


@pytest.mark.parametrize("mode", ["charge", "v2g"])
def test_full_battery_never_charges(mode: str) -> None:
    cfg = MdpConfig(u_min=-4.0, horizon_minutes=180)
    grid = EnergyGrid.from_config(cfg, m=37)
    prices = 40.0 + 30.0 * np.sin(np.arange(180) / 20.0)
    solution = solve(ground_truth_model(), prices, cfg, grid, action_set(cfg, mode), start_minute=420)
    assert np.all(solution.policy.u[:, -1, :] <= 0.0)
    assert np.all(solution.policy.u >= cfg.u_min)
    assert np.all(solution.policy.u <= cfg.u_max)


def test_value_non_decreasing_in_energy() -> None:
    cfg = MdpConfig(u_min=-4.0, horizon_minutes=240)
    grid = EnergyGrid.from_config(cfg, m=49)
    prices = np.abs(40.0 + 25.0 * np.cos(np.arange(240) / 30.0))
    # the vehicle never leaves the parked state
    model = _two_state_model(0.0, [0.1, 0.9])
    solution = solve(model, prices, cfg, grid, action_set(cfg, "v2g"))
    parked = solution.value.values[:, :, 0]
    assert np.all(np.diff(parked, axis=1) >= -1e-12)


def test_short_prices_are_rejected() -> None:
    cfg = MdpConfig(horizon_minutes=100)
    with pytest.raises(DataError, match="horizon needs 100"):
        solve(ground_truth_model(), np.ones(99), cfg, EnergyGrid.from_config(cfg, m=5))


def test_policy_evaluation_reproduces_values() -> None:
    cfg = MdpConfig(horizon_minutes=300, phi=20.0)
    grid = EnergyGrid.from_config(cfg, m=25)
    prices = 30.0 + 10.0 * np.cos(np.arange(300) / 45.0)
    model = ground_truth_model()
    solution = solve(model, prices, cfg, grid, start_minute=360)
    evaluation = evaluate_policy(solution.policy, model, prices, cfg)
    penalty = cfg.omega * cfg.phi * evaluation.stranded_minutes
    np.testing.assert_allclose(evaluation.cash - penalty, solution.value.values[0], rtol=1e-9, atol=1e-12)


def test_higher_penalty_strands_less() -> None:
    cfg = MdpConfig(horizon_minutes=480, e_max=4.0, kappa=4.0)
    grid = EnergyGrid.from_config(cfg, m=41)
    prices = 40.0 + 20.0 * np.sin(np.arange(480) / 60.0)
    model = ground_truth_model()
    stranded = []
    for phi in (0.0, 2.0, 10.0, 100.0):
        policy = solve(model, prices, cfg.with_(phi=phi), grid, start_minute=360).policy
        stranded.append(evaluate_policy(policy, model, prices, cfg.with_(phi=phi)).stranded_minutes)
    for low, high in zip(stranded, stranded[1:]):
        assert np.all(high <= low + 1e-6)


def test_rolling_with_single_window_equals_solve() -> None:
    cfg = MdpConfig(horizon_minutes=120)
    grid = EnergyGrid.from_config(cfg, m=13)
    prices = 35.0 + 15.0 * np.sin(np.arange(120) / 17.0)
    model = ground_truth_model()
    single = solve(model, prices, cfg, grid, start_minute=1400)
    rolled = rolling_solve(model, prices, cfg, grid, 120, 120, start_minute=1400)
    assert len(rolled.slices) == 1
    np.testing.assert_array_equal(rolled.executed.action_index, single.policy.action_index)
    assert rolled.executed.start_minute == 1400


def test_rolling_concatenates_slices() -> None:
    cfg = MdpConfig(horizon_minutes=90)
    grid = EnergyGrid.from_config(cfg, m=9)
    prices = 35.0 + 15.0 * np.sin(np.arange(240) / 17.0)
    model = ground_truth_model()
    rolled = rolling_solve(model, prices, cfg, grid, 30, 100, start_minute=1430)
    assert [s.horizon for s in rolled.slices] == [30, 30, 30, 10]
    assert rolled.executed.horizon == 100
    # the second solve starts 30 minutes later, past midnight
    assert rolled.slices[1].start_minute == 20
    second = solve(model, prices[30:], cfg, grid, start_minute=20)
    np.testing.assert_array_equal(rolled.executed.action_index[30:60], second.policy.action_index[:30])


def test_rolling_needs_prices_past_last_horizon() -> None:
    cfg = MdpConfig(horizon_minutes=60)
    grid = EnergyGrid.from_config(cfg, m=5)
    with pytest.raises(DataError, match="needs 150 minutes"):
        rolling_solve(ground_truth_model(), np.ones(149), cfg, grid, 30, 120)
    with pytest.raises(ConfigError):
        rolling_solve(ground_truth_model(), np.ones(500), cfg, grid, 61, 120)


def test_policy_table_views(tmp_path) -> None:
    cfg = MdpConfig(u_min=-4.0, horizon_minutes=6)
    grid = EnergyGrid.from_config(cfg, m=4)
    index = np.random.default_rng(1).integers(0, 3, size=(6, 4, 3)).astype(np.int8)
    table = PolicyTable(index, np.array([-4.0, 0.0, 4.0]), grid, start_minute=1439)

    assert set(np.unique(table.action_codes())) <= {-1, 0, 1}
    assert table.decide(2, 7.9, 2) == table.u[2, 1, 1]
    assert table.slice(2, 5).start_minute == 1
    assert table.slice(2, 5).horizon == 3

    frame = table.to_frame()
    assert list(frame.columns) == ["t", "energy_idx", "driving_state", "action"]
    assert len(frame) == 6 * 4 * 3
    assert frame["driving_state"].between(1, 3).all()

    heatmap = table.heatmap_frame()
    assert list(heatmap.columns) == ["minute", "0", "33.33", "66.67", "100"]
    assert heatmap["minute"].tolist() == [1439, 1440, 1, 2, 3, 4]

    again = PolicyTable.load_npz(table.save_npz(tmp_path / "policy.npz"))
    np.testing.assert_array_equal(again.action_index, table.action_index)
    np.testing.assert_array_equal(again.grid.levels, grid.levels)
    assert again.start_minute == 1439
