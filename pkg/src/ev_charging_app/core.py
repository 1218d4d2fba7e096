"""
EV Charging Core Module

Wires the library stages into LangGraph workflows: one per command
(`fit`, `solve`, `simulate`, `evaluate`, `generate`).
"""

import dataclasses
import logging
import math
from datetime import datetime, time
from functools import partial
from pathlib import Path
from typing import Any, Callable, Literal

import numpy as np
import pandas as pd
from langgraph.graph import StateGraph

from ev_charging.data_ingest import (
    DrivingTrace,
    PriceSeries,
    count_transitions,
    load_prices,
    load_trace,
    split_train_test,
    write_prices,
    write_trace,
)
from ev_charging.driving_model import (
    PARKED,
    DrivingModel,
    filter_hidden_states,
    select_model_order,
)
from ev_charging.errors import ConfigError
from ev_charging.mdp_solver import EnergyGrid, MdpConfig, action_set, rolling_solve, solve
from ev_charging.policy_sim import (
    OptimalPolicy,
    PolicyEntry,
    RollingPolicy,
    RuleOfThumbSpec,
    ScenarioSettings,
    evaluate_scenarios,
    make_rule_of_thumb,
    replay_all,
    summary_frame,
)
from ev_charging.spline_glm import refine_knots
from ev_charging.synthetic import generate_prices, generate_trace
from ev_charging.workflow import PipelineState, create_workflow

from .config import KNOWN_POLICIES, RunConfig

logger = logging.getLogger(__name__)

Command = Literal["fit", "solve", "simulate", "evaluate", "generate"]

RULES: dict[str, RuleOfThumbSpec] = {
    "naive": RuleOfThumbSpec.naive(),
    "night": RuleOfThumbSpec.night(),
    "low_price": RuleOfThumbSpec.low_price(),
    "v2g_unbounded": RuleOfThumbSpec.v2g(bounded=False),
    "v2g_bounded": RuleOfThumbSpec.v2g(bounded=True),
}


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given; set it in the config file, the environment or by flag")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg.out_dir


def _phi_tag(phi: float) -> str:
    return f"phi{phi:g}"


# Ingestion


def load_driving(cfg: RunConfig, state: PipelineState) -> dict[str, Any]:
    trace = load_trace(_require(cfg.trip_log, "trip log"))
    if cfg.split_date is None:
        return {"trace": trace, "test_trace": trace}
    train, test = split_train_test(trace, cfg.split_date)
    logger.info("Split at %s: %d training and %d test minutes", cfg.split_date, train.n_minutes, test.n_minutes)
    return {"trace": train, "test_trace": test}


def load_model_and_prices(cfg: RunConfig, state: PipelineState) -> dict[str, Any]:
    return {
        "model": DrivingModel.load(_require(cfg.model, "model file")),
        "prices": load_prices(_require(cfg.prices, "price file")),
    }


# Fitting


def fit_exit_probability(cfg: RunConfig, state: PipelineState) -> dict[str, Any]:
    counts = count_transitions(state["trace"], cfg.day_filter)
    exit_prob = refine_knots(
        counts, PARKED, cfg.init_knots, cfg.max_knots, cfg.lr_alpha, periodic=cfg.periodic
    )
    return {"counts": counts, "exit_prob": exit_prob}


def fit_model_order(cfg: RunConfig, state: PipelineState) -> dict[str, Any]:
    selection = select_model_order(
        state["trace"],
        state["exit_prob"],
        cfg.max_states,
        cfg.lr_alpha,
        n_starts=cfg.n_starts,
        seed=cfg.seed,
        threads=cfg.threads,
        day_filter=cfg.day_filter,
    )
    return {"model": DrivingModel(selection.structure, selection.params, selection.ladder)}


def write_model(cfg: RunConfig, state: PipelineState) -> dict[str, Any]:
    path = state["model"].save(_out_dir(cfg) / "model.json")
    return {"outputs": [str(path)]}


# Solving


def _grid(cfg: RunConfig, mdp: MdpConfig) -> EnergyGrid:
    return EnergyGrid.from_config(mdp, cfg.grid_levels)


def solve_policies(cfg: RunConfig, state: PipelineState) -> dict[str, Any]:
    model: DrivingModel = state["model"]
    prices: PriceSeries = state["prices"]
    window = prices.window(prices.start, cfg.horizon_minutes)
    out_dir = _out_dir(cfg)
    outputs, solutions = [], {}
    for phi in cfg.phis:
        mdp = cfg.mdp_config(phi)
        solution = solve(
            model, window, mdp, _grid(cfg, mdp), action_set(mdp, cfg.mode), start_minute=prices.start_minute
        )
        solutions[phi] = solution
        tag = f"{cfg.mode}_{_phi_tag(phi)}"
        paths = [
            solution.policy.save_npz(out_dir / f"policy_{tag}.npz", solution.value),
            out_dir / f"heatmap_{tag}.csv",
        ]
        solution.policy.heatmap_frame().to_csv(paths[1], index=False)
        if cfg.long_csv:
            paths.append(out_dir / f"policy_{tag}.csv")
            solution.policy.to_frame(solution.value).to_csv(paths[-1], index=False)
        outputs.extend(str(p) for p in paths)
    return {"solutions": solutions, "outputs": outputs}


# Simulation


class _Replay:
    """Span, start and prices shared by every policy of one replay."""

    def __init__(self, cfg: RunConfig, state: PipelineState) -> None:
        prices: PriceSeries = state["prices"]
        if cfg.scenarios > 0:
            self.start = prices.start
            span = cfg.days * 24 * 60
            self.driving: DrivingTrace | None = None
        else:
            test: DrivingTrace = state["test_trace"]
            self.start = test.start
            span = test.n_minutes
            model: DrivingModel = state["model"]
            self.driving = filter_hidden_states(model, test) if model.structure.n_states > 2 else test
        if cfg.fixed_horizon and span > cfg.horizon_minutes:
            logger.warning("Fixed horizon: replay shortened to %d minutes", cfg.horizon_minutes)
            span = cfg.horizon_minutes
            if self.driving is not None:
                self.driving = self.driving.slice(0, span)
        self.span = span
        self.prices = prices.window(self.start, span + cfg.horizon_minutes)
        self.start_minute = self.start.hour * 60 + self.start.minute + 1


def _optimal_entry(
    cfg: RunConfig, model: DrivingModel, replay: _Replay, name: str, phi: float
) -> PolicyEntry:
    mode = "v2g" if name == "optimal_v2g" else cfg.mode
    mdp = cfg.mdp_config(phi, mode=mode)
    grid = _grid(cfg, mdp)
    actions = action_set(mdp, mode)
    if cfg.fixed_horizon:
        solution = solve(model, replay.prices, mdp, grid, actions, start_minute=replay.start_minute)
        policy: OptimalPolicy = OptimalPolicy(
            solution.policy, lookup=cfg.lookup, values=solution.value, model=model, cfg=mdp
        )
    else:
        if cfg.lookup != "nearest":
            logger.warning("Rolling policies use nearest-level lookup")
        rolling = rolling_solve(
            model, replay.prices, mdp, grid, cfg.roll_every_minutes, replay.span, actions,
            start_minute=replay.start_minute,
        )
        policy = RollingPolicy(rolling)
    return PolicyEntry(name, policy, phi)


def build_policies(cfg: RunConfig, state: PipelineState) -> dict[str, Any]:
    replay = _Replay(cfg, state)
    model: DrivingModel = state["model"]
    replay_cfg = cfg.mdp_config(mode="v2g" if any("v2g" in p for p in cfg.policies) else "charge")
    entries = []
    for name in cfg.policies:
        if name in RULES:
            rule_cfg = replay_cfg if "v2g" in name else cfg.mdp_config(mode="charge")
            # thresholds look a day ahead, past the end of the replay
            entries.append(PolicyEntry(name, make_rule_of_thumb(RULES[name], replay.prices, rule_cfg)))
            continue
        for phi in cfg.phis:
            entries.append(_optimal_entry(cfg, model, replay, name, phi))
    return {"policies": {"entries": entries, "replay": replay, "cfg": replay_cfg}}


def replay_policies(cfg: RunConfig, state: PipelineState, summary_name: str) -> dict[str, Any]:
    entries: list[PolicyEntry] = state["policies"]["entries"]
    replay: _Replay = state["policies"]["replay"]
    replay_cfg: MdpConfig = state["policies"]["cfg"]
    prices = replay.prices[: replay.span]
    initial_energy = replay_cfg.e_min + cfg.initial_soc * (replay_cfg.e_max - replay_cfg.e_min)
    out_dir = _out_dir(cfg)
    outputs = []

    if replay.driving is None:
        settings = ScenarioSettings(
            n_scenarios=cfg.scenarios,
            seed=cfg.seed,
            threads=cfg.threads,
            start_minute=replay.start_minute,
            start_date=replay.start.date(),
            initial_energy=initial_energy,
        )
        summary = evaluate_scenarios(entries, state["model"], prices, replay_cfg, settings)
    else:
        reports = replay_all(entries, replay.driving, prices, replay_cfg, initial_energy)
        summary = summary_frame(entries, reports)
        trace_dir = out_dir / "traces"
        trace_dir.mkdir(exist_ok=True)
        for entry, report in zip(entries, reports):
            suffix = "" if entry.phi is None else f"_{_phi_tag(entry.phi)}"
            path = trace_dir / f"{entry.name}{suffix}.csv"
            report.to_frame().to_csv(path, index=False)
            outputs.append(str(path))

    summary_path = out_dir / summary_name
    summary.to_csv(summary_path, index=False, float_format="%.6f")
    outputs.append(str(summary_path))
    return {"summary": summary, "outputs": outputs}


# Generation


def generate_data(cfg: RunConfig, state: PipelineState) -> dict[str, Any]:
    trace_seed, price_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    path = generate_trace(cfg.days, trace_seed, trips_per_day=cfg.trips_per_day)
    start = datetime.combine(path.observed.start.date(), time())
    hours = cfg.days * 24 + math.ceil(cfg.horizon_minutes / 60)
    prices = generate_prices(hours, price_seed, start=start)
    out_dir = _out_dir(cfg)
    outputs = [
        write_trace(path.observed, out_dir / "trips.csv"),
        write_trace(path.hidden, out_dir / "trips_hidden.csv"),
        write_prices(prices, out_dir / "prices.csv"),
    ]
    return {"trace": path.observed, "prices": prices, "outputs": [str(p) for p in outputs]}


# Workflows


def build_workflow(command: Command, cfg: RunConfig) -> StateGraph:
    """The stage graph of one command, bound to `cfg`."""
    stages: dict[str, list[tuple[str, Callable[..., dict[str, Any]]]]] = {
        "generate": [("generate", partial(generate_data, cfg))],
        "fit": [
            ("ingest", partial(load_driving, cfg)),
            ("exit_probability", partial(fit_exit_probability, cfg)),
            ("model_order", partial(fit_model_order, cfg)),
            ("write_model", partial(write_model, cfg)),
        ],
        "solve": [
            ("load_inputs", partial(load_model_and_prices, cfg)),
            ("solve", partial(solve_policies, cfg)),
        ],
    }
    replay_stages = [
        ("load_inputs", partial(load_model_and_prices, cfg)),
        ("build_policies", partial(build_policies, cfg)),
    ]
    if cfg.scenarios == 0:
        replay_stages.insert(0, ("ingest", partial(load_driving, cfg)))
    stages["simulate"] = replay_stages + [("replay", partial(replay_policies, cfg, summary_name="summary.csv"))]
    stages["evaluate"] = replay_stages + [("replay", partial(replay_policies, cfg, summary_name="evaluation.csv"))]
    if command not in stages:
        raise ConfigError(f"unknown command {command!r}")
    return create_workflow(stages[command])


def run_command(command: Command, cfg: RunConfig) -> PipelineState:
    if command == "evaluate":
        cfg = dataclasses.replace(cfg, policies=list(KNOWN_POLICIES), mode="charge")
    cfg.validate()
    logger.info("Running %s with %r", command, cfg)
    app = build_workflow(command, cfg).compile()
    return app.invoke({"outputs": [], "timings": []})


def cmd_generate(cfg: RunConfig) -> PipelineState:
    return run_command("generate", cfg)


def cmd_fit(cfg: RunConfig) -> PipelineState:
    return run_command("fit", cfg)


def cmd_solve(cfg: RunConfig) -> PipelineState:
    return run_command("solve", cfg)


def cmd_simulate(cfg: RunConfig) -> PipelineState:
    return run_command("simulate", cfg)


def cmd_evaluate(cfg: RunConfig) -> PipelineState:
    return run_command("evaluate", cfg)


def describe(command: Command, state: PipelineState) -> list[str]:
    """Human-readable summary lines for the CLI."""
    lines = []
    model = state.get("model")
    if command == "fit" and model is not None:
        exit_prob = model.params.exit_prob
        lines.append(f"Exit probability: {exit_prob.n_knots} knots")
        lines.extend(f"  knots {k:2d}  log-likelihood {ll:.3f}" for k, ll in exit_prob.history)
        lines.append(f"Driving model: N={model.structure.n_states}")
        lines.extend(f"  N={n}  log-likelihood {ll:.3f}" for n, ll in model.ladder)
    if command == "generate" and "trace" in state:
        trace: DrivingTrace = state["trace"]
        starts = int(np.count_nonzero(np.diff(trace.driving_mask().astype(np.int8)) == 1))
        lines.append(f"Generated {trace.n_minutes // 1440} days with {starts} trips")
    summary = state.get("summary")
    if isinstance(summary, pd.DataFrame):
        lines.append(summary.to_string(index=False))
    lines.extend(f"wrote {path}" for path in state.get("outputs", []))
    return lines
