from ev_charging.data_ingest import (
    DrivingTrace,
    PriceSeries,
    TransitionCounts,
    count_transitions,
    load_prices,
    load_trace,
    parse_prices,
    parse_trace,
    split_train_test,
)
from ev_charging.driving_model import (
    DrivingModel,
    DrivingModelParams,
    ModelStructure,
    fit_time_invariant,
    hmm_log_likelihood,
    select_model_order,
    simulate,
    transition_matrix_at,
    trip_length_distribution,
)
from ev_charging.errors import ConfigError, DataError, EVChargingError, NumericalError
from ev_charging.mdp_solver import (
    EnergyGrid,
    MdpConfig,
    PolicyTable,
    ValueTable,
    action_set,
    evaluate_policy,
    rolling_solve,
    solve,
)
from ev_charging.policy_sim import (
    OptimalPolicy,
    RollingPolicy,
    RuleOfThumbSpec,
    SimulationReport,
    evaluate_matrix,
    make_rule_of_thumb,
    simulate_policy,
)
from ev_charging.spline_glm import DiurnalProbability, fit_logistic, raw_mle, refine_knots
from ev_charging.workflow import create_workflow

__all__ = [
    "ConfigError",
    "DataError",
    "DiurnalProbability",
    "DrivingModel",
    "DrivingModelParams",
    "DrivingTrace",
    "EVChargingError",
    "EnergyGrid",
    "MdpConfig",
    "ModelStructure",
    "NumericalError",
    "OptimalPolicy",
    "PolicyTable",
    "PriceSeries",
    "RollingPolicy",
    "RuleOfThumbSpec",
    "SimulationReport",
    "TransitionCounts",
    "ValueTable",
    "action_set",
    "count_transitions",
    "create_workflow",
    "evaluate_matrix",
    "evaluate_policy",
    "fit_logistic",
    "fit_time_invariant",
    "hmm_log_likelihood",
    "load_prices",
    "load_trace",
    "make_rule_of_thumb",
    "parse_prices",
    "parse_trace",
    "raw_mle",
    "refine_knots",
    "rolling_solve",
    "select_model_order",
    "simulate",
    "simulate_policy",
    "solve",
    "split_train_test",
    "transition_matrix_at",
    "trip_length_distribution",
]
