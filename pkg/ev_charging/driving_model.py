"""Inhomogeneous Markov model of driving with hidden driving states.

State 1 is "parked"; states 2..N are driving states that all emit the
observed symbol "driving". Only the probability of leaving the parked state
varies over the day. Once a trip starts, the driving states evolve with a
time-invariant transition matrix until the vehicle returns to state 1.

Because emissions are deterministic, the forward recursion collapses onto the
parked state at every parked minute. The likelihood of the hidden-state
parameters therefore depends on the data only through the histogram of trip
lengths (`TripStatistics`), which is what the optimizer works with;
`hmm_log_likelihood` keeps the step-by-step forward recursion.
"""

import bisect
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Any, NamedTuple, Optional

import numpy as np
from scipy.optimize import OptimizeResult, minimize
from scipy.stats import gaussian_kde

from ev_charging.data_ingest import MINUTES_PER_DAY, DayFilter, DrivingTrace
from ev_charging.errors import ConfigError, DataError, NumericalError
from ev_charging.spline_glm import DiurnalProbability, likelihood_ratio_pvalue

logger = logging.getLogger(__name__)

PARKED = 1
DRIVING_SYMBOL = 2
MODEL_SCHEMA = "ev-charging/driving-model/v1"
# 04:00-04:01; no trips start between midnight and 05:00 in residential data
ANCHOR_MINUTE = 241
REFERENCE_DATE = date(2012, 1, 2)  # a Monday
DEFAULT_STARTS = 20
PROBABILITY_FLOOR = 1e-12
# a line-search stop counts as converged only with a small gradient, relative to |f|
GRADIENT_RTOL = 1e-3


@dataclass(frozen=True)
class ModelStructure:
    """One parked state plus `n_states - 1` hidden driving states."""

    n_states: int

    def __post_init__(self) -> None:
        if self.n_states < 2:
            raise ConfigError(f"a driving model needs at least 2 states, got {self.n_states}")

    @property
    def parked_state(self) -> int:
        return PARKED

    @property
    def driving_states(self) -> tuple[int, ...]:
        return tuple(range(2, self.n_states + 1))

    @property
    def observable_map(self) -> np.ndarray:
        """Observed symbol emitted by each state (index k-1 for state k)."""
        symbols = np.full(self.n_states, DRIVING_SYMBOL, dtype=np.int64)
        symbols[0] = PARKED
        return symbols

    @property
    def n_free_parameters(self) -> int:
        """Free parameters of the time-invariant part (entry split plus hidden rows)."""
        n_driving = self.n_states - 1
        return (n_driving - 1) + n_driving * n_driving


@dataclass(frozen=True, eq=False)
class StateDistributionMatrix:
    """Emission probabilities d[z-1, k-1] = P(Z = z | X = k)."""

    d: np.ndarray

    @classmethod
    def for_structure(cls, structure: ModelStructure) -> "StateDistributionMatrix":
        d = np.zeros((2, structure.n_states))
        d[structure.observable_map - 1, np.arange(structure.n_states)] = 1.0
        return cls(d)


@dataclass(eq=False)
class DrivingModelParams:
    """Parameters of the driving model.

    Attributes:
        exit_prob: Time-varying probability of leaving the parked state.
        entry_dist: Distribution over driving states 2..N when a trip starts.
        hidden_trans: Rows for driving states 2..N over next states 1..N.
        initial_dist: Distribution of the first state.
        log_likelihood: Maximized log-likelihood when the parameters were fitted.
    """

    exit_prob: DiurnalProbability
    entry_dist: np.ndarray
    hidden_trans: np.ndarray
    initial_dist: np.ndarray
    log_likelihood: Optional[float] = None

    def __post_init__(self) -> None:
        self.entry_dist = np.asarray(self.entry_dist, dtype=float)
        self.hidden_trans = np.atleast_2d(np.asarray(self.hidden_trans, dtype=float))
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        self.validate()

    @property
    def n_states(self) -> int:
        return int(self.hidden_trans.shape[1])

    def validate(self, atol: float = 1e-9) -> None:
        n = self.n_states
        if self.hidden_trans.shape != (n - 1, n):
            raise ConfigError(f"hidden_trans must have shape {(n - 1, n)}, got {self.hidden_trans.shape}")
        if self.entry_dist.shape != (n - 1,):
            raise ConfigError(f"entry_dist must have length {n - 1}, got {self.entry_dist.shape}")
        if self.initial_dist.shape != (n,):
            raise ConfigError(f"initial_dist must have length {n}, got {self.initial_dist.shape}")
        for name, values in (
            ("entry_dist", self.entry_dist),
            ("hidden_trans", self.hidden_trans),
            ("initial_dist", self.initial_dist),
        ):
            if np.any(values < -atol) or np.any(values > 1 + atol):
                raise ConfigError(f"{name} entries must lie in [0, 1]")
        if abs(self.entry_dist.sum() - 1) > atol or abs(self.initial_dist.sum() - 1) > atol:
            raise ConfigError("entry_dist and initial_dist must sum to 1")
        if np.any(np.abs(self.hidden_trans.sum(axis=1) - 1) > atol):
            raise ConfigError("every hidden_trans row must sum to 1")

    @property
    def driving_block(self) -> np.ndarray:
        """Transitions among driving states, shape (N-1, N-1)."""
        return self.hidden_trans[:, 1:]


def transition_matrix_at(params: DrivingModelParams, s: int) -> np.ndarray:
    """Full N x N transition matrix for a transition out of minute-of-day `s`."""
    p = params.exit_prob.at(s)
    n = params.n_states
    matrix = np.empty((n, n))
    matrix[0, 0] = 1.0 - p
    matrix[0, 1:] = p * params.entry_dist
    matrix[1:] = params.hidden_trans
    return matrix


def transition_matrices(params: DrivingModelParams) -> np.ndarray:
    """Transition matrices for all 1440 minutes, shape (1440, N, N); index s-1."""
    p = params.exit_prob.probabilities
    n = params.n_states
    matrices = np.empty((MINUTES_PER_DAY, n, n))
    matrices[:, 0, 0] = 1.0 - p
    matrices[:, 0, 1:] = p[:, None] * params.entry_dist[None, :]
    matrices[:, 1:, :] = params.hidden_trans[None, :, :]
    return matrices


@dataclass(eq=False)
class DrivingModel:
    """A structure together with its parameters; the unit that gets saved and loaded."""

    structure: ModelStructure
    params: DrivingModelParams
    ladder: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.params.n_states != self.structure.n_states:
            raise ConfigError(
                f"parameters describe {self.params.n_states} states, structure has "
                f"{self.structure.n_states}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": MODEL_SCHEMA,
            "n_states": self.structure.n_states,
            "exit_prob": self.params.exit_prob.to_dict(),
            "entry_dist": self.params.entry_dist.tolist(),
            "hidden_trans": self.params.hidden_trans.tolist(),
            "initial_dist": self.params.initial_dist.tolist(),
            "log_likelihood": self.params.log_likelihood,
            "ladder": [list(item) for item in self.ladder],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DrivingModel":
        if data.get("schema") != MODEL_SCHEMA:
            raise DataError(f"unsupported model schema {data.get('schema')!r}, expected {MODEL_SCHEMA!r}")
        params = DrivingModelParams(
            exit_prob=DiurnalProbability.from_dict(data["exit_prob"]),
            entry_dist=data["entry_dist"],
            hidden_trans=data["hidden_trans"],
            initial_dist=data["initial_dist"],
            log_likelihood=data.get("log_likelihood"),
        )
        ladder = [(int(n), float(ll)) for n, ll in data.get("ladder", [])]
        return cls(ModelStructure(int(data["n_states"])), params, ladder)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DrivingModel":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"model file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"model file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def _check_symbols(trace: DrivingTrace) -> np.ndarray:
    symbols = trace.states
    if symbols.max() > DRIVING_SYMBOL:
        raise DataError("trace must contain observed symbols 1 (parked) and 2 (driving) only")
    return symbols


def hmm_log_likelihood(
    params: DrivingModelParams, structure: ModelStructure, trace: DrivingTrace
) -> float:
    """Log-likelihood of an observed trace by the scaled forward recursion.

    Returns -inf when the trace has probability zero under `params`.
    """
    symbols = _check_symbols(trace)
    emissions = StateDistributionMatrix.for_structure(structure).d
    matrices = transition_matrices(params)
    minutes = trace.minute_of_day - 1

    alpha = params.initial_dist * emissions[symbols[0] - 1]
    scale = alpha.sum()
    if scale <= 0:
        return -np.inf
    log_likelihood = np.log(scale)
    alpha = alpha / scale
    for t in range(1, symbols.size):
        alpha = (alpha @ matrices[minutes[t - 1]]) * emissions[symbols[t] - 1]
        scale = alpha.sum()
        if scale <= 0:
            return -np.inf
        log_likelihood += np.log(scale)
        alpha = alpha / scale
    return float(log_likelihood)


def _runs(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start and stop (exclusive) indices of the True runs in `mask`."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    return np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)


@dataclass
class TripStatistics:
    """Sufficient statistics of an observed trace for the hidden-state parameters.

    Attributes:
        completed: completed[L] counts trips of L driving minutes that ended parked.
        censored: censored[L] counts trips still running when the trace ends.
        exit_log_likelihood: Terms of the log-likelihood that involve only the
            exit probability (parked minutes and trip starts).
        starts_parked: Whether the first observed minute is parked.
        initial_segment: (length, censored) of a trip already running at the
            first minute, if any.
    """

    completed: np.ndarray
    censored: np.ndarray
    exit_log_likelihood: float
    starts_parked: bool
    initial_segment: Optional[tuple[int, bool]] = None

    @property
    def n_trips(self) -> int:
        return int(self.completed.sum() + self.censored.sum())

    @property
    def max_length(self) -> int:
        lengths = [self.completed.size - 1, self.censored.size - 1]
        if self.initial_segment is not None:
            lengths.append(self.initial_segment[0])
        return max(lengths)

    @classmethod
    def from_trace(
        cls, trace: DrivingTrace, exit_prob: DiurnalProbability, day_filter: DayFilter = "all"
    ) -> "TripStatistics":
        symbols = _check_symbols(trace)
        driving = symbols == DRIVING_SYMBOL
        minutes = trace.minute_of_day
        if day_filter == "all":
            keep_day = np.ones(symbols.size, dtype=bool)
        else:
            weekday = trace.day_labels
            keep_day = weekday if day_filter == "weekday" else ~weekday

        with np.errstate(divide="ignore"):
            stay = ~driving[:-1] & ~driving[1:] & keep_day[:-1]
            exit_ll = float(np.log1p(-exit_prob.at(minutes[:-1][stay])).sum()) if stay.any() else 0.0

            starts, stops = _runs(driving)
            initial_segment = None
            if starts.size and starts[0] == 0:
                initial_segment = (int(stops[0]), bool(stops[0] == symbols.size))
                starts, stops = starts[1:], stops[1:]
            kept = keep_day[starts - 1]
            starts, stops = starts[kept], stops[kept]
            if starts.size:
                exit_ll += float(np.log(exit_prob.at(minutes[starts - 1])).sum())

        lengths = stops - starts
        is_censored = stops == symbols.size
        max_len = int(lengths.max()) if lengths.size else 0
        completed = np.bincount(lengths[~is_censored], minlength=max_len + 1)
        censored = np.bincount(lengths[is_censored], minlength=max_len + 1)
        return cls(completed, censored, exit_ll, not driving[0], initial_segment)


def _segment_log_probs(
    start: np.ndarray, block: np.ndarray, returns: np.ndarray, max_length: int
) -> tuple[np.ndarray, np.ndarray]:
    """log P(trip of exactly L minutes ends) and log P(trip lasts at least L minutes).

    Index L runs from 0 to `max_length`; entry 0 is unused.
    """
    ended = np.full(max_length + 1, -np.inf)
    running = np.full(max_length + 1, -np.inf)
    vector = start.astype(float)
    log_scale = 0.0
    with np.errstate(divide="ignore"):
        for length in range(1, max_length + 1):
            mass = vector.sum()
            if mass <= 0:
                break
            vector = vector / mass
            log_scale += np.log(mass)
            running[length] = log_scale
            ended[length] = log_scale + np.log(vector @ returns)
            vector = vector @ block
    return ended, running


def _trip_log_likelihood(
    entry: np.ndarray, hidden: np.ndarray, initial: np.ndarray, stats: TripStatistics
) -> float:
    block, returns = hidden[:, 1:], hidden[:, 0]
    total = stats.exit_log_likelihood
    if stats.starts_parked:
        total += np.log(initial[0]) if initial[0] > 0 else -np.inf
    if stats.completed.size > 1 or stats.censored.size > 1:
        ended, running = _segment_log_probs(entry, block, returns, stats.max_length)
        total += _weighted(stats.completed, ended) + _weighted(stats.censored, running)
    if stats.initial_segment is not None:
        length, censored = stats.initial_segment
        ended, running = _segment_log_probs(initial[1:], block, returns, length)
        total += running[length] if censored else ended[length]
    return float(total)


def trip_log_likelihood(params: DrivingModelParams, stats: TripStatistics) -> float:
    """Full log-likelihood of the trace summarised by `stats`.

    Equals `hmm_log_likelihood` on the same trace when no day filter was applied.
    """
    return _trip_log_likelihood(params.entry_dist, params.hidden_trans, params.initial_dist, stats)


def _weighted(counts: np.ndarray, log_probs: np.ndarray) -> float:
    used = counts > 0
    if not used.any():
        return 0.0
    return float(np.sum(counts[used] * log_probs[: counts.size][used]))


def anchor_trace(trace: DrivingTrace, anchor_minute: int = ANCHOR_MINUTE) -> DrivingTrace:
    """Drop the minutes before the first parked minute at `anchor_minute`.

    Falls back to the first parked minute when the anchor never occurs parked.

    Raises:
        DataError: the vehicle is never parked.
    """
    parked = trace.states == PARKED
    candidates = np.flatnonzero(parked & (trace.minute_of_day == anchor_minute))
    if candidates.size == 0:
        candidates = np.flatnonzero(parked)
    if candidates.size == 0:
        raise DataError("trace never shows the vehicle parked")
    return trace.slice(int(candidates[0]))


def _parked_start(n_states: int) -> np.ndarray:
    delta = np.zeros(n_states)
    delta[0] = 1.0
    return delta


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _pack(entry: np.ndarray, hidden: np.ndarray) -> np.ndarray:
    """Logits relative to the first entry of each distribution."""
    entry_logits = np.log(np.maximum(entry, PROBABILITY_FLOOR))
    hidden_logits = np.log(np.maximum(hidden, PROBABILITY_FLOOR))
    return np.concatenate(
        [
            (entry_logits[1:] - entry_logits[0]),
            (hidden_logits[:, 1:] - hidden_logits[:, :1]).ravel(),
        ]
    )


def _unpack(theta: np.ndarray, n_states: int) -> tuple[np.ndarray, np.ndarray]:
    n_driving = n_states - 1
    entry = _softmax(np.concatenate([[0.0], theta[: n_driving - 1]]))
    rows = theta[n_driving - 1 :].reshape(n_driving, n_states - 1)
    hidden = _softmax(np.hstack([np.zeros((n_driving, 1)), rows]))
    return entry, hidden


def _random_start(n_states: int, rng: np.random.Generator) -> np.ndarray:
    n_driving = n_states - 1
    entry = rng.dirichlet(np.ones(n_driving))
    hidden = np.empty((n_driving, n_states))
    for i in range(n_driving):
        stay = rng.uniform(0.5, 0.99)
        others = rng.dirichlet(np.ones(n_states - 1)) * (1.0 - stay)
        hidden[i] = np.insert(others, i + 1, stay)
    return _pack(entry, hidden)


def embed_params(params: DrivingModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Entry distribution and hidden rows of an equivalent model with one more driving state.

    The last driving state is split into two identical copies, so the
    trip-length distribution and the likelihood are unchanged.
    """
    entry = params.entry_dist
    hidden = params.hidden_trans
    n = params.n_states
    new_entry = np.append(entry, entry[-1] / 2)
    new_entry[-2] = entry[-1] / 2
    columns = np.hstack([hidden, hidden[:, -1:] / 2])
    columns[:, n - 1] = hidden[:, -1] / 2
    new_hidden = np.vstack([columns, columns[-1:]])
    return new_entry, new_hidden


def _canonical_order(entry: np.ndarray, hidden: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Order driving states by decreasing self-transition probability."""
    n_driving = entry.size
    stay = hidden[np.arange(n_driving), np.arange(1, n_driving + 1)]
    order = np.argsort(-stay, kind="stable")
    columns = np.concatenate([[0], order + 1])
    return entry[order], hidden[order][:, columns]


def _counting_fit(stats: TripStatistics) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form estimate for a single driving state."""
    lengths = np.arange(stats.max_length + 1)
    stays = float(np.sum(stats.completed * np.maximum(lengths[: stats.completed.size] - 1, 0)))
    stays += float(np.sum(stats.censored * np.maximum(lengths[: stats.censored.size] - 1, 0)))
    returns = float(stats.completed.sum())
    if stats.initial_segment is not None:
        length, censored = stats.initial_segment
        stays += length - 1
        returns += 0 if censored else 1
    if stays + returns == 0:
        raise NumericalError("no driving transitions observed")
    stay = stays / (stays + returns)
    return np.ones(1), np.array([[1.0 - stay, stay]])


def _start_converged(result: OptimizeResult) -> bool:
    """L-BFGS-B success, or a line-search stop with a small gradient."""
    fun = float(result.fun)
    if not np.isfinite(fun):
        return False
    if result.success:
        return True
    gradient = np.asarray(result.get("jac", [np.inf]), dtype=float)
    return bool(np.all(np.isfinite(gradient)) and np.max(np.abs(gradient)) <= GRADIENT_RTOL * max(1.0, abs(fun)))


class _StartResult(NamedTuple):
    neg_log_likelihood: float
    theta: np.ndarray
    converged: bool


def _fit_from_statistics(
    structure: ModelStructure,
    stats: TripStatistics,
    exit_prob: DiurnalProbability,
    *,
    n_starts: int,
    seed: int | np.random.SeedSequence,
    threads: int,
    warm_start: Optional[DrivingModelParams],
) -> DrivingModelParams:
    n = structure.n_states
    delta = _parked_start(n)
    if n == 2:
        entry, hidden = _counting_fit(stats)
        params = DrivingModelParams(exit_prob, entry, hidden, delta)
        params.log_likelihood = trip_log_likelihood(params, stats)
        return params

    def objective(theta: np.ndarray) -> float:
        value = -_trip_log_likelihood(*_unpack(theta, n), delta, stats)
        return value if np.isfinite(value) else 1e20

    seed_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    starts = [_random_start(n, np.random.default_rng(child)) for child in seed_seq.spawn(n_starts)]
    if warm_start is not None:
        if warm_start.n_states == n - 1:
            starts[0] = _pack(*embed_params(warm_start))
        elif warm_start.n_states == n:
            starts[0] = _pack(warm_start.entry_dist, warm_start.hidden_trans)

    def run(theta0: np.ndarray) -> _StartResult:
        result = minimize(
            objective,
            theta0,
            method="L-BFGS-B",
            options={"maxiter": 1000, "ftol": 1e-12, "gtol": 1e-7},
        )
        converged = _start_converged(result)
        if not converged:
            logger.debug("N=%d: start stopped unconverged (%s)", n, result.message)
        return _StartResult(float(result.fun), np.asarray(result.x), converged)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, starts))

    best = min(results, key=lambda r: r.neg_log_likelihood)
    entry, hidden = _canonical_order(*_unpack(best.theta, n))
    params = DrivingModelParams(exit_prob, entry, hidden, delta)
    params.log_likelihood = trip_log_likelihood(params, stats)
    n_converged = sum(r.converged for r in results)
    logger.debug("N=%d: %d/%d starts converged", n, n_converged, len(results))
    if n_converged == 0:
        raise NumericalError(f"none of {len(results)} starts converged for N={n}", best=params)
    return params


def fit_time_invariant(
    structure: ModelStructure,
    trace: DrivingTrace,
    exit_prob: DiurnalProbability,
    *,
    n_starts: int = DEFAULT_STARTS,
    seed: int = 0,
    threads: int = 1,
    warm_start: Optional[DrivingModelParams] = None,
    day_filter: DayFilter = "all",
    anchor: bool = True,
) -> DrivingModelParams:
    """Maximize the likelihood over the entry distribution and hidden transitions.

    The exit probability is held fixed and the vehicle is taken to be parked at
    the 04:00 anchor. With a single driving state the estimate is the closed-form
    counting estimate; otherwise L-BFGS-B runs from `n_starts` seeded random
    starts on a softmax parameterization (the first start is replaced by
    `warm_start` when given).

    Raises:
        NumericalError: no start converged; `best` carries the best parameters found.
    """
    if anchor:
        trace = anchor_trace(trace)
    stats = TripStatistics.from_trace(trace, exit_prob, day_filter)
    return _fit_from_statistics(
        structure,
        stats,
        exit_prob,
        n_starts=n_starts,
        seed=seed,
        threads=threads,
        warm_start=warm_start,
    )


class OrderSelection(NamedTuple):
    structure: ModelStructure
    params: DrivingModelParams
    ladder: list[tuple[int, float]]


def select_model_order(
    trace: DrivingTrace,
    exit_prob: DiurnalProbability,
    max_states: int = 4,
    lr_alpha: float = 0.05,
    *,
    n_starts: int = DEFAULT_STARTS,
    seed: int = 0,
    threads: int = 1,
    day_filter: DayFilter = "all",
) -> OrderSelection:
    """Add driving states while the likelihood-ratio test keeps rejecting.

    Moving from N-1 to N states adds 2(N-1) free parameters. Each fit is
    warm-started from the previous one, so the ladder is non-decreasing.
    """
    if max_states < 2:
        raise ConfigError(f"max_states must be at least 2, got {max_states}")
    if not 0 < lr_alpha < 1:
        raise ConfigError(f"lr_alpha must lie in (0, 1), got {lr_alpha}")

    stats = TripStatistics.from_trace(anchor_trace(trace), exit_prob, day_filter)
    seeds = np.random.SeedSequence(seed).spawn(max_states)
    structure = ModelStructure(2)
    params = _fit_from_statistics(
        structure, stats, exit_prob, n_starts=n_starts, seed=seeds[0], threads=threads, warm_start=None
    )
    ladder = [(2, float(params.log_likelihood or 0.0))]
    logger.info("N=2: log-likelihood %.3f (%d trips)", ladder[0][1], stats.n_trips)

    for n_states in range(3, max_states + 1):
        candidate_structure = ModelStructure(n_states)
        candidate = _fit_from_statistics(
            candidate_structure,
            stats,
            exit_prob,
            n_starts=n_starts,
            seed=seeds[n_states - 2],
            threads=threads,
            warm_start=params,
        )
        ll_old = float(params.log_likelihood or 0.0)
        ll_new = float(candidate.log_likelihood or 0.0)
        if ll_new < ll_old - 1e-6:
            logger.warning(
                "N=%d fits worse than N=%d (%.6f < %.6f); check optimizer convergence",
                n_states, n_states - 1, ll_new, ll_old,
            )
        pvalue = likelihood_ratio_pvalue(
            ll_old, ll_new, candidate_structure.n_free_parameters - structure.n_free_parameters
        )
        ladder.append((n_states, ll_new))
        logger.info("N=%d: log-likelihood %.3f (LR p-value %.4g)", n_states, ll_new, pvalue)
        if pvalue >= lr_alpha:
            break
        structure, params = candidate_structure, candidate

    return OrderSelection(structure, params, ladder)


@dataclass(eq=False)
class SimulatedPath:
    """A simulated realization: hidden states 1..N and the observed symbols."""

    hidden: DrivingTrace
    observed: DrivingTrace


def _start_timestamp(start_minute: int, start_date: date) -> datetime:
    if not 1 <= start_minute <= MINUTES_PER_DAY:
        raise ConfigError(f"start_minute must lie in 1..{MINUTES_PER_DAY}, got {start_minute}")
    return datetime.combine(start_date, time()) + timedelta(minutes=start_minute - 1)


def simulate(
    params: DrivingModelParams,
    structure: ModelStructure,
    start_state: int,
    start_minute: int,
    horizon: int,
    rng_seed: int | np.random.SeedSequence,
    *,
    start_date: date = REFERENCE_DATE,
) -> SimulatedPath:
    """Sample `horizon` minutes of the chain starting in `start_state` at `start_minute`.

    Deterministic for a given seed.
    """
    if horizon < 1:
        raise ConfigError(f"horizon must be at least 1, got {horizon}")
    if not 1 <= start_state <= structure.n_states:
        raise ConfigError(f"start_state must lie in 1..{structure.n_states}, got {start_state}")

    cumulative = np.cumsum(transition_matrices(params), axis=2)
    cumulative[:, :, -1] = np.inf
    table = cumulative.tolist()
    draws = np.random.default_rng(rng_seed).random(horizon - 1).tolist()

    hidden = np.empty(horizon, dtype=np.int64)
    state = start_state - 1
    minute = start_minute - 1
    hidden[0] = start_state
    for t, u in enumerate(draws, start=1):
        state = bisect.bisect_right(table[minute][state], u)
        hidden[t] = state + 1
        minute = minute + 1 if minute < MINUTES_PER_DAY - 1 else 0

    start = _start_timestamp(start_minute, start_date)
    observed = structure.observable_map[hidden - 1]
    return SimulatedPath(
        DrivingTrace(start, hidden, structure.n_states), DrivingTrace(start, observed, 2)
    )


@dataclass(eq=False)
class TripLengthDistribution:
    """Simulated trip durations with a Gaussian kernel density summary."""

    durations: np.ndarray
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    @property
    def mean(self) -> float:
        return float(self.durations.mean())

    @property
    def mode(self) -> float:
        return float(self.grid[int(np.argmax(self.density))])


def _simulate_trip_lengths(params: DrivingModelParams, n_trips: int, rng: np.random.Generator) -> np.ndarray:
    n_driving = params.n_states - 1
    cumulative = np.cumsum(params.hidden_trans, axis=1)
    cumulative[:, -1] = np.inf
    state = rng.choice(n_driving, size=n_trips, p=params.entry_dist)
    durations = np.ones(n_trips, dtype=np.int64)
    active = np.arange(n_trips)
    # trips cannot last longer than a week of continuous driving
    for _ in range(7 * MINUTES_PER_DAY):
        if active.size == 0:
            break
        draws = rng.random(active.size)
        nxt = (cumulative[state[active]] <= draws[:, None]).sum(axis=1)
        still = nxt > 0
        active = active[still]
        state[active] = nxt[still] - 1
        durations[active] += 1
    return durations


def trip_length_distribution(
    params: DrivingModelParams,
    structure: ModelStructure,
    n_trips: int,
    rng_seed: int | np.random.SeedSequence,
    *,
    bandwidth: float | str = "silverman",
    max_kde_points: int = 20_000,
) -> TripLengthDistribution:
    """Durations of `n_trips` simulated trips, from entry into a driving state until parked.

    The density uses a Gaussian kernel with Silverman's rule unless a numeric
    `bandwidth` factor is given.
    """
    if n_trips < 1:
        raise ConfigError(f"n_trips must be at least 1, got {n_trips}")
    if params.n_states != structure.n_states:
        raise ConfigError("params and structure disagree on the number of states")
    rng = np.random.default_rng(rng_seed)
    durations = _simulate_trip_lengths(params, n_trips, rng)
    grid = np.linspace(0.0, float(np.quantile(durations, 0.99)) + 5.0, 256)
    if np.unique(durations).size < 2:
        density = np.zeros_like(grid)
        density[int(np.argmin(np.abs(grid - durations[0])))] = 1.0
        return TripLengthDistribution(durations, grid, density, 0.0)
    sample = durations
    if durations.size > max_kde_points:
        sample = rng.choice(durations, size=max_kde_points, replace=False)
    kde = gaussian_kde(sample.astype(float), bw_method=bandwidth)
    return TripLengthDistribution(durations, grid, kde(grid), float(kde.factor))


def empirical_trip_lengths(trace: DrivingTrace) -> np.ndarray:
    """Lengths of the completed trips in an observed trace."""
    starts, stops = _runs(trace.states >= 2)
    complete = (starts > 0) & (stops < trace.n_minutes)
    return (stops - starts)[complete]


def filter_hidden_states(model: DrivingModel, trace: DrivingTrace) -> DrivingTrace:
    """Most probable current driving state given the observations so far.

    Parked minutes stay 1; within a trip the filtered distribution evolves
    with the time-invariant driving block, conditioned on still driving.
    """
    symbols = _check_symbols(trace)
    params = model.params
    hidden = np.ones(symbols.size, dtype=np.int64)
    starts, stops = _runs(symbols == DRIVING_SYMBOL)
    if starts.size == 0:
        return DrivingTrace(trace.start, hidden, model.structure.n_states)

    def most_likely(start: np.ndarray, length: int) -> np.ndarray:
        out = np.empty(length, dtype=np.int64)
        vector = start.astype(float)
        for i in range(length):
            total = vector.sum()
            vector = vector / total if total > 0 else np.full(vector.size, 1.0 / vector.size)
            out[i] = int(np.argmax(vector)) + 2
            vector = vector @ params.driving_block
        return out

    longest = int((stops - starts).max())
    from_entry = most_likely(params.entry_dist, longest)
    for begin, end in zip(starts, stops):
        if begin == 0 and params.initial_dist[1:].sum() > 0:
            hidden[begin:end] = most_likely(params.initial_dist[1:], end - begin)
        else:
            hidden[begin:end] = from_entry[: end - begin]
    return DrivingTrace(trace.start, hidden, model.structure.n_states)
