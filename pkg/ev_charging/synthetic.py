"""Ground-truth driving model and price generator for desk-scale experiments.

The reference vehicle has one parked state and two hidden driving states: a
short "local" state that usually hands over to a longer "cruise" state. Trips
start mostly around 07:30 and 16:40 on weekdays, about 4.1 per weekday; on
weekends the exit probability is scaled down.
"""

import logging
from datetime import date, datetime, time, timedelta

import numpy as np

from ev_charging.data_ingest import MINUTES_PER_DAY, DrivingTrace, PriceSeries
from ev_charging.driving_model import (
    PARKED,
    REFERENCE_DATE,
    DrivingModel,
    DrivingModelParams,
    ModelStructure,
    SimulatedPath,
    simulate,
)
from ev_charging.errors import ConfigError
from ev_charging.spline_glm import DiurnalProbability

logger = logging.getLogger(__name__)

GROUND_TRUTH_STATES = 3
GROUND_TRUTH_ENTRY = np.array([0.95, 0.05])
GROUND_TRUTH_HIDDEN = np.array(
    [
        [0.02, 0.78, 0.20],
        [0.08, 0.01, 0.91],
    ]
)
TRIPS_PER_WEEKDAY = 4.1
WEEKEND_SCALE = 0.6
NIGHT_LEVEL = 2e-4
# (centre minute-of-day, spread in minutes, share of trips)
PEAKS = ((450.0, 45.0, 0.45), (1000.0, 90.0, 0.55))
PARKED_SHARE = 0.97


def exit_curve(trips_per_day: float = TRIPS_PER_WEEKDAY, night_level: float = NIGHT_LEVEL) -> np.ndarray:
    """Per-minute probability of starting a trip, shape (1440,)."""
    if trips_per_day <= 0:
        raise ConfigError(f"trips_per_day must be positive, got {trips_per_day}")
    minutes = np.arange(1, MINUTES_PER_DAY + 1, dtype=float)
    shape = np.zeros(MINUTES_PER_DAY)
    for centre, spread, share in PEAKS:
        bump = np.exp(-0.5 * ((minutes - centre) / spread) ** 2)
        shape += share * bump / bump.sum()
    mass = trips_per_day / PARKED_SHARE - night_level * MINUTES_PER_DAY
    if mass <= 0:
        raise ConfigError("night_level is too high for the requested trip intensity")
    return np.clip(night_level + mass * shape, 0.0, 1.0)


def ground_truth_model(trips_per_day: float = TRIPS_PER_WEEKDAY, exit_scale: float = 1.0) -> DrivingModel:
    """The reference three-state model; `exit_scale` multiplies the exit probability."""
    exit_prob = DiurnalProbability.from_values(np.clip(exit_scale * exit_curve(trips_per_day), 0.0, 1.0))
    params = DrivingModelParams(
        exit_prob=exit_prob,
        entry_dist=GROUND_TRUTH_ENTRY.copy(),
        hidden_trans=GROUND_TRUTH_HIDDEN.copy(),
        initial_dist=np.eye(GROUND_TRUTH_STATES)[PARKED - 1],
    )
    return DrivingModel(ModelStructure(GROUND_TRUTH_STATES), params)


def generate_trace(
    days: int,
    seed: int | np.random.SeedSequence,
    *,
    start_date: date = REFERENCE_DATE,
    trips_per_day: float = TRIPS_PER_WEEKDAY,
    weekend_scale: float = WEEKEND_SCALE,
) -> SimulatedPath:
    """Simulate `days` whole days from midnight, starting parked.

    Each day is sampled with the weekday or weekend model and the final state
    carries over to the next day.
    """
    if days < 1:
        raise ConfigError(f"days must be at least 1, got {days}")
    weekday_model = ground_truth_model(trips_per_day)
    weekend_model = ground_truth_model(trips_per_day, weekend_scale)
    seed_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)

    chunks = []
    state = PARKED
    for offset, child in enumerate(seed_seq.spawn(days)):
        day = start_date + timedelta(days=offset)
        model = weekday_model if day.weekday() < 5 else weekend_model
        path = simulate(model.params, model.structure, state, 1, MINUTES_PER_DAY + 1, child, start_date=day)
        chunks.append(path.hidden.states[:MINUTES_PER_DAY])
        state = int(path.hidden.states[-1])

    hidden = np.concatenate(chunks)
    start = datetime.combine(start_date, time())
    structure = weekday_model.structure
    logger.debug("Generated %d days of driving from seed %s", days, seed)
    return SimulatedPath(
        DrivingTrace(start, hidden, structure.n_states),
        DrivingTrace(start, structure.observable_map[hidden - 1], 2),
    )


def generate_prices(
    hours: int,
    seed: int | np.random.SeedSequence,
    *,
    start: datetime = datetime.combine(REFERENCE_DATE, time()),
    mean: float = 40.0,
    amplitude: float = 15.0,
    noise: float = 5.0,
    persistence: float = 0.7,
) -> PriceSeries:
    """Hourly prices: a daily sinusoid (low at 04:00, high at 16:00) plus AR(1) noise, floored at 0."""
    if hours < 1:
        raise ConfigError(f"hours must be at least 1, got {hours}")
    if not 0 <= persistence < 1:
        raise ConfigError(f"persistence must lie in [0, 1), got {persistence}")
    rng = np.random.default_rng(seed)
    hour_of_day = (start.hour + np.arange(hours)) % 24
    seasonal = mean - amplitude * np.cos(2.0 * np.pi * (hour_of_day - 4) / 24.0)
    shocks = rng.normal(0.0, noise * np.sqrt(1.0 - persistence**2), hours)
    ar = np.empty(hours)
    ar[0] = rng.normal(0.0, noise)
    for h in range(1, hours):
        ar[h] = persistence * ar[h - 1] + shocks[h]
    return PriceSeries(start, np.maximum(seasonal + ar, 0.0))
