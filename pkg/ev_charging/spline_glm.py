"""Diurnal transition probabilities from B-spline logistic regression.

The probability of leaving a state at minute-of-day s is modelled as

    logit p(s) = sum_b c_b B_b(s),    n(s) ~ Binomial(z(s), p(s))

with a clamped (or optionally periodic) B-spline basis on [0, 1440]. Knots are
refined greedily: a knot is added at the centre of the interval that fits
worst, and kept only while a likelihood-ratio test says it helps.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import expit, log_expit
from scipy.stats import chi2

from ev_charging.data_ingest import MINUTES_PER_DAY, TransitionCounts
from ev_charging.errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_DEGREE = 3
MINUTES = np.arange(1, MINUTES_PER_DAY + 1, dtype=float)
# |eta| beyond this on observed minutes means the fit is running off to a boundary
SEPARATION_ETA = 30.0
PROBABILITY_FLOOR = 1e-15


def raw_mle(counts: TransitionCounts, from_state: int, to_state: int) -> np.ndarray:
    """Per-minute maximum-likelihood estimate n_jk(s) / z_j(s).

    Minutes without trials are undefined and returned as NaN.
    """
    n = counts.n[from_state - 1, to_state - 1].astype(float)
    z = counts.z[from_state - 1].astype(float)
    out = np.full(MINUTES_PER_DAY, np.nan)
    np.divide(n, z, out=out, where=z > 0)
    return out


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """B-spline basis on [0, 1440] determined by its breakpoints.

    Clamped bases repeat the boundary knots so that `basis_dim` is
    `len(knots) + degree - 1`; periodic bases wrap around midnight and have
    `len(knots) - 1` functions.
    """

    knots: np.ndarray
    degree: int = DEFAULT_DEGREE
    periodic: bool = False

    @property
    def basis_dim(self) -> int:
        if self.periodic:
            return len(self.knots) - 1
        return len(self.knots) + self.degree - 1

    def full_knot_vector(self) -> np.ndarray:
        k = self.degree
        knots = self.knots
        if self.periodic:
            span = knots[-1] - knots[0]
            left = knots[len(knots) - 1 - k : -1] - span
            right = knots[1 : k + 1] + span
            return np.concatenate([left, knots, right])
        return np.concatenate([np.repeat(knots[0], k), knots, np.repeat(knots[-1], k)])

    def evaluate(self, s: np.ndarray | float) -> np.ndarray:
        """Design matrix of shape (len(s), basis_dim) at positions `s`."""
        x = np.atleast_1d(np.asarray(s, dtype=float))
        t = self.full_knot_vector()
        n_funcs = len(t) - self.degree - 1
        design = BSpline(t, np.eye(n_funcs), self.degree, extrapolate=False)(x)
        design = np.nan_to_num(design)
        if self.periodic and self.degree > 0:
            design[:, : self.degree] += design[:, -self.degree :]
            design = design[:, : -self.degree]
        return design

    def interval_of(self, s: np.ndarray) -> np.ndarray:
        """Index of the knot interval (knots[i], knots[i+1]] containing each s."""
        idx = np.searchsorted(self.knots, s, side="left") - 1
        return np.clip(idx, 0, len(self.knots) - 2)

    def with_knot(self, position: float) -> "SplineBasis":
        return SplineBasis(np.sort(np.append(self.knots, position)), self.degree, self.periodic)

    def to_dict(self) -> dict[str, Any]:
        return {"knots": self.knots.tolist(), "degree": self.degree, "periodic": self.periodic}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SplineBasis":
        return build_basis(data["knots"], data.get("degree", DEFAULT_DEGREE), data.get("periodic", False))


def build_basis(
    knots: Any, degree: int = DEFAULT_DEGREE, periodic: bool = False
) -> SplineBasis:
    """Build a B-spline basis from breakpoints spanning [0, 1440].

    Raises:
        ConfigError: fewer than two knots, unsorted knots, or knots outside
            [0, 1440] / not ending at 0 and 1440.
    """
    knots_arr = np.asarray(knots, dtype=float)
    if knots_arr.ndim != 1 or knots_arr.size < 2:
        raise ConfigError(f"need at least 2 knots, got {knots_arr.size}")
    if np.any(np.diff(knots_arr) <= 0):
        raise ConfigError(f"knots must be strictly increasing: {knots_arr.tolist()}")
    if knots_arr[0] != 0 or knots_arr[-1] != MINUTES_PER_DAY:
        raise ConfigError(
            f"knots must start at 0 and end at {MINUTES_PER_DAY}, "
            f"got [{knots_arr[0]}, {knots_arr[-1]}]"
        )
    if degree < 0:
        raise ConfigError(f"degree must be non-negative, got {degree}")
    if periodic and len(knots_arr) - 1 <= degree:
        raise ConfigError(
            f"a periodic basis of degree {degree} needs at least {degree + 2} knots"
        )
    return SplineBasis(knots_arr, degree, periodic)


def uniform_knots(n_knots: int) -> np.ndarray:
    """`n_knots` equally spaced knots with one at each endpoint."""
    return np.linspace(0.0, MINUTES_PER_DAY, n_knots)


@dataclass
class GlmFit:
    """Result of a binomial-logit fit."""

    coefficients: np.ndarray
    log_likelihood: float
    converged: bool
    iterations: int


def _binomial_log_likelihood(eta: np.ndarray, n: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per-minute binomial log-likelihood without the combinatorial constant."""
    return n * log_expit(eta) + (z - n) * log_expit(-eta)


def score(basis: SplineBasis, counts: TransitionCounts, from_state: int, coefficients: np.ndarray) -> np.ndarray:
    """Gradient of the binomial log-likelihood with respect to the coefficients."""
    design = basis.evaluate(MINUTES)
    n = counts.successes(from_state).astype(float)
    z = counts.z[from_state - 1].astype(float)
    return design.T @ (n - z * expit(design @ coefficients))


def fit_logistic(
    counts: TransitionCounts,
    from_state: int,
    basis: SplineBasis,
    *,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> GlmFit:
    """Fit the probability of leaving `from_state` by iteratively reweighted least squares.

    Minutes with no trials carry no weight. A fit that runs into complete
    separation or produces non-finite coefficients comes back with
    `converged=False`.

    Raises:
        NumericalError: no minute has any trials.
    """
    n_all = counts.successes(from_state).astype(float)
    z_all = counts.z[from_state - 1].astype(float)
    observed = z_all > 0
    if not observed.any():
        raise NumericalError(f"no transitions observed from state {from_state}")

    design = basis.evaluate(MINUTES[observed])
    n = n_all[observed]
    z = z_all[observed]

    pooled = (n.sum() + 0.5) / (z.sum() + 1.0)
    # partition of unity: a constant coefficient vector gives a constant logit
    coefficients = np.full(basis.basis_dim, np.log(pooled / (1.0 - pooled)))
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        eta = design @ coefficients
        p = expit(eta)
        weights = z * p * (1.0 - p)
        working = eta + (n - z * p) / np.maximum(weights, 1e-300)
        sqrt_w = np.sqrt(weights)
        update, *_ = np.linalg.lstsq(design * sqrt_w[:, None], working * sqrt_w, rcond=None)
        if not np.all(np.isfinite(update)):
            break
        delta = update - coefficients
        coefficients = update
        if np.max(np.abs(design @ coefficients)) > SEPARATION_ETA:
            logger.debug("Separation detected after %d IRLS iterations", iterations)
            break
        if np.max(np.abs(delta)) <= tol * (np.max(np.abs(coefficients)) + tol):
            converged = True
            break

    log_likelihood = float(_binomial_log_likelihood(design @ coefficients, n, z).sum())
    if not np.all(np.isfinite(coefficients)) or not np.isfinite(log_likelihood):
        converged = False
    if not converged:
        logger.warning(
            "IRLS did not converge for state %d after %d iterations", from_state, iterations
        )
    return GlmFit(coefficients, log_likelihood, converged, iterations)


def interval_log_likelihood(
    counts: TransitionCounts, from_state: int, basis: SplineBasis, fit: GlmFit
) -> np.ndarray:
    """Average log-likelihood per trial within each knot interval.

    Intervals without any trials get +inf so they are never chosen as worst.
    """
    n = counts.successes(from_state).astype(float)
    z = counts.z[from_state - 1].astype(float)
    eta = basis.evaluate(MINUTES) @ fit.coefficients
    per_minute = np.where(z > 0, _binomial_log_likelihood(eta, n, z), 0.0)
    interval = basis.interval_of(MINUTES)
    n_intervals = len(basis.knots) - 1
    total = np.bincount(interval, weights=per_minute, minlength=n_intervals)
    trials = np.bincount(interval, weights=z, minlength=n_intervals)
    average = np.full(n_intervals, np.inf)
    np.divide(total, trials, out=average, where=trials > 0)
    return average


@dataclass(eq=False)
class DiurnalProbability:
    """Probability of a transition at every minute of the day.

    Built either from a spline fit (`from_fit`) or from hand-set values
    (`from_values`); fitted curves always lie strictly inside (0, 1).
    """

    probabilities: np.ndarray
    basis: Optional[SplineBasis] = None
    fit: Optional[GlmFit] = None
    history: list[tuple[int, float]] = field(default_factory=list)

    @classmethod
    def from_fit(
        cls, basis: SplineBasis, fit: GlmFit, history: Optional[list[tuple[int, float]]] = None
    ) -> "DiurnalProbability":
        p = expit(basis.evaluate(MINUTES) @ fit.coefficients)
        p = np.clip(p, PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
        return cls(p, basis, fit, list(history or []))

    @classmethod
    def from_values(cls, values: Any) -> "DiurnalProbability":
        """Hand-set curve: a scalar or 1440 values in [0, 1]."""
        p = np.broadcast_to(np.asarray(values, dtype=float), (MINUTES_PER_DAY,)).copy()
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise ConfigError("probabilities must lie in [0, 1]")
        return cls(p)

    def at(self, s: Any) -> Any:
        """Periodic lookup: s and s + 1440 give the same probability."""
        idx = (np.asarray(s, dtype=np.int64) - 1) % MINUTES_PER_DAY
        result = self.probabilities[idx]
        return float(result) if np.ndim(result) == 0 else result

    @property
    def n_knots(self) -> int:
        return 0 if self.basis is None else len(self.basis.knots)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"probabilities": self.probabilities.tolist()}
        if self.basis is not None and self.fit is not None:
            data.update(
                self.basis.to_dict(),
                coefficients=self.fit.coefficients.tolist(),
                log_likelihood=self.fit.log_likelihood,
                converged=self.fit.converged,
                iterations=self.fit.iterations,
                history=[list(item) for item in self.history],
            )
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DiurnalProbability":
        if "coefficients" not in data:
            return cls.from_values(data["probabilities"])
        basis = SplineBasis.from_dict(data)
        fit = GlmFit(
            np.asarray(data["coefficients"], dtype=float),
            float(data["log_likelihood"]),
            bool(data.get("converged", True)),
            int(data.get("iterations", 0)),
        )
        history = [(int(k), float(ll)) for k, ll in data.get("history", [])]
        return cls.from_fit(basis, fit, history)


def likelihood_ratio_pvalue(ll_null: float, ll_alt: float, df: int) -> float:
    """p-value of 2 (ll_alt - ll_null) under a chi-square with `df` degrees of freedom."""
    statistic = 2.0 * (ll_alt - ll_null)
    if statistic <= 0:
        return 1.0
    return float(chi2.sf(statistic, df))


def _usable(fit: GlmFit) -> bool:
    return bool(np.isfinite(fit.log_likelihood) and np.all(np.isfinite(fit.coefficients)))


def refine_knots(
    counts: TransitionCounts,
    from_state: int,
    init_knots: int = 8,
    max_knots: int = 22,
    lr_alpha: float = 0.05,
    *,
    degree: int = DEFAULT_DEGREE,
    periodic: bool = False,
) -> DiurnalProbability:
    """Grow the knot vector from `init_knots` uniform knots towards `max_knots`.

    Each round adds a knot at the centre of the interval with the lowest
    average log-likelihood per trial and refits; the round is kept only if the
    likelihood-ratio test against the previous accepted model rejects at
    `lr_alpha`. Returns the last accepted model.

    A fit that stops on separation (an interval without any departures) is
    kept: its probability there is driven to the zero boundary.

    Raises:
        ConfigError: `init_knots < 2` or `max_knots < init_knots`.
        NumericalError: the initial fit is not finite.
    """
    if init_knots < 2:
        raise ConfigError(f"init_knots must be at least 2, got {init_knots}")
    if max_knots < init_knots:
        raise ConfigError(f"max_knots ({max_knots}) must be >= init_knots ({init_knots})")
    if not 0 < lr_alpha < 1:
        raise ConfigError(f"lr_alpha must lie in (0, 1), got {lr_alpha}")

    basis = build_basis(uniform_knots(init_knots), degree, periodic)
    fit = fit_logistic(counts, from_state, basis)
    if not _usable(fit):
        raise NumericalError(
            f"initial spline fit with {init_knots} knots is not finite",
            best=DiurnalProbability.from_fit(basis, fit),
        )
    history = [(len(basis.knots), fit.log_likelihood)]
    logger.info("Knots %2d: log-likelihood %.3f", len(basis.knots), fit.log_likelihood)

    while len(basis.knots) < max_knots:
        scores = interval_log_likelihood(counts, from_state, basis, fit)
        widths = np.diff(basis.knots)
        scores = np.where(widths > 1.0, scores, np.inf)
        worst = int(np.argmin(scores))
        if not np.isfinite(scores[worst]):
            break
        candidate = basis.with_knot(0.5 * (basis.knots[worst] + basis.knots[worst + 1]))
        candidate_fit = fit_logistic(counts, from_state, candidate)
        if not _usable(candidate_fit):
            logger.info("Stopping: fit with %d knots is not finite", len(candidate.knots))
            break
        df = candidate.basis_dim - basis.basis_dim
        pvalue = likelihood_ratio_pvalue(fit.log_likelihood, candidate_fit.log_likelihood, df)
        logger.info(
            "Knots %2d: log-likelihood %.3f (LR p-value %.4g)",
            len(candidate.knots),
            candidate_fit.log_likelihood,
            pvalue,
        )
        if pvalue >= lr_alpha:
            break
        basis, fit = candidate, candidate_fit
        history.append((len(basis.knots), fit.log_likelihood))

    return DiurnalProbability.from_fit(basis, fit, history)
