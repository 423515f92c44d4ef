"""Numerical verification of the momentum estimator's analytic guarantees.

Five families of checks, each pairing a closed-form evaluator with a seeded
Monte Carlo experiment:

  1. closed-form equivalence   recursion vs. exponentially weighted sum
  2. variance reduction        Var(M_t) = f(alpha, t) * sigma^2 with
                               f(alpha, t) = (1-alpha)(1-alpha^(2t))/(1+alpha)
  3. bias convergence          |E[M_t - mu_t]| <= K * rho^t on exponentially
                               drifting signals mu_i = mu_inf + D * beta^i
  4. momentum vs. simple mean  region map of f(alpha, t) < 1/t
  5. trigger misfire           Hoeffding-style tail bound on the probability
                               that accumulated momentum spuriously exceeds
                               the gate threshold m_t + ln(gamma)

All experiments draw from numpy's PCG64 generator and are bit-reproducible
given (seed, trials, parameters).  Bounds are inequalities, so Monte Carlo
checks pass when the empirical value stays within three standard errors of
the bound; two-sided identities use a relative slack instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateRatesError,
    InsufficientTrialsError,
    InvalidAlphaError,
    InvalidStepIndexError,
    RegimeViolationError,
    SequenceTooShortError,
)

RNG_NAME = "PCG64"

MIN_TRIALS_VARIANCE = 10_000
MIN_TRIALS_BIAS = 10_000
MIN_TRIALS_MISFIRE = 100_000


@dataclass(frozen=True)
class NoiseModel:
    """Constant pure uncertainties observed through Gaussian noise."""

    mu: tuple[float, ...]
    sigma: float
    seed: int

    def __post_init__(self) -> None:
        if self.sigma <= 0.0:
            raise ValueError("sigma must be > 0")
        if any(v < 0.0 for v in self.mu):
            raise ValueError("pure uncertainties must be >= 0")


@dataclass(frozen=True)
class DriftModel:
    """Pure uncertainties converging exponentially: mu_i = mu_inf + D*beta^i."""

    mu_infinity: float
    D: float
    beta: float
    t_max: int

    def __post_init__(self) -> None:
        if self.mu_infinity < 0.0:
            raise ValueError("mu_infinity must be >= 0")
        if self.D <= 0.0:
            raise ValueError("D must be > 0")
        if not (0.0 < self.beta < 1.0):
            raise ValueError("beta must lie in (0, 1)")
        if self.t_max < 1:
            raise InvalidStepIndexError("t_max must be >= 1")

    def mu(self, t: int) -> np.ndarray:
        """Pure uncertainty sequence mu_1..mu_t."""
        return self.mu_infinity + self.D * self.beta ** np.arange(1, t + 1)


@dataclass(frozen=True)
class BoundReport:
    """Analytic bound vs. empirical estimate for one experiment setting."""

    experiment: str
    parameters: dict[str, float]
    analytic_bound: float
    empirical_value: float
    trials: int
    satisfied: bool
    rng: str = RNG_NAME

    def __post_init__(self) -> None:
        # normalize numpy scalars so reports serialize cleanly
        object.__setattr__(self, "analytic_bound", float(self.analytic_bound))
        object.__setattr__(self, "empirical_value", float(self.empirical_value))
        object.__setattr__(self, "trials", int(self.trials))
        object.__setattr__(self, "satisfied", bool(self.satisfied))
        object.__setattr__(
            self, "parameters", {k: float(v) for k, v in self.parameters.items()}
        )

    def summary_line(self) -> str:
        mark = "ok " if self.satisfied else "FAIL"
        params = " ".join(f"{k}={v:g}" for k, v in sorted(self.parameters.items()))
        return (
            f"[{mark}] {self.experiment:<24} empirical={self.empirical_value:.6g} "
            f"bound={self.analytic_bound:.6g} trials={self.trials} {params}"
        )


@dataclass(frozen=True)
class BoundedSampler:
    """Sampler on [0, 1] with a known mean, so bound centers stay analytic."""

    name: str
    mean: float
    draw: Callable[[np.random.Generator, tuple[int, ...]], np.ndarray]


UNIFORM_01 = BoundedSampler(
    name="uniform01", mean=0.5, draw=lambda rng, shape: rng.uniform(0.0, 1.0, shape)
)

SAMPLERS = {
    "uniform01": UNIFORM_01,
    "zero": BoundedSampler("zero", 0.0, lambda rng, shape: np.zeros(shape)),
}


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 1.0):
        raise InvalidAlphaError(f"alpha must lie in (0, 1), got {alpha}")


def variance_coefficient(alpha: float, t: int) -> float:
    """Variance shrink factor f(alpha, t) = (1-alpha)(1-alpha^(2t))/(1+alpha).

    Var(M_t) = f(alpha, t) * sigma^2 when each observation carries iid
    Gaussian noise of variance sigma^2.  Lies in (0, 1) for valid inputs
    and increases toward (1-alpha)/(1+alpha) as t grows.
    """
    _check_alpha(alpha)
    if t < 1:
        raise InvalidStepIndexError(f"t must be >= 1, got {t}")
    return (1.0 - alpha) * (1.0 - alpha ** (2 * t)) / (1.0 + alpha)


def simple_average_variance(t: int) -> float:
    """Variance coefficient 1/t of the plain running mean over t samples."""
    if t < 1:
        raise InvalidStepIndexError(f"t must be >= 1, got {t}")
    return 1.0 / t


@dataclass(frozen=True)
class CoefficientComparison:
    """Momentum vs. simple-average variance coefficients at one (alpha, t)."""

    alpha: float
    t: int
    momentum_coeff: float
    average_coeff: float
    momentum_lower: bool


def compare_momentum_vs_average(alpha: float, t: int) -> CoefficientComparison:
    """Which estimator has the smaller variance coefficient at (alpha, t).

    No universal winner exists: e.g. f(0.9, 20) ~= 0.0518 narrowly exceeds
    1/20, while alpha closer to 1 flips the comparison.  Callers get the
    raw region information rather than a blanket claim.
    """
    _check_alpha(alpha)
    if not (1 <= t <= 100):
        raise InvalidStepIndexError(f"t must lie in [1, 100], got {t}")
    mom = variance_coefficient(alpha, t)
    avg = simple_average_variance(t)
    return CoefficientComparison(alpha, t, mom, avg, mom < avg)


def momentum_region_map(
    alphas: Sequence[float], ts: Sequence[int]
) -> list[CoefficientComparison]:
    """Grid of momentum-vs-average comparisons over (alpha, t)."""
    return [compare_momentum_vs_average(a, t) for a in alphas for t in ts]


def _momentum_over_trials(m: np.ndarray, alpha: float, seeded: bool) -> np.ndarray:
    """Momentum M_t for each row of a (trials, t) observation matrix.

    seeded=False starts the recursion at M_0 = 0 (the operational tracker);
    seeded=True starts at M_1 = m_1, which makes the effective weights sum
    to one for every t.
    """
    t = m.shape[1]
    if seeded:
        M = m[:, 0].astype(float).copy()
        start = 1
    else:
        M = np.zeros(m.shape[0])
        start = 0
    for i in range(start, t):
        M = alpha * M + (1.0 - alpha) * m[:, i]
    return M


def momentum_closed_form_seeded(ms: Sequence[float], alpha: float) -> float:
    """Closed form of the recursion seeded at the first observation.

    Expands to alpha^t * m_1 + (1-alpha) * sum_i alpha^(t-i) * m_i, whose
    weights sum to exactly one; the zero-initialized variant in
    ``uncertainty.momentum_closed_form`` differs by the alpha^t * m_1 term.
    """
    _check_alpha(alpha)
    if not ms:
        raise ValueError("need at least one observation")
    t = len(ms)
    total = alpha**t * float(ms[0])
    for i, m in enumerate(ms, start=1):
        total += (1.0 - alpha) * alpha ** (t - i) * float(m)
    return total


def empirical_variance_experiment(
    alpha: float,
    t: int,
    sigma: float,
    trials: int,
    seed: int,
    mu: float = 1.0,
    slack: float = 0.05,
) -> BoundReport:
    """Monte Carlo check that Var(M_t)/sigma^2 matches f(alpha, t).

    Simulates m_i = mu + eps_i with eps_i ~ Normal(0, sigma^2) and a constant
    mu, runs the zero-initialized recursion per trial, and compares the
    sample variance ratio against the closed-form coefficient with a
    two-sided relative slack.  The final-step sample variance (the ratio
    Var(m_t)/sigma^2) is recorded in the parameters for stability
    comparisons.
    """
    coeff = variance_coefficient(alpha, t)
    if trials < MIN_TRIALS_VARIANCE:
        raise InsufficientTrialsError(
            f"variance experiment needs >= {MIN_TRIALS_VARIANCE} trials, got {trials}"
        )
    rng = np.random.default_rng(seed)
    m = mu + rng.normal(0.0, sigma, size=(trials, t))
    M = _momentum_over_trials(m, alpha, seeded=False)
    ratio = float(M.var(ddof=1) / sigma**2)
    step_ratio = float(m[:, -1].var(ddof=1) / sigma**2)
    # SE of a normal-sample variance estimate: Var * sqrt(2 / (n - 1)).
    se = ratio * math.sqrt(2.0 / (trials - 1))
    return BoundReport(
        experiment="variance_coefficient",
        parameters={
            "alpha": alpha,
            "t": t,
            "sigma": sigma,
            "mu": mu,
            "slack": slack,
            "step_variance_ratio": step_ratio,
            "se": se,
        },
        analytic_bound=coeff,
        empirical_value=ratio,
        trials=trials,
        satisfied=abs(ratio - coeff) <= slack * coeff,
    )


def variance_grid_experiment(
    alphas: Sequence[float],
    ts: Sequence[int],
    sigma: float,
    trials: int,
    seed: int,
) -> list[BoundReport]:
    """Variance checks over a grid, one report per (alpha, t).

    Each report is satisfied when the empirical ratio sits within three
    standard errors of f(alpha, t) AND the momentum variance undercuts the
    raw per-step variance by more than three standard errors of their
    difference (recorded as ``stability_margin_se``).
    """
    if trials < MIN_TRIALS_VARIANCE:
        raise InsufficientTrialsError(
            f"variance grid needs >= {MIN_TRIALS_VARIANCE} trials, got {trials}"
        )
    reports = []
    t_max = max(ts)
    for gi, alpha in enumerate(alphas):
        rng = np.random.default_rng(seed + gi)
        m = 1.0 + rng.normal(0.0, sigma, size=(trials, t_max))
        M = np.zeros(trials)
        by_t = {}
        for i in range(t_max):
            M = alpha * M + (1.0 - alpha) * m[:, i]
            by_t[i + 1] = M.copy()
        for t in ts:
            coeff = variance_coefficient(alpha, t)
            var_M = float(by_t[t].var(ddof=1))
            var_m = float(m[:, t - 1].var(ddof=1))
            se_M = var_M * math.sqrt(2.0 / (trials - 1))
            se_m = var_m * math.sqrt(2.0 / (trials - 1))
            se_diff = math.hypot(se_M, se_m)
            ratio = var_M / sigma**2
            matches = abs(ratio - coeff) <= 3.0 * se_M / sigma**2
            stabler = (var_m - var_M) > 3.0 * se_diff
            margin = (var_m - var_M) / se_diff if se_diff > 0 else math.inf
            reports.append(
                BoundReport(
                    experiment="variance_grid",
                    parameters={
                        "alpha": alpha,
                        "t": t,
                        "sigma": sigma,
                        "step_variance": var_m,
                        "stability_margin_se": margin,
                        "se": se_M,
                    },
                    analytic_bound=coeff,
                    empirical_value=ratio,
                    trials=trials,
                    satisfied=matches and stabler,
                )
            )
    return reports


def bias_bound_constant(alpha: float, beta: float, D: float) -> tuple[float, float]:
    """Constants (K, rho) of the drift-bias bound K * rho^t.

    K = D * ((1-alpha)*beta/|alpha-beta| + 1) and rho = max(alpha, beta);
    the bound degenerates as alpha approaches beta.
    """
    _check_alpha(alpha)
    if abs(alpha - beta) < 1e-6:
        raise DegenerateRatesError(
            f"|alpha - beta| = {abs(alpha - beta):.2e} too small; K is undefined"
        )
    K = D * ((1.0 - alpha) * beta / abs(alpha - beta) + 1.0)
    return K, max(alpha, beta)


def bias_bound_experiment(
    drift: DriftModel,
    alpha: float,
    sigma: float,
    trials: int,
    seed: int,
) -> list[BoundReport]:
    """Per-step check that the mean drift-tracking bias stays under K*rho^t.

    Observations are m_i = mu_i + noise with mu_i = mu_inf + D*beta^i.  The
    bound is evaluated on the recursion seeded at the first observation,
    whose weights sum to one -- the premise under which the absolute bound
    holds at every t.  The zero-initialized tracker additionally carries a
    -alpha^t * mu_t start-up deficit, which is reported alongside
    (``zero_init_bias``) but not gated on.

    sigma = 0 runs the deterministic expectation directly and is exempt
    from the minimum-trial requirement.
    """
    K, rho = bias_bound_constant(alpha, drift.beta, drift.D)
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    if sigma > 0.0 and trials < MIN_TRIALS_BIAS:
        raise InsufficientTrialsError(
            f"bias experiment needs >= {MIN_TRIALS_BIAS} trials when sigma > 0"
        )
    if sigma == 0.0:
        trials = 1
    rng = np.random.default_rng(seed)
    t_max = drift.t_max
    mu = drift.mu(t_max)
    noise = (
        rng.normal(0.0, sigma, size=(trials, t_max))
        if sigma > 0.0
        else np.zeros((1, t_max))
    )
    m = mu[None, :] + noise

    reports = []
    M_seeded = m[:, 0].astype(float).copy()
    M_zero = (1.0 - alpha) * m[:, 0]
    for t in range(1, t_max + 1):
        if t > 1:
            M_seeded = alpha * M_seeded + (1.0 - alpha) * m[:, t - 1]
            M_zero = alpha * M_zero + (1.0 - alpha) * m[:, t - 1]
        bias_samples = M_seeded - mu[t - 1]
        empirical = abs(float(bias_samples.mean()))
        se = (
            float(bias_samples.std(ddof=1)) / math.sqrt(trials) if trials > 1 else 0.0
        )
        bound = K * rho**t
        zero_bias = abs(float((M_zero - mu[t - 1]).mean()))
        reports.append(
            BoundReport(
                experiment="bias_bound",
                parameters={
                    "alpha": alpha,
                    "beta": drift.beta,
                    "D": drift.D,
                    "mu_infinity": drift.mu_infinity,
                    "sigma": sigma,
                    "t": t,
                    "K": K,
                    "rho": rho,
                    "se": se,
                    "zero_init_bias": zero_bias,
                },
                analytic_bound=bound,
                empirical_value=empirical,
                trials=trials,
                satisfied=empirical <= bound + 3.0 * se,
            )
        )
    return reports


def misfire_exponent_coefficient(alpha: float) -> float:
    """Exponent coefficient 2*(1+alpha)/(1-alpha) of the misfire tail bound."""
    _check_alpha(alpha)
    return 2.0 * (1.0 + alpha) / (1.0 - alpha)


def misfire_bound_experiment(
    alpha: float,
    gamma: float,
    t: int,
    m_current: float,
    trials: int,
    seed: int,
    sampler: BoundedSampler = UNIFORM_01,
) -> BoundReport:
    """Tail-probability check of the gate's false-trigger bound.

    History uncertainties m_1..m_{t-1} are drawn iid from a bounded sampler
    on [0, 1]; the experiment measures how often the accumulated momentum
    M_{t-1} reaches the trigger threshold tau = m_current + ln(gamma), and
    compares that frequency against

        exp(-2 * (tau - nu)^2 * (1+alpha) / (1-alpha)),    nu = E[M_{t-1}].

    Only the one-sided regime tau >= nu is meaningful; other configurations
    raise RegimeViolationError.
    """
    _check_alpha(alpha)
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if t < 2:
        raise InvalidStepIndexError("need at least one history step (t >= 2)")
    if trials < MIN_TRIALS_MISFIRE:
        raise InsufficientTrialsError(
            f"misfire experiment needs >= {MIN_TRIALS_MISFIRE} trials, got {trials}"
        )
    tau = m_current + math.log(gamma)
    nu = sampler.mean * (1.0 - alpha ** (t - 1))
    if tau < nu:
        raise RegimeViolationError(
            f"threshold tau={tau:.4f} below expected momentum nu={nu:.4f}"
        )
    rng = np.random.default_rng(seed)
    history = sampler.draw(rng, (trials, t - 1))
    if history.size and (history.min() < 0.0 or history.max() > 1.0):
        raise ValueError(f"sampler {sampler.name!r} left [0, 1]")
    M = _momentum_over_trials(history, alpha, seeded=False)
    freq = float((M >= tau).mean())
    bound = math.exp(-misfire_exponent_coefficient(alpha) * (tau - nu) ** 2)
    se = math.sqrt(freq * (1.0 - freq) / trials)
    return BoundReport(
        experiment="misfire_bound",
        parameters={
            "alpha": alpha,
            "gamma": gamma,
            "t": t,
            "m_current": m_current,
            "tau": tau,
            "nu": nu,
            "se": se,
            "sampler_mean": sampler.mean,
        },
        analytic_bound=bound,
        empirical_value=freq,
        trials=trials,
        satisfied=freq <= bound + 3.0 * se,
    )


def gradient_form_identity(ms: Sequence[float], alpha: float) -> float:
    """Max residual of the update-decomposition identity for seeded momentum.

    With per-step updates g_i = m_i - m_{i+1}, the seeded closed form must
    equal m_1 - sum_{i<t} (1 - alpha^(t-i)) * g_i at every t; returns the
    largest absolute difference across t = 2..len(ms).
    """
    _check_alpha(alpha)
    if len(ms) < 2:
        raise SequenceTooShortError("identity needs at least two observations")
    g = [float(ms[i]) - float(ms[i + 1]) for i in range(len(ms) - 1)]
    worst = 0.0
    for t in range(2, len(ms) + 1):
        lhs = momentum_closed_form_seeded(ms[:t], alpha)
        rhs = float(ms[0]) - sum(
            (1.0 - alpha ** (t - i)) * g[i - 1] for i in range(1, t)
        )
        worst = max(worst, abs(lhs - rhs))
    return worst


def closed_form_equivalence_check(
    sequences: int,
    max_len: int,
    seed: int,
    rel_tol: float = 1e-12,
) -> BoundReport:
    """Random-sequence sweep of recursion-vs-closed-form agreement.

    Draws ``sequences`` uncertainty sequences (values in [0, 20], lengths in
    [1, max_len], alpha in (0.01, 0.99)), iterates the zero-initialized
    recursion, and reports the worst relative deviation from the weighted-sum
    closed form.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(sequences):
        n = int(rng.integers(1, max_len + 1))
        alpha = float(rng.uniform(0.01, 0.99))
        ms = rng.uniform(0.0, 20.0, size=n)
        M = 0.0
        for v in ms:
            M = alpha * M + (1.0 - alpha) * v
        weights = (1.0 - alpha) * alpha ** np.arange(n - 1, -1, -1)
        closed = float(weights @ ms)
        denom = max(abs(M), abs(closed), 1e-300)
        worst = max(worst, abs(M - closed) / denom)
    return BoundReport(
        experiment="closed_form_equivalence",
        parameters={"sequences": sequences, "max_len": max_len},
        analytic_bound=rel_tol,
        empirical_value=worst,
        trials=sequences,
        satisfied=worst <= rel_tol,
    )


def render_reports(reports: Sequence[BoundReport]) -> str:
    """Human-readable summary table, one line per report."""
    lines = [r.summary_line() for r in reports]
    total = len(reports)
    passed = sum(r.satisfied for r in reports)
    lines.append(f"{passed}/{total} checks satisfied")
    return "\n".join(lines)


def write_reports_csv(reports: Sequence[BoundReport], path: str) -> None:
    """Flat CSV export: experiment, parameters..., bound, empirical, trials, satisfied."""
    import csv

    keys = sorted({k for r in reports for k in r.parameters})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["experiment", *keys, "analytic_bound", "empirical", "trials", "satisfied", "rng"]
        )
        for r in reports:
            writer.writerow(
                [
                    r.experiment,
                    *[r.parameters.get(k, "") for k in keys],
                    r.analytic_bound,
                    r.empirical_value,
                    r.trials,
                    r.satisfied,
                    r.rng,
                ]
            )
