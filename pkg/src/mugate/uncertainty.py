"""Step-level uncertainty, momentum aggregation, and scaling-gate policies.

The signal chain: a stepwise generator emits per-token log-probabilities for
each reasoning step; ``step_uncertainty`` condenses them to the average
negative log-likelihood per token (nats/token); ``momentum_update`` folds the
per-step values into an exponentially weighted running estimate

    M_t = alpha * M_{t-1} + (1 - alpha) * m_t,     M_0 = 0

and ``gate`` decides, per step, whether the step deviates enough from the
accumulated estimate to justify spending extra inference compute on it.

Everything here is an immutable value or a pure function returning a new
state, so concurrent trajectories are safe as long as each owns its own
tracker states.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (
    EmptyStepError,
    InvalidAlphaError,
    InvalidLogProbError,
    StateMismatchError,
)

POLICY_KINDS = ("mur", "avg", "tlc", "per-step", "never", "random")


@dataclass(frozen=True)
class TokenLogProb:
    """One generated token and its natural-log probability (<= 0, finite)."""

    token_text: str
    logprob: float

    def __post_init__(self) -> None:
        lp = self.logprob
        if not isinstance(lp, (int, float)) or math.isnan(lp):
            raise InvalidLogProbError(f"logprob must be a finite real, got {lp!r}")
        if math.isinf(lp):
            raise InvalidLogProbError(
                "logprob is -inf (zero-probability token); refusing to clamp a "
                "backend bug into the uncertainty signal"
            )
        if lp > 0.0:
            raise InvalidLogProbError(f"logprob must be <= 0, got {lp}")


@dataclass(frozen=True)
class StepUncertainty:
    """Average negative log-likelihood per token of one step, in nats."""

    value: float

    def __post_init__(self) -> None:
        if not (self.value >= 0.0) or math.isnan(self.value):
            raise ValueError(f"step uncertainty must be >= 0, got {self.value}")

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class MomentumState:
    """Exponentially weighted uncertainty tracker ``(alpha, M_t, t)``."""

    alpha: float
    value: float = 0.0
    step_index: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise InvalidAlphaError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")
        if self.step_index == 0 and self.value != 0.0:
            raise ValueError("a fresh tracker (t=0) must start at M=0")
        if self.value < 0.0:
            raise ValueError("momentum value must be >= 0")

    @classmethod
    def initial(cls, alpha: float) -> "MomentumState":
        return cls(alpha=alpha, value=0.0, step_index=0)


@dataclass(frozen=True)
class RunningMeanState:
    """Simple arithmetic mean of observed step uncertainties (baseline)."""

    mean: float = 0.0
    count: int = 0

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.count == 0 and self.mean != 0.0:
            raise ValueError("an empty mean must be 0")
        if self.mean < 0.0:
            raise ValueError("mean must be >= 0")

    @classmethod
    def initial(cls) -> "RunningMeanState":
        return cls()


@dataclass(frozen=True)
class ScalePolicy:
    """Which detector decides whether a step gets extra compute.

    Kinds:
      mur       scale when m_t > M_{t-1} - ln(gamma)
      avg       scale when m_t exceeds the mean of steps 1..t-1
      tlc       scale when geometric-mean token probability falls below tau
      per-step  always scale
      never     never scale
      random    scale a seeded random selection of steps (count or rate based)

    ``gamma`` is accepted on (0, 1]: practical runs use (0, 1) (the CLI
    enforces that), while gamma = 1 is the analytic boundary where the gate
    reduces to the strict comparison m_t > M_{t-1}.
    """

    kind: str
    gamma: float = 0.9
    tau: float = 0.8
    random_count: int | None = None
    random_rate: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "mur" and not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.kind == "tlc" and not (0.0 < self.tau < 1.0):
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.kind == "random":
            if (self.random_count is None) == (self.random_rate is None):
                raise ValueError("random policy needs exactly one of count or rate")
            if self.random_count is not None and self.random_count < 0:
                raise ValueError("random count must be >= 0")
            if self.random_rate is not None and not (0.0 <= self.random_rate <= 1.0):
                raise ValueError("random rate must lie in [0, 1]")

    @classmethod
    def mur(cls, gamma: float = 0.9) -> "ScalePolicy":
        return cls(kind="mur", gamma=gamma)

    @classmethod
    def avg_uncertainty(cls) -> "ScalePolicy":
        return cls(kind="avg")

    @classmethod
    def tlc_threshold(cls, tau: float = 0.8) -> "ScalePolicy":
        return cls(kind="tlc", tau=tau)

    @classmethod
    def per_step(cls) -> "ScalePolicy":
        return cls(kind="per-step")

    @classmethod
    def never(cls) -> "ScalePolicy":
        return cls(kind="never")

    @classmethod
    def random(cls, count: int | None = None, rate: float | None = None) -> "ScalePolicy":
        return cls(kind="random", random_count=count, random_rate=rate)


@dataclass(frozen=True)
class GateDecision:
    """Outcome of one gate evaluation.

    ``threshold`` is the trigger level the policy compared against
    (None for policies that have no scalar threshold).
    """

    scale: bool
    m_current: float
    threshold: float | None
    policy_tag: str
    step_index: int


def step_uncertainty(token_logprobs: Sequence[TokenLogProb]) -> StepUncertainty:
    """Average negative log-likelihood per token of one step.

    Raises EmptyStepError on an empty token list and InvalidLogProbError if
    any entry was constructed around a bad value (validated at construction).
    """
    if not token_logprobs:
        raise EmptyStepError("cannot compute uncertainty of a zero-token step")
    total = -sum(t.logprob for t in token_logprobs)
    return StepUncertainty(total / len(token_logprobs))


def token_level_confidence(token_logprobs: Sequence[TokenLogProb]) -> float:
    """Geometric-mean token probability of a step, in (0, 1].

    Equals exp(-m) for the step's uncertainty m, so a fixed confidence
    threshold is a fixed-threshold detector on the same signal.
    """
    if not token_logprobs:
        raise EmptyStepError("cannot compute confidence of a zero-token step")
    mean_lp = sum(t.logprob for t in token_logprobs) / len(token_logprobs)
    return math.exp(mean_lp)


def momentum_update(state: MomentumState, m: StepUncertainty | float) -> MomentumState:
    """One recursion step: M_t = alpha*M_{t-1} + (1-alpha)*m_t."""
    value = float(m)
    if value < 0.0:
        raise ValueError("step uncertainty must be >= 0")
    new_value = state.alpha * state.value + (1.0 - state.alpha) * value
    return MomentumState(
        alpha=state.alpha, value=new_value, step_index=state.step_index + 1
    )


def momentum_closed_form(
    ms: Sequence[StepUncertainty | float], alpha: float
) -> float:
    """Closed form of the momentum recursion started at M_0 = 0.

    Returns (1-alpha) * sum_i alpha^(t-i) * m_i over i = 1..t.  Identical to
    iterating ``momentum_update`` from a fresh tracker, which the test suite
    checks to relative 1e-12; this evaluation path stays independent of the
    recursion.
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidAlphaError(f"alpha must lie in (0, 1), got {alpha}")
    if not ms:
        raise ValueError("need at least one step uncertainty")
    t = len(ms)
    total = 0.0
    for i, m in enumerate(ms, start=1):
        total += alpha ** (t - i) * float(m)
    return (1.0 - alpha) * total


def running_mean_update(
    state: RunningMeanState, m: StepUncertainty | float
) -> RunningMeanState:
    """Fold one observation into the arithmetic-mean baseline tracker."""
    value = float(m)
    if value < 0.0:
        raise ValueError("step uncertainty must be >= 0")
    new_count = state.count + 1
    new_mean = (state.mean * state.count + value) / new_count
    return RunningMeanState(mean=new_mean, count=new_count)


def mur_threshold(momentum_value: float, gamma: float) -> float:
    """Trigger level of the momentum gate in log space: M_{t-1} - ln(gamma).

    Algebraically identical to the exponentiated comparison
    exp(m_t) > exp(M_{t-1}) / gamma for finite inputs, but immune to
    overflow of exp(m_t).
    """
    return momentum_value - math.log(gamma)


def plan_random_steps(
    policy: ScalePolicy, max_steps: int, seed: int
) -> frozenset[int]:
    """Pre-draw the step indices a random policy will scale in one trajectory.

    Count-based policies draw a fixed-size sample without replacement from
    steps 1..max_steps (mirroring "scale the same number of steps" ablations);
    rate-based policies flip an independent coin per step.  Deterministic
    given (policy, max_steps, seed).
    """
    if policy.kind != "random":
        raise ValueError("plan_random_steps only applies to random policies")
    rng = random.Random(seed)
    if policy.random_count is not None:
        k = min(policy.random_count, max_steps)
        return frozenset(rng.sample(range(1, max_steps + 1), k))
    rate = policy.random_rate or 0.0
    return frozenset(t for t in range(1, max_steps + 1) if rng.random() < rate)


def gate(
    policy: ScalePolicy,
    momentum: MomentumState,
    running_mean: RunningMeanState,
    m: StepUncertainty | float,
    tlc: float,
    step_index: int,
    random_plan: frozenset[int] | None = None,
) -> GateDecision:
    """Decide whether step ``step_index`` should receive extra compute.

    Both trackers must reflect exactly the steps before ``step_index``;
    otherwise StateMismatchError is raised.  The threshold-based policies
    (mur / avg / tlc) never scale the first step: there is no history to
    deviate from yet.  Ties at the exact threshold do not scale (strict
    inequality).
    """
    if step_index < 1:
        raise ValueError("step_index must be >= 1")
    if momentum.step_index != step_index - 1:
        raise StateMismatchError(
            f"momentum tracker has seen {momentum.step_index} steps but the "
            f"gate was asked about step {step_index}"
        )
    m_value = float(m)

    if policy.kind == "mur":
        threshold = mur_threshold(momentum.value, policy.gamma)
        scale = step_index >= 2 and m_value > threshold
        return GateDecision(scale, m_value, threshold, "mur", step_index)

    if policy.kind == "avg":
        if running_mean.count != step_index - 1:
            raise StateMismatchError(
                f"running mean has {running_mean.count} entries but the gate "
                f"was asked about step {step_index}"
            )
        threshold = running_mean.mean
        scale = step_index >= 2 and m_value > threshold
        return GateDecision(scale, m_value, threshold, "avg", step_index)

    if policy.kind == "tlc":
        scale = step_index >= 2 and tlc < policy.tau
        return GateDecision(scale, m_value, policy.tau, "tlc", step_index)

    if policy.kind == "per-step":
        return GateDecision(True, m_value, None, "per-step", step_index)

    if policy.kind == "never":
        return GateDecision(False, m_value, None, "never", step_index)

    # random
    if random_plan is None:
        raise ValueError("random policy requires a precomputed plan")
    return GateDecision(step_index in random_plan, m_value, None, "random", step_index)


def replay_decisions(
    ms: Iterable[float],
    policy: ScalePolicy,
    alpha: float,
    random_plan: frozenset[int] | None = None,
) -> list[GateDecision]:
    """Re-run the gate over a recorded uncertainty sequence.

    The momentum and mean trackers are rebuilt from the recorded values
    themselves (decisions never alter the sequence), which makes offline
    gamma sweeps deterministic and comparable across policies.
    """
    momentum = MomentumState.initial(alpha)
    mean = RunningMeanState.initial()
    decisions: list[GateDecision] = []
    for t, m_value in enumerate(ms, start=1):
        tlc = math.exp(-m_value)
        decisions.append(
            gate(policy, momentum, mean, m_value, tlc, t, random_plan=random_plan)
        )
        momentum = momentum_update(momentum, m_value)
        mean = running_mean_update(mean, m_value)
    return decisions
