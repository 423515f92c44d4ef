"""Exception hierarchy shared across the package.

Every error that callers are expected to branch on has its own class so
tests and the CLI exit-code mapping can match on type rather than message.
"""


class MugateError(Exception):
    """Base class for all package errors."""


# --- uncertainty math -------------------------------------------------------

class EmptyStepError(MugateError):
    """A step arrived with no tokens; usually a backend misconfiguration."""


class InvalidLogProbError(MugateError):
    """Token log-probability is NaN, positive, or -inf."""


class InvalidAlphaError(MugateError):
    """Momentum rate outside the open interval (0, 1)."""


class InvalidStepIndexError(MugateError):
    """Step count / horizon parameter out of range."""


class StateMismatchError(MugateError):
    """A tracker's step count is inconsistent with the claimed step index."""


# --- verification experiments -----------------------------------------------

class InsufficientTrialsError(MugateError):
    """Monte Carlo experiment invoked with too few trials to be meaningful."""


class DegenerateRatesError(MugateError):
    """Momentum rate and drift rate too close; the bound constant blows up."""


class RegimeViolationError(MugateError):
    """Trigger threshold below the expected momentum; one-sided bound invalid."""


class SequenceTooShortError(MugateError):
    """Identity check needs at least two observations."""


# --- backends ----------------------------------------------------------------

class BackendError(MugateError):
    """Base class for generation-backend failures."""


class BackendUnreachableError(BackendError):
    """Transport-level failure talking to the completion endpoint (retryable)."""


class MissingLogProbsError(BackendError):
    """Endpoint did not return per-token logprobs; configuration error."""


class ContextOverflowError(BackendError):
    """Prompt exceeds the model's context window."""


class ScriptExhaustedError(BackendError):
    """Mock script has no entry left for the requested context."""


class ThinkingUnsupportedError(BackendError):
    """Backend cannot serve thinking-mode generations."""


# --- scaling strategies -------------------------------------------------------

class StrategyError(MugateError):
    """Base class for scaling-strategy failures."""


class ScorerFailureError(StrategyError):
    """A candidate could not be scored; the strategy aborts."""


class CriticFailureError(StrategyError):
    """Feedback service failed; the strategy aborts."""


# --- CLI / IO ------------------------------------------------------------------

class ConfigError(MugateError):
    """Invalid or missing run configuration."""


class TraceSchemaError(MugateError):
    """Trace file is corrupt or carries an unsupported schema version."""
