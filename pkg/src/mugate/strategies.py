"""Pluggable per-step scaling strategies and their external-model clients.

Each strategy replaces (or re-derives) the current step and reports the
tokens it spent, split into backbone tokens (generations by the main model,
including every candidate considered) and external tokens (scorer/critic
usage).  The chosen step always carries token logprobs, so the momentum
tracker can be updated from the step that is actually kept.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol

import requests

from .backend import GenerationContext, MockBackend, MockScript, StepBackend, StepGeneration
from .errors import CriticFailureError, ScorerFailureError

FEEDBACK_TEMPLATE = (
    "Feedback on your previous attempt at Step {stepidx}:\n"
    "{draft}\n"
    "Critique: {feedback}\n"
    "Rewrite Step {stepidx} taking the critique into account."
)


@dataclass(frozen=True)
class StrategyOutcome:
    """Result of applying one scaling strategy to one step."""

    chosen_step: StepGeneration
    external_tokens: int
    candidates_considered: int
    rounds: int
    strategy_tag: str
    backbone_tokens: int  # all generations the strategy triggered, incl. chosen

    def __post_init__(self) -> None:
        if self.external_tokens < 0 or self.backbone_tokens < 0:
            raise ValueError("token counts must be >= 0")
        if self.candidates_considered < 1:
            raise ValueError("a strategy considers at least one candidate")
        if not self.chosen_step.tokens:
            raise ValueError("chosen step must carry token logprobs")


class ScorerClient(Protocol):
    def score(self, ctx: GenerationContext, candidate_text: str) -> tuple[float, int]:
        """Return (score, tokens_used) for one candidate step."""
        ...


class CriticClient(Protocol):
    def critique(self, ctx: GenerationContext, step_text: str) -> tuple[str, int]:
        """Return (feedback_text, tokens_used) for the current step."""
        ...


class ScriptedScorer:
    """Scores candidates by text lookup over a mock script's candidate records."""

    def __init__(self, script: MockScript):
        self._table: dict[str, tuple[float, int]] = {}
        for rec in script.iter_records("candidates"):
            scores = rec.get("scores") or []
            tokens = rec.get("score_tokens") or [0] * len(scores)
            for text, sc, tk in zip(rec["texts"], scores, tokens):
                self._table[text] = (float(sc), int(tk))

    def score(self, ctx: GenerationContext, candidate_text: str) -> tuple[float, int]:
        try:
            return self._table[candidate_text]
        except KeyError:
            raise ScorerFailureError(
                f"no scripted score for candidate {candidate_text[:60]!r}"
            ) from None


class ScriptedCritic:
    """Serves scripted critiques; consumes one record per round at each step."""

    def __init__(self, backend: MockBackend):
        self._backend = backend

    def critique(self, ctx: GenerationContext, step_text: str) -> tuple[str, int]:
        try:
            return self._backend.next_critic_feedback(ctx.step_index)
        except Exception as exc:
            raise CriticFailureError(str(exc)) from exc


class HttpScorer:
    """Reward-scoring service: POST {question, prior_steps, candidate_step}."""

    def __init__(self, endpoint_url: str, timeout: float = 60.0):
        self._url = endpoint_url
        self._timeout = timeout

    def score(self, ctx: GenerationContext, candidate_text: str) -> tuple[float, int]:
        payload = {
            "question": ctx.question,
            "prior_steps": list(ctx.prior_steps),
            "candidate_step": candidate_text,
        }
        try:
            resp = requests.post(self._url, json=payload, timeout=self._timeout)
            resp.raise_for_status()
            data = resp.json()
            return float(data["score"]), int(data.get("tokens_used", 0))
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise ScorerFailureError(f"scorer call failed: {exc}") from exc


class HttpCritic:
    """Feedback service: POST {question, prior_steps, candidate_step}."""

    def __init__(self, endpoint_url: str, timeout: float = 60.0):
        self._url = endpoint_url
        self._timeout = timeout

    def critique(self, ctx: GenerationContext, step_text: str) -> tuple[str, int]:
        payload = {
            "question": ctx.question,
            "prior_steps": list(ctx.prior_steps),
            "candidate_step": step_text,
        }
        try:
            resp = requests.post(self._url, json=payload, timeout=self._timeout)
            resp.raise_for_status()
            data = resp.json()
            return str(data["feedback_text"]), int(data.get("tokens_used", 0))
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise CriticFailureError(f"critic call failed: {exc}") from exc


def guided_search(
    ctx: GenerationContext, n: int, backend: StepBackend, scorer: ScorerClient
) -> StrategyOutcome:
    """Step-level best-of-n: sample n candidates, keep the highest scored.

    Candidates are scored independently; ties break toward the lowest
    candidate index, so identical candidate sets always yield identical
    choices, and any positive rescaling of the scores leaves the argmax
    unchanged.
    """
    if n < 2:
        raise ValueError("guided search needs n >= 2 (n=1 is vacuous scaling)")
    candidates = backend.generate_candidates(ctx, n)
    scores: list[float] = []
    external = 0
    for cand in candidates:
        score, tokens = scorer.score(ctx, cand.text)
        if score != score:  # NaN guard
            raise ScorerFailureError("scorer returned NaN")
        scores.append(score)
        external += tokens
    best = max(range(len(candidates)), key=lambda i: (scores[i], -i))
    return StrategyOutcome(
        chosen_step=candidates[best],
        external_tokens=external,
        candidates_considered=len(candidates),
        rounds=1,
        strategy_tag="guided_search",
        backbone_tokens=sum(c.backbone_tokens for c in candidates),
    )


def critic_refine(
    ctx: GenerationContext,
    initial_step: StepGeneration,
    backend: StepBackend,
    critic: CriticClient,
    max_rounds: int = 1,
) -> StrategyOutcome:
    """Critique-and-regenerate loop; the final regeneration is kept.

    Each round appends the critique (with the draft it refers to) as a
    delimited feedback block and regenerates the step.  The initial step's
    own generation cost is accounted for by the caller; this outcome counts
    only the regenerations it triggered.
    """
    if max_rounds < 1:
        raise ValueError("critic refinement needs max_rounds >= 1")
    current = initial_step
    regen_ctx = ctx
    external = 0
    backbone = 0
    for round_idx in range(1, max_rounds + 1):
        feedback, tokens = critic.critique(regen_ctx, current.text)
        external += tokens
        block = FEEDBACK_TEMPLATE.format(
            stepidx=ctx.step_index, draft=current.text, feedback=feedback
        )
        regen_ctx = replace(
            regen_ctx, feedback_blocks=regen_ctx.feedback_blocks + (block,)
        )
        current = backend.generate_step(regen_ctx)
        backbone += current.backbone_tokens
    return StrategyOutcome(
        chosen_step=current,
        external_tokens=external,
        candidates_considered=max_rounds,
        rounds=max_rounds,
        strategy_tag="critic_refine",
        backbone_tokens=backbone,
    )


def thinking_switch(ctx: GenerationContext, backend: StepBackend) -> StrategyOutcome:
    """Regenerate the current step in thinking mode.

    Uses the same backbone model, so external tokens stay zero and the
    (capped) thinking segment is billed to the backbone.
    """
    step = backend.generate_thinking_step(ctx)
    return StrategyOutcome(
        chosen_step=step,
        external_tokens=0,
        candidates_considered=1,
        rounds=1,
        strategy_tag="thinking_switch",
        backbone_tokens=step.backbone_tokens,
    )
