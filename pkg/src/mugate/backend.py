"""Step-wise generation backends: an OpenAI-compatible HTTP client and a
deterministic scripted mock.

Both expose the same three operations -- ``generate_step``,
``generate_candidates``, ``generate_thinking_step`` -- and return
:class:`StepGeneration` records carrying per-token log-probabilities, so the
uncertainty math downstream never cares which backend produced a step.

Prompt contract
---------------
Each request assembles the prompt deterministically from the context:
question, then the step instruction suffix, then prior steps (one per line),
then any critique blocks, ending with a newline so the model continues with
the next "Step N:" line.  Generation stops at the newline-prefixed literal
``"\\nStep "`` (the matched stop text is excluded), at the answer phrase, or
at the token cap.  Thinking-mode requests seed the continuation with
``"Okay, so I need to"`` and cap the thinking segment at
``THINKING_TOKEN_CAP`` tokens; only completed sentences of the post-thinking
step are kept as text (token accounting is unaffected by the trim).

Mock script schema (JSONL, one record per line)
-----------------------------------------------
    {"context_key": str,   # must equal the GenerationContext question
     "kind": "step" | "candidates" | "thinking" | "critic",
     "step": int,          # step index the record serves
     ...}

  kind=step        {"text": str, "logprobs": [float, ...]}
  kind=candidates  {"texts": [str], "logprobs_list": [[float]],
                    "scores": [float], "score_tokens": [int]}
  kind=thinking    {"text": str, "logprobs": [float], "thinking_tokens": int}
  kind=critic      {"feedback": str, "tokens_used": int}

Records sharing (context_key, kind, step) form an ordered group; each
trajectory consumes a group front-to-back through its own cursor, so e.g.
a second "step" record at the same index serves a critique-driven
regeneration.  Credentials for HTTP backends come from the ``MUGATE_API_KEY``
environment variable (sent as a bearer token).
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field, replace
from typing import Literal, Protocol

import requests

from .errors import (
    BackendUnreachableError,
    ContextOverflowError,
    MissingLogProbsError,
    ScriptExhaustedError,
    ThinkingUnsupportedError,
)
from .uncertainty import TokenLogProb

ANSWER_PHRASE = "the answer is"
STEP_STOP = "\nStep "
THINKING_TOKEN_CAP = 2048
THINKING_PREFIX = "Okay, so I need to"
DEFAULT_INSTRUCTION = (
    'Always end your solution with the phrase "the answer is" followed by '
    'your final answer. Start your solution with "Step {stepidx}:"'
)
API_KEY_ENV = "MUGATE_API_KEY"

# module-level so tests can shrink retry latency
RETRY_BACKOFF_BASE = 0.25

FinishReason = Literal["step_boundary", "answer_phrase", "max_tokens", "end_of_sequence"]

_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


@dataclass(frozen=True)
class GenerationContext:
    """Everything needed to deterministically build one step request."""

    question: str
    prior_steps: tuple[str, ...]
    step_index: int
    instruction_suffix: str = DEFAULT_INSTRUCTION
    temperature: float = 0.6
    max_step_tokens: int = 512
    thinking: bool = False
    feedback_blocks: tuple[str, ...] = ()
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.step_index != len(self.prior_steps) + 1:
            raise ValueError(
                f"step_index {self.step_index} inconsistent with "
                f"{len(self.prior_steps)} prior steps"
            )
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")
        if self.max_step_tokens < 1:
            raise ValueError("max_step_tokens must be >= 1")


@dataclass(frozen=True)
class StepGeneration:
    """One generated reasoning step with its token-level log-probabilities."""

    text: str
    tokens: tuple[TokenLogProb, ...]
    finish_reason: FinishReason
    thinking_tokens: int = 0
    backbone_tokens: int = field(default=-1)

    def __post_init__(self) -> None:
        if self.thinking_tokens < 0:
            raise ValueError("thinking_tokens must be >= 0")
        expected = len(self.tokens) + self.thinking_tokens
        if self.backbone_tokens == -1:
            object.__setattr__(self, "backbone_tokens", expected)
        elif self.backbone_tokens != expected:
            raise ValueError(
                f"backbone_tokens {self.backbone_tokens} != "
                f"len(tokens) + thinking_tokens = {expected}"
            )
        if self.finish_reason == "answer_phrase" and ANSWER_PHRASE not in self.text.lower():
            raise ValueError("answer_phrase finish requires the phrase in the text")


@dataclass(frozen=True)
class BackendDescriptor:
    """How to reach a generation backend."""

    kind: Literal["http", "mock"]
    endpoint_url: str | None = None
    model_name: str | None = None
    timeout: float = 60.0
    retry_limit: int = 2

    def __post_init__(self) -> None:
        if self.kind == "http" and not self.endpoint_url:
            raise ValueError("http backend requires an endpoint_url")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")


class StepBackend(Protocol):
    """Uniform step-wise generation interface."""

    supports_thinking: bool

    def generate_step(self, ctx: GenerationContext) -> StepGeneration: ...

    def generate_candidates(self, ctx: GenerationContext, n: int) -> list[StepGeneration]: ...

    def generate_thinking_step(self, ctx: GenerationContext) -> StepGeneration: ...


def build_prompt(ctx: GenerationContext) -> str:
    """Deterministic prompt assembly; no ambient state."""
    parts = [ctx.question.rstrip(), ""]
    parts.append(ctx.instruction_suffix.format(stepidx=ctx.step_index))
    if ctx.prior_steps:
        parts.append("")
        parts.extend(ctx.prior_steps)
    for block in ctx.feedback_blocks:
        parts.append(block)
    prompt = "\n".join(parts) + "\n"
    if ctx.thinking:
        prompt += THINKING_PREFIX
    return prompt


def completed_sentences(text: str) -> str:
    """Keep everything up to the last completed sentence boundary.

    Sentences terminate at '.', '!' or '?' followed by whitespace or end of
    text; a trailing fragment without a terminator is dropped.
    """
    last = None
    for match in _SENTENCE_END.finditer(text):
        last = match.end()
    if last is None:
        return ""
    return text[:last]


def classify_finish(text: str, default: FinishReason) -> FinishReason:
    """Answer-phrase detection overrides the transport-level finish reason."""
    if ANSWER_PHRASE in text.lower():
        return "answer_phrase"
    return default


# ---------------------------------------------------------------------------
# scripted mock backend
# ---------------------------------------------------------------------------


class MockScript:
    """Immutable, indexed view of a mock script file."""

    def __init__(self, records: list[dict]):
        groups: dict[tuple[str, str, int], list[dict]] = {}
        for rec in records:
            key = (rec["context_key"], rec["kind"], int(rec.get("step", 0)))
            groups.setdefault(key, []).append(rec)
        self._groups = groups

    @classmethod
    def load(cls, path: str) -> "MockScript":
        records = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return cls(records)

    @classmethod
    def from_records(cls, records: list[dict]) -> "MockScript":
        return cls(list(records))

    def group(self, context_key: str, kind: str, step: int) -> list[dict]:
        return self._groups.get((context_key, kind, step), [])

    def iter_records(self, kind: str):
        """All records of one kind, across keys and steps."""
        for (_, k, _), records in self._groups.items():
            if k == kind:
                yield from records

    def has_kind(self, context_key: str, kind: str) -> bool:
        return any(k == context_key and kd == kind for k, kd, _ in self._groups)


class MockBackend:
    """Deterministic scripted backend bound to one trajectory.

    Holds a cursor per (kind, step) group so repeated requests at the same
    step (regenerations) walk the group's records in order.  Construct a
    fresh instance per trajectory.
    """

    def __init__(self, script: MockScript, context_key: str):
        self._script = script
        self._key = context_key
        self._cursors: dict[tuple[str, int], int] = {}

    @property
    def supports_thinking(self) -> bool:
        return self._script.has_kind(self._key, "thinking")

    def _next(self, kind: str, step: int) -> dict:
        group = self._script.group(self._key, kind, step)
        cursor = self._cursors.get((kind, step), 0)
        if cursor >= len(group):
            raise ScriptExhaustedError(
                f"no scripted {kind!r} record left for key={self._key!r} step={step}"
            )
        self._cursors[(kind, step)] = cursor + 1
        return group[cursor]

    @staticmethod
    def _tokens(text: str, logprobs: list[float]) -> tuple[TokenLogProb, ...]:
        # Scripted tokens carry synthetic texts; only counts and logprobs matter.
        words = text.split()
        return tuple(
            TokenLogProb(words[i] if i < len(words) else f"<tok{i}>", lp)
            for i, lp in enumerate(logprobs)
        )

    def generate_step(self, ctx: GenerationContext) -> StepGeneration:
        rec = self._next("step", ctx.step_index)
        tokens = self._tokens(rec["text"], rec["logprobs"])
        finish = classify_finish(rec["text"], rec.get("finish", "step_boundary"))
        return StepGeneration(text=rec["text"], tokens=tokens, finish_reason=finish)

    def generate_candidates(self, ctx: GenerationContext, n: int) -> list[StepGeneration]:
        if n < 1:
            raise ValueError("candidate count must be >= 1")
        rec = self._next("candidates", ctx.step_index)
        texts = rec["texts"]
        if len(texts) < n:
            raise ScriptExhaustedError(
                f"scripted candidate set has {len(texts)} entries, requested {n}"
            )
        out = []
        for text, lps in list(zip(texts, rec["logprobs_list"]))[:n]:
            out.append(
                StepGeneration(
                    text=text,
                    tokens=self._tokens(text, lps),
                    finish_reason=classify_finish(text, "step_boundary"),
                )
            )
        return out

    def generate_thinking_step(self, ctx: GenerationContext) -> StepGeneration:
        if not self.supports_thinking:
            raise ThinkingUnsupportedError(
                f"script has no thinking records for key={self._key!r}"
            )
        rec = self._next("thinking", ctx.step_index)
        thinking = min(int(rec["thinking_tokens"]), THINKING_TOKEN_CAP)
        tokens = self._tokens(rec["text"], rec["logprobs"])
        text = completed_sentences(rec["text"])
        finish = classify_finish(text, rec.get("finish", "step_boundary"))
        return StepGeneration(
            text=text, tokens=tokens, finish_reason=finish, thinking_tokens=thinking
        )

    def next_critic_feedback(self, step_index: int) -> tuple[str, int]:
        """Scripted critique for the given step (consumed in order)."""
        rec = self._next("critic", step_index)
        return rec["feedback"], int(rec["tokens_used"])


# ---------------------------------------------------------------------------
# HTTP backend (OpenAI-compatible completions endpoint)
# ---------------------------------------------------------------------------


class HttpBackend:
    """Client for a completions endpoint that returns per-token logprobs.

    Stateless between calls, safe to share across concurrent trajectories.
    Transport errors are retried with exponential backoff up to the
    descriptor's retry limit; logprob omissions are configuration errors and
    never retried.
    """

    def __init__(self, descriptor: BackendDescriptor):
        if descriptor.kind != "http":
            raise ValueError("HttpBackend requires an http descriptor")
        self._desc = descriptor
        self.supports_thinking = True

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(API_KEY_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _request_body(self, ctx: GenerationContext, n: int, max_tokens: int) -> dict:
        body = {
            "model": self._desc.model_name,
            "prompt": build_prompt(ctx),
            "temperature": ctx.temperature,
            "max_tokens": max_tokens,
            "stop": [STEP_STOP],
            "logprobs": 1,
            "n": n,
        }
        if ctx.seed is not None:
            body["seed"] = ctx.seed
        return body

    def _post(self, body: dict) -> dict:
        attempts = self._desc.retry_limit + 1
        last_exc: Exception | None = None
        for attempt in range(attempts):
            try:
                resp = requests.post(
                    self._desc.endpoint_url,
                    json=body,
                    headers=self._headers(),
                    timeout=self._desc.timeout,
                )
            except requests.RequestException as exc:
                last_exc = exc
                if attempt + 1 < attempts:
                    time.sleep(RETRY_BACKOFF_BASE * 2**attempt)
                continue
            if resp.status_code == 400 and "context length" in resp.text.lower():
                raise ContextOverflowError(resp.text[:500])
            if resp.status_code >= 500:
                last_exc = BackendUnreachableError(f"server error {resp.status_code}")
                if attempt + 1 < attempts:
                    time.sleep(RETRY_BACKOFF_BASE * 2**attempt)
                continue
            if resp.status_code != 200:
                raise BackendUnreachableError(
                    f"endpoint returned {resp.status_code}: {resp.text[:500]}"
                )
            return resp.json()
        raise BackendUnreachableError(f"transport failed after {attempts} attempts: {last_exc}")

    @staticmethod
    def _parse_choice(choice: dict) -> StepGeneration:
        lp = choice.get("logprobs") or {}
        token_texts = lp.get("tokens")
        token_lps = lp.get("token_logprobs")
        if not token_texts or token_lps is None or any(v is None for v in token_lps):
            raise MissingLogProbsError(
                "endpoint response carries no per-token logprobs; enable them "
                "server-side (logprobs=1)"
            )
        text = choice.get("text", "")
        raw_finish = choice.get("finish_reason", "stop")
        if raw_finish == "length":
            default: FinishReason = "max_tokens"
        elif choice.get("stop_reason") or choice.get("matched_stop"):
            default = "step_boundary"
        else:
            default = "end_of_sequence"

        tokens = [TokenLogProb(tt, tl) for tt, tl in zip(token_texts, token_lps)]
        thinking_tokens = 0
        if "</think>" in text:
            running = ""
            cut = len(tokens)
            for i, tok in enumerate(tokens):
                running += tok.token_text
                if "</think>" in running:
                    cut = i + 1
                    break
            thinking_tokens = min(cut, THINKING_TOKEN_CAP)
            tokens = tokens[cut:]
            text = text.split("</think>", 1)[1]
            text = completed_sentences(text.strip())
        return StepGeneration(
            text=text,
            tokens=tuple(tokens),
            finish_reason=classify_finish(text, default),
            thinking_tokens=thinking_tokens,
        )

    def generate_step(self, ctx: GenerationContext) -> StepGeneration:
        data = self._post(self._request_body(ctx, n=1, max_tokens=ctx.max_step_tokens))
        return self._parse_choice(data["choices"][0])

    def generate_candidates(self, ctx: GenerationContext, n: int) -> list[StepGeneration]:
        if n < 1:
            raise ValueError("candidate count must be >= 1")
        data = self._post(self._request_body(ctx, n=n, max_tokens=ctx.max_step_tokens))
        choices = data["choices"]
        return [self._parse_choice(c) for c in choices[:n]]

    def generate_thinking_step(self, ctx: GenerationContext) -> StepGeneration:
        thinking_ctx = replace(ctx, thinking=True)
        budget = THINKING_TOKEN_CAP + ctx.max_step_tokens
        data = self._post(self._request_body(thinking_ctx, n=1, max_tokens=budget))
        return self._parse_choice(data["choices"][0])
