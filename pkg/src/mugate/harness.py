"""End-to-end trajectory loop, dataset evaluation, and trace persistence.

One trajectory = one question driven step by step: generate, measure
uncertainty, gate, optionally invoke a scaling strategy, fold the kept
step's uncertainty into the momentum tracker, stop on the answer phrase or
the step cap.  Dataset runs repeat that per item and sample with seeds
derived from (master_seed, item id, sample index) and aggregate pass@1
accuracy plus dual token accounting (backbone vs. external model).

Traces are line-delimited JSON: a schema-versioned header record, one
record per step, and one summary record per trajectory.  Files are
byte-deterministic given (config, script, master_seed): no timestamps, keys
sorted.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .backend import (
    ANSWER_PHRASE,
    BackendDescriptor,
    GenerationContext,
    MockBackend,
    MockScript,
    StepBackend,
    StepGeneration,
)
from .errors import BackendError, ConfigError, StrategyError, TraceSchemaError
from .strategies import (
    CriticClient,
    ScorerClient,
    ScriptedCritic,
    ScriptedScorer,
    StrategyOutcome,
    critic_refine,
    guided_search,
    thinking_switch,
)
from .uncertainty import (
    GateDecision,
    MomentumState,
    RunningMeanState,
    ScalePolicy,
    StepUncertainty,
    gate,
    momentum_update,
    plan_random_steps,
    replay_decisions,
    running_mean_update,
    step_uncertainty,
    token_level_confidence,
)

TRACE_SCHEMA = "mugate-trace"
TRACE_VERSION = 1

STRATEGIES = ("bon", "critic", "think")


@dataclass(frozen=True)
class DatasetItem:
    id: str
    question: str
    gold_answer: str


@dataclass(frozen=True)
class RunConfig:
    """Everything a dataset run needs besides the dataset itself.

    Defaults follow the reference operating point: alpha = gamma = 0.9,
    sampling temperature 0.6, single sample per query.
    """

    alpha: float = 0.9
    policy: ScalePolicy = field(default_factory=ScalePolicy.mur)
    strategy: str = "bon"
    n: int = 3
    critic_rounds: int = 1
    backend: BackendDescriptor = field(
        default_factory=lambda: BackendDescriptor(kind="mock")
    )
    temperature: float = 0.6
    max_steps: int = 30
    max_step_tokens: int = 512
    samples_per_query: int = 1
    master_seed: int = 0
    concurrency: int = 1

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.samples_per_query < 1:
            raise ConfigError("samples_per_query must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class StepRecord:
    """One step of a trajectory: what was kept, measured, and decided."""

    step: StepGeneration
    m: float
    M_before: float
    decision: GateDecision
    outcome: StrategyOutcome | None = None
    original: StepGeneration | None = None  # pre-scaling draft when replaced


@dataclass(frozen=True)
class Trajectory:
    item_id: str
    steps: tuple[StepRecord, ...]
    final_answer: str | None
    backbone_tokens: int
    external_tokens: int
    terminated_by: str  # "answer" | "max_steps"


@dataclass(frozen=True)
class SampleResult:
    item: DatasetItem
    sample_index: int
    seed: int
    trajectory: Trajectory | None
    failure: str | None
    correct: bool


@dataclass(frozen=True)
class RunMetrics:
    accuracy: float
    avg_backbone_tokens: float
    avg_external_tokens: float
    avg_steps: float
    avg_scaled_steps: float
    samples: int
    completed: int
    failures: int


@dataclass(frozen=True)
class StrategyClients:
    scorer: ScorerClient | None = None
    critic: CriticClient | None = None


def load_dataset(path: str | Path) -> list[DatasetItem]:
    """Read a JSONL dataset of {"id", "question", "answer"} records."""
    items: list[DatasetItem] = []
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                item = DatasetItem(
                    id=str(rec["id"]),
                    question=str(rec["question"]),
                    gold_answer=str(rec["answer"]),
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise TraceSchemaError(f"{path}:{lineno}: bad dataset record: {exc}")
            if item.id in seen:
                raise TraceSchemaError(f"{path}: duplicate item id {item.id!r}")
            seen.add(item.id)
            items.append(item)
    return items


def derive_seed(master_seed: int, item_id: str, sample_index: int) -> int:
    """Stable 64-bit per-sample seed from (master seed, item id, sample)."""
    digest = hashlib.sha256(
        f"{master_seed}|{item_id}|{sample_index}".encode()
    ).digest()
    return int.from_bytes(digest[:8], "big")


_ANSWER_RE = re.compile(re.escape(ANSWER_PHRASE), re.IGNORECASE)


def extract_answer(text: str) -> str | None:
    """Substring after the last case-insensitive answer phrase, or None."""
    matches = list(_ANSWER_RE.finditer(text))
    if not matches:
        return None
    tail = text[matches[-1].end():]
    return tail.strip().strip(":").strip().rstrip(".!?,;:").strip()


_MC_LETTER = re.compile(r"^\(?([a-e])\)?$")


def _normalize_answer(s: str) -> str:
    s = s.strip().casefold()
    for ch in ("$", "%", ","):
        s = s.replace(ch, "")
    s = s.rstrip(".").strip()
    mc = _MC_LETTER.match(s)
    if mc:
        return mc.group(1)
    return s


def _as_number(s: str) -> float | None:
    try:
        return float(Fraction(s))
    except (ValueError, ZeroDivisionError):
        pass
    try:
        return float(s)
    except ValueError:
        return None


def check_answer(predicted: str, gold: str) -> bool:
    """Rule-based grading: normalized string equality, numeric within 1e-6.

    Normalization trims, casefolds, strips '$', '%', thousands commas, and a
    trailing period; bare multiple-choice letters shed their parentheses.
    When both sides parse as numbers (fractions included) they compare with
    relative tolerance 1e-6.
    """
    p, g = _normalize_answer(predicted), _normalize_answer(gold)
    if p == g:
        return True
    pn, gn = _as_number(p), _as_number(g)
    if pn is not None and gn is not None:
        return math.isclose(pn, gn, rel_tol=1e-6, abs_tol=1e-12)
    return False


def _build_context(
    item: DatasetItem, config: RunConfig, prior_steps: tuple[str, ...], seed: int
) -> GenerationContext:
    return GenerationContext(
        question=item.question,
        prior_steps=prior_steps,
        step_index=len(prior_steps) + 1,
        temperature=config.temperature,
        max_step_tokens=config.max_step_tokens,
        seed=seed,
    )


def _apply_strategy(
    config: RunConfig,
    ctx: GenerationContext,
    current: StepGeneration,
    backend: StepBackend,
    clients: StrategyClients,
) -> StrategyOutcome:
    if config.strategy == "bon":
        if clients.scorer is None:
            raise ConfigError("guided search requires a scorer client")
        return guided_search(ctx, config.n, backend, clients.scorer)
    if config.strategy == "critic":
        if clients.critic is None:
            raise ConfigError("critic refinement requires a critic client")
        return critic_refine(ctx, current, backend, clients.critic, config.critic_rounds)
    return thinking_switch(ctx, backend)


def run_trajectory(
    item: DatasetItem,
    config: RunConfig,
    backend: StepBackend,
    strategy_clients: StrategyClients,
    sample_index: int = 0,
) -> Trajectory:
    """Drive one question to an answer (or the step cap).

    Per step: generate, measure uncertainty, gate, optionally scale; the
    momentum and mean trackers are updated with the uncertainty of whichever
    step was kept.  Replaced drafts stay in the record (their tokens were
    spent) but never enter the trackers.
    """
    seed = derive_seed(config.master_seed, item.id, sample_index)
    momentum = MomentumState.initial(config.alpha)
    mean = RunningMeanState.initial()
    random_plan = (
        plan_random_steps(config.policy, config.max_steps, seed)
        if config.policy.kind == "random"
        else None
    )

    records: list[StepRecord] = []
    prior_steps: tuple[str, ...] = ()
    backbone_total = 0
    external_total = 0
    final_answer: str | None = None
    terminated_by = "max_steps"

    for t in range(1, config.max_steps + 1):
        ctx = _build_context(item, config, prior_steps, seed)
        draft = backend.generate_step(ctx)
        m_draft = step_uncertainty(draft.tokens)
        tlc = token_level_confidence(draft.tokens)
        decision = gate(
            config.policy, momentum, mean, m_draft, tlc, t, random_plan=random_plan
        )

        outcome: StrategyOutcome | None = None
        original: StepGeneration | None = None
        kept = draft
        m_kept = m_draft
        if decision.scale:
            outcome = _apply_strategy(config, ctx, draft, backend, strategy_clients)
            original = draft
            kept = outcome.chosen_step
            m_kept = step_uncertainty(kept.tokens)
            backbone_total += original.backbone_tokens + outcome.backbone_tokens
            external_total += outcome.external_tokens
        else:
            backbone_total += kept.backbone_tokens

        records.append(
            StepRecord(
                step=kept,
                m=float(m_kept),
                M_before=momentum.value,
                decision=decision,
                outcome=outcome,
                original=original,
            )
        )
        momentum = momentum_update(momentum, m_kept)
        mean = running_mean_update(mean, m_kept)
        prior_steps = prior_steps + (kept.text,)

        answer = extract_answer(kept.text)
        if answer is not None:
            final_answer = answer
            terminated_by = "answer"
            break
        if kept.finish_reason == "end_of_sequence":
            break  # model stopped without an answer; scored as incorrect

    return Trajectory(
        item_id=item.id,
        steps=tuple(records),
        final_answer=final_answer,
        backbone_tokens=backbone_total,
        external_tokens=external_total,
        terminated_by=terminated_by,
    )


def _run_sample(
    item: DatasetItem,
    sample_index: int,
    config: RunConfig,
    backend_factory: Callable[[DatasetItem], StepBackend],
    clients_factory: Callable[[StepBackend], StrategyClients],
) -> SampleResult:
    seed = derive_seed(config.master_seed, item.id, sample_index)
    try:
        backend = backend_factory(item)
        clients = clients_factory(backend)
        trajectory = run_trajectory(item, config, backend, clients, sample_index)
    except (BackendError, StrategyError) as exc:
        return SampleResult(item, sample_index, seed, None, f"{type(exc).__name__}: {exc}", False)
    correct = trajectory.final_answer is not None and check_answer(
        trajectory.final_answer, item.gold_answer
    )
    return SampleResult(item, sample_index, seed, trajectory, None, correct)


def run_dataset(
    items: Sequence[DatasetItem],
    config: RunConfig,
    backend_factory: Callable[[DatasetItem], StepBackend],
    clients_factory: Callable[[StepBackend], StrategyClients],
) -> tuple[RunMetrics, list[SampleResult]]:
    """Evaluate every item, ``samples_per_query`` trajectories each.

    Backend or strategy failures abort only their own sample; accuracy
    counts failed samples as incorrect while token and step averages cover
    completed samples.  Results come back in deterministic (item, sample)
    order regardless of concurrency.
    """
    if not items:
        raise ConfigError("dataset is empty")
    tasks = [
        (item, k) for item in items for k in range(config.samples_per_query)
    ]
    if config.concurrency > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            results = list(
                pool.map(
                    lambda task: _run_sample(
                        task[0], task[1], config, backend_factory, clients_factory
                    ),
                    tasks,
                )
            )
    else:
        results = [
            _run_sample(item, k, config, backend_factory, clients_factory)
            for item, k in tasks
        ]
    return compute_metrics(results), results


def compute_metrics(results: Sequence[SampleResult]) -> RunMetrics:
    samples = len(results)
    completed = [r for r in results if r.trajectory is not None]
    failures = samples - len(completed)
    accuracy = sum(r.correct for r in results) / samples if samples else 0.0

    def _avg(values: Iterable[float]) -> float:
        vals = list(values)
        return sum(vals) / len(vals) if vals else 0.0

    return RunMetrics(
        accuracy=accuracy,
        avg_backbone_tokens=_avg(r.trajectory.backbone_tokens for r in completed),
        avg_external_tokens=_avg(r.trajectory.external_tokens for r in completed),
        avg_steps=_avg(len(r.trajectory.steps) for r in completed),
        avg_scaled_steps=_avg(
            sum(1 for s in r.trajectory.steps if s.decision.scale) for r in completed
        ),
        samples=samples,
        completed=len(completed),
        failures=failures,
    )


def render_metrics(metrics: RunMetrics) -> str:
    return "\n".join(
        [
            f"samples            {metrics.samples} ({metrics.failures} failed)",
            f"accuracy (pass@1)  {metrics.accuracy:.4f}",
            f"avg backbone toks  {metrics.avg_backbone_tokens:.1f}",
            f"avg external toks  {metrics.avg_external_tokens:.1f}",
            f"avg steps          {metrics.avg_steps:.2f}",
            f"avg scaled steps   {metrics.avg_scaled_steps:.2f}",
        ]
    )


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def replay_gating(
    ms: Sequence[float],
    policy: ScalePolicy,
    alpha: float,
    seed: int = 0,
) -> list[GateDecision]:
    """Re-run a gate policy over a recorded uncertainty sequence.

    The momentum tracker is rebuilt from the recorded values themselves, so
    decisions are comparable across policies and gamma values, enabling
    offline sweeps without re-generation.
    """
    if not ms:
        raise ConfigError("cannot replay an empty trace")
    plan = (
        plan_random_steps(policy, len(ms), seed)
        if policy.kind == "random"
        else None
    )
    return replay_decisions(ms, policy, alpha, random_plan=plan)


# ---------------------------------------------------------------------------
# trace persistence
# ---------------------------------------------------------------------------


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _config_record(config: RunConfig) -> dict:
    rec = asdict(config)
    rec["policy"] = {
        k: v for k, v in asdict(config.policy).items() if v is not None
    }
    return rec


def _step_trace_record(item_id: str, sample_index: int, idx: int, rec: StepRecord) -> dict:
    out = {
        "record": "step",
        "item_id": item_id,
        "sample_index": sample_index,
        "step_index": idx,
        "text": rec.step.text,
        "m": rec.m,
        "M_before": rec.M_before,
        "scale": rec.decision.scale,
        "threshold": rec.decision.threshold,
        "policy": rec.decision.policy_tag,
        "finish_reason": rec.step.finish_reason,
        "backbone_tokens": rec.step.backbone_tokens,
        "thinking_tokens": rec.step.thinking_tokens,
        "original_m": None,
        "original_backbone_tokens": None,
        "strategy_tag": None,
        "strategy_backbone_tokens": 0,
        "external_tokens": 0,
        "candidates_considered": 0,
        "rounds": 0,
    }
    if rec.original is not None:
        out["original_m"] = float(step_uncertainty(rec.original.tokens))
        out["original_backbone_tokens"] = rec.original.backbone_tokens
    if rec.outcome is not None:
        out["strategy_tag"] = rec.outcome.strategy_tag
        out["strategy_backbone_tokens"] = rec.outcome.backbone_tokens
        out["external_tokens"] = rec.outcome.external_tokens
        out["candidates_considered"] = rec.outcome.candidates_considered
        out["rounds"] = rec.outcome.rounds
    return out


def write_trace(path: str | Path, config: RunConfig, results: Sequence[SampleResult]) -> None:
    """Persist a run: header record, per-step records, per-trajectory summaries."""
    lines = [
        _json_line(
            {
                "record": "header",
                "schema": TRACE_SCHEMA,
                "version": TRACE_VERSION,
                "config": _config_record(config),
            }
        )
    ]
    for res in results:
        if res.trajectory is not None:
            for idx, rec in enumerate(res.trajectory.steps, start=1):
                lines.append(
                    _json_line(_step_trace_record(res.item.id, res.sample_index, idx, rec))
                )
        summary = {
            "record": "trajectory",
            "item_id": res.item.id,
            "sample_index": res.sample_index,
            "gold_answer": res.item.gold_answer,
            "failure": res.failure,
            "correct": res.correct,
        }
        if res.trajectory is not None:
            summary.update(
                final_answer=res.trajectory.final_answer,
                terminated_by=res.trajectory.terminated_by,
                backbone_tokens=res.trajectory.backbone_tokens,
                external_tokens=res.trajectory.external_tokens,
                steps=len(res.trajectory.steps),
                scaled_steps=sum(1 for s in res.trajectory.steps if s.decision.scale),
            )
        lines.append(_json_line(summary))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path: str | Path) -> tuple[dict, list[dict], list[dict]]:
    """Load a trace file; returns (header, step records, trajectory records)."""
    try:
        raw_lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise TraceSchemaError(f"cannot read trace {path}: {exc}")
    records = []
    for lineno, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise TraceSchemaError(f"{path}:{lineno}: corrupt trace line: {exc}")
    if not records:
        raise TraceSchemaError(f"{path}: empty trace")
    header = records[0]
    if header.get("record") != "header" or header.get("schema") != TRACE_SCHEMA:
        raise TraceSchemaError(f"{path}: missing trace header")
    if header.get("version") != TRACE_VERSION:
        raise TraceSchemaError(
            f"{path}: unsupported trace version {header.get('version')!r}"
        )
    steps = [r for r in records[1:] if r.get("record") == "step"]
    trajectories = [r for r in records[1:] if r.get("record") == "trajectory"]
    return header, steps, trajectories


def trace_m_sequences(step_records: Sequence[dict]) -> dict[tuple[str, int], list[float]]:
    """Group per-step gate-input uncertainties by (item, sample).

    Replays sweep the signal the gate evaluated, i.e. the draft step's
    uncertainty where a replacement was kept (``original_m``); the kept
    step's ``m`` field remains the momentum-reproducibility record.
    """
    grouped: dict[tuple[str, int], list[tuple[int, float]]] = {}
    for rec in step_records:
        key = (rec["item_id"], rec["sample_index"])
        m = rec["m"] if rec.get("original_m") is None else rec["original_m"]
        grouped.setdefault(key, []).append((rec["step_index"], m))
    return {
        key: [m for _, m in sorted(entries)] for key, entries in grouped.items()
    }


# ---------------------------------------------------------------------------
# factory helpers
# ---------------------------------------------------------------------------


def mock_factories(
    script: MockScript,
) -> tuple[Callable[[DatasetItem], StepBackend], Callable[[StepBackend], StrategyClients]]:
    """Per-trajectory mock backend plus scripted scorer/critic over one script."""
    scorer = ScriptedScorer(script)

    def backend_factory(item: DatasetItem) -> StepBackend:
        return MockBackend(script, context_key=item.question)

    def clients_factory(backend: StepBackend) -> StrategyClients:
        critic = ScriptedCritic(backend) if isinstance(backend, MockBackend) else None
        return StrategyClients(scorer=scorer, critic=critic)

    return backend_factory, clients_factory
