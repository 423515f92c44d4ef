"""Deterministic adversarial evaluation suite for the mock backend.

Twenty synthetic items exercising the gate end to end:

  * items 0-11  carry a high-uncertainty final ("pivot") step whose default
    text states a wrong answer; every scaling route (best candidate, critique
    regeneration, thinking regeneration) yields the correct answer instead.
    A policy that scales the pivot fixes the item; one that never scales
    keeps the wrong answer.
  * items 12-19 are clean: low uncertainty throughout, correct by default.
    The last two open with a high-uncertainty (but harmless) first step, so
    first-step exemption behavior is observable.

Scripts include step, regeneration, candidate, critic, and thinking records
for every step, so the same files serve all strategies and policies.  The
builder is a pure function of its seed; regenerating the bundled data files
is byte-stable.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

N_ITEMS = 20
N_PIVOT = 12
CANDIDATES_PER_STEP = 3
DEFAULT_SEED = 20250809

_FILLERS = (
    "we restate the given quantities and fix notation",
    "we isolate the dominant term of the expression",
    "we substitute the intermediate value back in",
    "we simplify the resulting expression",
    "we bound the remaining term and collect results",
)


def _logprobs(rng: random.Random, n: int, lo: float, hi: float) -> list[float]:
    return [round(rng.uniform(lo, hi), 4) for _ in range(n)]


def _low(rng: random.Random) -> list[float]:
    return _logprobs(rng, rng.randint(10, 16), -0.08, -0.02)


def _high(rng: random.Random) -> list[float]:
    return _logprobs(rng, rng.randint(12, 20), -2.2, -1.8)


def _first_high(rng: random.Random) -> list[float]:
    return _logprobs(rng, rng.randint(12, 18), -1.6, -1.4)


def _filler_text(rng: random.Random, item: int, step: int, tag: str = "") -> str:
    body = _FILLERS[(item + step) % len(_FILLERS)]
    suffix = f" ({tag})" if tag else ""
    return f"Step {step}: For problem {item} {body}{suffix}."


def build_adversarial_suite(seed: int = DEFAULT_SEED) -> tuple[list[dict], list[dict]]:
    """Return (dataset records, script records) for the 20-item suite."""
    rng = random.Random(seed)
    items: list[dict] = []
    script: list[dict] = []

    for i in range(N_ITEMS):
        gold = 7 + 3 * i
        wrong = gold + 5
        question = (
            f"Problem {i}: a sequence starts at {i} and each step adds 3; "
            f"after adding a constant offset of 7, what value does step {i} reach?"
        )
        items.append({"id": f"adv-{i:03d}", "question": question, "answer": str(gold)})

        pivotal = i < N_PIVOT
        total_steps = 3 + (i % 3) if pivotal else 3 + (i % 2)
        high_first = i >= 18

        for step in range(1, total_steps + 1):
            is_final = step == total_steps
            if pivotal and is_final:
                default_text = (
                    f"Step {step}: Rushing the last simplification for problem {i}, "
                    f"the answer is {wrong}."
                )
                lps = _high(rng)
            elif is_final:
                default_text = (
                    f"Step {step}: Combining the intermediate results for "
                    f"problem {i}, the answer is {gold}."
                )
                lps = _low(rng)
            elif high_first and step == 1:
                default_text = _filler_text(rng, i, step, "tentative opening")
                lps = _first_high(rng)
            else:
                default_text = _filler_text(rng, i, step)
                lps = _low(rng)
            script.append(
                {
                    "context_key": question,
                    "kind": "step",
                    "step": step,
                    "text": default_text,
                    "logprobs": lps,
                }
            )

            if is_final:
                fixed_text = (
                    f"Step {step}: Re-deriving the closing computation for "
                    f"problem {i}, the answer is {gold}."
                )
            else:
                fixed_text = _filler_text(rng, i, step, "revised")
            # critique-driven regeneration: second record in the same step group
            script.append(
                {
                    "context_key": question,
                    "kind": "step",
                    "step": step,
                    "text": fixed_text,
                    "logprobs": _low(rng),
                }
            )

            cand_texts = []
            cand_lps = []
            scores = []
            best = rng.randrange(CANDIDATES_PER_STEP)
            for c in range(CANDIDATES_PER_STEP):
                if c == best and is_final:
                    cand_texts.append(
                        f"Step {step}: Checking problem {i} candidate {c}, "
                        f"the answer is {gold}."
                    )
                elif is_final:
                    cand_texts.append(
                        f"Step {step}: Guessing problem {i} candidate {c}, "
                        f"the answer is {wrong + c + 1}."
                    )
                else:
                    cand_texts.append(_filler_text(rng, i, step, f"candidate {c}"))
                cand_lps.append(_low(rng))
                scores.append(
                    round(rng.uniform(0.80, 0.95), 3)
                    if c == best
                    else round(rng.uniform(0.10, 0.60), 3)
                )
            script.append(
                {
                    "context_key": question,
                    "kind": "candidates",
                    "step": step,
                    "texts": cand_texts,
                    "logprobs_list": cand_lps,
                    "scores": scores,
                    "score_tokens": [rng.randint(20, 60) for _ in range(CANDIDATES_PER_STEP)],
                }
            )
            script.append(
                {
                    "context_key": question,
                    "kind": "critic",
                    "step": step,
                    "feedback": f"Recheck the arithmetic in step {step} of problem {i}.",
                    "tokens_used": rng.randint(30, 60),
                }
            )
            script.append(
                {
                    "context_key": question,
                    "kind": "thinking",
                    "step": step,
                    "text": fixed_text,
                    "logprobs": _low(rng),
                    "thinking_tokens": rng.randint(32, 96),
                }
            )
    return items, script


def write_suite(
    dataset_path: str | Path, script_path: str | Path, seed: int = DEFAULT_SEED
) -> None:
    """Write the suite to JSONL files (sorted keys, one record per line)."""
    items, script = build_adversarial_suite(seed)
    with open(dataset_path, "w") as fh:
        for rec in items:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(script_path, "w") as fh:
        for rec in script:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
