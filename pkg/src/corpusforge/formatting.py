"""Formatting transforms applied before a corpus enters a stage mix.

The guiding rule is "same task, similar format; different tasks, clearly
distinct formats": strip wrappers that a single source bakes around
every answer, append instruction suffixes at a capped rate so models
don't overfit to them, and round runaway decimal precision.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

from .corpus import (
    ConversationTurn,
    Role,
    Sample,
    ValidationError,
    stable_unit_interval,
)

SHORT_ANSWER_SUFFIX = " Provide a short answer."
YES_NO_SUFFIX = " Please answer yes or no."

DEFAULT_STRIP_PATTERNS = [
    (r"\begin{align*}", r"\end{align*}"),
    (r"\begin{align}", r"\end{align}"),
    (r"\begin{equation*}", r"\end{equation*}"),
    (r"\begin{equation}", r"\end{equation}"),
]

# Same decimal shape the precision filter matches: sentence-final
# periods allowed, version-like dotted runs excluded.
_NUMBER_RE = re.compile(r"(?<![\w.])(\d+\.\d+)(?!\.?\d)(?!\w)")


@dataclass
class FormatPolicy:
    strip_patterns: list[tuple[str, str]] = field(
        default_factory=lambda: list(DEFAULT_STRIP_PATTERNS)
    )
    short_answer_token_max: int = 5
    append_rate: float = 0.5
    yes_no_append_rate: float = 0.3
    seed: int = 0
    decimal_places: int | None = None

    def validate(self) -> None:
        for rate in (self.append_rate, self.yes_no_append_rate):
            if not (0.0 <= rate <= 1.0):
                raise ValidationError(f"append rate {rate} outside [0, 1]")
        if self.decimal_places is not None and self.decimal_places < 0:
            raise ValidationError("decimal_places must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "FormatPolicy":
        policy = cls(
            strip_patterns=[tuple(p) for p in d.get("strip_patterns", DEFAULT_STRIP_PATTERNS)],
            short_answer_token_max=d.get("short_answer_token_max", 5),
            append_rate=d.get("append_rate", 0.5),
            yes_no_append_rate=d.get("yes_no_append_rate", 0.3),
            seed=d.get("seed", 0),
            decimal_places=d.get("decimal_places"),
        )
        policy.validate()
        return policy


def strip_decorations(text: str, policy: FormatPolicy) -> str:
    """Remove marker pairs that wrap the entire answer.

    Only whole-answer wrappers are touched; a marker pair somewhere
    inside the text is presumed intentional.  Runs to a fixpoint so the
    transform is idempotent even on nested wrappers.
    """
    while True:
        stripped = text.strip()
        for open_marker, close_marker in policy.strip_patterns:
            if (
                stripped.startswith(open_marker)
                and stripped.endswith(close_marker)
                and len(stripped) >= len(open_marker) + len(close_marker)
            ):
                text = stripped[len(open_marker) : len(stripped) - len(close_marker)].strip()
                break
        else:
            return text


def _is_yes_no(answer: str) -> bool:
    return answer.strip().lower().rstrip(".") in ("yes", "no")


def append_instruction(sample: Sample, policy: FormatPolicy) -> Sample:
    """Suffix the final user turn when the answer is short.

    Yes/no answers draw on the (lower) yes/no rate and get the yes/no
    suffix; other short answers draw on the general rate.  Decisions are
    Bernoulli keyed on (seed, sample id), so re-runs are stable and at
    most one suffix is ever added.
    """
    answer = sample.final_assistant_turn().text
    if len(answer.split()) > policy.short_answer_token_max or not answer:
        return sample
    if _is_yes_no(answer):
        rate, suffix = policy.yes_no_append_rate, YES_NO_SUFFIX
    else:
        rate, suffix = policy.append_rate, SHORT_ANSWER_SUFFIX
    question = sample.final_user_turn()
    if question.text.endswith(suffix):
        return sample
    if stable_unit_interval(policy.seed, sample.id) >= rate:
        return sample

    turns = []
    last_user = max(i for i, t in enumerate(sample.turns) if t.role is Role.USER)
    for i, turn in enumerate(sample.turns):
        if i == last_user:
            turns.append(ConversationTurn(role=turn.role, text=turn.text + suffix))
        else:
            turns.append(ConversationTurn(role=turn.role, text=turn.text))
    return _with_turns(sample, turns)


def normalize_numeric(text: str, places: int) -> str:
    """Round decimal literals beyond ``places`` fractional digits
    (half-to-even).  Integers and shorter decimals pass through."""
    if places < 0:
        raise ValidationError("places must be >= 0")

    def repl(match: re.Match) -> str:
        literal = match.group(1)
        digits = literal.split(".", 1)[1]
        if len(digits) <= places:
            return literal
        quant = Decimal(1).scaleb(-places)
        return str(Decimal(literal).quantize(quant, rounding=ROUND_HALF_EVEN))

    return _NUMBER_RE.sub(repl, text)


def classification_to_mcq(
    label: str,
    label_set: list[str],
    question_stem: str,
    n_choices: int,
    seed: int = 0,
) -> list[ConversationTurn]:
    """Turn a classification label into a lettered multiple-choice pair.

    Distractors are sampled without replacement from the label set and
    the option order is shuffled, both driven by ``seed``.
    """
    if label not in label_set:
        raise ValidationError(f"label {label!r} not in label set")
    if not (2 <= n_choices <= len(label_set)):
        raise ValidationError(f"n_choices {n_choices} outside [2, {len(label_set)}]")
    rng = random.Random(seed)
    distractors = [l for l in label_set if l != label]
    options = [label] + rng.sample(distractors, n_choices - 1)
    rng.shuffle(options)
    letters = [chr(ord("A") + i) for i in range(n_choices)]
    lines = [question_stem] + [f"{letter}. {option}" for letter, option in zip(letters, options)]
    answer = letters[options.index(label)]
    return [
        ConversationTurn(role=Role.USER, text="\n".join(lines)),
        ConversationTurn(role=Role.ASSISTANT, text=answer),
    ]


def apply_policy(sample: Sample, policy: FormatPolicy) -> Sample:
    """Full per-sample formatting pass: strip wrappers from assistant
    turns, round assistant decimals when configured, then consider an
    instruction suffix."""
    turns = []
    for turn in sample.turns:
        text = turn.text
        if turn.role is Role.ASSISTANT:
            text = strip_decorations(text, policy)
            if policy.decimal_places is not None:
                text = normalize_numeric(text, policy.decimal_places)
        turns.append(ConversationTurn(role=turn.role, text=text))
    return append_instruction(_with_turns(sample, turns), policy)


def _with_turns(sample: Sample, turns: list[ConversationTurn]) -> Sample:
    return Sample(
        id=sample.id,
        source=sample.source,
        category=sample.category,
        modality=sample.modality,
        turns=turns,
        images=list(sample.images),
        token_length=sample.token_length,
        repeat_factor=sample.repeat_factor,
        provenance=sample.provenance,
    )
