"""Rule-based quality filtering.

Four rules cover the recurring low-quality patterns in synthetic VQA
data: runaway text repetition, spuriously precise numeric answers,
short canned refusals, and (optionally, when joint-space embeddings
exist) image/text mismatch.  Each rule can be disabled or demoted to
advisory, in which case it reports hits without dropping samples.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .corpus import EmbeddingRecord, Role, Sample, ValidationError
from .similarity import cosine_sim

RULE_REPETITION = "repetition"
RULE_PRECISION = "precision"
RULE_REFUSAL = "refusal"
RULE_MISMATCH = "mismatch"

DEFAULT_REFUSAL_KEYWORDS = [
    "sorry, i cannot",
    "sorry, i can't",
    "i cannot answer this",
    "i can't answer this",
    "i'm unable to answer",
]

# A trailing sentence period is fine ("is 37.4529."), a further digit is
# not ("1.2.3" stays a version string, not a decimal).
_NUMBER_RE = re.compile(r"(?<![\w.])(\d+)\.(\d+)(?!\.?\d)(?!\w)")


@dataclass
class RuleHit:
    rule: str
    detail: str


@dataclass
class FilterVerdict:
    sample_id: str
    hits: list[RuleHit] = field(default_factory=list)
    decision: str = "keep"  # "keep" | "drop"
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "hits": [{"rule": h.rule, "detail": h.detail} for h in self.hits],
            "decision": self.decision,
            "notes": list(self.notes),
        }


@dataclass
class RepetitionConfig:
    enabled: bool = True
    ngram_min: int = 4
    min_repeats: int = 3
    tail_fraction: float = 0.3


@dataclass
class PrecisionConfig:
    enabled: bool = True
    max_decimals: int = 2


@dataclass
class RefusalConfig:
    enabled: bool = True
    keywords: list[str] = field(default_factory=lambda: list(DEFAULT_REFUSAL_KEYWORDS))


@dataclass
class MismatchConfig:
    enabled: bool = False
    min_cross_sim: float = 0.05


@dataclass
class FilterConfig:
    repetition: RepetitionConfig = field(default_factory=RepetitionConfig)
    precision: PrecisionConfig = field(default_factory=PrecisionConfig)
    refusal: RefusalConfig = field(default_factory=RefusalConfig)
    mismatch: MismatchConfig = field(default_factory=MismatchConfig)
    advisory: set[str] = field(default_factory=set)

    def validate(self) -> None:
        if self.repetition.ngram_min < 1 or self.repetition.min_repeats < 2:
            raise ValidationError("repetition thresholds must be positive (min_repeats >= 2)")
        if not (0.0 < self.repetition.tail_fraction <= 1.0):
            raise ValidationError("tail_fraction must be in (0, 1]")
        if self.precision.max_decimals < 0:
            raise ValidationError("max_decimals must be >= 0")
        if self.mismatch.min_cross_sim < 0:
            raise ValidationError("min_cross_sim must be >= 0")
        unknown = self.advisory - {RULE_REPETITION, RULE_PRECISION, RULE_REFUSAL, RULE_MISMATCH}
        if unknown:
            raise ValidationError(f"unknown advisory rules: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        cfg = cls(
            repetition=RepetitionConfig(**d.get("repetition", {})),
            precision=PrecisionConfig(**d.get("precision", {})),
            refusal=RefusalConfig(**d.get("refusal", {})),
            mismatch=MismatchConfig(**d.get("mismatch", {})),
            advisory=set(d.get("advisory", [])),
        )
        cfg.validate()
        return cfg


def detect_repetition(text: str, cfg: RepetitionConfig) -> Optional[RuleHit]:
    """Flag consecutively repeated token n-grams and repeated tails.

    Hits when an n-gram of at least ``ngram_min`` whitespace tokens
    repeats ``min_repeats`` times back to back, or when a block repeated
    at least twice runs to the end of the text and covers
    ``tail_fraction`` of the tokens.  Token-level matching keeps
    legitimate character runs (e.g. CAPTCHA transcriptions) unflagged.
    """
    tokens = text.split()
    total = len(tokens)
    if total == 0:
        return None

    # Consecutive n-gram rule: tokens[j] == tokens[j + n] sustained over
    # n * (min_repeats - 1) positions means the n-gram repeats enough.
    max_n = total // cfg.min_repeats
    for n in range(cfg.ngram_min, max_n + 1):
        run = 0
        needed = n * (cfg.min_repeats - 1)
        for j in range(total - n):
            if tokens[j] == tokens[j + n]:
                run += 1
                if run >= needed:
                    start = j + 1 - needed
                    span = " ".join(tokens[start : start + n])
                    return RuleHit(RULE_REPETITION, f"{cfg.min_repeats}x repeat of {span!r}")
            else:
                run = 0

    # Trailing-block rule.
    for n in range(1, total // 2 + 1):
        block = tokens[total - n :]
        repeats = 1
        pos = total - 2 * n
        while pos >= 0 and tokens[pos : pos + n] == block:
            repeats += 1
            pos -= n
        if repeats >= 2 and repeats * n >= cfg.tail_fraction * total:
            span = " ".join(block)
            return RuleHit(RULE_REPETITION, f"trailing {repeats}x repeat of {span!r}")
    return None


def _decimal_counts(text: str) -> list[tuple[str, int]]:
    return [(m.group(0), len(m.group(2))) for m in _NUMBER_RE.finditer(text)]


def detect_numeric_precision(sample: Sample, cfg: PrecisionConfig) -> Optional[RuleHit]:
    """Flag assistant numbers more precise than anything in the question.

    A number with more than ``max_decimals`` fractional digits is only a
    hit when no user turn carries a number at least that precise, so
    legitimately precise contexts stay untouched.
    """
    user_max = 0
    for turn in sample.turns:
        if turn.role is Role.USER:
            for _, decimals in _decimal_counts(turn.text):
                user_max = max(user_max, decimals)
    for turn in sample.turns:
        if turn.role is not Role.ASSISTANT:
            continue
        for literal, decimals in _decimal_counts(turn.text):
            if decimals > cfg.max_decimals and user_max < decimals:
                return RuleHit(RULE_PRECISION, f"{literal} has {decimals} decimals")
    return None


def detect_refusal(text: str, cfg: RefusalConfig) -> Optional[RuleHit]:
    """Flag short answers that are essentially a canned refusal.

    The length guard (< 2x phrase length + 32 chars) keeps long answers
    that merely mention a keyword out of scope.
    """
    lowered = text.lower()
    for keyword in cfg.keywords:
        if keyword.lower() in lowered and len(text) < 2 * len(keyword) + 32:
            return RuleHit(RULE_REFUSAL, f"matched {keyword!r}")
    return None


def detect_mismatch(
    sample: Sample, record: Optional[EmbeddingRecord], cfg: MismatchConfig
) -> tuple[Optional[RuleHit], Optional[str]]:
    """Cross-modal similarity check; returns (hit, skip_note).

    Requires image and text vectors of equal dimension (a joint space);
    anything else skips with a note rather than guessing.
    """
    if record is None or record.image_vec is None or record.text_vec is None:
        return None, f"{RULE_MISMATCH}: skipped, embeddings unavailable"
    if record.image_vec.shape != record.text_vec.shape:
        return None, f"{RULE_MISMATCH}: skipped, vectors not in a joint space"
    sim = cosine_sim(record.image_vec, record.text_vec)
    if sim < cfg.min_cross_sim:
        return RuleHit(RULE_MISMATCH, f"cross-modal sim {sim:.4f} < {cfg.min_cross_sim}"), None
    return None, None


def run_filters(
    pool: list[Sample],
    embeddings: Optional[dict[str, EmbeddingRecord]],
    cfg: FilterConfig,
) -> tuple[list[Sample], list[FilterVerdict], dict[str, int]]:
    """Apply every enabled rule to every sample.

    Returns the kept pool (no non-advisory hits), one verdict per sample
    in pool order, and per-rule hit counts.
    """
    cfg.validate()
    kept: list[Sample] = []
    verdicts: list[FilterVerdict] = []
    counts = {RULE_REPETITION: 0, RULE_PRECISION: 0, RULE_REFUSAL: 0, RULE_MISMATCH: 0}

    for sample in pool:
        verdict = FilterVerdict(sample_id=sample.id)
        if cfg.repetition.enabled:
            for turn in sample.turns:
                if turn.role is Role.ASSISTANT:
                    hit = detect_repetition(turn.text, cfg.repetition)
                    if hit:
                        verdict.hits.append(hit)
                        break
        if cfg.precision.enabled:
            hit = detect_numeric_precision(sample, cfg.precision)
            if hit:
                verdict.hits.append(hit)
        if cfg.refusal.enabled:
            for turn in sample.turns:
                if turn.role is Role.ASSISTANT:
                    hit = detect_refusal(turn.text, cfg.refusal)
                    if hit:
                        verdict.hits.append(hit)
                        break
        if cfg.mismatch.enabled:
            record = embeddings.get(sample.id) if embeddings else None
            hit, note = detect_mismatch(sample, record, cfg.mismatch)
            if hit:
                verdict.hits.append(hit)
            if note:
                verdict.notes.append(note)

        for hit in verdict.hits:
            counts[hit.rule] += 1
        dropping = [h for h in verdict.hits if h.rule not in cfg.advisory]
        verdict.decision = "drop" if dropping else "keep"
        if verdict.decision == "keep":
            kept.append(sample)
        verdicts.append(verdict)

    return kept, verdicts, counts
