"""Prompt-templated augmentation with an offline request/response protocol.

The primary mode is file based: ``emit_requests`` writes a JSONL batch
of prompts, an external model answers them, and ``apply_responses``
merges the answers back, gated by a judge verdict for rewrites.  A thin
chat-completion HTTP client covers the online case.
"""

from __future__ import annotations

import json
import os
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import requests

from .corpus import (
    Category,
    ConversationTurn,
    ImageRef,
    Modality,
    Role,
    Sample,
    ValidationError,
    canonical_json,
)

KIND_COT = "cot"
KIND_JUDGE = "judge"
KIND_EXPAND = "expand"

ENV_INFER_URL = "CORPUSFORGE_INFER_URL"
ENV_INFER_KEY = "CORPUSFORGE_INFER_KEY"

COT_TEMPLATE = """Rewrite the following answer using a **Chain of Thought (CoT)** approach. The final answers should adhere to the following structure and constraints:

1. **Problem Restatement**: Start by restating the problem clearly to set the context.

2. **Step-by-Step Process**:
- **Explicit Steps**: Break the solution into **discrete steps**, showing all calculations.
- **Justifications**: Include a brief explanation for each step (e.g., referencing mathematical rules such as the distributive property, derivative rules, or solving equations).

3. **Mathematical Principles**: Where relevant, mention the specific mathematical principles or theorems being applied (e.g., chain rule, Pythagoras' theorem, etc.).

4. **Final Answer**: End with the final solution, clearly boxed or highlighted.

5. **Consistent Structure**: Ensure every solution follows this format:
- **Restatement of the problem**
- **Steps and calculations with justifications**
- **Final answer**

The output should be detailed but concise, explaining each step logically while avoiding excessive repetition. Clarity and logical flow are crucial.

Here is a question and answer pair of this image:
Question: {question}
Answer: {answer}
"""

JUDGE_TEMPLATE = """Please evaluate if the correctness of my answer based on the provided question and the correct answer.

Question: {question}
Correct Answer: {ori_answer}
My Answer: {new_answer}

Please only return "True" if my answer is correct, or "False" if it is incorrect.
My answer is:"""

EXPAND_TEMPLATE = """Given the question {question}. The original answer is {answer}.
Please reply with a more specific answer based on the existing answer, as detailed as possible."""


@dataclass
class AugmentationRequest:
    request_id: str
    sample_id: str
    kind: str
    prompt: str
    question: str
    answer: str

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "sample_id": self.sample_id,
            "kind": self.kind,
            "prompt": self.prompt,
            "metadata": {"question": self.question, "answer": self.answer},
        }


@dataclass
class AugmentationResponse:
    request_id: str
    text: str


def render_cot_prompt(question: str, answer: str) -> str:
    if not question or not answer:
        raise ValidationError("cot prompt needs a nonempty question and answer")
    return COT_TEMPLATE.format(question=question, answer=answer)


def render_judge_prompt(question: str, original_answer: str, new_answer: str) -> str:
    if not question or not original_answer or not new_answer:
        raise ValidationError("judge prompt needs nonempty question and both answers")
    return JUDGE_TEMPLATE.format(
        question=question, ori_answer=original_answer, new_answer=new_answer
    )


def render_expand_prompt(question: str, answer: str) -> str:
    if not question or not answer:
        raise ValidationError("expand prompt needs a nonempty question and answer")
    return EXPAND_TEMPLATE.format(question=question, answer=answer)


def parse_judge(text: str) -> str:
    """Normalize a judge reply to ``accept`` / ``reject`` / ``unparseable``.

    Anything that is not "True"/"False" after trimming whitespace and
    surrounding quotes is unparseable; callers treat that as a reject
    but count it separately.
    """
    cleaned = text.strip().strip("\"'").strip()
    lowered = cleaned.lower()
    if lowered == "true":
        return "accept"
    if lowered == "false":
        return "reject"
    return "unparseable"


_RENDERERS: dict[str, Callable[[str, str], str]] = {
    KIND_COT: render_cot_prompt,
    KIND_EXPAND: render_expand_prompt,
}


def build_requests(
    pool: Iterable[Sample],
    kind: str,
    selector: Optional[Callable[[Sample], bool]] = None,
) -> list[AugmentationRequest]:
    if kind not in _RENDERERS:
        raise ValidationError(f"unknown request kind {kind!r} (use {KIND_COT} or {KIND_EXPAND})")
    render = _RENDERERS[kind]
    requests_out = []
    for sample in pool:
        if selector is not None and not selector(sample):
            continue
        question = sample.final_user_turn().text
        answer = sample.final_assistant_turn().text
        requests_out.append(
            AugmentationRequest(
                request_id=f"{kind}:{sample.id}",
                sample_id=sample.id,
                kind=kind,
                prompt=render(question, answer),
                question=question,
                answer=answer,
            )
        )
    return requests_out


def build_judge_requests(
    pool: Sequence[Sample], responses: Sequence[AugmentationResponse]
) -> list[AugmentationRequest]:
    """One judge request per CoT response, comparing the rewrite with the
    original answer."""
    by_id = {s.id: s for s in pool}
    out = []
    for response in responses:
        kind, _, sample_id = response.request_id.partition(":")
        if kind != KIND_COT:
            continue
        sample = by_id.get(sample_id)
        if sample is None:
            raise ValidationError(f"response {response.request_id!r} references unknown sample")
        question = sample.final_user_turn().text
        original = sample.final_assistant_turn().text
        out.append(
            AugmentationRequest(
                request_id=f"{KIND_JUDGE}:{sample_id}",
                sample_id=sample_id,
                kind=KIND_JUDGE,
                prompt=render_judge_prompt(question, original, response.text),
                question=question,
                answer=original,
            )
        )
    return out


def write_requests(requests_out: Sequence[AugmentationRequest], path: str | Path) -> None:
    seen = set()
    for r in requests_out:
        if r.request_id in seen:
            raise ValidationError(f"duplicate request_id {r.request_id!r}")
        seen.add(r.request_id)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in requests_out:
            f.write(canonical_json(r.to_dict()) + "\n")


def load_responses(path: str | Path) -> list[AugmentationResponse]:
    responses = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                responses.append(AugmentationResponse(request_id=d["request_id"], text=d["text"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValidationError(f"{path}: line {lineno}: bad response ({exc})") from None
    return responses


def write_responses(responses: Sequence[AugmentationResponse], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in responses:
            f.write(canonical_json({"request_id": r.request_id, "text": r.text}) + "\n")


def apply_responses(
    pool: list[Sample],
    responses: Sequence[AugmentationResponse],
    judge_responses: Sequence[AugmentationResponse] = (),
) -> tuple[list[Sample], dict[str, int]]:
    """Merge model answers back into the pool.

    CoT rewrites replace the final assistant turn only when their judge
    verdict parses as accept; the original answer moves into the
    sample's provenance.  Expansions apply without a judge.  Responses
    whose sample never got a verdict stay pending.
    """
    by_id = {s.id: s for s in pool}
    verdicts: dict[str, str] = {}
    for jr in judge_responses:
        kind, _, sample_id = jr.request_id.partition(":")
        if kind != KIND_JUDGE:
            raise ValidationError(f"judge file contains non-judge id {jr.request_id!r}")
        verdicts[sample_id] = parse_judge(jr.text)

    stats = {"accepted": 0, "rejected": 0, "unparseable": 0, "pending": 0, "expanded": 0}
    updated: dict[str, Sample] = {}
    for response in responses:
        kind, _, sample_id = response.request_id.partition(":")
        sample = by_id.get(sample_id)
        if sample is None:
            raise ValidationError(f"response {response.request_id!r} references unknown sample")
        if kind == KIND_COT:
            verdict = verdicts.get(sample_id)
            if verdict is None:
                stats["pending"] += 1
                continue
            if verdict == "accept":
                stats["accepted"] += 1
                updated[sample_id] = _replace_answer(sample, response.text, "cot")
            elif verdict == "reject":
                stats["rejected"] += 1
            else:
                stats["unparseable"] += 1
        elif kind == KIND_EXPAND:
            stats["expanded"] += 1
            updated[sample_id] = _replace_answer(sample, response.text, "expand")
        else:
            raise ValidationError(f"cannot apply responses of kind {kind!r}")

    for sample_id in verdicts:
        if sample_id not in by_id:
            raise ValidationError(f"judge verdict references unknown sample {sample_id!r}")

    augmented = [updated.get(s.id, s) for s in pool]
    return augmented, stats


def _replace_answer(sample: Sample, new_text: str, method: str) -> Sample:
    turns = list(sample.turns)
    last = max(i for i, t in enumerate(turns) if t.role is Role.ASSISTANT)
    original = turns[last].text
    turns[last] = ConversationTurn(role=Role.ASSISTANT, text=new_text)
    return Sample(
        id=sample.id,
        source=sample.source,
        category=sample.category,
        modality=sample.modality,
        turns=turns,
        images=list(sample.images),
        token_length=None,  # stale after rewriting; re-estimated downstream
        repeat_factor=sample.repeat_factor,
        provenance={"original_answer": original, "augmentation": method},
    )


# ---------------------------------------------------------------------------
# Rule-based OCR QA generation

DEFAULT_DISTRACTOR_LEXICON = [
    "HARBOR", "VELVET", "ORBIT", "MARBLE", "THUNDER", "PIXEL", "CANYON",
    "LANTERN", "BREEZE", "COBALT", "MEADOW", "QUARTZ", "SADDLE", "TUNDRA",
]


@dataclass
class WordRecord:
    text: str
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)


def rule_based_ocr_qa(
    words: Sequence[WordRecord],
    image: ImageRef,
    seed: int = 0,
    source: str = "ocr_qa_augment",
    distractor_lexicon: Optional[Sequence[str]] = None,
    max_position_pairs: int = 4,
) -> list[Sample]:
    """Generate existence and relative-position QA from OCR word boxes.

    Existence questions answer yes for recorded words and no for seeded
    distractors absent from the record set; position questions compare
    two word centers along the dominant axis.  Answers are consistent
    with the inputs by construction.
    """
    if not words:
        raise ValidationError("rule_based_ocr_qa: empty word record list")
    if image.width is not None and image.height is not None:
        for w in words:
            if not (0 <= w.x0 <= w.x1 <= image.width and 0 <= w.y0 <= w.y1 <= image.height):
                raise ValidationError(f"bbox for {w.text!r} outside image bounds")

    rng = random.Random(seed)
    present = {w.text for w in words}
    stem = Path(image.path).stem or "image"
    samples: list[Sample] = []

    def make(sample_id: str, question: str, answer: str) -> Sample:
        return Sample(
            id=sample_id,
            source=source,
            category=Category.NAIVE_OCR,
            modality=Modality.IMAGE_TEXT,
            turns=[
                ConversationTurn(role=Role.USER, text=question),
                ConversationTurn(role=Role.ASSISTANT, text=answer),
            ],
            images=[image],
        )

    for i, w in enumerate(words):
        samples.append(
            make(
                f"{stem}-exist-yes-{i}",
                f'Does the word "{w.text}" appear in the image?',
                "Yes",
            )
        )

    lexicon = [d for d in (distractor_lexicon or DEFAULT_DISTRACTOR_LEXICON) if d not in present]
    n_distractors = min(len(words), len(lexicon))
    for i, distractor in enumerate(rng.sample(lexicon, n_distractors)):
        samples.append(
            make(
                f"{stem}-exist-no-{i}",
                f'Does the word "{distractor}" appear in the image?',
                "No",
            )
        )

    pairs = [(a, b) for a in range(len(words)) for b in range(len(words)) if a != b]
    rng.shuffle(pairs)
    for i, (a, b) in enumerate(pairs[:max_position_pairs]):
        wa, wb = words[a], words[b]
        dx = wb.center[0] - wa.center[0]
        dy = wb.center[1] - wa.center[1]
        if abs(dx) >= abs(dy):
            answer = "left of" if dx > 0 else "right of"
        else:
            answer = "above" if dy > 0 else "below"
        samples.append(
            make(
                f"{stem}-pos-{i}",
                f'Where is the word "{wa.text}" positioned relative to the word "{wb.text}" in the image?',
                answer,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Optional online inference


@dataclass
class InferenceConfig:
    url: str
    api_key: str = ""
    model: str = "default"
    timeout: float = 60.0
    attempts: int = 3
    backoff: float = 1.0

    @classmethod
    def from_env(cls) -> "InferenceConfig":
        url = os.environ.get(ENV_INFER_URL)
        if not url:
            raise ValidationError(f"{ENV_INFER_URL} is not set")
        return cls(url=url, api_key=os.environ.get(ENV_INFER_KEY, ""))


class InferenceError(RuntimeError):
    pass


def inference_call(request: AugmentationRequest, cfg: InferenceConfig) -> AugmentationResponse:
    """POST one chat-completion request, retrying transport errors and
    non-2xx statuses with exponential backoff."""
    body = {
        "model": cfg.model,
        "messages": [{"role": "user", "content": request.prompt}],
    }
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"

    last_error: Optional[str] = None
    for attempt in range(cfg.attempts):
        if attempt:
            time.sleep(cfg.backoff * 2 ** (attempt - 1))
        try:
            resp = requests.post(cfg.url, json=body, headers=headers, timeout=cfg.timeout)
        except requests.RequestException as exc:
            last_error = f"transport error: {exc}"
            continue
        if not (200 <= resp.status_code < 300):
            last_error = f"HTTP {resp.status_code}"
            continue
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise InferenceError(
                f"{request.request_id}: malformed response JSON ({exc!r})"
            ) from None
        return AugmentationResponse(request_id=request.request_id, text=text)
    raise InferenceError(
        f"{request.request_id}: failed after {cfg.attempts} attempts ({last_error})"
    )


def run_batch(
    requests_in: Sequence[AugmentationRequest],
    cfg: InferenceConfig,
    workers: int = 1,
) -> list[AugmentationResponse]:
    """Call the endpoint for a batch, preserving request order in the
    output regardless of completion order."""
    if workers <= 1:
        return [inference_call(r, cfg) for r in requests_in]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: inference_call(r, cfg), requests_in))
