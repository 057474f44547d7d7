"""Dataset records, instruct prompts, byte tokenizer, JSONL I/O, stratified splits."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, fields
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

from .numerics import Rng

log = logging.getLogger(__name__)

__all__ = [
    "BloomLevel",
    "AnswerQuality",
    "QGenRecord",
    "EvalRecord",
    "PromptPair",
    "RecordValidationError",
    "ScoreParseError",
    "PromptParseError",
    "HEADER",
    "BOS",
    "EOS",
    "PAD",
    "SEP",
    "VOCAB_SIZE",
    "IGNORE_ID",
    "build_qgen_prompt",
    "parse_qgen_prompt",
    "build_eval_prompt",
    "parse_eval_prompt",
    "format_scores",
    "parse_scores",
    "tokenize",
    "detokenize",
    "stratified_split",
    "read_jsonl",
    "write_jsonl",
]


class BloomLevel(str, Enum):
    ANALYSIS = "Analysis"
    SYNTHESIS = "Synthesis"
    EVALUATION = "Evaluation"


class AnswerQuality(str, Enum):
    PERFECT = "Perfect"
    MODERATE = "Moderate"
    AVERAGE = "Average"
    BELOW_AVERAGE = "BelowAverage"
    IMPERFECT = "Imperfect"


class RecordValidationError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class PromptParseError(ValueError):
    pass


class ScoreParseError(ValueError):
    """A model output lacks (or garbles) one of the three score fields."""

    def __init__(self, field: str, reason: str = "missing field"):
        self.field = field
        self.reason = reason
        super().__init__(f"{reason}: {field}")


SCORE_MIN, SCORE_MAX = 0, 10


@dataclass(frozen=True)
class QGenRecord:
    id: str
    subject: str
    topic: str
    subtopic: str
    context: str
    question: str
    bloom_level: BloomLevel

    def __post_init__(self):
        object.__setattr__(self, "bloom_level", _enum(BloomLevel, self.bloom_level, "bloomLevel"))
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, str) and not v.strip():
                raise RecordValidationError(f"field {_QGEN_JSON[f.name]!r} is empty", _QGEN_JSON[f.name])

    @property
    def stratum(self) -> str:
        return self.bloom_level.value


@dataclass(frozen=True)
class EvalRecord:
    id: str
    question: str
    evaluation_criteria: str
    student_answer: str
    answer_quality: AnswerQuality
    answer_evaluation: str
    grammar_score: int
    coherence_score: int
    relevance_score: int

    def __post_init__(self):
        object.__setattr__(self, "answer_quality", _enum(AnswerQuality, self.answer_quality, "answerQuality"))
        for f in fields(self):
            v = getattr(self, f.name)
            key = _EVAL_JSON[f.name]
            if f.name.endswith("_score"):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise RecordValidationError(f"field {key!r} must be an integer, got {v!r}", key)
                if not SCORE_MIN <= v <= SCORE_MAX:
                    raise RecordValidationError(f"field {key!r}={v} outside [{SCORE_MIN}, {SCORE_MAX}]", key)
            elif isinstance(v, str) and not v.strip():
                raise RecordValidationError(f"field {key!r} is empty", key)

    @property
    def stratum(self) -> str:
        return self.answer_quality.value

    @property
    def scores(self) -> tuple[int, int, int]:
        return self.grammar_score, self.coherence_score, self.relevance_score


def _enum(cls, value, key):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise RecordValidationError(f"field {key!r} has invalid value {value!r} (allowed: {allowed})", key) from None


_QGEN_JSON = {
    "id": "id",
    "subject": "subject",
    "topic": "topic",
    "subtopic": "subtopic",
    "context": "context",
    "question": "question",
    "bloom_level": "bloomLevel",
}
_EVAL_JSON = {
    "id": "id",
    "question": "subjectiveQuestion",
    "evaluation_criteria": "evaluationCriteria",
    "student_answer": "studentAnswer",
    "answer_quality": "answerQuality",
    "answer_evaluation": "answerEvaluation",
    "grammar_score": "grammarScore",
    "coherence_score": "coherenceScore",
    "relevance_score": "relevanceScore",
}
_SCHEMAS = {QGenRecord: _QGEN_JSON, EvalRecord: _EVAL_JSON}


def record_to_json(rec: QGenRecord | EvalRecord) -> dict:
    out = {}
    for attr, key in _SCHEMAS[type(rec)].items():
        v = getattr(rec, attr)
        out[key] = v.value if isinstance(v, Enum) else v
    return out


def record_from_json(obj: dict, kind: type, strict: bool = True):
    schema = _SCHEMAS[kind]
    inverse = {v: k for k, v in schema.items()}
    unknown = sorted(set(obj) - set(inverse))
    if unknown and strict:
        raise RecordValidationError(f"unknown field {unknown[0]!r}", unknown[0])
    missing = [k for k in schema.values() if k not in obj]
    if missing:
        raise RecordValidationError(f"missing field {missing[0]!r}", missing[0])
    return kind(**{inverse[k]: obj[k] for k in schema.values()})


def detect_kind(obj: dict) -> type:
    return EvalRecord if "subjectiveQuestion" in obj else QGenRecord


def write_jsonl(records: Iterable[QGenRecord | EvalRecord], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), ensure_ascii=False) + "\n")


def read_jsonl(path, kind: type | None = None, strict: bool = True) -> list:
    """Read records; without ``kind`` each line's schema is inferred from its fields."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordValidationError(f"malformed JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise RecordValidationError("expected a JSON object", line=lineno)
            k = kind or detect_kind(obj)
            try:
                out.append(record_from_json(obj, k, strict))
            except RecordValidationError as exc:
                raise RecordValidationError(str(exc), exc.field, lineno) from None
            except TypeError as exc:
                raise RecordValidationError(str(exc), line=lineno) from None
    return out


# prompts -------------------------------------------------------------------

HEADER = (
    "Below is an instruction that describes a task, paired with an input that provides "
    "further context. Write a response that appropriately completes the request."
)


@dataclass(frozen=True)
class PromptPair:
    prompt: str
    target: str


_QGEN_INSTR = "Generate one {level}-level question from Bloom's taxonomy that can be answered from the passage below."
_QGEN_RE = re.compile(
    re.escape(HEADER)
    + r"\n\n### Instruction:\nGenerate one (?P<level>\w+)-level question from Bloom's taxonomy that can be answered"
    r" from the passage below\.\n\n### Passage:\n(?P<context>.*)\n\n### Response:\n\Z",
    re.S,
)


def build_qgen_prompt(r: QGenRecord) -> PromptPair:
    prompt = (
        f"{HEADER}\n\n### Instruction:\n{_QGEN_INSTR.format(level=r.bloom_level.value)}\n\n"
        f"### Passage:\n{r.context}\n\n### Response:\n"
    )
    return PromptPair(prompt, r.question)


def parse_qgen_prompt(prompt: str) -> tuple[BloomLevel, str]:
    m = _QGEN_RE.match(prompt)
    if not m:
        raise PromptParseError("not a question-generation prompt")
    return BloomLevel(m["level"]), m["context"]


_EVAL_INSTR = (
    "Evaluate the student's answer to the subjective question using the evaluation criteria as a rubric. "
    "Write an evaluation, then score grammar, coherence and relevance out of 10."
)
_EVAL_RE = re.compile(
    re.escape(HEADER)
    + r"\n\n### Instruction:\n"
    + re.escape(_EVAL_INSTR)
    + r"\n\n### Question:\n(?P<question>.*)\n\n### Evaluation Criteria:\n(?P<criteria>.*)"
    r"\n\n### Student Answer:\n(?P<answer>.*)\n\n### Response:\n\Z",
    re.S,
)
_SCORE_FIELDS = ("Grammar", "Coherence", "Relevance")


def format_scores(grammar: int, coherence: int, relevance: int) -> str:
    return f"Grammar: {grammar}/10 | Coherence: {coherence}/10 | Relevance: {relevance}/10"


def parse_scores(text: str) -> tuple[int, int, int]:
    """Parse ``Grammar: g/10 | Coherence: c/10 | Relevance: r/10`` from the last score line."""
    out = []
    for name in _SCORE_FIELDS:
        matches = re.findall(rf"\b{name}:\s*(-?\d+)\s*/\s*10\b", text)
        if not matches:
            raise ScoreParseError(name.lower())
        v = int(matches[-1])
        if not SCORE_MIN <= v <= SCORE_MAX:
            raise ScoreParseError(name.lower(), f"score out of range ({v})")
        out.append(v)
    return tuple(out)


def build_eval_prompt(r: EvalRecord) -> PromptPair:
    prompt = (
        f"{HEADER}\n\n### Instruction:\n{_EVAL_INSTR}\n\n"
        f"### Question:\n{r.question}\n\n### Evaluation Criteria:\n{r.evaluation_criteria}\n\n"
        f"### Student Answer:\n{r.student_answer}\n\n### Response:\n"
    )
    target = f"{r.answer_evaluation}\n{format_scores(*r.scores)}"
    return PromptPair(prompt, target)


def parse_eval_prompt(prompt: str) -> tuple[str, str, str]:
    """Inverse of :func:`build_eval_prompt`: (question, criteria, student answer)."""
    m = _EVAL_RE.match(prompt)
    if not m:
        raise PromptParseError("not an answer-evaluation prompt")
    return m["question"], m["criteria"], m["answer"]


def build_prompt(rec: QGenRecord | EvalRecord) -> PromptPair:
    return build_qgen_prompt(rec) if isinstance(rec, QGenRecord) else build_eval_prompt(rec)


# tokenizer -----------------------------------------------------------------

BOS, EOS, PAD, SEP = 256, 257, 258, 259
IGNORE_ID = -100
VOCAB_SIZE = 260


def tokenize(text: str, bos: bool = True, eos: bool = True) -> list[int]:
    ids = list(text.encode("utf-8"))
    return ([BOS] if bos else []) + ids + ([EOS] if eos else [])


def detokenize(ids: Iterable[int]) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


# splitting -----------------------------------------------------------------

T = TypeVar("T")

SPLIT_RATIOS = (0.80, 0.15, 0.05)


def stratified_split(
    records: Sequence[T],
    ratios: Sequence[float] = SPLIT_RATIOS,
    key: Callable[[T], str] | str | None = None,
    seed: int = 0,
) -> tuple[list[T], list[T], list[T]]:
    """Per-stratum shuffle then floor cuts at r0*n and (r0+r1)*n; test gets the rest.

    ``key`` defaults to the record's natural stratum (Bloom level for
    question records, answer quality for evaluation records).
    """
    fr = [Fraction(str(r)) for r in ratios]
    if len(fr) != 3 or sum(fr) != 1 or min(fr) < 0:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {tuple(ratios)}")
    if key is None:
        keyfn = lambda r: r.stratum  # noqa: E731
    elif isinstance(key, str):
        keyfn = lambda r: _key_value(getattr(r, key))  # noqa: E731
    else:
        keyfn = key

    strata: dict[str, list[T]] = defaultdict(list)
    for rec in records:
        k = keyfn(rec)
        if k is None:
            raise ValueError(f"record without a stratum key: {rec!r}")
        strata[str(k)].append(rec)

    rng = Rng(seed)
    train, val, test = [], [], []
    for k in sorted(strata):
        group = strata[k]
        n = len(group)
        order = rng.permutation(n)
        shuffled = [group[i] for i in order]
        if n < 3:
            log.warning("stratum %r has only %d record(s); all assigned to train", k, n)
            train.extend(shuffled)
            continue
        c1 = math.floor(fr[0] * n)
        c2 = math.floor((fr[0] + fr[1]) * n)
        train.extend(shuffled[:c1])
        val.extend(shuffled[c1:c2])
        test.extend(shuffled[c2:])
    return train, val, test


def _key_value(v):
    return v.value if isinstance(v, Enum) else v
