"""Synthetic dataset generation: topic registry, request templates, clients, ingestion.

Generator responses use a sentinel-delimited text format. Question
generation::

    ### CONTEXT
    <passage>
    ### ANALYSIS
    <question>
    ### SYNTHESIS
    <question>
    ### EVALUATION
    <question>

Answer-evaluation generation::

    ### QUESTION            (only when the request asks for a fresh question)
    ### CRITERIA
    ### STUDENT ANSWER
    ### ASSESSMENT
    ### SCORES              Grammar: g/10 | Coherence: c/10 | Relevance: r/10
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .corpus import (
    AnswerQuality,
    BloomLevel,
    EvalRecord,
    QGenRecord,
    RecordValidationError,
    ScoreParseError,
    format_scores,
    parse_scores,
)
from .numerics import Rng

log = logging.getLogger(__name__)

ENDPOINT_ENV = "DESKQLORA_GENERATOR_URL"
API_KEY_ENV = "DESKQLORA_GENERATOR_KEY"

Assignment = tuple[str, str, str]


class RegistryExhaustedError(RuntimeError):
    pass


class MalformedResponseError(ValueError):
    pass


class ClientUnavailableError(RuntimeError):
    pass


# registry ------------------------------------------------------------------


class TopicRegistry:
    """subject -> topic -> subtopics, with a used flag per triple.

    Sampling marks a triple used under a lock, so concurrent callers never
    receive the same assignment.
    """

    def __init__(self, tree: dict[str, dict[str, list[str]]]):
        triples: list[Assignment] = []
        for subject, topics in tree.items():
            if not isinstance(topics, dict):
                raise ValueError(f"subject {subject!r}: expected a mapping of topics")
            for topic, subs in topics.items():
                if len(set(subs)) != len(subs):
                    raise ValueError(f"duplicate subtopic under {subject!r}/{topic!r}")
                for sub in subs:
                    if not all(s.strip() for s in (subject, topic, sub)):
                        raise ValueError("registry entries must be nonempty")
                    triples.append((subject, topic, sub))
        self.tree = tree
        self._triples = triples
        self._used: set[Assignment] = set()
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "TopicRegistry":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data.get("subjects", data))

    def __len__(self) -> int:
        return len(self._triples)

    @property
    def used_count(self) -> int:
        return len(self._used)

    def unused(self) -> list[Assignment]:
        return [t for t in self._triples if t not in self._used]

    def is_used(self, triple: Assignment) -> bool:
        return triple in self._used

    def sample_assignment(self, rng: Rng) -> Assignment:
        with self._lock:
            free = self.unused()
            if not free:
                raise RegistryExhaustedError(f"all {len(self._triples)} subject/topic/subtopic triples are used")
            pick = free[int(rng.integers(len(free)))]
            self._used.add(pick)
            return pick


sample_assignment = TopicRegistry.sample_assignment


# requests ------------------------------------------------------------------

LEVELS = [lvl.value for lvl in BloomLevel]


@dataclass(frozen=True)
class GenerationRequest:
    assignment: Assignment
    directive: str


@dataclass(frozen=True)
class EvalGenerationRequest:
    seed_question: str
    tier: AnswerQuality
    fresh_question: bool
    directive: str


def build_generation_request(assignment: Assignment) -> GenerationRequest:
    subject, topic, subtopic = assignment
    directive = (
        "You are preparing study material for university students.\n"
        f"Subject: {subject}\nTopic: {topic}\nSubtopic: {subtopic}\n\n"
        "Write one self-contained context passage about the subtopic, then write one question "
        "about the passage for each of the three upper levels of Bloom's taxonomy: "
        "Analysis, Synthesis and Evaluation.\n"
        "Reply using exactly these section markers, each on its own line:\n"
        "### CONTEXT\n### ANALYSIS\n### SYNTHESIS\n### EVALUATION"
    )
    return GenerationRequest(tuple(assignment), directive)


def build_eval_generation_request(
    seed_question: str, quality_tier: AnswerQuality | str, fresh_question: bool = False
) -> EvalGenerationRequest:
    tier = AnswerQuality(quality_tier)
    if fresh_question:
        q_part = (
            f"Seed topic: {seed_question}\n\n"
            "Write a new subjective question on the seed topic. Then write an evaluation rubric"
        )
    else:
        q_part = f"Subjective question: {seed_question}\n\nWrite an evaluation rubric"
    directive = (
        f"{q_part}"
        " for the question, a student answer whose correctness tier is "
        f"{tier.value}, an evaluation of that answer against the rubric, and integer scores out of 10 "
        "for grammar, coherence and relevance.\n"
        "Reply using these section markers, each on its own line:\n"
        + ("### QUESTION\n" if fresh_question else "")
        + "### CRITERIA\n### STUDENT ANSWER\n### ASSESSMENT\n### SCORES\n"
        "The SCORES section must read: Grammar: g/10 | Coherence: c/10 | Relevance: r/10"
    )
    return EvalGenerationRequest(seed_question, tier, fresh_question, directive)


# clients -------------------------------------------------------------------


class GeneratorClient(Protocol):
    def complete(self, request_text: str) -> str: ...


def _text_seed(seed: int, text: str) -> int:
    h = hashlib.sha256(f"{seed}\x00{text}".encode()).digest()
    return int.from_bytes(h[:8], "little")


_DIRECTIVE_FIELD = re.compile(r"^(Subject|Topic|Subtopic|Subjective question|Seed topic): (.*)$", re.M)

_PASSAGE_OPENERS = [
    "{sub} is a central idea within {topic}, a branch of {subject}.",
    "Within {subject}, the study of {topic} gives particular attention to {sub}.",
    "Students of {subject} meet {sub} early when they study {topic}.",
]
_PASSAGE_BODIES = [
    "It explains how observable effects follow from a small number of underlying principles.",
    "Its methods connect careful measurement with models that predict new situations.",
    "Practitioners rely on it to compare competing explanations and to justify decisions.",
]
_QUESTION_TEMPLATES = {
    "Analysis": "How does {sub} relate to the other ideas in {topic}?",
    "Synthesis": "How would you design an experiment that uses {sub} to solve a new problem in {topic}?",
    "Evaluation": "How well does {sub} explain real observations in {subject}, and what are its limits?",
}
_TIER_PROFILE = {
    AnswerQuality.PERFECT: ("a complete and accurate", (9, 10)),
    AnswerQuality.MODERATE: ("a mostly accurate", (7, 8)),
    AnswerQuality.AVERAGE: ("a partly accurate", (5, 6)),
    AnswerQuality.BELOW_AVERAGE: ("a weak and incomplete", (3, 4)),
    AnswerQuality.IMPERFECT: ("an inaccurate and off-topic", (0, 2)),
}


class StubGenerator:
    """Offline generator: template-filled responses, deterministic in (seed, request)."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def complete(self, request_text: str) -> str:
        fields_ = dict(_DIRECTIVE_FIELD.findall(request_text))
        rng = Rng(_text_seed(self.seed, request_text))
        if "Subject" in fields_:
            return self._qgen(fields_, rng)
        return self._eval(request_text, fields_, rng)

    def _qgen(self, f, rng: Rng) -> str:
        subject, topic, sub = f["Subject"], f["Topic"], f["Subtopic"]
        kw = dict(subject=subject, topic=topic, sub=sub)
        opener = _PASSAGE_OPENERS[int(rng.integers(len(_PASSAGE_OPENERS)))].format(**kw)
        body = _PASSAGE_BODIES[int(rng.integers(len(_PASSAGE_BODIES)))]
        parts = ["### CONTEXT", f"{opener} {body}"]
        for lvl in LEVELS:
            parts += [f"### {lvl.upper()}", _QUESTION_TEMPLATES[lvl].format(**kw)]
        return "\n".join(parts) + "\n"

    def _eval(self, text: str, f, rng: Rng) -> str:
        tier = next((t for t in AnswerQuality if f"correctness tier is {t.value}" in text), None)
        if tier is None:
            raise MalformedResponseError("stub cannot identify the requested answer tier")
        desc, (lo, hi) = _TIER_PROFILE[tier]
        parts = []
        if "Seed topic" in f:
            question = f"Explain the main ideas of {f['Seed topic'].rstrip('?.')}."
            parts += ["### QUESTION", question]
        else:
            question = f["Subjective question"]
        scores = [int(rng.integers(lo, hi + 1)) for _ in range(3)]
        parts += [
            "### CRITERIA",
            "A strong answer states the key principle, supports it with an example, and stays on the question.",
            "### STUDENT ANSWER",
            f"This is {desc} answer to: {question}",
            "### ASSESSMENT",
            f"The answer is {desc} response; it rates as {tier.value} against the rubric.",
            "### SCORES",
            format_scores(*scores),
        ]
        return "\n".join(parts) + "\n"


class HttpGeneratorClient:
    """Plain-text POST client for a remote generator; unconfigured by default.

    Reads the endpoint from ``DESKQLORA_GENERATOR_URL`` and a bearer token
    from ``DESKQLORA_GENERATOR_KEY``.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        self.timeout = timeout

    def complete(self, request_text: str) -> str:
        if not self.endpoint:
            raise ClientUnavailableError(f"no generator endpoint configured (set {ENDPOINT_ENV})")
        import urllib.request

        req = urllib.request.Request(self.endpoint, data=request_text.encode("utf-8"), method="POST")
        req.add_header("Content-Type", "text/plain; charset=utf-8")
        if self.api_key:
            req.add_header("Authorization", f"Bearer {self.api_key}")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8")


@dataclass(frozen=True)
class SkipReport:
    item: str
    reason: str


def call_with_retry(
    client: GeneratorClient,
    text: str,
    attempts: int = 3,
    backoff: float = 0.5,
    sleep=time.sleep,
) -> str:
    """Up to ``attempts`` tries with exponential backoff; re-raises the last error."""
    for attempt in range(attempts):
        try:
            return client.complete(text)
        except ClientUnavailableError:
            raise
        except Exception as exc:  # noqa: BLE001 - any transport failure is retried
            if attempt == attempts - 1:
                raise
            log.warning("generator call failed (%s); retrying", exc)
            sleep(backoff * 2**attempt)
    raise AssertionError("unreachable")


# ingestion -----------------------------------------------------------------


def slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")


def _split_sections(text: str) -> dict[str, str]:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        m = re.match(r"^###\s+([A-Z][A-Z ]*?)\s*$", line)
        if m:
            current = m.group(1)
            sections.setdefault(current, [])
            continue
        if current is not None:
            sections[current].append(line)
    return {k: "\n".join(v).strip() for k, v in sections.items()}


def ingest_generation(response_text: str, assignment: Assignment) -> tuple[list[QGenRecord], list[SkipReport]]:
    subject, topic, subtopic = assignment
    sections = _split_sections(response_text)
    context = sections.get("CONTEXT", "")
    if not context:
        raise MalformedResponseError(f"response for {assignment} has no context passage")
    records, skipped = [], []
    base = f"{slug(subject)}-{slug(topic)}-{slug(subtopic)}"
    for lvl in LEVELS:
        q = sections.get(lvl.upper(), "")
        if not q:
            skipped.append(SkipReport(f"{base}-{lvl.lower()}", f"missing or empty {lvl.upper()} block"))
            continue
        records.append(QGenRecord(f"{base}-{lvl.lower()}", subject, topic, subtopic, context, q, lvl))
    return records, skipped


def ingest_eval_generation(response_text: str, request: EvalGenerationRequest, record_id: str) -> EvalRecord:
    sections = _split_sections(response_text)
    need = ["CRITERIA", "STUDENT ANSWER", "ASSESSMENT", "SCORES"]
    if request.fresh_question:
        need.insert(0, "QUESTION")
    missing = [k for k in need if not sections.get(k)]
    if missing:
        raise MalformedResponseError(f"missing {missing[0]} block")
    try:
        g, c, r = parse_scores(sections["SCORES"])
    except ScoreParseError as exc:
        raise MalformedResponseError(str(exc)) from None
    question = sections["QUESTION"] if request.fresh_question else request.seed_question
    return EvalRecord(
        record_id, question, sections["CRITERIA"], sections["STUDENT ANSWER"], request.tier,
        sections["ASSESSMENT"], g, c, r,
    )


# pipeline ------------------------------------------------------------------


@dataclass
class GenerationResult:
    qgen: list[QGenRecord] = field(default_factory=list)
    eval: list[EvalRecord] = field(default_factory=list)
    skipped: list[SkipReport] = field(default_factory=list)
    exhausted: bool = False


def generate_datasets(
    registry: TopicRegistry,
    client: GeneratorClient,
    rng: Rng,
    n_assignments: int | None = None,
    eval_per_question: int = 1,
    fresh_eval_questions: bool = True,
    max_workers: int = 4,
    attempts: int = 3,
    backoff: float = 0.5,
) -> GenerationResult:
    """Run both generation passes. Output order depends only on ``rng``.

    Assignments are drawn up front; requests then run with bounded
    parallelism and results are ingested in request order. Eval requests
    cycle through the five quality tiers.
    """
    result = GenerationResult()
    want = len(registry.unused()) if n_assignments is None else n_assignments
    assignments = []
    for _ in range(want):
        try:
            assignments.append(registry.sample_assignment(rng))
        except RegistryExhaustedError:
            result.exhausted = True
            break

    requests = [build_generation_request(a) for a in assignments]
    responses = _run_all(client, [r.directive for r in requests], max_workers, attempts, backoff)
    for req, resp in zip(requests, responses):
        label = "/".join(req.assignment)
        if isinstance(resp, Exception):
            result.skipped.append(SkipReport(label, f"generator failed: {resp}"))
            continue
        try:
            recs, skips = ingest_generation(resp, req.assignment)
        except (MalformedResponseError, RecordValidationError) as exc:
            result.skipped.append(SkipReport(label, str(exc)))
            continue
        result.qgen.extend(recs)
        result.skipped.extend(skips)

    tiers = list(AnswerQuality)
    eval_reqs: list[tuple[str, EvalGenerationRequest]] = []
    k = 0
    for rec in result.qgen:
        for j in range(eval_per_question):
            seed_q = f"{rec.subtopic} in {rec.topic}" if fresh_eval_questions else rec.question
            req = build_eval_generation_request(seed_q, tiers[k % len(tiers)], fresh_eval_questions)
            eval_reqs.append((f"{rec.id}-eval{j}", req))
            k += 1
    eval_resps = _run_all(client, [r.directive for _, r in eval_reqs], max_workers, attempts, backoff)
    for (rid, req), resp in zip(eval_reqs, eval_resps):
        if isinstance(resp, Exception):
            result.skipped.append(SkipReport(rid, f"generator failed: {resp}"))
            continue
        try:
            result.eval.append(ingest_eval_generation(resp, req, rid))
        except (MalformedResponseError, RecordValidationError) as exc:
            result.skipped.append(SkipReport(rid, str(exc)))
    return result


def _run_all(client, texts, max_workers, attempts, backoff) -> list:
    def one(t):
        try:
            return call_with_retry(client, t, attempts, backoff)
        except Exception as exc:  # noqa: BLE001 - reported as a skip
            return exc

    if max_workers <= 1 or len(texts) <= 1:
        return [one(t) for t in texts]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, texts))


def tier_counts(records) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in records:
        out[r.stratum] = out.get(r.stratum, 0) + 1
    return out

