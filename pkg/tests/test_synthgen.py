from collections import Counter

import pytest

from deskqlora.corpus import AnswerQuality, BloomLevel, EvalRecord, read_jsonl, write_jsonl
from deskqlora.numerics import Rng
from deskqlora.synthgen import (
    ClientUnavailableError,
    HttpGeneratorClient,
    MalformedResponseError,
    RegistryExhaustedError,
    StubGenerator,
    TopicRegistry,
    build_eval_generation_request,
    build_generation_request,
    call_with_retry,
    generate_datasets,
    ingest_eval_generation,
    ingest_generation,
)

FOUR = {"Physics": {"Optics": ["Refraction", "Lenses"]}, "Biology": {"Cells": ["Mitosis", "Membranes"]}}


def test_single_triple_exhausts():
    reg = TopicRegistry({"A": {"B": ["C"]}})
    assert reg.sample_assignment(Rng(0)) == ("A", "B", "C")
    with pytest.raises(RegistryExhaustedError):
        reg.sample_assignment(Rng(0))


def test_no_duplicates_and_used_count():
    reg = TopicRegistry(FOUR)
    rng = Rng(3)
    got = [reg.sample_assignment(rng) for _ in range(4)]
    assert len(set(got)) == 4 and reg.used_count == 4
    assert reg.unused() == []


def test_duplicate_tree_entries_rejected():
    with pytest.raises(ValueError):
        TopicRegistry({"A": {"B": ["C", "C"]}})


def test_first_pick_is_uniform():
    counts = Counter(TopicRegistry(FOUR).sample_assignment(Rng(seed)) for seed in range(100_000))
    assert len(counts) == 4
    for c in counts.values():
        assert abs(c / 100_000 - 0.25) < 0.01


def test_generation_request_text():
    req = build_generation_request(("Physics", "Optics", "Refraction"))
    for s in ("Physics", "Optics", "Refraction"):
        assert s in req.directive
    for level in BloomLevel:
        assert req.directive.count(level.value) == 1
    assert build_generation_request(("Physics", "Optics", "Refraction")) == req


def test_eval_request_text():
    directives = {build_eval_generation_request("Why?", t).directive for t in AnswerQuality}
    assert len(directives) == 5
    assert "Perfect" in build_eval_generation_request("Why?", AnswerQuality.PERFECT).directive


def test_stub_is_deterministic():
    text = build_generation_request(("Physics", "Optics", "Refraction")).directive
    assert StubGenerator(1).complete(text) == StubGenerator(1).complete(text)


def test_ingest_well_formed_and_partial():
    a = ("Physics", "Optics", "Refraction")
    resp = StubGenerator(0).complete(build_generation_request(a).directive)
    recs, skips = ingest_generation(resp, a)
    assert len(recs) == 3 and {r.bloom_level for r in recs} == set(BloomLevel) and not skips
    start = resp.index("### SYNTHESIS")
    end = resp.index("### EVALUATION")
    recs, skips = ingest_generation(resp[:start] + resp[end:], a)
    assert len(recs) == 2 and len(skips) == 1 and skips[0].item.endswith("synthesis")


def test_missing_context_rejects_response():
    with pytest.raises(MalformedResponseError):
        ingest_generation("### ANALYSIS\nq\n### SYNTHESIS\nq\n### EVALUATION\nq", ("a", "b", "c"))


def test_ingest_round_trip(tmp_path):
    a = ("Physics", "Optics", "Lenses")
    recs, _ = ingest_generation(StubGenerator(2).complete(build_generation_request(a).directive), a)
    write_jsonl(recs, tmp_path / "q.jsonl")
    assert read_jsonl(tmp_path / "q.jsonl") == recs


@pytest.mark.parametrize("fresh", [True, False])
@pytest.mark.parametrize("tier", list(AnswerQuality))
def test_ingest_eval_response(tier, fresh):
    req = build_eval_generation_request("Explain refraction.", tier, fresh_question=fresh)
    rec = ingest_eval_generation(StubGenerator(0).complete(req.directive), req, "e1")
    assert isinstance(rec, EvalRecord) and rec.answer_quality == tier
    assert all(0 <= s <= 10 for s in rec.scores)
    if not fresh:
        assert rec.question == "Explain refraction."


def test_eval_response_missing_scores():
    req = build_eval_generation_request("Q?", AnswerQuality.AVERAGE)
    resp = StubGenerator(0).complete(req.directive)
    with pytest.raises(MalformedResponseError):
        ingest_eval_generation(resp[: resp.index("### SCORES")], req, "e1")


class Flaky:
    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def complete(self, text):
        self.calls += 1
        if self.calls <= self.failures:
            raise OSError("transient")
        return "ok"


def test_retry_policy():
    waits = []
    assert call_with_retry(Flaky(2), "x", sleep=waits.append) == "ok"
    assert waits == [0.5, 1.0]
    with pytest.raises(OSError):
        call_with_retry(Flaky(3), "x", sleep=waits.append)


def test_http_client_unconfigured(monkeypatch):
    monkeypatch.delenv("DESKQLORA_GENERATOR_URL", raising=False)
    with pytest.raises(ClientUnavailableError):
        HttpGeneratorClient().complete("hi")


class FailingOn:
    """Stub that errors on every request mentioning one subtopic."""

    def __init__(self, word):
        self.word = word
        self.inner = StubGenerator(0)

    def complete(self, text):
        if self.word in text:
            raise OSError("down")
        return self.inner.complete(text)


def test_generate_datasets_four_triples():
    res = generate_datasets(TopicRegistry(FOUR), StubGenerator(0), Rng(0), backoff=0)
    assert len(res.qgen) == 12 and len(res.eval) == 12
    keys = [(r.subject, r.topic, r.subtopic, r.bloom_level) for r in res.qgen]
    assert len(set(keys)) == 12
    again = generate_datasets(TopicRegistry(FOUR), StubGenerator(0), Rng(0), backoff=0)
    assert again.qgen == res.qgen and again.eval == res.eval


def test_failed_requests_are_skipped_and_reported():
    res = generate_datasets(TopicRegistry(FOUR), FailingOn("Mitosis"), Rng(0), backoff=0)
    assert len(res.qgen) == 9
    assert any("Mitosis" in s.item for s in res.skipped)


def test_exhaustion_keeps_partial_output():
    res = generate_datasets(TopicRegistry(FOUR), StubGenerator(0), Rng(0), n_assignments=6, backoff=0)
    assert res.exhausted and len(res.qgen) == 12


def test_eval_tiers_cycle(stub_data):
    counts = Counter(r.answer_quality for r in stub_data.eval)
    assert max(counts.values()) - min(counts.values()) <= 1
