import json
import logging
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskqlora.corpus import (
    BOS,
    EOS,
    HEADER,
    AnswerQuality,
    BloomLevel,
    EvalRecord,
    PromptParseError,
    QGenRecord,
    RecordValidationError,
    ScoreParseError,
    build_eval_prompt,
    build_qgen_prompt,
    detokenize,
    format_scores,
    parse_eval_prompt,
    parse_qgen_prompt,
    parse_scores,
    read_jsonl,
    record_to_json,
    stratified_split,
    tokenize,
    write_jsonl,
)

text = st.text(min_size=1, max_size=60).filter(lambda s: s.strip() == s and s)


def qgen(i=0, level=BloomLevel.ANALYSIS, context="Light bends when it changes medium."):
    return QGenRecord(f"q{i}", "Physics", "Optics", "Refraction", context, f"Why does light bend ({i})?", level)


def evalrec(i=0, tier=AnswerQuality.PERFECT, scores=(9, 8, 10)):
    return EvalRecord(f"e{i}", "Why?", "Mentions speed change.", "Because speed changes.", tier, "Good answer.", *scores)


qgen_records = st.builds(
    QGenRecord,
    id=text, subject=text, topic=text, subtopic=text, context=text, question=text,
    bloom_level=st.sampled_from(list(BloomLevel)),
)
eval_records = st.builds(
    EvalRecord,
    id=text, question=text, evaluation_criteria=text, student_answer=text,
    answer_quality=st.sampled_from(list(AnswerQuality)), answer_evaluation=text,
    grammar_score=st.integers(0, 10), coherence_score=st.integers(0, 10), relevance_score=st.integers(0, 10),
)

# records ----------------------------------------------------------------------


def test_record_invariants():
    with pytest.raises(RecordValidationError):
        qgen(context="")
    with pytest.raises(RecordValidationError, match="grammarScore"):
        evalrec(scores=(11, 5, 5))
    with pytest.raises(RecordValidationError):
        evalrec(scores=(5, -1, 5))


def test_jsonl_round_trip(tmp_path):
    recs = [qgen(i, level) for i, level in zip(range(50), list(BloomLevel) * 17)]
    write_jsonl(recs, tmp_path / "q.jsonl")
    assert read_jsonl(tmp_path / "q.jsonl") == recs


@settings(max_examples=50, deadline=None)
@given(st.lists(qgen_records, max_size=5) | st.lists(eval_records, max_size=5))
def test_jsonl_property_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("rt") / "r.jsonl"
    write_jsonl(recs, path)
    assert read_jsonl(path) == recs


def test_invalid_enum_names_field(tmp_path):
    obj = record_to_json(evalrec())
    obj["answerQuality"] = "Excellent"
    p = tmp_path / "e.jsonl"
    p.write_text(json.dumps(record_to_json(evalrec(1))) + "\n" + json.dumps(obj) + "\n")
    with pytest.raises(RecordValidationError) as exc:
        read_jsonl(p)
    assert exc.value.field == "answerQuality" and exc.value.line == 2


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "q.jsonl"
    p.write_text(json.dumps(record_to_json(qgen())) + "\n{not json\n")
    with pytest.raises(RecordValidationError) as exc:
        read_jsonl(p)
    assert exc.value.line == 2


def test_unknown_field_rejected_in_strict_mode(tmp_path):
    obj = record_to_json(qgen())
    obj["extra"] = 1
    p = tmp_path / "q.jsonl"
    p.write_text(json.dumps(obj) + "\n")
    with pytest.raises(RecordValidationError):
        read_jsonl(p)
    assert read_jsonl(p, strict=False) == [qgen()]


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_jsonl(tmp_path / "e.jsonl") == []


def test_json_keys_are_camel_case():
    assert set(record_to_json(evalrec())) >= {"evaluationCriteria", "studentAnswer", "answerQuality", "grammarScore"}
    assert "bloomLevel" in record_to_json(qgen())


# prompts ----------------------------------------------------------------------


def test_qgen_prompt_template():
    p = build_qgen_prompt(qgen(level=BloomLevel.ANALYSIS))
    assert p.prompt.count(HEADER) == 1
    assert "Analysis" in p.prompt
    assert p.target == qgen().question


def test_prompts_differ_only_in_level_clause():
    a = build_qgen_prompt(qgen(level=BloomLevel.ANALYSIS)).prompt
    b = build_qgen_prompt(qgen(level=BloomLevel.SYNTHESIS)).prompt
    assert a.replace("Analysis", "Synthesis") == b


@settings(max_examples=200, deadline=None)
@given(qgen_records)
def test_qgen_parser_inverts_builder(rec):
    assert parse_qgen_prompt(build_qgen_prompt(rec).prompt) == (rec.bloom_level, rec.context)


@settings(max_examples=200, deadline=None)
@given(eval_records)
def test_eval_parser_inverts_builder(rec):
    pair = build_eval_prompt(rec)
    assert pair.prompt.count(HEADER) == 1
    assert parse_eval_prompt(pair.prompt) == (rec.question, rec.evaluation_criteria, rec.student_answer)
    assert parse_scores(pair.target) == rec.scores


def test_score_serialization():
    assert format_scores(10, 10, 10) == "Grammar: 10/10 | Coherence: 10/10 | Relevance: 10/10"
    assert build_eval_prompt(evalrec(scores=(10, 10, 10))).target.endswith(format_scores(10, 10, 10))
    assert parse_scores("Great.\nGrammar: 3/10 | Coherence: 0/10 | Relevance: 7/10") == (3, 0, 7)


def test_missing_score_is_structured_error():
    with pytest.raises(ScoreParseError) as exc:
        parse_scores("Grammar: 3/10 | Relevance: 7/10")
    assert exc.value.field == "coherence" and exc.value.reason == "missing field"


def test_non_prompts_rejected():
    with pytest.raises(PromptParseError):
        parse_qgen_prompt("hello")
    with pytest.raises(PromptParseError):
        parse_eval_prompt(build_qgen_prompt(qgen()).prompt)


# tokenizer --------------------------------------------------------------------


def test_tokenizer_basics():
    assert tokenize("") == [BOS, EOS]
    assert tokenize("ab") == [BOS, 97, 98, EOS]
    assert tokenize("é", bos=False, eos=False) == [0xC3, 0xA9]


@settings(max_examples=1000, deadline=None)
@given(st.text())
def test_tokenizer_round_trip(s):
    assert detokenize(tokenize(s)) == s


# splitting --------------------------------------------------------------------


def _stratum_corpus(sizes: dict) -> list:
    out = []
    for level, n in sizes.items():
        out += [qgen(len(out) + i, level) for i in range(n)]
    return out


@pytest.mark.parametrize("n, expected", [(100, (80, 15, 5)), (20, (16, 3, 1)), (40, (32, 6, 2))])
def test_split_sizes(n, expected):
    parts = stratified_split(_stratum_corpus({BloomLevel.ANALYSIS: n}))
    assert tuple(len(p) for p in parts) == expected


def test_strata_split_independently():
    parts = stratified_split(_stratum_corpus({BloomLevel.ANALYSIS: 100, BloomLevel.EVALUATION: 100}))
    for level in (BloomLevel.ANALYSIS, BloomLevel.EVALUATION):
        assert tuple(sum(r.bloom_level == level for r in p) for p in parts) == (80, 15, 5)


def test_small_stratum_goes_to_train(caplog):
    recs = _stratum_corpus({BloomLevel.ANALYSIS: 2, BloomLevel.SYNTHESIS: 20})
    with caplog.at_level(logging.WARNING):
        train, val, test = stratified_split(recs)
    assert "Analysis" in caplog.text
    assert sum(r.bloom_level == BloomLevel.ANALYSIS for r in train) == 2


def test_eval_records_stratify_by_tier():
    recs = [evalrec(i, tier) for tier in AnswerQuality for i in range(20 * list(AnswerQuality).index(tier), 20 * list(AnswerQuality).index(tier) + 20)]
    train, val, test = stratified_split(recs)
    assert Counter(r.answer_quality for r in val) == {t: 3 for t in AnswerQuality}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 60), min_size=3, max_size=3), st.integers(0, 2**32))
def test_split_properties(sizes, seed):
    recs = _stratum_corpus(dict(zip(BloomLevel, sizes)))
    parts = stratified_split(recs, seed=seed)
    assert parts == stratified_split(recs, seed=seed)
    ids = [r.id for p in parts for r in p]
    assert sorted(ids) == sorted(r.id for r in recs) and len(set(ids)) == len(ids)
    for level, n in zip(BloomLevel, sizes):
        if n < 3:
            continue
        for part, ratio in zip(parts, (0.80, 0.15, 0.05)):
            assert abs(sum(r.bloom_level == level for r in part) - n * ratio) <= 1
