import json

import pytest

from deskqlora.checkpoint import load_checkpoint
from deskqlora.cli import main
from deskqlora.corpus import read_jsonl
from deskqlora.judge import RankTable, parse_rendered, read_sheets
from tables import MODELS, QGEN_COUNTS, QGEN_PRINTED, printed

FAST = ["--iters", "4", "--set", "train.eval_interval=2", "--set", "train.batch_size=2", "--set", "gen_tokens=8"]


def run(out, *args):
    return main([args[0], "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    codes = [
        run(out, "gen-data", "--set", "n_assignments=8"),
        run(out, "split"),
        run(out, "train", *FAST),
        run(out, "rank", *FAST, "--set", "rank_limit=2"),
        run(out, "report", *FAST),
    ]
    return out, codes


def test_pipeline_exit_codes_and_artifacts(pipeline):
    out, codes = pipeline
    assert codes == [0, 0, 0, 0, 0]
    assert len(read_jsonl(out / "data" / "qgen.jsonl")) == 24
    assert len(read_jsonl(out / "data" / "eval.jsonl")) == 24
    for split in ("train", "val", "test"):
        read_jsonl(out / "splits" / f"qgen_{split}.jsonl")
    ck = load_checkpoint(out / "train" / "qgen" / "lora_final.ckpt")
    assert ck.iteration == 4 and all(k.endswith(("lora_A", "lora_B")) for k in ck.adapters)
    assert (out / "train" / "qgen" / "loss.csv").read_text().startswith("iter,split,loss\n")
    assert len(read_sheets(out / "rank" / "qgen" / "sheets.jsonl")) == 2
    table = RankTable.from_json(json.loads((out / "report" / "qgen" / "report.json").read_text()))
    assert table.n == 2
    for png in ("ranks.png", "loss.png"):
        assert (out / "report" / "qgen" / png).read_bytes()[:4] == b"\x89PNG"


def test_rerun_refuses_without_force(pipeline, capsys):
    out, _ = pipeline
    assert run(out, "gen-data") == 1
    assert "--force" in capsys.readouterr().err
    assert run(out, "split") == 1


def test_resume_continues(pipeline, capsys):
    out, _ = pipeline
    fast6 = [a if a != "4" else "6" for a in FAST]
    assert run(out, "train", *fast6, "--resume") == 0
    assert "resumed from iteration 4" in capsys.readouterr().out
    assert load_checkpoint(out / "train" / "qgen" / "lora_final.ckpt").iteration == 6


def test_generate(pipeline, capsys):
    out, _ = pipeline
    assert run(out, "generate", "Light bends at a boundary.", *FAST) == 0


def test_missing_upstream_names_producer(tmp_path, capsys):
    assert run(tmp_path, "split") == 1
    assert "deskqlora gen-data" in capsys.readouterr().err
    assert run(tmp_path, "rank") == 1
    assert "deskqlora split" in capsys.readouterr().err


def test_config_errors_are_validation_failures(tmp_path, capsys):
    assert run(tmp_path, "gen-data", "--set", "nonsense=1") == 1
    assert run(tmp_path, "gen-data", "--config", str(tmp_path / "missing.cfg")) == 1


def test_http_without_endpoint(tmp_path, monkeypatch):
    monkeypatch.delenv("DESKQLORA_GENERATOR_URL", raising=False)
    assert run(tmp_path, "gen-data", "--client", "http") == 1


def test_report_on_count_fixture(tmp_path, capsys):
    fixture = tmp_path / "table.json"
    fixture.write_text(json.dumps({"models": MODELS, "counts": QGEN_COUNTS}))
    assert run(tmp_path, "report", "--table", str(fixture), "--title", "Question generation") == 0
    text = capsys.readouterr().out
    assert parse_rendered(text) == printed(QGEN_PRINTED)


def test_same_seed_same_bytes(tmp_path):
    for d in ("a", "b"):
        assert run(tmp_path / d, "gen-data", "--set", "n_assignments=3", "--seed", "5") == 0
    for name in ("qgen.jsonl", "eval.jsonl"):
        assert (tmp_path / "a" / "data" / name).read_bytes() == (tmp_path / "b" / "data" / name).read_bytes()
