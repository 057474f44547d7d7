"""Command-line entry point: gen-data -> split -> train -> generate / rank -> report.

Exit codes: 0 success, 1 validation error (bad config, missing upstream
artifact, refusal to overwrite), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import corpus, judge, synthgen
from .checkpoint import CheckpointFormatError
from .config import ConfigError, RunConfig, load_run_config, parse_pairs
from .corpus import (
    BloomLevel,
    EvalRecord,
    QGenRecord,
    RecordValidationError,
    build_prompt,
    build_qgen_prompt,
    detokenize,
    read_jsonl,
    stratified_split,
    tokenize,
    write_jsonl,
)
from .model import QLoraModel
from .numerics import Rng
from .plotting import plot_loss_curve, plot_rank_distribution
from .trainkit import CheckpointMismatchError, LossCurve, encode_example, load_adapters, train

log = logging.getLogger("deskqlora")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    """User-fixable problem: reported with exit code 1."""


def _refuse_clobber(paths, force: bool, command: str) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ValidationFailure(f"{command}: output already exists ({existing[0]}); pass --force to overwrite")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ValidationFailure(f"missing {path}; run `deskqlora {producer}` first")
    return path


def _kind(cfg: RunConfig):
    return QGenRecord if cfg.task == "qgen" else EvalRecord


def _split_paths(cfg: RunConfig, task: str | None = None) -> dict[str, Path]:
    t = task or cfg.task
    return {s: cfg.split_dir / f"{t}_{s}.jsonl" for s in ("train", "val", "test")}


def _build_model(cfg: RunConfig) -> QLoraModel:
    return QLoraModel.build(cfg.model_config(), seed=cfg.seed)


# commands ------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, force: bool = False) -> int:
    reg_path = cfg.registry_path()
    if not reg_path.is_file():
        raise ValidationFailure(f"registry file {reg_path} does not exist")
    registry = synthgen.TopicRegistry.from_file(reg_path)
    outs = [cfg.data_dir / "qgen.jsonl", cfg.data_dir / "eval.jsonl"]
    _refuse_clobber(outs, force, "gen-data")
    if cfg.client == "stub":
        client = synthgen.StubGenerator(cfg.seed)
    else:
        client = synthgen.HttpGeneratorClient()
        if not client.endpoint:
            raise ValidationFailure(f"--client http needs {synthgen.ENDPOINT_ENV} to be set")
    res = synthgen.generate_datasets(
        registry,
        client,
        Rng(cfg.seed),
        n_assignments=cfg.n_assignments,
        eval_per_question=cfg.eval_per_question,
        fresh_eval_questions=cfg.fresh_eval_questions,
        max_workers=cfg.max_workers,
    )
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(res.qgen, outs[0])
    write_jsonl(res.eval, outs[1])
    print(f"question records: {len(res.qgen)}")
    for k, v in sorted(synthgen.tier_counts(res.qgen).items()):
        print(f"  {k}: {v}")
    print(f"evaluation records: {len(res.eval)}")
    for k, v in sorted(synthgen.tier_counts(res.eval).items()):
        print(f"  {k}: {v}")
    for s in res.skipped:
        print(f"skipped {s.item}: {s.reason}", file=sys.stderr)
    if res.exhausted:
        print("registry exhausted before the requested number of assignments; partial output kept", file=sys.stderr)
    return EXIT_OK


def cmd_split(cfg: RunConfig, force: bool = False) -> int:
    targets = {t: _split_paths(cfg, t) for t in ("qgen", "eval")}
    _refuse_clobber([p for d in targets.values() for p in d.values()], force, "split")
    cfg.split_dir.mkdir(parents=True, exist_ok=True)
    for task, kind in (("qgen", QGenRecord), ("eval", EvalRecord)):
        src = _require(cfg.data_dir / f"{task}.jsonl", "gen-data")
        records = read_jsonl(src, kind)
        parts = stratified_split(records, seed=cfg.seed)
        for name, part in zip(("train", "val", "test"), parts):
            write_jsonl(part, targets[task][name])
        print(f"{task}: train {len(parts[0])}, val {len(parts[1])}, test {len(parts[2])}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, force: bool = False, resume: bool = False) -> int:
    paths = _split_paths(cfg)
    for p in paths.values():
        _require(p, "split")
    tcfg = cfg.train_config()
    mcfg = cfg.model_config()
    if tcfg.max_seq > mcfg.max_seq:
        raise ValidationFailure(f"train.max_seq {tcfg.max_seq} exceeds model.max_seq {mcfg.max_seq}")
    out = cfg.train_dir
    if not resume:
        _refuse_clobber([out / "last.ckpt", out / "lora_final.ckpt"], force, "train")
    elif not (out / "last.ckpt").exists():
        raise ValidationFailure(f"--resume: no checkpoint at {out / 'last.ckpt'}; run `deskqlora train` first")
    kind = _kind(cfg)
    train_recs = read_jsonl(paths["train"], kind)
    val_recs = read_jsonl(paths["val"], kind)
    if not train_recs or not val_recs:
        raise ValidationFailure("train and validation splits must be nonempty")
    train_ex = [encode_example(build_prompt(r), tcfg.max_seq) for r in train_recs]
    val_ex = [encode_example(build_prompt(r), tcfg.max_seq) for r in val_recs]
    model = _build_model(cfg)
    print(f"trainable adapter parameters: {sum(a.num_params() for a in model.adapter_set)}")
    res = train(model, train_ex, val_ex, tcfg, out, resume=resume, on_log=print)
    plot_loss_curve(res.curve, out / "loss.png", title=f"{cfg.task}: train & validation loss")
    print(f"finished at iteration {res.iteration}; adapters saved to {res.final_checkpoint}")
    return EXIT_OK


def _load_trained(cfg: RunConfig) -> QLoraModel:
    ckpt = _require(cfg.train_dir / "lora_final.ckpt", "train")
    model = _build_model(cfg)
    load_adapters(model, ckpt)
    model.eval()
    return model


def _complete(model: QLoraModel, prompt: str, n: int) -> str:
    ids = tokenize(prompt, bos=True, eos=False)
    limit = model.cfg.max_seq - n
    if len(ids) > limit:
        ids = ids[: max(limit, 1)]
    out = model.generate(ids, n, eos_id=corpus.EOS)
    return detokenize(out[len(ids) :])


def cmd_generate(cfg: RunConfig, text: str, level: str = "Analysis", raw: bool = False) -> int:
    model = _load_trained(cfg)
    if raw or cfg.task == "eval":
        prompt = text
    else:
        rec = QGenRecord("adhoc", "adhoc", "adhoc", "adhoc", text, "adhoc", BloomLevel(level))
        prompt = build_qgen_prompt(rec).prompt
    print(_complete(model, prompt, cfg.gen_tokens))
    return EXIT_OK


def cmd_rank(cfg: RunConfig, force: bool = False) -> int:
    test_path = _require(_split_paths(cfg)["test"], "split")
    out = cfg.rank_dir
    _refuse_clobber([out / "sheets.jsonl", out / "mapping.json"], force, "rank")
    model = _load_trained(cfg)
    records = read_jsonl(test_path, _kind(cfg))
    if cfg.rank_limit is not None:
        records = records[: cfg.rank_limit]
    if not records:
        raise ValidationFailure(f"{test_path} has no records to rank")
    unknown = set(cfg.candidates) - {"qlora-finetuned", "quantized-base", "reference"}
    if unknown:
        raise ValidationFailure(f"unknown candidates {sorted(unknown)}")
    rng = Rng(cfg.seed)
    stub = judge.StubJudge()
    sheets, mappings, rejected = [], {}, 0
    for rec in records:
        pair = build_prompt(rec)
        responses = {}
        for name in cfg.candidates:
            if name == "reference":
                responses[name] = pair.target
            elif name == "qlora-finetuned":
                responses[name] = _complete(model, pair.prompt, cfg.gen_tokens)
            else:
                with model.adapters_disabled():
                    responses[name] = _complete(model, pair.prompt, cfg.gen_tokens)
        labeled, mapping = judge.anonymize(responses, rng)
        try:
            sheet = judge.collect_ranking(stub, rec.id, pair.prompt, labeled, mapping_ref=rec.id)
        except judge.RankingParseError as exc:
            rejected += 1
            print(f"discarded sheet: {exc}", file=sys.stderr)
            continue
        sheets.append(sheet)
        mappings[rec.id] = mapping
    out.mkdir(parents=True, exist_ok=True)
    judge.write_sheets(sheets, out / "sheets.jsonl")
    judge.write_mappings(mappings, out / "mapping.json")
    print(f"ranked {len(sheets)} prompts ({rejected} discarded)")
    return EXIT_OK


def cmd_report(cfg: RunConfig, force: bool = False, table_path: str | None = None, title: str | None = None) -> int:
    out = cfg.report_dir
    if table_path:
        table = judge.RankTable.from_json(json.loads(Path(table_path).read_text(encoding="utf-8")))
        if title:
            table.title = title
    else:
        sheets = judge.read_sheets(_require(cfg.rank_dir / "sheets.jsonl", "rank"))
        mappings = judge.read_mappings(_require(cfg.rank_dir / "mapping.json", "rank"))
        resolved = [judge.deanonymize(s, mappings[s.mapping_ref]) for s in sheets]
        models = list(cfg.candidates) if resolved and set(cfg.candidates) == set(resolved[0]) else None
        default_title = {"qgen": "Aggregated rankings for question generation", "eval": "Aggregated rankings for answer evaluation"}
        table = judge.aggregate(resolved, models, title=title or default_title[cfg.task])
    _refuse_clobber([out / "report.txt", out / "report.json"], force, "report")
    out.mkdir(parents=True, exist_ok=True)
    text = judge.render_table(table)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.json").write_text(json.dumps(table.to_json(), indent=2) + "\n", encoding="utf-8")
    if table.models:
        plot_rank_distribution(table, out / "ranks.png", title=table.title or "Model placement per rank")
    loss_csv = cfg.train_dir / "loss.csv"
    if not table_path and loss_csv.exists():
        plot_loss_curve(LossCurve.from_csv(loss_csv), out / "loss.png", title=f"{cfg.task}: train & validation loss")
    print(text, end="")
    return EXIT_OK


# argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--iters", type=int, help="training iterations (max_iters)")
    common.add_argument("--client", choices=["stub", "http"])
    common.add_argument("--out", help="working directory for all artifacts")
    common.add_argument("--task", choices=["qgen", "eval"])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any config key, e.g. model.window=16")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deskqlora", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate synthetic datasets")
    sub.add_parser("split", parents=[common], help="80/15/5 stratified split of both datasets")
    t = sub.add_parser("train", parents=[common], help="QLoRA-train adapters on the task's train split")
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt")
    g = sub.add_parser("generate", parents=[common], help="complete an ad-hoc prompt with the trained adapters")
    g.add_argument("text", help="passage (qgen task) or raw prompt")
    g.add_argument("--level", default="Analysis", choices=[lvl.value for lvl in BloomLevel])
    g.add_argument("--raw", action="store_true", help="send text to the model verbatim")
    sub.add_parser("rank", parents=[common], help="rank candidate responses on the test split")
    r = sub.add_parser("report", parents=[common], help="aggregate rank sheets into a percentage table")
    r.add_argument("--table", help="render a RankTable JSON file (e.g. count fixtures) instead of rank sheets")
    r.add_argument("--title")
    return p


def _run_config(args) -> RunConfig:
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    overrides = parse_pairs(pairs)
    overrides.update({"seed": args.seed, "iters": args.iters, "client": args.client, "out": args.out, "task": args.task})
    return load_run_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        torch.manual_seed(cfg.seed)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.force)
        if args.command == "split":
            return cmd_split(cfg, args.force)
        if args.command == "train":
            return cmd_train(cfg, args.force, args.resume)
        if args.command == "generate":
            return cmd_generate(cfg, args.text, args.level, args.raw)
        if args.command == "rank":
            return cmd_rank(cfg, args.force)
        if args.command == "report":
            return cmd_report(cfg, args.force, args.table, args.title)
    except (ValidationFailure, ConfigError, RecordValidationError, CheckpointMismatchError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
