"""Anonymized judge ranking and per-rank percentage aggregation.

Candidate responses are shown to the judge under neutral labels
("Response A", "Response B", ...). The judge replies with one rank per
label, comma separated, in label order (``2,1,4,3``). The label -> model
mapping is kept apart from the sheets and applied only after ranking.
"""

from __future__ import annotations

import json
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Protocol

from .numerics import Rng

__all__ = [
    "RankSheet",
    "RankTable",
    "RankingParseError",
    "anonymize",
    "deanonymize",
    "collect_ranking",
    "aggregate",
    "render_table",
    "StubJudge",
    "parse_ranks",
]


class RankingParseError(ValueError):
    def __init__(self, prompt_id: str, reply: str, reason: str):
        self.prompt_id = prompt_id
        self.reply = reply
        self.reason = reason
        super().__init__(f"{prompt_id}: {reason} (judge replied {reply!r})")


def label_for(i: int) -> str:
    letters = ""
    i += 1
    while i:
        i, rem = divmod(i - 1, 26)
        letters = chr(65 + rem) + letters
    return f"Response {letters}"


def anonymize(candidates, rng: Rng) -> tuple[list[tuple[str, str]], dict[str, str]]:
    """Shuffle candidates under neutral labels.

    ``candidates`` is a model -> response mapping or a sequence of
    (model, response) pairs. Returns the labeled responses in label order
    and the secret label -> model mapping.
    """
    pairs = list(candidates.items()) if isinstance(candidates, Mapping) else list(candidates)
    models = [m for m, _ in pairs]
    if len(set(models)) != len(models):
        dup = next(m for m in models if models.count(m) > 1)
        raise ValueError(f"duplicate model name {dup!r}")
    if len(pairs) < 2:
        raise ValueError("ranking needs at least two candidates")
    order = rng.permutation(len(pairs))
    labeled, mapping = [], {}
    for i, j in enumerate(order):
        model, response = pairs[int(j)]
        lab = label_for(i)
        labeled.append((lab, response))
        mapping[lab] = model
    return labeled, mapping


@dataclass(frozen=True)
class RankSheet:
    prompt_id: str
    labels: tuple[str, ...]
    ranks: tuple[int, ...]
    mapping_ref: str = ""

    def __post_init__(self):
        if sorted(self.ranks) != list(range(1, len(self.labels) + 1)):
            raise ValueError(f"{self.prompt_id}: ranks {self.ranks} are not a permutation of 1..{len(self.labels)}")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"{self.prompt_id}: duplicate labels")

    def to_json(self) -> dict:
        return {"promptId": self.prompt_id, "labels": list(self.labels), "ranks": list(self.ranks), "mappingRef": self.mapping_ref}

    @classmethod
    def from_json(cls, obj: dict) -> "RankSheet":
        return cls(obj["promptId"], tuple(obj["labels"]), tuple(int(r) for r in obj["ranks"]), obj.get("mappingRef", ""))


def deanonymize(sheet: RankSheet, mapping: Mapping[str, str]) -> dict[str, int]:
    """model -> rank for one sheet."""
    missing = [lab for lab in sheet.labels if lab not in mapping]
    if missing:
        raise KeyError(f"{sheet.prompt_id}: no mapping for {missing}")
    return {mapping[lab]: r for lab, r in zip(sheet.labels, sheet.ranks)}


class JudgeClient(Protocol):
    def rank(self, prompt: str, labeled: Sequence[tuple[str, str]]) -> str: ...


class StubJudge:
    """Offline judge: longer responses rank better; ties go to the earlier label."""

    def rank(self, prompt: str, labeled: Sequence[tuple[str, str]]) -> str:
        order = sorted(range(len(labeled)), key=lambda i: (-len(labeled[i][1]), i))
        ranks = [0] * len(labeled)
        for pos, i in enumerate(order, start=1):
            ranks[i] = pos
        return ",".join(str(r) for r in ranks)


def judge_request_text(prompt: str, labeled: Sequence[tuple[str, str]]) -> str:
    """Text sent to a live judge; the stub ignores it."""
    k = len(labeled)
    body = "\n\n".join(f"[{lab}]\n{resp}" for lab, resp in labeled)
    return (
        f"Rank the following {k} responses to the task from 1 (best) to {k} (worst). "
        f"Use each rank exactly once. Reply with the ranks in the order the responses are listed, "
        f"comma separated, and nothing else.\n\n[Task]\n{prompt}\n\n{body}"
    )


def parse_ranks(reply: str, k: int, prompt_id: str = "") -> tuple[int, ...]:
    text = reply.strip()
    if not re.fullmatch(r"\s*\d+(\s*,\s*\d+)*\s*", text):
        raise RankingParseError(prompt_id, reply, "reply is not a comma-separated list of integers")
    ranks = tuple(int(t) for t in text.split(","))
    if len(ranks) != k:
        raise RankingParseError(prompt_id, reply, f"expected {k} ranks, got {len(ranks)}")
    if sorted(ranks) != list(range(1, k + 1)):
        dup = sorted({r for r in ranks if ranks.count(r) > 1})
        reason = f"duplicate rank {dup[0]}" if dup else f"ranks are not a permutation of 1..{k}"
        raise RankingParseError(prompt_id, reply, reason)
    return ranks


def collect_ranking(
    judge: JudgeClient,
    prompt_id: str,
    prompt: str,
    labeled: Sequence[tuple[str, str]],
    mapping_ref: str = "",
) -> RankSheet:
    reply = judge.rank(prompt, labeled)
    ranks = parse_ranks(reply, len(labeled), prompt_id)
    return RankSheet(prompt_id, tuple(lab for lab, _ in labeled), ranks, mapping_ref)


# aggregation ---------------------------------------------------------------


def ordinal(n: int) -> str:
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def round_half_up(value: Decimal, places: int = 2) -> Decimal:
    return value.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass
class RankTable:
    """Integer counts per (model, rank position) over ``n`` ranked prompts."""

    models: list[str] = field(default_factory=list)
    counts: dict[str, list[int]] = field(default_factory=dict)
    n: int = 0
    title: str = ""

    @property
    def k(self) -> int:
        return len(next(iter(self.counts.values()))) if self.counts else 4

    def percentage(self, model: str, rank: int) -> Decimal:
        """Exact percentage (unrounded) of prompts where ``model`` took ``rank``."""
        if self.n == 0:
            return Decimal(0)
        return Decimal(100 * self.counts[model][rank - 1]) / Decimal(self.n)

    def rounded(self, model: str, rank: int) -> Decimal:
        return round_half_up(self.percentage(model, rank))

    def check(self) -> None:
        for m in self.models:
            if sum(self.counts[m]) != self.n:
                raise ValueError(f"{m}: counts sum to {sum(self.counts[m])}, expected {self.n}")
        for j in range(self.k):
            col = sum(self.counts[m][j] for m in self.models)
            if self.models and col != self.n:
                raise ValueError(f"rank {j + 1}: column sums to {col}, expected {self.n}")

    def to_json(self) -> dict:
        return {
            "title": self.title,
            "n": self.n,
            "models": list(self.models),
            "counts": {m: list(self.counts[m]) for m in self.models},
            "percentages": {m: [f"{self.rounded(m, r)}" for r in range(1, self.k + 1)] for m in self.models},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RankTable":
        models = list(obj["models"])
        counts = {m: [int(c) for c in obj["counts"][m]] for m in models}
        n = obj.get("n")
        if n is None:
            n = sum(counts[models[0]]) if models else 0
        t = cls(models, counts, int(n), obj.get("title", ""))
        t.check()
        return t

    def __eq__(self, other):
        if not isinstance(other, RankTable):
            return NotImplemented
        return (self.models, self.counts, self.n, self.title) == (other.models, other.counts, other.n, other.title)


def aggregate(resolved: Sequence[Mapping[str, int]], models: Sequence[str] | None = None, title: str = "") -> RankTable:
    """Fold de-anonymized sheets (model -> rank) into a count table.

    ``models`` fixes the row order; by default rows follow the first sheet's
    models sorted by name.
    """
    if not resolved:
        return RankTable(list(models or []), {m: [0] * len(models or []) for m in models or []}, 0, title)
    model_set = set(resolved[0])
    for i, sheet in enumerate(resolved):
        if set(sheet) != model_set:
            raise ValueError(f"sheet {i} covers models {sorted(sheet)}, expected {sorted(model_set)}")
    order = list(models) if models is not None else sorted(model_set)
    if set(order) != model_set:
        raise ValueError(f"row order {order} does not match the sheets' models")
    k = len(order)
    counts = {m: [0] * k for m in order}
    for sheet in resolved:
        if sorted(sheet.values()) != list(range(1, k + 1)):
            raise ValueError(f"ranks {sorted(sheet.values())} are not a permutation of 1..{k}")
        for m, r in sheet.items():
            counts[m][r - 1] += 1
    table = RankTable(order, counts, len(resolved), title)
    table.check()
    return table


def render_table(table: RankTable) -> str:
    """Fixed-width text grid; percentages half-up to two decimals."""
    k = table.k
    header = ["Model/Rank"] + [ordinal(j) for j in range(1, k + 1)]
    rows = [[m] + [f"{table.rounded(m, j)}%" for j in range(1, k + 1)] for m in table.models]
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(k + 1)]

    def fmt(cells):
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return " | ".join([first] + rest)

    lines = []
    if table.title:
        lines.append(table.title)
    lines.append(fmt(header))
    if rows:
        lines.append("-+-".join("-" * w for w in widths))
        lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


def parse_rendered(text: str) -> dict[str, list[Decimal]]:
    """Read percentages back out of :func:`render_table` output."""
    out = {}
    for line in text.splitlines():
        cells = [c.strip() for c in line.split("|")]
        if len(cells) < 2 or cells[0] == "Model/Rank" or not cells[1].endswith("%"):
            continue
        out[cells[0]] = [Decimal(c.rstrip("%")) for c in cells[1:]]
    return out


# persistence ---------------------------------------------------------------


def write_sheets(sheets: Sequence[RankSheet], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for s in sheets:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_sheets(path) -> list[RankSheet]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                out.append(RankSheet.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: invalid rank sheet: {exc}") from None
    return out


def write_mappings(mappings: Mapping[str, Mapping[str, str]], path) -> None:
    Path(path).write_text(json.dumps({k: dict(v) for k, v in mappings.items()}, indent=2, sort_keys=True) + "\n")


def read_mappings(path) -> dict[str, dict[str, str]]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
