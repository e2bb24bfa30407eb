"""Readers and writers for the interchange formats.

* pairs / triplets: JSON Lines, one record per line
* qrels: TREC ``qid 0 docid rel``
* runs: TREC ``qid Q0 docid rank score tag``
* configs: JSON objects mapped onto the stage config dataclasses
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .errors import ConfigError, DuplicateId, NonContiguousRanks, ParseError

Qrels = dict[str, dict[str, int]]


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairRecord:
    query_id: str
    doc_id: str
    source: str
    lang: str | None = None

    def __post_init__(self):
        for name in ("query_id", "doc_id", "source"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ValueError(f"{name} must be a non-empty string")
        if self.lang is not None and (not isinstance(self.lang, str) or not self.lang):
            raise ValueError("lang must be a non-empty string when given")

    @property
    def batch_source(self) -> str:
        """Source label used for batching; language subsets are distinct sources."""
        return self.source if self.lang is None else f"{self.source}/{self.lang}"

    def to_json(self) -> dict:
        out = {"query_id": self.query_id, "doc_id": self.doc_id, "source": self.source}
        if self.lang is not None:
            out["lang"] = self.lang
        return out


@dataclass(frozen=True)
class TripletRecord:
    """A finetuning example: one query, one positive, mined negatives.

    ``random_fill`` counts trailing negatives drawn uniformly because too few
    teacher candidates survived the false-negative cutoff.
    """

    query_id: str
    positive_id: str
    negative_ids: tuple[str, ...]
    positive_score: float
    negative_scores: tuple[float, ...]
    random_fill: int = 0

    def __post_init__(self):
        object.__setattr__(self, "negative_ids", tuple(self.negative_ids))
        object.__setattr__(self, "negative_scores", tuple(float(s) for s in self.negative_scores))
        object.__setattr__(self, "positive_score", float(self.positive_score))
        if not self.query_id or not self.positive_id:
            raise ValueError("query_id and positive_id must be non-empty")
        if any(not isinstance(n, str) or not n for n in self.negative_ids):
            raise ValueError("negative ids must be non-empty strings")
        if self.positive_id in self.negative_ids:
            raise ValueError("positive_id appears among negative_ids")
        if len(set(self.negative_ids)) != len(self.negative_ids):
            raise ValueError("duplicate negative ids")
        if len(self.negative_scores) != len(self.negative_ids):
            raise ValueError("negative_scores not aligned with negative_ids")
        if not 0 <= self.random_fill <= len(self.negative_ids):
            raise ValueError("random_fill out of range")

    def to_json(self) -> dict:
        out = {
            "query_id": self.query_id,
            "positive_id": self.positive_id,
            "negative_ids": list(self.negative_ids),
            "positive_score": self.positive_score,
            "negative_scores": list(self.negative_scores),
        }
        if self.random_fill:
            out["random_fill"] = self.random_fill
        return out


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

def _jsonl_objects(path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "expected a JSON object")
            yield lineno, obj


def _write_jsonl(objs: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def read_pairs(path, strict: bool = False) -> list[PairRecord]:
    records = []
    seen: set[tuple[str, str]] = set()
    for lineno, obj in _jsonl_objects(path):
        missing = [k for k in ("query_id", "doc_id", "source") if k not in obj]
        if missing:
            raise ParseError(path, lineno, f"missing key(s) {', '.join(missing)}")
        extra = set(obj) - {"query_id", "doc_id", "source", "lang"}
        if extra:
            raise ParseError(path, lineno, f"unexpected key(s) {', '.join(sorted(extra))}")
        try:
            rec = PairRecord(obj["query_id"], obj["doc_id"], obj["source"], obj.get("lang"))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        if strict:
            key = (rec.query_id, rec.doc_id)
            if key in seen:
                raise DuplicateId(f"{path}:{lineno}: duplicate pair {key}")
            seen.add(key)
        records.append(rec)
    return records


def write_pairs(records: Iterable[PairRecord], path) -> None:
    _write_jsonl((r.to_json() for r in records), path)


def read_triplets(path) -> list[TripletRecord]:
    keys = ("query_id", "positive_id", "negative_ids", "positive_score", "negative_scores")
    records = []
    for lineno, obj in _jsonl_objects(path):
        missing = [k for k in keys if k not in obj]
        if missing:
            raise ParseError(path, lineno, f"missing key(s) {', '.join(missing)}")
        if not isinstance(obj["negative_ids"], list) or not isinstance(obj["negative_scores"], list):
            raise ParseError(path, lineno, "negative_ids and negative_scores must be lists")
        try:
            rec = TripletRecord(
                obj["query_id"],
                obj["positive_id"],
                tuple(obj["negative_ids"]),
                float(obj["positive_score"]),
                tuple(float(s) for s in obj["negative_scores"]),
                int(obj.get("random_fill", 0)),
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(path, lineno, str(exc)) from None
        records.append(rec)
    return records


def write_triplets(records: Iterable[TripletRecord], path) -> None:
    _write_jsonl((r.to_json() for r in records), path)


# ---------------------------------------------------------------------------
# TREC qrels / runs
# ---------------------------------------------------------------------------

def read_qrels(path) -> Qrels:
    qrels: Qrels = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ParseError(path, lineno, f"expected 4 fields, got {len(parts)}")
            qid, _, docid, rel = parts
            try:
                rel_value = int(rel)
            except ValueError:
                raise ParseError(path, lineno, f"relevance {rel!r} is not an integer") from None
            if rel_value < 0:
                raise ParseError(path, lineno, "relevance must be non-negative")
            judged = qrels.setdefault(qid, {})
            if docid in judged:
                raise ParseError(path, lineno, f"duplicate judgment for ({qid}, {docid})")
            judged[docid] = rel_value
    return qrels


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(qrels):
            for docid in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {docid} {int(qrels[qid][docid])}\n")


@dataclass
class RunFile:
    """Per-query ranked lists of ``(doc_id, rank, score)``."""

    results: dict[str, list[tuple[str, int, float]]] = field(default_factory=dict)
    tag: str = "contrastkit"

    def __post_init__(self):
        for qid, entries in self.results.items():
            _check_ranking(qid, entries)

    @classmethod
    def from_scores(cls, scores: Mapping[str, Sequence[tuple[str, float]]], tag: str = "contrastkit") -> "RunFile":
        """Rank each query's (doc_id, score) list by score desc, then doc_id asc."""
        results = {}
        for qid, entries in scores.items():
            ordered = sorted(((d, float(s)) for d, s in entries), key=lambda e: (-e[1], e[0]))
            results[qid] = [(d, rank, s) for rank, (d, s) in enumerate(ordered, start=1)]
        return cls(results, tag)

    def ranked_docs(self, qid: str) -> list[str]:
        return [d for d, _, _ in self.results.get(qid, [])]

    @property
    def queries(self) -> list[str]:
        return list(self.results)


def _check_ranking(qid: str, entries: Sequence[tuple[str, int, float]], where: str = "") -> None:
    ranks = [r for _, r, _ in entries]
    if ranks != list(range(1, len(entries) + 1)):
        raise NonContiguousRanks(f"{where}query {qid}: ranks {ranks[:10]} are not 1..{len(entries)}")
    docs = [d for d, _, _ in entries]
    if len(set(docs)) != len(docs):
        raise NonContiguousRanks(f"{where}query {qid}: duplicate documents in ranking")
    scores = [s for _, _, s in entries]
    if any(b > a for a, b in zip(scores, scores[1:])):
        raise NonContiguousRanks(f"{where}query {qid}: scores increase with rank")


def read_run(path) -> RunFile:
    raw: dict[str, list[tuple[str, int, float]]] = {}
    tags: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ParseError(path, lineno, f"expected 6 fields, got {len(parts)}")
            qid, _, docid, rank, score, tag = parts
            try:
                entry = (docid, int(rank), float(score))
            except ValueError:
                raise ParseError(path, lineno, "rank must be an integer and score a float") from None
            if not math.isfinite(entry[2]):
                raise ParseError(path, lineno, "score must be finite")
            raw.setdefault(qid, []).append(entry)
            tags.add(tag)
    if len(tags) > 1:
        raise ParseError(path, 0, f"mixed run tags {sorted(tags)}")
    results = {qid: sorted(entries, key=lambda e: e[1]) for qid, entries in raw.items()}
    for qid, entries in results.items():
        _check_ranking(qid, entries, where=f"{path}: ")
    return RunFile(results, tags.pop() if tags else "contrastkit")


def write_run(run: RunFile, path) -> None:
    """Write ``run`` re-ranked by score desc with ascending doc_id tie-break."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(run.results):
            ordered = sorted(run.results[qid], key=lambda e: (-e[2], e[0]))
            for rank, (docid, _, score) in enumerate(ordered, start=1):
                fh.write(f"{qid} Q0 {docid} {rank} {float(score)!r} {run.tag}\n")


def read_subsets(path) -> dict[str, str]:
    """``query_id<TAB>subset`` lines, e.g. language labels."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ParseError(path, lineno, "expected 'query_id<TAB>subset'")
            out[parts[0].strip()] = parts[1].strip()
    return out


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

def config_from_dict(cls, data: Mapping[str, Any]):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys.

    Nested dataclass fields are built recursively; each dataclass validates
    itself in ``__post_init__``.
    """
    if not isinstance(data, Mapping):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown key(s) {', '.join(sorted(unknown))}")
    kwargs = {}
    hints = _resolved_hints(cls)
    for name, value in data.items():
        sub = hints.get(name)
        if dataclasses.is_dataclass(sub) and isinstance(value, Mapping):
            value = config_from_dict(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def _resolved_hints(cls) -> dict:
    import typing

    try:
        return typing.get_type_hints(cls)
    except Exception:
        return {}


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            value = config_to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def load_config(cls, path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(cls, data)


def save_config(cfg, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
