"""Retrieval evaluation: run generation, nDCG@k, retention and int8 recall."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corevec import (
    EmbeddingMatrix,
    dequantize,
    normalize,
    quantize_i8,
    topk_batch,
    truncate,
)
from .dataio import Qrels, RunFile
from .errors import DimMismatch, NoJudgedQueries, ZeroBaseline
from .trainer import ProjectionHead


@dataclass
class EvalResult:
    per_query: dict[str, float]
    mean: float
    k: int
    subsets: dict[str, float] | None = None
    dropped: int = 0

    def to_json(self) -> dict:
        out = {"k": self.k, "mean": self.mean, "dropped": self.dropped,
               "per_query": dict(sorted(self.per_query.items()))}
        if self.subsets is not None:
            out["subsets"] = dict(sorted(self.subsets.items()))
        return out


def dcg(gains: Sequence[float]) -> float:
    return float(sum(g / math.log2(i + 2) for i, g in enumerate(gains)))


def ndcg_query(ranked_docs: Sequence[str], judged: Mapping[str, int], k: int) -> float | None:
    """nDCG@k with linear gain; ``None`` when the query has no relevant docs."""
    ideal = sorted((r for r in judged.values() if r > 0), reverse=True)[:k]
    if not ideal:
        return None
    gains = [judged.get(d, 0) for d in ranked_docs[:k]]
    return dcg(gains) / dcg(ideal)


def ndcg_at_k(run: RunFile, qrels: Qrels, k: int = 10, subsets: Mapping[str, str] | None = None) -> EvalResult:
    """Score every run query that has at least one relevant judgment.

    Queries missing from ``qrels`` or without a positive judgment are dropped
    from the mean and counted in ``dropped``.
    """
    if k < 1:
        raise ValueError("k must be positive")
    per_query = {}
    dropped = 0
    for qid in sorted(run.results):
        score = ndcg_query(run.ranked_docs(qid), qrels.get(qid, {}), k)
        if score is None:
            dropped += 1
            continue
        per_query[qid] = score
    if not per_query:
        raise NoJudgedQueries("no run query has a relevant judgment")
    mean = math.fsum(per_query.values()) / len(per_query)
    result = EvalResult(per_query, mean, k, dropped=dropped)
    if subsets is not None:
        result.subsets = subset_means(result, subsets)
    return result


def subset_means(result: EvalResult, subsets: Mapping[str, str]) -> dict[str, float]:
    """Per-label mean over that label's scored queries (unlabeled queries skipped)."""
    groups: dict[str, list[float]] = {}
    for qid in sorted(result.per_query):
        label = subsets.get(qid)
        if label is not None:
            groups.setdefault(label, []).append(result.per_query[qid])
    return {label: math.fsum(v) / len(v) for label, v in sorted(groups.items())}


def macro_mean(means: Mapping[str, float]) -> float:
    """Unweighted mean over subset means."""
    if not means:
        raise NoJudgedQueries("no subsets to average")
    return math.fsum(means.values()) / len(means)


def _prepared(m: EmbeddingMatrix, head: ProjectionHead | None, truncate_dim: int | None) -> EmbeddingMatrix:
    if head is not None:
        m = head.apply(m)
    if truncate_dim is not None:
        return truncate(m, truncate_dim, renormalize=True)
    return normalize(m)


def generate_run(
    head: ProjectionHead | None,
    queries: EmbeddingMatrix,
    docs: EmbeddingMatrix,
    k: int = 10,
    truncate_dim: int | None = None,
    tag: str = "contrastkit",
    query_ids: Sequence[str] | None = None,
) -> RunFile:
    """Project (``None`` = identity), optionally truncate, and retrieve exact top-k."""
    if queries.dim != docs.dim:
        raise DimMismatch(f"query dim {queries.dim} vs doc dim {docs.dim}")
    if query_ids is not None:
        rows = queries.rows_for(list(query_ids))
        queries = EmbeddingMatrix(queries.data[rows], tuple(query_ids))
    q = _prepared(queries, head, truncate_dim)
    d = _prepared(docs, head, truncate_dim)
    results = {}
    for qid, ranked in zip(q.ids, topk_batch(q.data, d, k)):
        results[qid] = [(doc, rank, float(s)) for rank, (doc, s) in enumerate(ranked, start=1)]
    return RunFile(results, tag)


def retention(full: EvalResult | float, truncated: EvalResult | float) -> float:
    """Truncated score as a fraction of the full-dimension score."""
    if isinstance(full, EvalResult) and isinstance(truncated, EvalResult):
        if full.k != truncated.k:
            raise ValueError(f"k differs: {full.k} vs {truncated.k}")
        if set(full.per_query) != set(truncated.per_query):
            raise ValueError("results cover different query sets")
    base = full.mean if isinstance(full, EvalResult) else float(full)
    comp = truncated.mean if isinstance(truncated, EvalResult) else float(truncated)
    if base == 0:
        raise ZeroBaseline("full-dimension score is zero")
    return comp / base


@dataclass
class RecallReport:
    k: int
    per_query: dict[str, float]
    mean: float
    scale: float
    max_abs_error: float = field(default=0.0)

    def to_json(self) -> dict:
        return {"k": self.k, "mean": self.mean, "scale": self.scale,
                "max_abs_error": self.max_abs_error, "per_query": dict(sorted(self.per_query.items()))}


def compare_quantized(matrix: EmbeddingMatrix, queries: EmbeddingMatrix, k: int = 10) -> RecallReport:
    """Recall@k of search over the int8-dequantized corpus versus float32 search.

    Only the corpus is quantized; queries stay in float32.
    """
    if matrix.dim != queries.dim:
        raise DimMismatch(f"corpus dim {matrix.dim} vs query dim {queries.dim}")
    q8 = quantize_i8(matrix)
    approx = dequantize(q8)
    exact_lists = topk_batch(queries.data, matrix, k)
    approx_lists = topk_batch(queries.data, approx, k)
    per_query = {}
    for qid, ex, ap in zip(queries.ids, exact_lists, approx_lists):
        per_query[qid] = len(set(ex.ids) & set(ap.ids)) / len(ex.ids)
    err = float(np.max(np.abs(approx.data.astype(np.float64) - matrix.data.astype(np.float64)))) if matrix.rows else 0.0
    mean = math.fsum(per_query.values()) / len(per_query) if per_query else 1.0
    return RecallReport(k, per_query, mean, q8.scale, err)
