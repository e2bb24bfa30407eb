"""Retrieval-based consistency filtering of unsupervised query-document pairs.

A pair survives when its own document ranks within ``rank_cutoff`` among every
document of its shard, scored by similarity to the pair's query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corevec import EmbeddingMatrix
from .dataio import PairRecord


@dataclass(frozen=True)
class FilterConfig:
    shard_size: int = 3_000_000
    rank_cutoff: int = 20
    seed: int = 0

    def __post_init__(self):
        if int(self.shard_size) < 1:
            raise ValueError("shard_size must be >= 1")
        if int(self.rank_cutoff) < 1:
            raise ValueError("rank_cutoff must be >= 1")


@dataclass
class FilterReport:
    shards: int = 0
    kept: int = 0
    dropped: int = 0
    per_shard: list[tuple[int, int]] = field(default_factory=list)

    def add(self, kept: int, dropped: int) -> None:
        self.shards += 1
        self.kept += kept
        self.dropped += dropped
        self.per_shard.append((kept, dropped))

    def to_json(self) -> dict:
        return {
            "shards": self.shards,
            "kept": self.kept,
            "dropped": self.dropped,
            "per_shard": [list(row) for row in self.per_shard],
        }


def shard_indices(n: int, cfg: FilterConfig) -> list[np.ndarray]:
    if n < 1:
        return []
    perm = np.random.default_rng(cfg.seed).permutation(n)
    n_shards = math.ceil(n / cfg.shard_size)
    return np.array_split(perm, n_shards)


def shard(pairs: Sequence[PairRecord], cfg: FilterConfig) -> list[list[PairRecord]]:
    """Seeded shuffle, then an even split into ceil(n / shard_size) shards."""
    return [[pairs[i] for i in idx] for idx in shard_indices(len(pairs), cfg)]


def doc_ranks(shard: Sequence[PairRecord], qvecs: EmbeddingMatrix, dvecs: EmbeddingMatrix) -> np.ndarray:
    """1-based rank of each pair's document among all documents of the shard.

    Ranking is by ``(-similarity, doc_id)``; a document with an identical key
    (the same doc_id appearing twice) shares the better rank, so the result
    does not depend on the order of pairs within the shard.
    """
    n = len(shard)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    q = qvecs.data[qvecs.rows_for([p.query_id for p in shard])].astype(np.float64)
    d = dvecs.data[dvecs.rows_for([p.doc_id for p in shard])].astype(np.float64)
    _, id_rank = np.unique(np.asarray([p.doc_id for p in shard], dtype=object), return_inverse=True)
    id_rank = id_rank.ravel()
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        sims = d @ q[i]
        own = sims[i]
        ahead = (sims > own) | ((sims == own) & (id_rank < id_rank[i]))
        ranks[i] = 1 + int(ahead.sum())
    return ranks


def filter_shard(
    shard: Sequence[PairRecord],
    qvecs: EmbeddingMatrix,
    dvecs: EmbeddingMatrix,
    cfg: FilterConfig,
) -> tuple[list[PairRecord], list[PairRecord], tuple[int, int]]:
    ranks = doc_ranks(shard, qvecs, dvecs)
    keep = ranks <= cfg.rank_cutoff
    kept = [p for p, k in zip(shard, keep) if k]
    dropped = [p for p, k in zip(shard, keep) if not k]
    return kept, dropped, (len(kept), len(dropped))


def filter_pairs(
    pairs: Sequence[PairRecord],
    qvecs: EmbeddingMatrix,
    dvecs: EmbeddingMatrix,
    cfg: FilterConfig,
) -> tuple[list[PairRecord], FilterReport]:
    """Shard, filter every shard, and return survivors in input order."""
    report = FilterReport()
    keep = np.zeros(len(pairs), dtype=bool)
    for idx in shard_indices(len(pairs), cfg):
        ranks = doc_ranks([pairs[i] for i in idx], qvecs, dvecs)
        ok = ranks <= cfg.rank_cutoff
        keep[idx[ok]] = True
        report.add(int(ok.sum()), int((~ok).sum()))
    return [p for p, k in zip(pairs, keep) if k], report
