"""Teacher-scored hard-negative mining and curriculum ordering."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corevec import EmbeddingMatrix, ScoredList, _rank_rows, similarities
from .dataio import PairRecord, TripletRecord
from .errors import InsufficientNegatives, MissingScores, PositiveNotScored

FALLBACKS = ("error", "random_fill")
STRATEGIES = ("random", "margin", "avg_negative_score", "min_negative_score")
_STRATEGY_ALIASES = {"avg": "avg_negative_score", "min": "min_negative_score"}


@dataclass(frozen=True)
class MiningConfig:
    """``threshold_pct`` may be ``inf`` to disable false-negative filtering."""

    threshold_pct: float = 0.95
    num_negatives: int = 10
    candidate_depth: int = 100
    fallback: str = "error"
    seed: int = 0

    def __post_init__(self):
        if not self.threshold_pct > 0:
            raise ValueError("threshold_pct must be > 0")
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if self.candidate_depth < self.num_negatives:
            raise ValueError("candidate_depth must be >= num_negatives")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")


def query_seed(seed: int, query_id: str) -> int:
    """Per-query RNG seed so fills do not depend on processing order."""
    digest = hashlib.sha256(f"{int(seed)}\x1f{query_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def mine(
    query_id: str,
    positive_id: str,
    teacher_scores: ScoredList,
    cfg: MiningConfig,
) -> TripletRecord:
    """Pick hard negatives from a teacher ranking.

    Candidates are the top ``candidate_depth`` entries minus the positive. A
    candidate scoring strictly above ``threshold_pct * positive_score`` is
    treated as an unlabeled positive and discarded. Random fills, when
    enabled, are drawn from the rest of ``teacher_scores``.
    """
    ids = teacher_scores.ids
    scores = teacher_scores.scores
    try:
        pos_at = ids.index(positive_id)
    except ValueError:
        raise PositiveNotScored(f"{positive_id!r} missing from teacher scores for {query_id!r}") from None
    pos_score = float(scores[pos_at])

    depth = min(cfg.candidate_depth, len(ids))
    cand = [i for i in range(depth) if i != pos_at]
    if math.isinf(cfg.threshold_pct):
        survivors = cand
    else:
        cutoff = cfg.threshold_pct * pos_score
        survivors = [i for i in cand if not scores[i] > cutoff]
    chosen = survivors[: cfg.num_negatives]

    fill = 0
    if len(chosen) < cfg.num_negatives:
        short = cfg.num_negatives - len(chosen)
        if cfg.fallback == "error":
            raise InsufficientNegatives(
                f"{query_id!r}: {len(chosen)} of {cfg.num_negatives} negatives survive the cutoff"
            )
        taken = set(chosen) | {pos_at}
        pool = np.array([i for i in range(len(ids)) if i not in taken], dtype=np.int64)
        if pool.size < short:
            raise InsufficientNegatives(f"{query_id!r}: corpus too small to fill {short} negatives")
        rng = np.random.default_rng(query_seed(cfg.seed, query_id))
        extra = rng.choice(pool, size=short, replace=False)
        chosen = chosen + [int(i) for i in extra]
        fill = short

    return TripletRecord(
        query_id=query_id,
        positive_id=positive_id,
        negative_ids=tuple(ids[i] for i in chosen),
        positive_score=pos_score,
        negative_scores=tuple(float(scores[i]) for i in chosen),
        random_fill=fill,
    )


def mine_pairs(
    pairs: Sequence[PairRecord],
    teacher_q: EmbeddingMatrix,
    teacher_d: EmbeddingMatrix,
    cfg: MiningConfig,
    block: int = 256,
) -> list[TripletRecord]:
    """Mine every pair against the full teacher document corpus."""
    out = []
    qrows = teacher_q.rows_for([p.query_id for p in pairs])
    teacher_d.rows_for([p.doc_id for p in pairs])  # fail fast on unknown positives
    for start in range(0, len(pairs), block):
        chunk = pairs[start:start + block]
        sims = similarities(teacher_q.data[qrows[start:start + block]], teacher_d)
        order = _rank_rows(sims, teacher_d.id_order, teacher_d.rows)
        for p, row, idx in zip(chunk, sims, order):
            ranked = ScoredList(tuple(teacher_d.ids[j] for j in idx), row[idx])
            out.append(mine(p.query_id, p.doc_id, ranked, cfg))
    return out


# ---------------------------------------------------------------------------
# Curriculum ordering
# ---------------------------------------------------------------------------

def hardness(t: TripletRecord, strategy: str) -> float:
    """Sort key; ascending key = easy to hard."""
    if not t.negative_scores or t.positive_score is None or not math.isfinite(t.positive_score):
        raise MissingScores(f"triplet for {t.query_id!r} lacks teacher scores")
    negs = np.asarray(t.negative_scores, dtype=np.float64)
    if strategy == "margin":
        return -float(np.mean(t.positive_score - negs))
    if strategy == "avg_negative_score":
        return float(np.mean(negs))
    if strategy == "min_negative_score":
        return float(np.min(negs))
    raise ValueError(f"no hardness key for strategy {strategy!r}")


def order_dataset(triplets: Sequence[TripletRecord], strategy: str = "random", seed: int = 0) -> list[TripletRecord]:
    strategy = _STRATEGY_ALIASES.get(strategy, strategy)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "random":
        perm = np.random.default_rng(seed).permutation(len(triplets))
        return [triplets[i] for i in perm]
    keys = [hardness(t, strategy) for t in triplets]
    order = sorted(range(len(triplets)), key=lambda i: (keys[i], i))
    return [triplets[i] for i in order]
