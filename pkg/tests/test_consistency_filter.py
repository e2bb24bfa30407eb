from collections import Counter

import numpy as np
import pytest

from contrastkit.consistency_filter import FilterConfig, filter_pairs, filter_shard, shard
from contrastkit.corevec import EmbeddingMatrix
from contrastkit.dataio import PairRecord

from conftest import unit_rows
from oracles import filter_oracle


def _random_shard(seed, n, dim=8):
    rng = np.random.default_rng(seed)
    q = unit_rows(rng, n, dim)
    # queries correlated with their own doc so both kept and dropped pairs appear
    d = q + rng.normal(scale=0.9, size=(n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    qids = tuple(f"q{i}" for i in range(n))
    dids = tuple(f"d{i}" for i in range(n))
    pairs = [PairRecord(a, b, "s") for a, b in zip(qids, dids)]
    qm = EmbeddingMatrix(q, qids, normalized=True)
    dm = EmbeddingMatrix(d, dids, normalized=True)
    return pairs, qm, dm


def _as_dict(m):
    return {i: m.data[j] for i, j in m.index.items()}


class TestShard:
    def test_ten_by_three(self):
        pairs = [PairRecord(f"q{i}", f"d{i}", "s") for i in range(10)]
        shards = shard(pairs, FilterConfig(shard_size=3))
        assert sorted(len(s) for s in shards) == [2, 2, 3, 3]
        assert Counter(p for s in shards for p in s) == Counter(pairs)

    def test_single_shard(self):
        pairs = [PairRecord(f"q{i}", f"d{i}", "s") for i in range(5)]
        shards = shard(pairs, FilterConfig(shard_size=100))
        assert len(shards) == 1 and len(shards[0]) == 5

    def test_deterministic(self):
        pairs = [PairRecord(f"q{i}", f"d{i}", "s") for i in range(37)]
        cfg = FilterConfig(shard_size=6, seed=4)
        assert shard(pairs, cfg) == shard(pairs, cfg)

    @pytest.mark.parametrize("n,size", [(1, 1), (7, 2), (100, 7), (12, 4)])
    def test_sizes_balanced(self, n, size):
        pairs = [PairRecord(f"q{i}", f"d{i}", "s") for i in range(n)]
        lens = [len(s) for s in shard(pairs, FilterConfig(shard_size=size))]
        assert max(lens) <= size and max(lens) - min(lens) <= 1 and sum(lens) == n


class TestFilterShard:
    def test_single_pair_kept(self):
        pairs, qm, dm = _random_shard(0, 1)
        kept, dropped, row = filter_shard(pairs, qm, dm, FilterConfig(rank_cutoff=1))
        assert kept == pairs and row == (1, 0)

    def test_forced_drop(self):
        qv = np.array([1.0, 0.0])
        qids = ("q",) + tuple(f"x{i}" for i in range(25))
        dids = ("own",) + tuple(f"z{i:02d}" for i in range(25))
        qm = EmbeddingMatrix(np.tile(qv, (26, 1)), qids, normalized=True)
        ddata = np.vstack([[0.0, 1.0], np.tile(qv, (25, 1))])
        dm = EmbeddingMatrix(ddata, dids, normalized=True)
        pairs = [PairRecord(a, b, "s") for a, b in zip(qids, dids)]
        kept, dropped, _ = filter_shard(pairs, qm, dm, FilterConfig(rank_cutoff=20))
        assert pairs[0] in dropped

    @pytest.mark.parametrize("seed", range(20))
    def test_oracle_equivalence(self, seed):
        n = 200 if seed == 0 else 60 + 7 * seed
        pairs, qm, dm = _random_shard(seed, n)
        cfg = FilterConfig(rank_cutoff=20)
        kept, dropped, _ = filter_shard(pairs, qm, dm, cfg)
        keep = filter_oracle(pairs, _as_dict(qm), _as_dict(dm), 20)
        assert kept == [p for p, k in zip(pairs, keep) if k]
        assert 0 < len(kept) < n

    def test_duplicate_docs_oracle(self):
        pairs, qm, dm = _random_shard(3, 40)
        # several queries share one document
        pairs = pairs + [PairRecord(f"q{i}", "d0", "s") for i in range(1, 6)]
        kept, _, _ = filter_shard(pairs, qm, dm, FilterConfig(rank_cutoff=5))
        keep = filter_oracle(pairs, _as_dict(qm), _as_dict(dm), 5)
        assert kept == [p for p, k in zip(pairs, keep) if k]


class TestProperties:
    def test_monotone_in_cutoff(self):
        pairs, qm, dm = _random_shard(11, 150)
        prev = set()
        for cutoff in (1, 2, 5, 10, 20, 50, 150):
            kept = set(filter_shard(pairs, qm, dm, FilterConfig(rank_cutoff=cutoff))[0])
            assert prev <= kept
            prev = kept
        assert len(prev) == 150

    def test_order_invariant(self):
        pairs, qm, dm = _random_shard(5, 120)
        pairs = pairs + [PairRecord("q7", "d3", "s"), PairRecord("q9", "d3", "s")]
        cfg = FilterConfig(rank_cutoff=10)
        base = set(filter_shard(pairs, qm, dm, cfg)[0])
        for s in range(5):
            perm = np.random.default_rng(s).permutation(len(pairs))
            assert set(filter_shard([pairs[i] for i in perm], qm, dm, cfg)[0]) == base

    def test_filter_pairs_report_and_order(self):
        pairs, qm, dm = _random_shard(2, 103)
        cfg = FilterConfig(shard_size=25, rank_cutoff=3, seed=9)
        kept, report = filter_pairs(pairs, qm, dm, cfg)
        assert report.shards == 5
        assert report.kept + report.dropped == 103
        assert sum(k for k, _ in report.per_shard) == report.kept == len(kept)
        # survivors keep input order and match per-shard filtering
        expected = set()
        for s in shard(pairs, cfg):
            expected |= set(filter_shard(s, qm, dm, cfg)[0])
        assert kept == [p for p in pairs if p in expected]
