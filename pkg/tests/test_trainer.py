import math

import numpy as np
import pytest

from contrastkit.dataio import PairRecord, TripletRecord
from contrastkit.errors import BadPositiveIndex, EmptyDataset, NonFiniteLoss, StepOutOfRange
from contrastkit.evalkit import generate_run, ndcg_at_k
from contrastkit.synthetic import make_fixture
from contrastkit.trainer import (
    Checkpoint,
    ProjectionHead,
    TrainConfig,
    head_objective,
    infonce,
    load_head,
    mrl_infonce,
    plan_batches,
    train,
    wsd_lr,
)
from contrastkit.corevec import EmbeddingMatrix

from conftest import unit_rows
from oracles import central_diff, head_loss, infonce_loss, max_rel_err, mrl_loss


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

class TestInfoNCE:
    @pytest.mark.parametrize("k", [2, 4, 10])
    def test_uniform_is_ln_k(self, k):
        loss, _ = infonce(np.full((3, k), 0.3), [0, 1, k - 1], 0.02)
        assert abs(loss - math.log(k)) < 1e-9

    def test_ln4_anchor(self):
        assert infonce(np.zeros((1, 4)), [0], 1.0)[0] == pytest.approx(1.386294, abs=1e-6)

    def test_tau_one_anchor(self):
        loss, _ = infonce([[1.0, 0.0]], [0], 1.0)
        assert abs(loss - math.log1p(math.exp(-1))) < 1e-12
        assert loss == pytest.approx(0.313262, abs=1e-6)

    def test_low_temperature_anchor(self):
        loss, _ = infonce([[0.9, 0.8]], [0], 0.02)
        assert abs(loss - math.log1p(math.exp(-5))) < 1e-9
        assert loss == pytest.approx(0.006715, abs=1e-6)

    def test_matches_oracle(self, rng):
        s = rng.uniform(-1, 1, size=(6, 9))
        pos = rng.integers(0, 9, size=6)
        for tau in (0.02, 0.5):
            assert infonce(s, pos, tau)[0] == pytest.approx(infonce_loss(s.tolist(), pos, tau), rel=1e-12)

    def test_shift_invariance(self, rng):
        s = rng.uniform(-1, 1, size=(4, 7))
        pos = [0, 3, 6, 2]
        base = infonce(s, pos, 0.1)[0]
        shifted = s + np.array([[0.5], [-2.0], [10.0], [0.0]])
        assert infonce(shifted, pos, 0.1)[0] == pytest.approx(base, abs=1e-12)

    def test_gradient_fd(self, rng):
        s = rng.uniform(-1, 1, size=(5, 6))
        pos = rng.integers(0, 6, size=5)
        _, g = infonce(s, pos, 0.3)
        fd = central_diff(lambda: infonce_loss(s.tolist(), pos, 0.3), s)
        assert max_rel_err(g, fd) < 1e-6

    def test_bad_positive(self):
        with pytest.raises(BadPositiveIndex):
            infonce(np.zeros((2, 3)), [0, 3], 1.0)
        with pytest.raises(BadPositiveIndex):
            infonce(np.zeros((2, 3)), [0], 1.0)

    def test_mask_equals_submatrix(self, rng):
        s = rng.uniform(-1, 1, size=(2, 6))
        mask = np.zeros((2, 6), dtype=bool)
        mask[0, :3] = True
        mask[1, 3:] = True
        loss, g = infonce(s, [0, 3], 0.2, mask)
        a = infonce_loss([s[0, :3].tolist()], [0], 0.2)
        b = infonce_loss([s[1, 3:].tolist()], [0], 0.2)
        assert loss == pytest.approx((a + b) / 2, rel=1e-12)
        assert not g[~mask].any()


class TestMRL:
    def test_degenerate_equals_infonce(self, rng):
        q = unit_rows(rng, 4, 8)
        c = unit_rows(rng, 6, 8)
        loss, _, _ = mrl_infonce(q, c, [0, 1, 2, 3], [8], 0.1)
        assert loss == pytest.approx(infonce(q @ c.T, [0, 1, 2, 3], 0.1)[0], rel=1e-12)

    def test_additive_when_structure_repeats(self, rng):
        # second half duplicates the first, so the 4-prefix has the same cosines as the full vector
        half = unit_rows(rng, 5, 4)
        q = np.hstack([half, half])
        cand = unit_rows(rng, 5, 4)
        c = np.hstack([cand, cand])
        pos = np.arange(5)
        loss, _, _ = mrl_infonce(q, c, pos, [4, 8], 0.05)
        full = mrl_infonce(q, c, pos, [8], 0.05)[0]
        assert loss == pytest.approx(2 * full, rel=1e-10)

    def test_uniform_per_dim(self):
        q = np.ones((3, 8))
        c = np.ones((5, 8))
        loss, _, _ = mrl_infonce(q, c, [0, 1, 2], [2, 4, 8], 0.02)
        assert abs(loss - 3 * math.log(5)) < 1e-9

    def test_gradients_fd(self, rng):
        q = rng.normal(size=(8, 16))
        c = rng.normal(size=(16, 16))
        pos = rng.permutation(16)[:8]
        loss, gq, gc = mrl_infonce(q, c, pos, [4, 16], 0.5)
        assert loss == pytest.approx(mrl_loss(q, c, pos, [4, 16], 0.5), rel=1e-12)
        fq = central_diff(lambda: mrl_loss(q, c, pos, [4, 16], 0.5), q)
        fc = central_diff(lambda: mrl_loss(q, c, pos, [4, 16], 0.5), c)
        assert max_rel_err(gq, fq) < 1e-4
        assert max_rel_err(gc, fc) < 1e-4


class TestHeadObjective:
    @pytest.mark.parametrize("bias", [False, True])
    def test_fd(self, bias):
        rng = np.random.default_rng(3)
        head = ProjectionHead(rng.normal(size=(8, 16)), rng.normal(size=8) if bias else None)
        qb = rng.normal(size=(8, 16))
        cb = rng.normal(size=(16, 16))
        pos = np.arange(8)
        loss, grads = head_objective(head, qb, cb, pos, [4, 8], 1.0)

        def f():
            return head_loss(head.weight, head.bias, qb, cb, pos, [4, 8], 1.0)

        assert loss == pytest.approx(f(), rel=1e-12)
        assert max_rel_err(grads["weight"], central_diff(f, head.weight)) < 1e-4
        if bias:
            assert max_rel_err(grads["bias"], central_diff(f, head.bias)) < 1e-4


# ---------------------------------------------------------------------------
# Schedule and batching
# ---------------------------------------------------------------------------

class TestWSD:
    def test_finetune_constants(self):
        args = dict(peak_lr=1e-5, total_steps=9342, warmup_steps=0, decay_steps=6000)
        assert wsd_lr(0, **args) == 1e-5
        assert wsd_lr(3342, **args) == 1e-5
        assert wsd_lr(6342, **args) == 0.5e-5
        assert wsd_lr(9342, **args) == 0.0

    def test_warmup_midpoint(self):
        assert wsd_lr(50, 2.0, 1000, warmup_steps=100) == 1.0

    def test_continuous_and_nonnegative(self):
        lrs = [wsd_lr(s, 1.0, 500, 50, 200) for s in range(501)]
        assert min(lrs) >= 0
        assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) <= 1 / 50 + 1e-12
        assert all(v == 1.0 for v in lrs[50:301])

    def test_out_of_range(self):
        with pytest.raises(StepOutOfRange):
            wsd_lr(11, 1.0, 10)
        with pytest.raises(StepOutOfRange):
            wsd_lr(-1, 1.0, 10)


class TestPlanBatches:
    def test_counts(self):
        plan = plan_batches(["A"] * 100 + ["B"] * 50, 10, seed=1)
        assert plan.per_source() == {"A": 10, "B": 5}
        labels = [s for s, _ in plan]
        assert labels != sorted(labels)  # interleaved

    def test_single_source(self):
        plan = plan_batches(["A"] * 30, 10, seed=2)
        idx = np.concatenate([b for _, b in plan])
        assert sorted(idx.tolist()) == list(range(30))

    def test_tail_dropped(self):
        plan = plan_batches(["A"] * 9 + ["B"] * 10, 10, seed=0)
        assert plan.per_source() == {"B": 1}

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            plan_batches([], 4, 0)

    def test_seeded(self):
        src = ["A"] * 40 + ["B"] * 40
        a, b = plan_batches(src, 8, 5), plan_batches(src, 8, 5)
        assert all(x[0] == y[0] and np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    def test_preserve_order(self):
        plan = plan_batches(["A"] * 6, 2, seed=9, shuffle=False)
        assert [b.tolist() for _, b in plan] == [[0, 1], [2, 3], [4, 5]]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _tiny(seed=0, n=48, dim=8):
    rng = np.random.default_rng(seed)
    q = unit_rows(rng, n, dim)
    d = q + 0.3 * rng.normal(size=q.shape)
    qids = tuple(f"q{i}" for i in range(n))
    dids = tuple(f"d{i}" for i in range(n))
    qe = EmbeddingMatrix(q, qids)
    de = EmbeddingMatrix(d, dids)
    pairs = [PairRecord(a, b, "s" if i % 2 else "t") for i, (a, b) in enumerate(zip(qids, dids))]
    return qe, de, pairs


def _same(a: ProjectionHead, b: ProjectionHead):
    return a.weight.tobytes() == b.weight.tobytes()


class TestTrain:
    def test_zero_steps_identity(self):
        qe, de, pairs = _tiny()
        cfg = TrainConfig(batch_size=4, total_steps=0, seed=3, out_dim=6, mrl_dims=(6,))
        res = train(qe, de, pairs, cfg)
        assert _same(res.head, ProjectionHead.init(8, 6, seed=3))
        assert res.loss_trace == []

    def test_identity_init_when_square(self):
        np.testing.assert_array_equal(ProjectionHead.init(5, 5, seed=1).weight, np.eye(5))
        w = ProjectionHead.init(9, 3, seed=1).weight
        assert np.all(np.abs(w) <= 1 / 3)

    def test_deterministic_checkpoints(self):
        qe, de, pairs = _tiny()
        cfg = TrainConfig(batch_size=4, total_steps=25, peak_lr=1e-2, seed=1, temperature=0.1)
        a = train(qe, de, pairs, cfg, checkpoint_every=5)
        b = train(qe, de, pairs, cfg, checkpoint_every=5)
        assert [c.step for c in a.checkpoints] == [5, 10, 15, 20, 25]
        assert all(_same(x.head, y.head) for x, y in zip(a.checkpoints, b.checkpoints))
        assert a.loss_trace == b.loss_trace

    @pytest.mark.parametrize("optimizer", ["adamw", "sgd"])
    def test_resume_bit_identical(self, tmp_path, optimizer):
        qe, de, pairs = _tiny()
        # 12 batches per epoch: resuming at 17 crosses an epoch boundary mid-run
        cfg = TrainConfig(batch_size=4, total_steps=40, peak_lr=1e-2, warmup_steps=5, decay_steps=10,
                          seed=4, temperature=0.1, optimizer=optimizer, bias=True)
        full = train(qe, de, pairs, cfg, checkpoint_steps=[17])
        full.checkpoints[0].save(tmp_path / "ck")
        resumed = train(qe, de, pairs, cfg, resume=Checkpoint.load(tmp_path / "ck"))
        assert _same(resumed.head, full.head)
        assert resumed.head.bias.tobytes() == full.head.bias.tobytes()
        assert resumed.loss_trace == full.loss_trace[17:]

    def test_checkpoint_files(self, tmp_path):
        qe, de, pairs = _tiny()
        cfg = TrainConfig(batch_size=4, total_steps=6, seed=0)
        res = train(qe, de, pairs, cfg, checkpoint_every=3, checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["step_00000003", "step_00000006"]
        assert _same(load_head(tmp_path / "step_00000006"), res.head)
        assert (tmp_path / "step_00000006" / "head.embx").exists()

    def test_loss_trace_csv(self, tmp_path):
        qe, de, pairs = _tiny()
        res = train(qe, de, pairs, TrainConfig(batch_size=4, total_steps=3, seed=0))
        res.write_trace(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "step,lr,loss" and len(lines) == 4

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_non_finite_loss(self):
        qe, de, pairs = _tiny()
        head = ProjectionHead(np.full((8, 8), np.finfo(float).max / 4))
        with pytest.raises(NonFiniteLoss) as exc:
            train(qe, de, pairs, TrainConfig(batch_size=4, total_steps=2), head=head)
        assert exc.value.step == 0

    def test_explicit_negatives(self):
        qe, de, pairs = _tiny()
        triplets = [
            TripletRecord(p.query_id, p.doc_id, (f"d{(i + 1) % 48}", f"d{(i + 2) % 48}"), 0.9, (0.5, 0.4))
            for i, p in enumerate(pairs)
        ]
        cfg = TrainConfig(mode="explicit_negatives", batch_size=4, total_steps=30, peak_lr=1e-2, temperature=0.1)
        res = train(qe, de, triplets, cfg)
        first, last = res.loss_trace[0][2], np.mean([l for _, _, l in res.loss_trace[-5:]])
        assert last < first
        # width 3 per query without cross-query candidates: loss bounded by ln 3 at uniform scores
        assert res.loss_trace[0][2] < 3 * math.log(12)

    def test_mode_data_mismatch(self):
        qe, de, pairs = _tiny()
        with pytest.raises(TypeError):
            train(qe, de, pairs, TrainConfig(mode="explicit_negatives", batch_size=4, total_steps=1))

    def test_sixteen_cluster_learning(self):
        fx = make_fixture(n_clusters=16, base_dim=64, pairs_per_source=800, eval_queries=100, seed=3)
        cfg = TrainConfig(temperature=0.05, out_dim=32, mrl_dims=(8, 32), batch_size=32, peak_lr=1e-2,
                          total_steps=200, warmup_steps=20, decay_steps=50, seed=0)
        res = train(fx.query_emb, fx.doc_emb, fx.pretrain_pairs, cfg)
        per_epoch = 1600 // 32
        losses = [l for _, _, l in res.loss_trace]
        assert np.mean(losses[-per_epoch:]) < np.mean(losses[:per_epoch])
        qs = fx.eval_queries()
        before = ndcg_at_k(generate_run(ProjectionHead.init(64, 32, seed=0), qs, fx.doc_emb, 10), fx.qrels).mean
        after = ndcg_at_k(generate_run(res.head, qs, fx.doc_emb, 10), fx.qrels).mean
        assert after > before
