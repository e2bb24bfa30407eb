import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from contrastkit.corevec import EmbeddingMatrix  # noqa: E402


def unit_rows(rng, n, dim):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_matrix():
    def _make(data, prefix="d", normalized=False, ids=None):
        data = np.asarray(data, dtype=np.float64)
        ids = ids or [f"{prefix}{i:04d}" for i in range(data.shape[0])]
        return EmbeddingMatrix(data, tuple(ids), normalized=normalized)
    return _make


def small_pipeline_config(directory, seed=0, pairs_per_source=2000, **fixture_kw):
    """Write a seeded synthetic fixture under ``directory/inputs`` and return a desk-scale config."""
    from contrastkit.consistency_filter import FilterConfig
    from contrastkit.negative_mining import MiningConfig
    from contrastkit.pipeline import EvalConfig, PathsConfig, PipelineConfig
    from contrastkit.synthetic import make_fixture
    from contrastkit.trainer import TrainConfig

    fx = make_fixture(pairs_per_source=pairs_per_source, seed=seed, **fixture_kw)
    paths = {k: str(v) for k, v in fx.write(Path(directory) / "inputs").items()}
    return PipelineConfig(
        paths=PathsConfig(**paths),
        filter=FilterConfig(shard_size=2000, rank_cutoff=20),
        mining=MiningConfig(threshold_pct=0.95, num_negatives=7, candidate_depth=50, fallback="random_fill"),
        pretrain=TrainConfig(temperature=0.05, out_dim=32, mrl_dims=(8, 32), batch_size=32, peak_lr=1e-2,
                             total_steps=150, warmup_steps=10, decay_steps=40),
        finetune=TrainConfig(mode="explicit_negatives", temperature=0.05, out_dim=32, mrl_dims=(8, 32),
                             batch_size=16, peak_lr=3e-3, total_steps=40, decay_steps=20),
        eval=EvalConfig(k=10, truncate_dims=(8,)),
        seed=seed,
    )


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.REPORT, key=lambda l: int(l.split()[1][1:])):
            terminalreporter.write_line(line)
