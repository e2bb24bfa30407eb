"""Contrastive embedding training toolkit operating on precomputed vectors."""

from .corevec import (
    EmbeddingMatrix,
    QuantizedMatrix,
    ScoredList,
    cosine_sim,
    dequantize,
    normalize,
    quantize_i8,
    read_embx,
    topk,
    truncate,
    write_embx,
)
from .consistency_filter import FilterConfig, FilterReport, filter_pairs, filter_shard, shard
from .dataio import PairRecord, RunFile, TripletRecord
from .evalkit import EvalResult, compare_quantized, generate_run, ndcg_at_k, retention
from .negative_mining import MiningConfig, mine, mine_pairs, order_dataset
from .trainer import (
    Checkpoint,
    ProjectionHead,
    TrainConfig,
    infonce,
    mrl_infonce,
    plan_batches,
    train,
    wsd_lr,
)

__version__ = "0.1.0"
