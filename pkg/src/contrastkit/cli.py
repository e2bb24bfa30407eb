"""Command-line entry point: ``contrastkit <subcommand> ...``.

Every subcommand accepts ``--config <json>``; explicit flags override values
from the config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import dataio
from .consistency_filter import FilterConfig, filter_pairs
from .corevec import QuantizedMatrix, normalize, quantize_i8, read_embedding_matrix, read_embx, write_embx
from .errors import ContrastKitError
from .evalkit import compare_quantized, generate_run, ndcg_at_k
from .negative_mining import MiningConfig, mine_pairs, order_dataset
from .pipeline import (
    CadenceConfig,
    PipelineConfig,
    canonical_json,
    grid_experiment,
    run_cadence,
    run_pipeline,
)
from .trainer import Checkpoint, TrainConfig, load_head, train

log = logging.getLogger("contrastkit")


def _load(cls, path, **overrides):
    """Config from an optional JSON file, then non-None CLI overrides."""
    data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return dataio.config_from_dict(cls, data)


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_filter(args) -> int:
    cfg = _load(FilterConfig, args.config, shard_size=args.shard_size, rank_cutoff=args.rank_cutoff, seed=args.seed)
    pairs = dataio.read_pairs(args.pairs)
    kept, report = filter_pairs(
        pairs,
        normalize(read_embedding_matrix(args.query_emb)),
        normalize(read_embedding_matrix(args.doc_emb)),
        cfg,
    )
    dataio.write_pairs(kept, args.out_kept)
    _write_json(report.to_json(), args.out_report)
    log.info("kept %d of %d pairs across %d shard(s)", report.kept, len(pairs), report.shards)
    return 0


def cmd_mine(args) -> int:
    cfg = _load(MiningConfig, args.config, threshold_pct=args.threshold, num_negatives=args.negatives,
                candidate_depth=args.depth, fallback=args.fallback, seed=args.seed)
    triplets = mine_pairs(
        dataio.read_pairs(args.pairs),
        normalize(read_embedding_matrix(args.teacher_query_emb)),
        normalize(read_embedding_matrix(args.teacher_doc_emb)),
        cfg,
    )
    dataio.write_triplets(triplets, args.out)
    log.info("mined %d triplets", len(triplets))
    return 0


def cmd_order(args) -> int:
    seed = args.seed
    if seed is None and args.config:
        seed = json.loads(Path(args.config).read_text(encoding="utf-8")).get("seed")
    ordered = order_dataset(dataio.read_triplets(args.triplets), args.strategy, seed or 0)
    dataio.write_triplets(ordered, args.out)
    return 0


def _checkpoint_dir(path) -> Path:
    """A checkpoint directory, or a training output directory whose latest checkpoint is used."""
    path = Path(path)
    if (path / "state.json").exists() or not (path / "checkpoints").is_dir():
        return path
    steps = sorted((path / "checkpoints").glob("step_*"))
    if not steps:
        raise ContrastKitError(f"{path} contains no checkpoints")
    return steps[-1]


def cmd_train(args) -> int:
    mode = {"finetune": "explicit_negatives"}.get(args.mode, args.mode)
    cfg = _load(TrainConfig, args.config, mode=mode, seed=args.seed)
    qe = read_embedding_matrix(args.query_emb)
    de = read_embedding_matrix(args.doc_emb)
    data = dataio.read_pairs(args.data) if cfg.mode == "in_batch" else dataio.read_triplets(args.data)
    head = load_head(_checkpoint_dir(args.init)) if args.init else None
    resume = Checkpoint.load(_checkpoint_dir(args.resume)) if args.resume else None
    out = Path(args.out_dir)
    result = train(qe, de, data, cfg, head=head, checkpoint_every=args.checkpoint_every, resume=resume,
                   checkpoint_dir=out / "checkpoints", final_checkpoint=True)
    result.write_trace(out / "loss_trace.csv")
    dataio.save_config(cfg, out / "train_config.json")
    log.info("trained %d steps; checkpoints in %s", result.total_steps, out / "checkpoints")
    return 0


def cmd_run(args) -> int:
    qe = read_embedding_matrix(args.query_emb)
    de = read_embedding_matrix(args.doc_emb)
    head = load_head(_checkpoint_dir(args.head)) if args.head else None
    run = generate_run(head, qe, de, args.k, truncate_dim=args.truncate, tag=args.tag)
    dataio.write_run(run, args.out)
    return 0


def cmd_eval(args) -> int:
    subsets = dataio.read_subsets(args.subsets) if args.subsets else None
    result = ndcg_at_k(dataio.read_run(args.run), dataio.read_qrels(args.qrels), args.k, subsets)
    _write_json(result.to_json(), args.out)
    print(f"nDCG@{result.k} = {result.mean:.6f} over {len(result.per_query)} queries ({result.dropped} dropped)")
    return 0


def cmd_quantize(args) -> int:
    m = read_embx(args.emb)
    if isinstance(m, QuantizedMatrix):
        raise ContrastKitError(f"{args.emb} is already int8")
    write_embx(quantize_i8(m), args.out)
    if args.queries:
        report = compare_quantized(normalize(m), normalize(read_embedding_matrix(args.queries)), args.k)
        if args.report:
            _write_json(report.to_json(), args.report)
        print(f"recall@{args.k} of int8 search = {report.mean:.4f} (scale {report.scale:.6g})")
    return 0


def cmd_pipeline(args) -> int:
    cfg = dataio.load_config(PipelineConfig, args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    result = run_pipeline(cfg, args.out_dir)
    print(json.dumps(result.metrics, indent=2, sort_keys=True))
    return 0


def cmd_cadence(args) -> int:
    cfg = dataio.load_config(CadenceConfig, args.config)
    rows = run_cadence(cfg, args.out_dir)
    for r in rows:
        print(f"{r.eval_set}\t{'ft' if r.finetuned else 'raw'}\t{r.step}\t{r.score:.4f}\t{r.delta_pct:+.1f}%")
    return 0


def cmd_grid(args) -> int:
    base = dataio.load_config(PipelineConfig, args.config)
    if args.seed is not None:
        base = dataclasses.replace(base, seed=args.seed)
    text = args.axes if args.axes.lstrip().startswith("{") else Path(args.axes).read_text(encoding="utf-8")
    axes = json.loads(text)
    rows = grid_experiment(base, axes, args.out_dir)
    failed = sum(r.error is not None for r in rows)
    print(f"{len(rows)} cell(s), {failed} failed; results in {Path(args.out_dir) / 'grid.json'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contrastkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.set_defaults(func=fn)
        return sp

    sp = add("filter", cmd_filter, "consistency-filter query/document pairs")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--query-emb", required=True)
    sp.add_argument("--doc-emb", required=True)
    sp.add_argument("--shard-size", type=int)
    sp.add_argument("--rank-cutoff", type=int)
    sp.add_argument("--out-kept", required=True)
    sp.add_argument("--out-report", required=True)

    sp = add("mine", cmd_mine, "mine hard negatives with a teacher")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--teacher-query-emb", required=True)
    sp.add_argument("--teacher-doc-emb", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--negatives", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--fallback", choices=["error", "random_fill"])
    sp.add_argument("--out", required=True)

    sp = add("order", cmd_order, "order triplets by a curriculum")
    sp.add_argument("--triplets", required=True)
    sp.add_argument("--strategy", default="random",
                    choices=["random", "margin", "avg", "min", "avg_negative_score", "min_negative_score"])
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a projection head")
    sp.add_argument("--mode", choices=["in_batch", "finetune", "explicit_negatives"], default="in_batch")
    sp.add_argument("--query-emb", required=True)
    sp.add_argument("--doc-emb", required=True)
    sp.add_argument("--data", required=True, help="pairs (in_batch) or triplets (finetune) JSONL")
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--init", help="checkpoint or training output directory to initialize the head from")
    sp.add_argument("--resume", help="checkpoint or training output directory to resume training from")
    sp.add_argument("--out-dir", required=True)

    sp = add("run", cmd_run, "retrieve top-k and write a TREC run")
    sp.add_argument("--query-emb", required=True)
    sp.add_argument("--doc-emb", required=True)
    sp.add_argument("--head", help="checkpoint or training output directory (identity if omitted)")
    sp.add_argument("--truncate", type=int)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--tag", default="contrastkit")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "nDCG@k of a TREC run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--qrels", required=True)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--subsets", help="TSV of query_id<TAB>subset")
    sp.add_argument("--out", required=True)

    sp = add("quantize", cmd_quantize, "int8-quantize an embedding file")
    sp.add_argument("--emb", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--queries", help="query EMBX for a recall@k comparison")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--report")

    sp = add("pipeline", cmd_pipeline, "filter -> mine -> pretrain -> finetune -> eval")
    sp.add_argument("--out-dir", required=True)

    sp = add("cadence", cmd_cadence, "checkpoint-cadence evaluation")
    sp.add_argument("--out-dir", required=True)

    sp = add("grid", cmd_grid, "cartesian grid of pipeline runs")
    sp.add_argument("--axes", required=True, help='JSON object inline, e.g. {"mining.threshold_pct": [0.95, 1.0]}, or a path to one')
    sp.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.command in ("pipeline", "cadence", "grid") and not args.config:
        print(f"contrastkit {args.command}: --config is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ContrastKitError, OSError) as exc:
        print(f"contrastkit {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
