"""End-to-end pipeline runner and experiment harness.

``run_pipeline`` chains filter -> mine -> pretrain -> finetune -> eval and
writes a manifest of config hash, per-stage file digests and metrics. The
manifest holds no timestamps or absolute output paths, so identical inputs
give a byte-identical manifest.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import dataio
from .consistency_filter import FilterConfig, filter_pairs
from .corevec import EmbeddingMatrix, normalize, read_embedding_matrix
from .dataio import Qrels, config_from_dict, config_to_dict
from .errors import ConfigError, MissingCheckpoint, StageError
from .evalkit import generate_run, ndcg_at_k, retention
from .negative_mining import STRATEGIES, MiningConfig, mine_pairs, order_dataset
from .trainer import ProjectionHead, TrainConfig, train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Config types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    truncate_dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        object.__setattr__(self, "truncate_dims", tuple(int(d) for d in self.truncate_dims))


@dataclass(frozen=True)
class PathsConfig:
    """Input locations. Optional embeddings fall back as follows:
    teacher -> base, filter -> teacher, eval -> base."""

    pretrain_pairs: str
    finetune_pairs: str
    query_emb: str
    doc_emb: str
    qrels: str
    teacher_query_emb: str | None = None
    teacher_doc_emb: str | None = None
    filter_query_emb: str | None = None
    filter_doc_emb: str | None = None
    eval_query_emb: str | None = None
    eval_doc_emb: str | None = None
    subsets: str | None = None

    def resolved(self) -> dict[str, str]:
        tq = self.teacher_query_emb or self.query_emb
        td = self.teacher_doc_emb or self.doc_emb
        out = {
            "pretrain_pairs": self.pretrain_pairs,
            "finetune_pairs": self.finetune_pairs,
            "query_emb": self.query_emb,
            "doc_emb": self.doc_emb,
            "qrels": self.qrels,
            "teacher_query_emb": tq,
            "teacher_doc_emb": td,
            "filter_query_emb": self.filter_query_emb or tq,
            "filter_doc_emb": self.filter_doc_emb or td,
            "eval_query_emb": self.eval_query_emb or self.query_emb,
            "eval_doc_emb": self.eval_doc_emb or self.doc_emb,
        }
        if self.subsets:
            out["subsets"] = self.subsets
        return out


def _default_finetune() -> TrainConfig:
    return TrainConfig(mode="explicit_negatives")


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig
    filter: FilterConfig = field(default_factory=FilterConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=_default_finetune)
    eval: EvalConfig = field(default_factory=EvalConfig)
    curriculum: str = "random"
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.pretrain.mode != "in_batch":
            raise ValueError("pretrain stage must use mode 'in_batch'")
        if self.finetune.mode != "explicit_negatives":
            raise ValueError("finetune stage must use mode 'explicit_negatives'")
        if self.curriculum not in STRATEGIES and self.curriculum not in ("avg", "min"):
            raise ValueError(f"unknown curriculum {self.curriculum!r}")

    def to_dict(self, include_out_dir: bool = False) -> dict:
        d = config_to_dict(self)
        if not include_out_dir:
            d.pop("out_dir", None)
        return d

    def digest(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()).encode())


def load_pipeline_config(path) -> PipelineConfig:
    return dataio.load_config(PipelineConfig, path)


# ---------------------------------------------------------------------------
# Hashing helpers
# ---------------------------------------------------------------------------

def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digests(root: Path, base: Path) -> dict[str, str]:
    """Digest of every file under ``root`` keyed by its path relative to ``base``."""
    root = Path(root)
    if root.is_file():
        return {root.relative_to(base).as_posix(): file_digest(root)}
    return {
        p.relative_to(base).as_posix(): file_digest(p)
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def derive_seed(seed: int, *labels: Any) -> int:
    blob = json.dumps([int(seed), *labels], sort_keys=True, default=str)
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "little") & ((1 << 63) - 1)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def validate(cfg: PipelineConfig, out_dir) -> None:
    """Reject missing inputs and input/output collisions before any stage runs."""
    if out_dir is None:
        raise ConfigError("no output directory given")
    paths = cfg.paths.resolved()
    missing = [f"{name}={p}" for name, p in paths.items() if not Path(p).is_file()]
    for name, p in paths.items():
        if p.endswith(".embx") and Path(p).is_file() and not Path(p + ".ids").is_file():
            missing.append(f"{name} id sidecar {p}.ids")
    if missing:
        raise ConfigError("missing input file(s): " + ", ".join(missing))
    out = Path(out_dir).resolve()
    for name, p in paths.items():
        if Path(p).resolve().is_relative_to(out):
            raise ConfigError(f"input {name} lies inside the output directory {out}")


def _stage_seeds(cfg: PipelineConfig) -> PipelineConfig:
    return dataclasses.replace(
        cfg,
        filter=dataclasses.replace(cfg.filter, seed=derive_seed(cfg.seed, "filter")),
        mining=dataclasses.replace(cfg.mining, seed=derive_seed(cfg.seed, "mine")),
        pretrain=dataclasses.replace(cfg.pretrain, seed=derive_seed(cfg.seed, "pretrain")),
        finetune=dataclasses.replace(cfg.finetune, seed=derive_seed(cfg.seed, "finetune")),
    )


@dataclass
class PipelineResult:
    manifest: dict
    out_dir: Path
    metrics: dict
    heads: dict[str, ProjectionHead]


def _evaluate(name, head, queries, docs, qrels, ecfg: EvalConfig, out: Path, subsets) -> dict:
    run = generate_run(head, queries, docs, ecfg.k, tag=name)
    dataio.write_run(run, out / f"{name}.trec")
    full = ndcg_at_k(run, qrels, ecfg.k, subsets)
    metrics = {f"ndcg@{ecfg.k}": full.mean, "dropped_queries": full.dropped}
    if full.subsets:
        metrics["subsets"] = full.subsets
    for d in ecfg.truncate_dims:
        trun = generate_run(head, queries, docs, ecfg.k, truncate_dim=d, tag=f"{name}-t{d}")
        dataio.write_run(trun, out / f"{name}_t{d}.trec")
        res = ndcg_at_k(trun, qrels, ecfg.k, subsets)
        metrics[f"ndcg@{ecfg.k}_t{d}"] = res.mean
        metrics[f"retention_t{d}"] = retention(full, res)
    return metrics


def run_pipeline(cfg: PipelineConfig, out_dir=None) -> PipelineResult:
    out = Path(out_dir or cfg.out_dir or "")
    validate(cfg, out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = cfg.paths.resolved()
    scfg = _stage_seeds(cfg)

    manifest: dict = {
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "inputs": {name: file_digest(p) for name, p in sorted(paths.items())},
        "stages": {},
    }
    stage = "load"

    def record(name: str, outputs: list[Path], metrics: dict | None = None) -> None:
        entry = {"outputs": {}}
        for p in outputs:
            entry["outputs"].update(tree_digests(p, out))
        if metrics:
            entry["metrics"] = metrics
        manifest["stages"][name] = entry

    try:
        query_emb = read_embedding_matrix(paths["query_emb"])
        doc_emb = read_embedding_matrix(paths["doc_emb"])
        pre_pairs = dataio.read_pairs(paths["pretrain_pairs"])
        ft_pairs = dataio.read_pairs(paths["finetune_pairs"])
        qrels = dataio.read_qrels(paths["qrels"])
        subsets = dataio.read_subsets(paths["subsets"]) if "subsets" in paths else None

        stage = "filter"
        d = out / "filter"
        d.mkdir(exist_ok=True)
        kept, report = filter_pairs(
            pre_pairs,
            normalize(read_embedding_matrix(paths["filter_query_emb"])),
            normalize(read_embedding_matrix(paths["filter_doc_emb"])),
            scfg.filter,
        )
        dataio.write_pairs(kept, d / "kept.jsonl")
        (d / "report.json").write_text(canonical_json(report.to_json()), encoding="utf-8")
        record(stage, [d / "kept.jsonl", d / "report.json"], {"kept": report.kept, "dropped": report.dropped})

        stage = "mine"
        d = out / "mine"
        d.mkdir(exist_ok=True)
        triplets = mine_pairs(
            ft_pairs,
            normalize(read_embedding_matrix(paths["teacher_query_emb"])),
            normalize(read_embedding_matrix(paths["teacher_doc_emb"])),
            scfg.mining,
        )
        triplets = order_dataset(triplets, cfg.curriculum, derive_seed(cfg.seed, "order"))
        dataio.write_triplets(triplets, d / "triplets.jsonl")
        record(stage, [d / "triplets.jsonl"], {
            "triplets": len(triplets),
            "random_filled": sum(t.random_fill > 0 for t in triplets),
        })

        stage = "pretrain"
        d = out / "pretrain"
        init = ProjectionHead.init(query_emb.dim, scfg.pretrain.out_dim or query_emb.dim,
                                   seed=scfg.pretrain.seed, bias=scfg.pretrain.bias)
        pre = train(query_emb, doc_emb, kept, scfg.pretrain, head=init,
                    checkpoint_dir=d / "checkpoints", final_checkpoint=True)
        d.mkdir(exist_ok=True)
        pre.write_trace(d / "trace.csv")
        record(stage, [d], {"steps": pre.total_steps, "final_loss": _tail_loss(pre.loss_trace)})

        stage = "finetune"
        d = out / "finetune"
        ft_cfg = scfg.finetune
        if cfg.curriculum != "random":
            ft_cfg = dataclasses.replace(ft_cfg, preserve_order=True)
        ft = train(query_emb, doc_emb, triplets, ft_cfg, head=pre.head,
                   checkpoint_dir=d / "checkpoints", final_checkpoint=True)
        d.mkdir(exist_ok=True)
        ft.write_trace(d / "trace.csv")
        record(stage, [d], {"steps": ft.total_steps, "final_loss": _tail_loss(ft.loss_trace)})

        stage = "eval"
        d = out / "eval"
        d.mkdir(exist_ok=True)
        eq_all = read_embedding_matrix(paths["eval_query_emb"])
        ed = read_embedding_matrix(paths["eval_doc_emb"])
        qids = [q for q in sorted(qrels) if q in eq_all.index]
        if not qids:
            raise ConfigError("no qrels query has an evaluation vector")
        eq = EmbeddingMatrix(eq_all.data[eq_all.rows_for(qids)], tuple(qids))
        metrics = {
            "untrained": _evaluate("untrained", init, eq, ed, qrels, cfg.eval, d, subsets),
            "pretrained": _evaluate("pretrained", pre.head, eq, ed, qrels, cfg.eval, d, subsets),
            "finetuned": _evaluate("finetuned", ft.head, eq, ed, qrels, cfg.eval, d, subsets),
        }
        (d / "metrics.json").write_text(canonical_json(metrics), encoding="utf-8")
        record(stage, [d])
        manifest["metrics"] = metrics
    except Exception as exc:
        manifest["failed_stage"] = stage
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        (out / "manifest.json").write_text(canonical_json(manifest), encoding="utf-8")
        raise StageError(stage, exc, manifest) from exc

    (out / "manifest.json").write_text(canonical_json(manifest), encoding="utf-8")
    return PipelineResult(manifest, out, metrics, {"untrained": init, "pretrained": pre.head, "finetuned": ft.head})


def _tail_loss(trace, n: int = 10) -> float | None:
    if not trace:
        return None
    tail = [loss for _, _, loss in trace[-n:]]
    return math.fsum(tail) / len(tail)


# ---------------------------------------------------------------------------
# Checkpoint-cadence experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CadenceSpec:
    early_interval: int = 2000
    early_until: int = 10000
    late_interval: int = 10000
    finetune: tuple[bool, ...] = (False, True)
    reference_step: int = 8000

    def __post_init__(self):
        if min(self.early_interval, self.early_until, self.late_interval) < 1:
            raise ValueError("cadence intervals must be >= 1")
        if self.early_until < self.early_interval:
            raise ValueError("early_until must be >= early_interval")
        object.__setattr__(self, "finetune", tuple(bool(f) for f in self.finetune))


def cadence_steps(schedule: CadenceSpec, total_steps: int) -> list[int]:
    steps = list(range(schedule.early_interval, min(schedule.early_until, total_steps) + 1, schedule.early_interval))
    nxt = (schedule.early_until // schedule.late_interval + 1) * schedule.late_interval
    steps += list(range(nxt, total_steps + 1, schedule.late_interval))
    return sorted(set(steps))


def relative_delta(score: float, reference: float) -> float:
    """Percent change of ``score`` relative to ``reference``."""
    if reference == 0:
        from .errors import ZeroBaseline

        raise ZeroBaseline("reference score is zero")
    return 100.0 * (score - reference) / reference


@dataclass
class EvalSet:
    queries: EmbeddingMatrix
    docs: EmbeddingMatrix
    qrels: Qrels

    def restricted(self) -> EmbeddingMatrix:
        qids = [q for q in sorted(self.qrels) if q in self.queries.index]
        return EmbeddingMatrix(self.queries.data[self.queries.rows_for(qids)], tuple(qids))


@dataclass
class DeltaRow:
    step: int
    finetuned: bool
    eval_set: str
    score: float
    delta_pct: float


def cadence_experiment(
    query_emb: EmbeddingMatrix,
    doc_emb: EmbeddingMatrix,
    pretrain_data,
    finetune_data,
    eval_sets: Mapping[str, EvalSet],
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig,
    schedule: CadenceSpec = CadenceSpec(),
    k: int = 10,
) -> list[DeltaRow]:
    """Evaluate scheduled pretraining checkpoints raw and/or after finetuning.

    Deltas are percent changes against the same variant at ``reference_step``.
    """
    if pretrain_cfg.total_steps is None:
        raise ValueError("cadence experiment needs pretrain total_steps")
    steps = cadence_steps(schedule, pretrain_cfg.total_steps)
    if schedule.reference_step not in steps:
        raise MissingCheckpoint(f"reference step {schedule.reference_step} is not in the schedule {steps}")
    result = train(query_emb, doc_emb, pretrain_data, pretrain_cfg, checkpoint_steps=steps)
    by_step = {ck.step: ck.head for ck in result.checkpoints}
    missing = [s for s in steps if s not in by_step]
    if missing:
        raise MissingCheckpoint(f"no checkpoint for steps {missing}")

    scores: dict[tuple[int, bool, str], float] = {}
    for step in steps:
        for tuned in schedule.finetune:
            head = by_step[step]
            if tuned:
                head = train(query_emb, doc_emb, finetune_data, finetune_cfg, head=head).head
            for name in sorted(eval_sets):
                es = eval_sets[name]
                run = generate_run(head, es.restricted(), es.docs, k)
                scores[(step, tuned, name)] = ndcg_at_k(run, es.qrels, k).mean

    rows = []
    for (step, tuned, name), score in scores.items():
        ref = scores[(schedule.reference_step, tuned, name)]
        rows.append(DeltaRow(step, tuned, name, score, relative_delta(score, ref)))
    rows.sort(key=lambda r: (r.eval_set, r.finetuned, r.step))
    return rows


def write_delta_table(rows: Sequence[DeltaRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["eval_set", "finetuned", "step", "score", "delta_pct"])
        for r in rows:
            writer.writerow([r.eval_set, int(r.finetuned), r.step, repr(r.score), repr(r.delta_pct)])


@dataclass(frozen=True)
class EvalSetPaths:
    query_emb: str
    doc_emb: str
    qrels: str


@dataclass(frozen=True)
class CadenceConfig:
    """File-level description of a cadence run (used by the CLI)."""

    query_emb: str
    doc_emb: str
    pretrain_pairs: str
    finetune_triplets: str
    eval_sets: Mapping[str, Any]
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=_default_finetune)
    schedule: CadenceSpec = field(default_factory=CadenceSpec)
    k: int = 10

    def __post_init__(self):
        sets = {}
        for name, v in dict(self.eval_sets).items():
            sets[name] = v if isinstance(v, EvalSetPaths) else config_from_dict(EvalSetPaths, v)
        object.__setattr__(self, "eval_sets", sets)


def run_cadence(cfg: CadenceConfig, out_dir) -> list[DeltaRow]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sets = {
        name: EvalSet(read_embedding_matrix(p.query_emb), read_embedding_matrix(p.doc_emb), dataio.read_qrels(p.qrels))
        for name, p in cfg.eval_sets.items()
    }
    rows = cadence_experiment(
        read_embedding_matrix(cfg.query_emb),
        read_embedding_matrix(cfg.doc_emb),
        dataio.read_pairs(cfg.pretrain_pairs),
        dataio.read_triplets(cfg.finetune_triplets),
        sets,
        cfg.pretrain,
        cfg.finetune,
        cfg.schedule,
        cfg.k,
    )
    write_delta_table(rows, out / "cadence.csv")
    return rows


# ---------------------------------------------------------------------------
# Grid experiment
# ---------------------------------------------------------------------------

def apply_overrides(cfg, overrides: Mapping[str, Any]):
    """Return ``cfg`` with dotted-key overrides such as ``mining.threshold_pct`` applied."""
    for key, value in overrides.items():
        cfg = _replace_path(cfg, key.split("."), value)
    return cfg


def _replace_path(obj, parts: list[str], value):
    name = parts[0]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {name!r} on {type(obj).__name__}")
    if len(parts) == 1:
        if isinstance(value, list):
            value = tuple(value)
        return dataclasses.replace(obj, **{name: value})
    return dataclasses.replace(obj, **{name: _replace_path(getattr(obj, name), parts[1:], value)})


def cell_config(base: PipelineConfig, overrides: Mapping[str, Any]) -> PipelineConfig:
    """Config of one grid cell: overrides applied, seed derived from the axis values."""
    cfg = apply_overrides(base, overrides)
    labels = sorted((k, repr(v)) for k, v in overrides.items())
    return dataclasses.replace(cfg, seed=derive_seed(base.seed, "grid", labels))


def _slug(overrides: Mapping[str, Any]) -> str:
    text = "_".join(f"{k.split('.')[-1]}={v}" for k, v in overrides.items())
    return re.sub(r"[^A-Za-z0-9=._-]+", "-", text)[:80] or "base"


@dataclass
class GridRow:
    axes: dict[str, Any]
    metrics: dict | None
    error: str | None = None
    out_dir: str | None = None


def grid_experiment(base: PipelineConfig, axes: Mapping[str, Sequence[Any]], out_dir) -> list[GridRow]:
    """Run one pipeline per cell of the cartesian product of ``axes``.

    A failing cell is recorded with its error and the grid carries on.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(axes)
    rows = []
    for i, values in enumerate(itertools.product(*(axes[k] for k in keys))):
        overrides = dict(zip(keys, values))
        cell_dir = out / f"cell_{i:03d}_{_slug(overrides)}"
        try:
            res = run_pipeline(cell_config(base, overrides), cell_dir)
            rows.append(GridRow(overrides, res.metrics, None, cell_dir.name))
        except Exception as exc:
            log.warning("grid cell %s failed: %s", overrides, exc)
            rows.append(GridRow(overrides, None, f"{type(exc).__name__}: {exc}", cell_dir.name))
    write_grid(rows, out / "grid.json")
    return rows


def write_grid(rows: Sequence[GridRow], path) -> None:
    payload = [dataclasses.asdict(r) for r in rows]
    Path(path).write_text(canonical_json(payload), encoding="utf-8")
