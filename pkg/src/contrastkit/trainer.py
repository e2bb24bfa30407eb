"""Contrastive training of a linear projection head over frozen embeddings.

The objective is InfoNCE with temperature, summed over Matryoshka prefix
dimensions (each prefix renormalized before scoring). Gradients are derived
by hand and pushed back through renormalization, truncation and the head.
Training runs in float64; checkpoints keep exact state so an interrupted run
resumes bit-identically.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corevec import EmbeddingMatrix, write_embx
from .dataio import PairRecord, TripletRecord, config_to_dict
from .errors import (
    BadPositiveIndex,
    DimMismatch,
    EmptyDataset,
    NonFiniteLoss,
    StepOutOfRange,
    ZeroVector,
)

log = logging.getLogger(__name__)

MODES = ("in_batch", "explicit_negatives")
OPTIMIZERS = ("adamw", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    """Loss, schedule, sampler and optimizer settings.

    ``total_steps=None`` means ``epochs`` full passes over the batch plan.
    ``mrl_dims=None`` means a single full-width loss.
    """

    temperature: float = 0.02
    mrl_dims: tuple[int, ...] | None = None
    out_dim: int | None = None
    mode: str = "in_batch"
    batch_size: int = 32
    peak_lr: float = 1e-3
    total_steps: int | None = None
    warmup_steps: int = 0
    decay_steps: int = 0
    epochs: int = 1
    seed: int = 0
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    in_batch_negatives: bool = False
    preserve_order: bool = False
    bias: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if self.warmup_steps < 0 or self.decay_steps < 0:
            raise ValueError("warmup_steps and decay_steps must be non-negative")
        if self.total_steps is not None:
            if self.total_steps < 0:
                raise ValueError("total_steps must be non-negative")
            if self.warmup_steps + self.decay_steps > self.total_steps:
                raise ValueError("warmup_steps + decay_steps exceeds total_steps")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mrl_dims is not None:
            dims = tuple(int(d) for d in self.mrl_dims)
            if not dims or any(d < 1 for d in dims) or any(b <= a for a, b in zip(dims, dims[1:])):
                raise ValueError("mrl_dims must be strictly increasing positive integers")
            if self.out_dim is not None and dims[-1] != self.out_dim:
                raise ValueError("mrl_dims must end at out_dim")
            object.__setattr__(self, "mrl_dims", dims)

    def dims_for(self, out_dim: int) -> tuple[int, ...]:
        dims = self.mrl_dims or (out_dim,)
        if dims[-1] != out_dim:
            raise DimMismatch(f"mrl_dims {dims} must end at head output dim {out_dim}")
        return dims

    def digest(self) -> str:
        blob = json.dumps(config_to_dict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def infonce(sims, positive_index, temperature: float, mask=None) -> tuple[float, np.ndarray]:
    """Mean InfoNCE over query rows and its gradient w.r.t. ``sims``.

    ``mask`` (bool, same shape) marks which candidates each query competes
    against; masked-out entries get zero probability and zero gradient.
    """
    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 2:
        raise DimMismatch("sims must be a (queries, candidates) matrix")
    pos = np.asarray(positive_index, dtype=np.int64).ravel()
    n, k = s.shape
    if pos.shape[0] != n:
        raise BadPositiveIndex(f"{pos.shape[0]} positive indices for {n} queries")
    if np.any(pos < 0) or np.any(pos >= k):
        raise BadPositiveIndex(f"positive index outside [0, {k})")
    logits = s / temperature
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask[np.arange(n), pos].all():
            raise BadPositiveIndex("positive candidate is masked out")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    denom = expo.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(denom) - shifted[rows, pos]))
    grad = expo / denom[:, None]
    grad[rows, pos] -= 1.0
    grad /= temperature * n
    return loss, grad


def _unit_prefix(x: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    prefix = x[:, :d]
    norms = np.linalg.norm(prefix, axis=1)
    # an overflowing norm would silently zero the row; surface it as NaN instead
    norms = np.where(np.isfinite(norms), norms, np.nan)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise ZeroVector(f"row {bad[0]} (prefix {d})")
    return prefix / norms[:, None], norms


def mrl_infonce(
    queries,
    candidates,
    positive_index,
    mrl_dims: Sequence[int],
    temperature: float,
    mask=None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Sum of InfoNCE losses over renormalized prefixes of each dim in ``mrl_dims``.

    Returns ``(loss, grad_queries, grad_candidates)`` w.r.t. the unnormalized
    projected vectors.
    """
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if q.shape[1] != c.shape[1]:
        raise DimMismatch("query and candidate widths differ")
    gq = np.zeros_like(q)
    gc = np.zeros_like(c)
    total = 0.0
    for d in mrl_dims:
        if not 1 <= d <= q.shape[1]:
            raise DimMismatch(f"MRL dim {d} outside [1, {q.shape[1]}]")
        qn, qnorm = _unit_prefix(q, d)
        cn, cnorm = _unit_prefix(c, d)
        loss, g = infonce(qn @ cn.T, positive_index, temperature, mask)
        total += loss
        g_qn = g @ cn
        g_cn = g.T @ qn
        # d(x/|x|)/dx applied to the upstream gradient
        gq[:, :d] += (g_qn - qn * np.sum(g_qn * qn, axis=1, keepdims=True)) / qnorm[:, None]
        gc[:, :d] += (g_cn - cn * np.sum(g_cn * cn, axis=1, keepdims=True)) / cnorm[:, None]
    return total, gq, gc


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def wsd_lr(step: int, peak_lr: float, total_steps: int, warmup_steps: int = 0, decay_steps: int = 0) -> float:
    """Warmup-stable-decay: linear ramp up, flat, linear ramp to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return peak_lr * step / warmup_steps
    decay_start = total_steps - decay_steps
    if decay_steps and step > decay_start:
        return peak_lr * (total_steps - step) / decay_steps
    return peak_lr


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class BatchPlan:
    batches: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def per_source(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for src, _ in self.batches:
            counts[src] = counts.get(src, 0) + 1
        return counts


def plan_batches(sources: Sequence[str], batch_size: int, seed: int, shuffle: bool = True) -> BatchPlan:
    """Single-source mini-batches; each source's partial tail batch is dropped.

    With ``shuffle=False`` examples keep their given order inside each source
    and batches are emitted in order of their first example (curriculum use).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(sources) == 0:
        raise EmptyDataset("no examples to batch")
    rng = np.random.default_rng(seed)
    by_source: dict[str, list[int]] = {}
    for i, src in enumerate(sources):
        by_source.setdefault(src, []).append(i)
    batches = []
    for src in sorted(by_source):
        idx = np.asarray(by_source[src], dtype=np.int64)
        if shuffle:
            idx = rng.permutation(idx)
        for b in range(len(idx) // batch_size):
            batches.append((src, idx[b * batch_size:(b + 1) * batch_size]))
    if shuffle:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    else:
        batches.sort(key=lambda b: int(b[1][0]))
    return BatchPlan(batches)


# ---------------------------------------------------------------------------
# Model and optimizer
# ---------------------------------------------------------------------------

@dataclass
class ProjectionHead:
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise DimMismatch("weight must be (out_dim, in_dim)")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64).ravel()
            if self.bias.shape[0] != self.out_dim:
                raise DimMismatch("bias length must equal out_dim")
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("non-finite head weights")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, seed: int = 0, bias: bool = False) -> "ProjectionHead":
        if in_dim == out_dim:
            w = np.eye(in_dim)
        else:
            bound = 1.0 / np.sqrt(in_dim)
            w = np.random.default_rng(seed).uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim) if bias else None)

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DimMismatch(f"input dim {x.shape[-1]} vs head in_dim {self.in_dim}")
        out = x @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        return out

    def apply(self, m: EmbeddingMatrix) -> EmbeddingMatrix:
        return EmbeddingMatrix(self.project(m.data), m.ids)

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.weight.copy(), None if self.bias is None else self.bias.copy())


class Optimizer:
    """AdamW (decoupled weight decay, bias left undecayed) or plain SGD."""

    def __init__(self, cfg: TrainConfig, head: ProjectionHead):
        self.kind = cfg.optimizer
        self.beta1, self.beta2, self.eps, self.wd = cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay
        self.t = 0
        self.m = {"weight": np.zeros_like(head.weight)}
        self.v = {"weight": np.zeros_like(head.weight)}
        if head.bias is not None:
            self.m["bias"] = np.zeros_like(head.bias)
            self.v["bias"] = np.zeros_like(head.bias)

    def step(self, head: ProjectionHead, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for name, g in grads.items():
            p = getattr(head, name)
            if self.kind == "sgd":
                p -= lr * g
                continue
            if name == "weight" and self.wd:
                p -= lr * self.wd * p
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Objective through the head
# ---------------------------------------------------------------------------

def head_objective(
    head: ProjectionHead,
    q_base,
    c_base,
    positive_index,
    mrl_dims: Sequence[int],
    temperature: float,
    mask=None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for one batch; queries and candidates share the head."""
    q_base = np.asarray(q_base, dtype=np.float64)
    c_base = np.asarray(c_base, dtype=np.float64)
    loss, gq, gc = mrl_infonce(head.project(q_base), head.project(c_base), positive_index, mrl_dims, temperature, mask)
    grads = {"weight": gq.T @ q_base + gc.T @ c_base}
    if head.bias is not None:
        grads["bias"] = gq.sum(axis=0) + gc.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    step: int
    head: ProjectionHead
    opt_t: int
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    rng_state: dict
    epoch: int
    batch_in_epoch: int
    epoch_seed: int
    config_hash: str

    def save(self, directory) -> Path:
        """Directory with ``head.embx`` (float32 interchange copy), one ``.npy``
        per exact float64 array (parameters and moments) and ``state.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ids = tuple(f"out{i}" for i in range(self.head.out_dim))
        write_embx(EmbeddingMatrix(self.head.weight, ids), directory / "head.embx")
        arrays = {"weight": self.head.weight}
        if self.head.bias is not None:
            arrays["bias"] = self.head.bias
        for name in self.opt_m:
            arrays[f"m_{name}"] = self.opt_m[name]
            arrays[f"v_{name}"] = self.opt_v[name]
        for name, arr in arrays.items():
            # .npy rather than .npz: zip members carry wall-clock timestamps
            np.save(directory / f"{name}.npy", arr, allow_pickle=False)
        state = {
            "step": self.step,
            "opt_t": self.opt_t,
            "rng_state": self.rng_state,
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "epoch_seed": self.epoch_seed,
            "config_hash": self.config_hash,
        }
        (directory / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        state = json.loads((directory / "state.json").read_text(encoding="utf-8"))
        arrays = {p.stem: np.load(p, allow_pickle=False) for p in sorted(directory.glob("*.npy"))}
        head = ProjectionHead(arrays["weight"], arrays.get("bias"))
        names = [k[2:] for k in arrays if k.startswith("m_")]
        return cls(
            step=state["step"],
            head=head,
            opt_t=state["opt_t"],
            opt_m={n: arrays[f"m_{n}"] for n in names},
            opt_v={n: arrays[f"v_{n}"] for n in names},
            rng_state=state["rng_state"],
            epoch=state["epoch"],
            batch_in_epoch=state["batch_in_epoch"],
            epoch_seed=state["epoch_seed"],
            config_hash=state["config_hash"],
        )


def load_head(directory) -> ProjectionHead:
    return Checkpoint.load(directory).head


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    head: ProjectionHead
    checkpoints: list[Checkpoint]
    loss_trace: list[tuple[int, float, float]]
    total_steps: int

    def write_trace(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "lr", "loss"])
            for step, lr, loss in self.loss_trace:
                writer.writerow([step, repr(lr), repr(loss)])


class _Examples:
    """Vectors and batch assembly for either training mode."""

    def __init__(self, query_emb, doc_emb, data, cfg: TrainConfig):
        self.cfg = cfg
        self.qv = query_emb.data.astype(np.float64)
        self.dv = doc_emb.data.astype(np.float64)
        if cfg.mode == "in_batch":
            if any(not isinstance(r, PairRecord) for r in data):
                raise TypeError("in_batch mode trains on PairRecord data")
            self.q_rows = query_emb.rows_for([r.query_id for r in data])
            self.d_rows = doc_emb.rows_for([r.doc_id for r in data])
            self.sources = [r.batch_source for r in data]
        else:
            if any(not isinstance(r, TripletRecord) for r in data):
                raise TypeError("explicit_negatives mode trains on TripletRecord data")
            widths = {len(r.negative_ids) for r in data}
            if len(widths) > 1:
                raise ValueError(f"triplets carry differing negative counts {sorted(widths)}")
            self.q_rows = query_emb.rows_for([r.query_id for r in data])
            self.d_rows = np.stack([
                doc_emb.rows_for((r.positive_id,) + r.negative_ids) for r in data
            ]) if data else np.empty((0, 1), dtype=np.int64)
            self.sources = ["finetune"] * len(data)

    def batch(self, idx: np.ndarray):
        q = self.qv[self.q_rows[idx]]
        if self.cfg.mode == "in_batch":
            c = self.dv[self.d_rows[idx]]
            return q, c, np.arange(len(idx)), None
        groups = self.d_rows[idx]
        b, width = groups.shape
        c = self.dv[groups.reshape(-1)]
        pos = np.arange(b) * width
        if self.cfg.in_batch_negatives:
            return q, c, pos, None
        mask = np.zeros((b, b * width), dtype=bool)
        for i in range(b):
            mask[i, i * width:(i + 1) * width] = True
        return q, c, pos, mask


def train(
    query_emb: EmbeddingMatrix,
    doc_emb: EmbeddingMatrix,
    data: Sequence[PairRecord] | Sequence[TripletRecord],
    cfg: TrainConfig,
    head: ProjectionHead | None = None,
    checkpoint_every: int = 0,
    checkpoint_steps: Iterable[int] = (),
    resume: Checkpoint | None = None,
    checkpoint_dir=None,
    final_checkpoint: bool = False,
) -> TrainResult:
    """Train a projection head; checkpoints are taken after the listed steps.

    ``head`` defaults to ``ProjectionHead.init(in_dim, cfg.out_dim or in_dim)``.
    When ``resume`` is given, training continues from that checkpoint and the
    returned trace and checkpoints cover only the remaining steps.
    """
    if query_emb.dim != doc_emb.dim:
        raise DimMismatch("query and document base embeddings differ in dim")
    examples = _Examples(query_emb, doc_emb, data, cfg)
    shuffle = not cfg.preserve_order

    if resume is not None:
        head = resume.head.copy()
    elif head is None:
        head = ProjectionHead.init(query_emb.dim, cfg.out_dim or query_emb.dim, seed=cfg.seed, bias=cfg.bias)
    else:
        head = head.copy()
        if cfg.bias and head.bias is None:
            head.bias = np.zeros(head.out_dim)
    if head.in_dim != query_emb.dim:
        raise DimMismatch(f"head in_dim {head.in_dim} vs base dim {query_emb.dim}")
    dims = cfg.dims_for(head.out_dim)

    rng = np.random.default_rng(cfg.seed)
    if len(data) == 0:
        raise EmptyDataset("no training examples")
    probe = plan_batches(examples.sources, cfg.batch_size, 0, shuffle=False)
    per_epoch = len(probe)
    total = cfg.total_steps if cfg.total_steps is not None else cfg.epochs * per_epoch
    if total > 0 and per_epoch == 0:
        raise EmptyDataset(f"no source has a full batch of {cfg.batch_size}")
    if cfg.warmup_steps + cfg.decay_steps > total:
        raise ValueError("warmup_steps + decay_steps exceeds total steps")

    opt = Optimizer(cfg, head)
    if resume is None:
        step, epoch, pos = 0, 0, 0
        epoch_seed = int(rng.integers(2**63))
    else:
        if resume.config_hash != cfg.digest():
            raise ValueError("checkpoint was produced under a different TrainConfig")
        step, epoch, pos, epoch_seed = resume.step, resume.epoch, resume.batch_in_epoch, resume.epoch_seed
        opt.t = resume.opt_t
        opt.m = {k: v.copy() for k, v in resume.opt_m.items()}
        opt.v = {k: v.copy() for k, v in resume.opt_v.items()}
        rng.bit_generator.state = resume.rng_state
    plan = plan_batches(examples.sources, cfg.batch_size, epoch_seed, shuffle=shuffle)

    wanted = set(int(s) for s in checkpoint_steps)
    if checkpoint_every:
        wanted.update(range(checkpoint_every, total + 1, checkpoint_every))
    checkpoints: list[Checkpoint] = []
    trace: list[tuple[int, float, float]] = []

    def snapshot() -> Checkpoint:
        ck = Checkpoint(
            step=step,
            head=head.copy(),
            opt_t=opt.t,
            opt_m={k: v.copy() for k, v in opt.m.items()},
            opt_v={k: v.copy() for k, v in opt.v.items()},
            rng_state=rng.bit_generator.state,
            epoch=epoch,
            batch_in_epoch=pos,
            epoch_seed=epoch_seed,
            config_hash=cfg.digest(),
        )
        if checkpoint_dir is not None:
            ck.save(Path(checkpoint_dir) / f"step_{step:08d}")
        return ck

    if 0 in wanted and resume is None:
        checkpoints.append(snapshot())

    while step < total:
        if pos >= len(plan):
            epoch += 1
            epoch_seed = int(rng.integers(2**63))
            pos = 0
            plan = plan_batches(examples.sources, cfg.batch_size, epoch_seed, shuffle=shuffle)
        _, idx = plan.batches[pos]
        q, c, pos_idx, mask = examples.batch(idx)
        lr = wsd_lr(step, cfg.peak_lr, total, cfg.warmup_steps, cfg.decay_steps)
        loss, grads = head_objective(head, q, c, pos_idx, dims, cfg.temperature, mask)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLoss(step, loss, {"lr": lr, "epoch": epoch, "batch": pos,
                                             "weight_norm": float(np.linalg.norm(head.weight))})
        opt.step(head, grads, lr)
        trace.append((step, lr, loss))
        step += 1
        pos += 1
        if step in wanted:
            checkpoints.append(snapshot())
    if final_checkpoint and not (checkpoints and checkpoints[-1].step == step):
        checkpoints.append(snapshot())
    log.debug("trained %d steps (%d per epoch)", total, per_epoch)
    return TrainResult(head, checkpoints, trace, total)
