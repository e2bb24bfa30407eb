"""Dense-vector kernels: normalization, cosine similarity, prefix truncation,
exact top-k search and int8 scalar quantization, plus the EMBX file format.

All similarity arithmetic is carried out in float64 and every ranking is
ordered by ``(-score, id)`` so repeated calls give bit-identical results.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import BadDim, DimMismatch, FormatError, ZeroVector

ZERO_NORM = 1e-12
UNIT_TOL = 1e-5


# ---------------------------------------------------------------------------
# Matrix containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row-major float32 vectors keyed by unique string ids."""

    data: np.ndarray
    ids: tuple[str, ...]
    normalized: bool = False

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise DimMismatch(f"expected a 2-d array, got shape {data.shape}")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != data.shape[0]:
            raise DimMismatch(f"{len(ids)} ids for {data.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise ValueError("ids must be unique")
        if data.shape[1] < 1:
            raise BadDim("dim must be positive")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding data contains NaN or Inf")
        if self.normalized and data.shape[0]:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            if np.max(np.abs(norms - 1.0)) > UNIT_TOL:
                raise ValueError("normalized flag set but rows are not unit-norm")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @cached_property
    def index(self) -> dict[str, int]:
        return {ident: i for i, ident in enumerate(self.ids)}

    @cached_property
    def id_order(self) -> np.ndarray:
        """Position of each row's id in ascending id order (tie-break key)."""
        order = np.empty(self.rows, dtype=np.int64)
        order[np.argsort(np.asarray(self.ids, dtype=object), kind="stable")] = np.arange(self.rows)
        return order

    def rows_for(self, ids: Sequence[str]) -> np.ndarray:
        """Row indices for ``ids``; raises ``MissingVector`` on an unknown id."""
        from .errors import MissingVector

        index = self.index
        try:
            return np.fromiter((index[i] for i in ids), dtype=np.int64, count=len(ids))
        except KeyError as exc:
            raise MissingVector(exc.args[0]) from None

    def vector(self, ident: str) -> np.ndarray:
        return self.data[self.rows_for([ident])[0]]

    def __len__(self) -> int:
        return self.rows

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    data: np.ndarray
    ids: tuple[str, ...]
    scale: float
    normalized: bool = False

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.int8)
        if data.ndim != 2:
            raise DimMismatch(f"expected a 2-d array, got shape {data.shape}")
        if len(self.ids) != data.shape[0]:
            raise DimMismatch(f"{len(self.ids)} ids for {data.shape[0]} rows")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ScoredList:
    """Ranked (id, score) entries, descending score, ties by ascending id."""

    ids: tuple[str, ...]
    scores: np.ndarray = field(repr=False)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.ids) != scores.shape[0]:
            raise DimMismatch("ids and scores differ in length")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[str, float]]) -> "ScoredList":
        ordered = sorted(entries, key=lambda e: (-e[1], e[0]))
        return cls(tuple(e[0] for e in ordered), np.array([e[1] for e in ordered], dtype=np.float64))

    @property
    def entries(self) -> list[tuple[str, float]]:
        return [(i, float(s)) for i, s in zip(self.ids, self.scores)]

    def is_valid(self) -> bool:
        if len(set(self.ids)) != len(self.ids):
            return False
        keys = list(zip((-self.scores).tolist(), self.ids))
        return all(a < b for a, b in zip(keys, keys[1:]))

    def score_of(self, ident: str) -> float | None:
        try:
            return float(self.scores[self.ids.index(ident)])
        except ValueError:
            return None

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[str, float]]:
        return iter(self.entries)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def _unit_rows(data: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroVector(ids[bad[0]])
    return x / norms[:, None]


def normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    return EmbeddingMatrix(_unit_rows(m.data, m.ids), m.ids, normalized=True)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM:
        raise ZeroVector("a")
    if nb < ZERO_NORM:
        raise ZeroVector("b")
    return float(np.dot(a, b) / (na * nb))


def truncate(m: EmbeddingMatrix, d: int, renormalize: bool = True) -> EmbeddingMatrix:
    """Keep the first ``d`` components of every row (a Matryoshka prefix)."""
    if not 1 <= d <= m.dim:
        raise BadDim(f"truncation dim {d} outside [1, {m.dim}]")
    prefix = m.data[:, :d]
    if renormalize:
        return EmbeddingMatrix(_unit_rows(prefix, m.ids), m.ids, normalized=True)
    return EmbeddingMatrix(prefix, m.ids, normalized=m.normalized and d == m.dim)


def similarities(queries: np.ndarray, m: EmbeddingMatrix) -> np.ndarray:
    """float64 dot products, shape (n_queries, m.rows)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != m.dim:
        raise DimMismatch(f"query dim {q.shape[1]} vs matrix dim {m.dim}")
    d = m.data.astype(np.float64)
    # one matvec per query: a query's scores never depend on its batch-mates
    out = np.empty((q.shape[0], m.rows), dtype=np.float64)
    for i, row in enumerate(q):
        out[i] = d @ row
    return out


def _rank_rows(scores: np.ndarray, id_order: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best entries of each score row under (-score, id)."""
    n = scores.shape[1]
    k = min(k, n)
    out = np.empty((scores.shape[0], k), dtype=np.int64)
    for r, row in enumerate(scores):
        if k < n:
            # everything tied with the k-th value must compete on id
            kth = np.partition(row, n - k)[n - k]
            cand = np.flatnonzero(row >= kth)
        else:
            cand = np.arange(n)
        order = np.lexsort((id_order[cand], -row[cand]))
        out[r] = cand[order[:k]]
    return out


def topk_batch(queries: np.ndarray, m: EmbeddingMatrix, k: int) -> list[ScoredList]:
    if k < 1:
        raise BadDim("k must be positive")
    scores = similarities(queries, m)
    if m.rows == 0:
        return [ScoredList((), np.empty(0)) for _ in range(scores.shape[0])]
    idx = _rank_rows(scores, m.id_order, k)
    return [
        ScoredList(tuple(m.ids[j] for j in row), scores[r, row])
        for r, row in enumerate(idx)
    ]


def topk(q, m: EmbeddingMatrix, k: int) -> ScoredList:
    """Exact top-k by dot product; for unit rows this is cosine similarity."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise DimMismatch("topk expects a single query vector")
    return topk_batch(q[None, :], m, k)[0]


# ---------------------------------------------------------------------------
# Scalar quantization
# ---------------------------------------------------------------------------

def quantize_i8(m: EmbeddingMatrix) -> QuantizedMatrix:
    x = m.data.astype(np.float64)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    codes = np.clip(np.rint(x / scale), -127, 127).astype(np.int8)
    return QuantizedMatrix(codes, m.ids, scale, normalized=m.normalized)


def dequantize(q: QuantizedMatrix) -> EmbeddingMatrix:
    # flag dropped: reconstructed rows are only approximately unit-norm
    return EmbeddingMatrix(q.data.astype(np.float64) * q.scale, q.ids, normalized=False)


# ---------------------------------------------------------------------------
# EMBX binary format
# ---------------------------------------------------------------------------

MAGIC = b"EMBX"
VERSION = 1
DTYPE_F32 = 1
DTYPE_I8 = 2
_HEADER = struct.Struct("<4sIBBIQf")


def ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def write_embx(m: EmbeddingMatrix | QuantizedMatrix, path) -> None:
    """Write ``m`` to ``path`` and its ids to the ``<path>.ids`` sidecar."""
    path = Path(path)
    if isinstance(m, QuantizedMatrix):
        dtype, scale, payload = DTYPE_I8, m.scale, m.data.astype("<i1")
    else:
        dtype, scale, payload = DTYPE_F32, 1.0, m.data.astype("<f4")
    header = _HEADER.pack(MAGIC, VERSION, dtype, int(m.normalized), m.dim, m.rows, scale)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="C"))
    for ident in m.ids:
        if not ident or any(c in ident for c in "\r\n"):
            raise FormatError(f"id {ident!r} cannot be stored in a newline-delimited sidecar")
    with open(ids_path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(f"{i}\n" for i in m.ids))


def read_embx(path) -> EmbeddingMatrix | QuantizedMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dtype, flag, dim, rows, scale = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    width = {DTYPE_F32: 4, DTYPE_I8: 1}.get(dtype)
    if width is None:
        raise FormatError(f"{path}: unknown dtype code {dtype}")
    body = raw[_HEADER.size:]
    if len(body) != rows * dim * width:
        raise FormatError(f"{path}: expected {rows * dim * width} data bytes, found {len(body)}")
    ids = ids_path(path).read_text(encoding="utf-8").splitlines()
    if len(ids) != rows:
        raise FormatError(f"{path}: sidecar has {len(ids)} ids for {rows} rows")
    if dtype == DTYPE_I8:
        data = np.frombuffer(body, dtype="<i1").reshape(rows, dim)
        return QuantizedMatrix(data, tuple(ids), float(scale), normalized=bool(flag))
    data = np.frombuffer(body, dtype="<f4").reshape(rows, dim)
    return EmbeddingMatrix(data, tuple(ids), normalized=bool(flag))


def read_embedding_matrix(path) -> EmbeddingMatrix:
    """Read an EMBX file, dequantizing int8 payloads."""
    m = read_embx(path)
    return dequantize(m) if isinstance(m, QuantizedMatrix) else m
