"""Seeded synthetic retrieval fixtures.

Items belong to latent clusters. Each base vector is a random rotation of
``[cluster signal, high-variance nuisance]`` so that raw cosine retrieval is
mediocre and a trained projection head has something to learn. A fraction
of training pairs are deliberately mismatched to give the consistency filter
real noise to remove.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corevec import EmbeddingMatrix, write_embx
from .dataio import PairRecord, Qrels, write_pairs, write_qrels


@dataclass
class Fixture:
    query_emb: EmbeddingMatrix
    doc_emb: EmbeddingMatrix
    teacher_query_emb: EmbeddingMatrix
    teacher_doc_emb: EmbeddingMatrix
    pretrain_pairs: list[PairRecord]
    finetune_pairs: list[PairRecord]
    eval_query_ids: list[str]
    qrels: Qrels
    noisy_pairs: set[tuple[str, str]]

    def eval_queries(self) -> EmbeddingMatrix:
        rows = self.query_emb.rows_for(self.eval_query_ids)
        return EmbeddingMatrix(self.query_emb.data[rows], tuple(self.eval_query_ids))

    def write(self, directory) -> dict[str, Path]:
        """Write every artifact under ``directory``; returns the paths by name."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "query_emb": d / "queries.embx",
            "doc_emb": d / "docs.embx",
            "teacher_query_emb": d / "teacher_queries.embx",
            "teacher_doc_emb": d / "teacher_docs.embx",
            "pretrain_pairs": d / "pretrain_pairs.jsonl",
            "finetune_pairs": d / "finetune_pairs.jsonl",
            "qrels": d / "qrels.txt",
        }
        write_embx(self.query_emb, paths["query_emb"])
        write_embx(self.doc_emb, paths["doc_emb"])
        write_embx(self.teacher_query_emb, paths["teacher_query_emb"])
        write_embx(self.teacher_doc_emb, paths["teacher_doc_emb"])
        write_pairs(self.pretrain_pairs, paths["pretrain_pairs"])
        write_pairs(self.finetune_pairs, paths["finetune_pairs"])
        write_qrels(self.qrels, paths["qrels"])
        return paths


def _rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def make_fixture(
    n_clusters: int = 16,
    base_dim: int = 64,
    signal_dim: int = 16,
    sources: tuple[str, ...] = ("web", "news"),
    pairs_per_source: int = 2000,
    finetune_pairs: int = 400,
    eval_queries: int = 200,
    noise_frac: float = 0.2,
    cluster_spread: float = 0.6,
    pair_spread: float = 0.4,
    nuisance_scale: float = 1.0,
    langs: tuple[str, ...] | None = None,
    seed: int = 0,
) -> Fixture:
    if not 1 <= signal_dim < base_dim:
        raise ValueError("signal_dim must be in [1, base_dim)")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, signal_dim))
    rot = _rotation(rng, base_dim)
    teacher_rot = _rotation(rng, base_dim)
    nuis_dim = base_dim - signal_dim

    q_ids, q_sig, d_ids, d_sig, d_cluster = [], [], [], [], []

    def new_doc(ident: str, cluster: int) -> np.ndarray:
        sig = centers[cluster] + cluster_spread * rng.normal(size=signal_dim)
        d_ids.append(ident)
        d_sig.append(sig)
        d_cluster.append(cluster)
        return sig

    def new_query(ident: str, sig: np.ndarray) -> None:
        q_ids.append(ident)
        q_sig.append(sig + pair_spread * rng.normal(size=signal_dim))

    pre, noisy = [], set()
    for s_i, source in enumerate(sources):
        for i in range(pairs_per_source):
            qid, did = f"q-{source}-{i}", f"d-{source}-{i}"
            cluster = int(rng.integers(n_clusters))
            doc_sig = new_doc(did, cluster)
            if rng.random() < noise_frac:
                other = (cluster + 1 + int(rng.integers(n_clusters - 1))) % n_clusters
                new_query(qid, centers[other] + cluster_spread * rng.normal(size=signal_dim))
                noisy.add((qid, did))
            else:
                new_query(qid, doc_sig)
            lang = None if langs is None else langs[i % len(langs)]
            pre.append(PairRecord(qid, did, source, lang))

    ft = []
    for i in range(finetune_pairs):
        qid, did = f"q-ft-{i}", f"d-ft-{i}"
        doc_sig = new_doc(did, int(rng.integers(n_clusters)))
        new_query(qid, doc_sig)
        ft.append(PairRecord(qid, did, "finetune"))

    d_cluster_arr = np.asarray(d_cluster)
    eval_ids, qrels = [], {}
    for i in range(eval_queries):
        qid = f"q-eval-{i}"
        cluster = int(rng.integers(n_clusters))
        q_ids.append(qid)
        q_sig.append(centers[cluster] + cluster_spread * rng.normal(size=signal_dim))
        eval_ids.append(qid)
        qrels[qid] = {d_ids[j]: 1 for j in np.flatnonzero(d_cluster_arr == cluster)}

    def embed(sig: list, r: np.ndarray, nuisance: float) -> np.ndarray:
        sig = np.asarray(sig)
        noise = nuisance * rng.normal(size=(sig.shape[0], nuis_dim)) * np.sqrt(signal_dim / nuis_dim) * 2.0
        return np.hstack([sig, noise]) @ r.T

    q_base = embed(q_sig, rot, nuisance_scale)
    d_base = embed(d_sig, rot, nuisance_scale)
    q_teacher = embed(q_sig, teacher_rot, 0.2 * nuisance_scale)
    d_teacher = embed(d_sig, teacher_rot, 0.2 * nuisance_scale)

    return Fixture(
        query_emb=EmbeddingMatrix(q_base, tuple(q_ids)),
        doc_emb=EmbeddingMatrix(d_base, tuple(d_ids)),
        teacher_query_emb=EmbeddingMatrix(q_teacher, tuple(q_ids)),
        teacher_doc_emb=EmbeddingMatrix(d_teacher, tuple(d_ids)),
        pretrain_pairs=pre,
        finetune_pairs=ft,
        eval_query_ids=eval_ids,
        qrels=qrels,
        noisy_pairs=noisy,
    )
