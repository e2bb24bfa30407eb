# coding: utf-8

# # Vectors, exact search and int8 quantization
#
# Every other piece of contrastkit sits on top of a small set of vector
# primitives: an id-aware `EmbeddingMatrix`, cosine similarity, exact top-k
# search with a deterministic tie-break, prefix truncation, and int8 scalar
# quantization. This walkthrough exercises each one on random data.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from contrastkit import EmbeddingMatrix, normalize, quantize_i8, read_embx, topk, truncate, write_embx
from contrastkit.evalkit import compare_quantized

rng = np.random.default_rng(0)


# An `EmbeddingMatrix` pairs a float32 array with one id per row. `normalize`
# rescales every row to unit length, so dot products become cosine similarities.
# The query is a lightly perturbed copy of doc0017 and is normalized too.

# In[2]:

docs = normalize(EmbeddingMatrix(rng.normal(size=(2000, 64)), tuple(f"doc{i:04d}" for i in range(2000))))
query = docs.data[17] + 0.05 * rng.normal(size=64)
query /= np.linalg.norm(query)
hits = topk(query, docs, 5)
for doc_id, score in hits.entries:
    print(f"{doc_id}  {score:.4f}")


# Ties are broken by ascending id, so results never depend on row order.
# Here two identical documents get the same score and come back alphabetically.

# In[3]:

twins = EmbeddingMatrix(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), ("zeta", "alpha", "other"), normalized=True)
print(topk(np.array([1.0, 0.0]), twins, 3).ids)


# Truncation keeps the leading coordinates. With `renormalize=True` (the
# default) each prefix is rescaled back to unit length.

# In[4]:

short = truncate(docs, 16)
print(short.dim, np.linalg.norm(short.data, axis=1)[:3])


# int8 quantization uses one global scale, max|x| / 127. Every component is
# reconstructed to within half a quantization step.

# In[5]:

q8 = quantize_i8(docs)
recon = q8.data.astype(np.float64) * q8.scale
print("scale", q8.scale, "max error", np.abs(recon - docs.data).max(), "bound", q8.scale / 2)


# How much does that cost in retrieval? `compare_quantized` searches the
# dequantized corpus and reports recall@k against float32 search.

# In[6]:

queries = normalize(EmbeddingMatrix(rng.normal(size=(100, 64)), tuple(f"q{i}" for i in range(100))))
report = compare_quantized(docs, queries, k=10)
print(f"recall@10 of int8 search: {report.mean:.3f}")


# Both float32 and int8 matrices round-trip through the EMBX binary format:
# a 26-byte header, row-major little-endian data, and an `.ids` sidecar.

# In[7]:

with tempfile.TemporaryDirectory() as tmp:
    write_embx(q8, Path(tmp) / "docs_i8.embx")
    back = read_embx(Path(tmp) / "docs_i8.embx")
    print(type(back).__name__, back.data.shape, np.array_equal(back.data, q8.data))
