# coding: utf-8

# # Evaluating runs with nDCG@k
#
# Evaluation uses TREC-style run files and qrels. nDCG@k here has linear gain
# and a log2(rank + 1) discount; queries without any relevant judgment are
# dropped from the mean and counted.

# In[1]:

import math
import tempfile
from pathlib import Path

from contrastkit import RunFile, ndcg_at_k, retention
from contrastkit.dataio import read_run, write_run


# Two judged documents with grades 2 and 1, retrieved in the wrong order.

# In[2]:

run = RunFile.from_scores({"q1": [("one", 0.9), ("two", 0.8)]}, tag="demo")
res = ndcg_at_k(run, {"q1": {"two": 2, "one": 1}})
print(res.mean, (1 + 2 / math.log2(3)) / (2 + 1 / math.log2(3)))


# Subset labels give per-subset means, for example one per language.

# In[3]:

run = RunFile.from_scores({"en1": [("x", 1.0)], "en2": [("y", 1.0), ("x", 0.5)], "fr1": [("x", 1.0)]})
qrels = {"en1": {"x": 1}, "en2": {"x": 1}, "fr1": {"x": 1}}
res = ndcg_at_k(run, qrels, subsets={"en1": "en", "en2": "en", "fr1": "fr"})
print(res.subsets)


# Run files round-trip exactly; ties are written in ascending doc-id order.

# In[4]:

with tempfile.TemporaryDirectory() as tmp:
    write_run(run, Path(tmp) / "run.trec")
    print((Path(tmp) / "run.trec").read_text())
    print(read_run(Path(tmp) / "run.trec") == run)


# Retention is the truncated score divided by the full-dimension score, here
# for 0.549 of 0.554 and for 0.547 of 0.556:

# In[5]:

print(f"{retention(0.554, 0.549):.1%}  {retention(0.556, 0.547):.1%}")
