# coding: utf-8

# # Training a projection head with InfoNCE and MRL
#
# The trainable model here is a linear head over frozen base embeddings. The
# loss is InfoNCE with a temperature, summed over several prefix lengths so
# that truncated embeddings stay useful (Matryoshka-style training).

# In[1]:

import math

import numpy as np

from contrastkit import TrainConfig, infonce, train, wsd_lr
from contrastkit.evalkit import generate_run, ndcg_at_k, retention
from contrastkit.synthetic import make_fixture


# A quick sanity check on the loss: with k equally scored candidates the
# softmax is uniform and the loss is ln k.

# In[2]:

loss, grad = infonce(np.full((1, 4), 0.3), [0], temperature=0.02)
print(loss, math.log(4))


# The learning rate follows a warmup-stable-decay schedule.

# In[3]:

for step in (0, 10, 50, 150, 175, 200):
    print(step, wsd_lr(step, 1e-2, 200, warmup_steps=20, decay_steps=50))


# Train two heads on the same data: one with MRL over dims [8, 32], one on the
# full 32 dims only. Then compare how much nDCG@10 each keeps when truncated to 8.

# In[4]:

fx = make_fixture(n_clusters=16, base_dim=64, pairs_per_source=800, eval_queries=100, seed=0)
queries = fx.eval_queries()
for dims in ((8, 32), (32,)):
    cfg = TrainConfig(temperature=0.05, out_dim=32, mrl_dims=dims, batch_size=32, peak_lr=1e-2,
                      total_steps=200, warmup_steps=20, decay_steps=50, seed=0)
    result = train(fx.query_emb, fx.doc_emb, fx.pretrain_pairs, cfg, checkpoint_every=100)
    full = ndcg_at_k(generate_run(result.head, queries, fx.doc_emb, 10), fx.qrels)
    short = ndcg_at_k(generate_run(result.head, queries, fx.doc_emb, 10, truncate_dim=8), fx.qrels)
    first, last = result.loss_trace[0][2], result.loss_trace[-1][2]
    print(f"mrl_dims={dims}: loss {first:.2f} -> {last:.2f}, nDCG@10 {full.mean:.3f}, "
          f"at dim 8 {short.mean:.3f} (retention {retention(full, short):.1%})")
    print("  checkpoints at steps", [c.step for c in result.checkpoints])
