# coding: utf-8

# # Cleaning pairs and mining hard negatives
#
# Web-scraped query/document pairs are noisy. Consistency filtering keeps a
# pair only when its document ranks near the top for its query among all the
# documents of its shard. Finetuning data then gets hard negatives from a
# teacher, minus any candidate that scores suspiciously close to the positive.

# In[1]:

import math

from contrastkit import FilterConfig, MiningConfig, filter_pairs, mine, mine_pairs, normalize, order_dataset
from contrastkit.corevec import ScoredList
from contrastkit.synthetic import make_fixture

fx = make_fixture(pairs_per_source=1000, seed=0)
print(len(fx.pretrain_pairs), "pairs, of which", len(fx.noisy_pairs), "are deliberately mismatched")


# Filter with the teacher embeddings. Shards are formed after a seeded shuffle;
# a pair survives if its document ranks within `rank_cutoff`.

# In[2]:

cfg = FilterConfig(shard_size=1000, rank_cutoff=20, seed=0)
kept, report = filter_pairs(fx.pretrain_pairs, normalize(fx.teacher_query_emb), normalize(fx.teacher_doc_emb), cfg)
noisy_left = sum((p.query_id, p.doc_id) in fx.noisy_pairs for p in kept)
print(f"kept {report.kept}, dropped {report.dropped} across {report.shards} shards; noisy pairs left: {noisy_left}")


# Mining on a single hand-made teacher ranking shows the false-negative rule.
# With the positive at 0.8 and threshold 0.95, anything above 0.76 is
# presumed to be an unlabeled positive and skipped.

# In[3]:

ranking = ScoredList.from_entries([("a", 0.90), ("pos", 0.80), ("b", 0.78), ("c", 0.70), ("d", 0.50)])
for thr in (0.95, 1.0, math.inf):
    t = mine("q", "pos", ranking, MiningConfig(threshold_pct=thr, num_negatives=2, candidate_depth=5))
    print(f"threshold {thr}: negatives {t.negative_ids} scored {t.negative_scores}")


# At scale, `mine_pairs` ranks the whole teacher corpus for every finetuning
# pair. `random_fill` tops up queries whose candidates were all filtered out.

# In[4]:

mcfg = MiningConfig(threshold_pct=0.95, num_negatives=7, candidate_depth=50, fallback="random_fill")
triplets = mine_pairs(fx.finetune_pairs, normalize(fx.teacher_query_emb), normalize(fx.teacher_doc_emb), mcfg)
print(len(triplets), "triplets;", sum(t.random_fill > 0 for t in triplets), "needed random fills")


# Curricula reorder the triplets from easy to hard. The margin strategy puts
# large positive-minus-negative gaps first.

# In[5]:

ordered = order_dataset(triplets, "margin")
for t in (ordered[0], ordered[-1]):
    gap = t.positive_score - sum(t.negative_scores) / len(t.negative_scores)
    print(f"{t.query_id}: mean margin {gap:.3f}")
