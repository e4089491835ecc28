"""
Training a variant and querying it
==================================

A short run on a small dataset. Real comparisons need far more data and
epochs; see the acceptance suite for the full three-variant experiment.
"""

import logging

import numpy as np

from tempoquery import synthdata as sd
from tempoquery import train as T
from tempoquery.retrieval import build_index, evaluate, query

logging.basicConfig(level=logging.INFO, format="%(message)s")

ds = sd.make_pair_dataset(40, 6, (60, 180), 84, seed=5, split_fractions=(3, 1, 1))

cfg = T.TrainConfig(variant="BL_AT", t_frames=84, epochs=3, seed=0)
model = T.train(cfg, "BL_AT", ds)
print([round(h["valid_mrr"], 1) for h in model.history])

# metrics over a seeded pool of test pairs
print(evaluate(model, ds, pool_size=40, seed=0).csv_line("BL_AT"))

# a single audio query against an index of test snippets
test = np.flatnonzero(ds.split_mask("test"))
index = build_index(model, ds.scores[test], ids=test)
ranked = query(index, model, ds.spectrograms[test[0]])
print("true snippet", test[0], "ranked", int(np.flatnonzero(ranked == test[0])[0]) + 1)

# checkpoints hold everything needed for inference
T.save_model(model, "/tmp/demo_bl_at.cmp")
again = T.load_model("/tmp/demo_bl_at.cmp")
assert np.array_equal(again.embed_sheet(ds.scores[:3]), model.embed_sheet(ds.scores[:3]))

# attention weights for a slow and a fast query
slow, fast = test[np.argmin(ds.tempos[test])], test[np.argmax(ds.tempos[test])]
for i in (slow, fast):
    a = model.attend(ds.spectrograms[i])[0]
    print(f"{ds.tempos[i]:.0f} bpm: peak frame {a.argmax()}, max weight {a.max():.4f}")
