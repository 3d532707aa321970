"""Upper bound for synthesis-based methods: train the pipeline classifier on
k real images per (client, category) cell, i.e. what a perfect generator
would hand the server at n_per_rep=k."""
import numpy as np

from oscar_sim.evaluation import ClassifierConfig, flatten_images, top1_accuracy, train_classifier
from oscar_sim.numerics import RngStream
from oscar_sim.synthdata import CorpusConfig, build_federated_split

SEED = 1288
CLS_SEEDS = (1288, 4711, 9001)
cfg = CorpusConfig(seed=SEED)
split = build_federated_split(cfg, "common")
ccfg = ClassifierConfig()
C = cfg.n_categories

for k in (10, 20, 30):
    xs, ys = [], []
    for client in split.clients:
        for c in range(C):
            idx = np.flatnonzero(client.train.category_ids == c)[:k]
            xs.append(client.train.pixels[idx])
            ys.append(client.train.category_ids[idx])
    x = flatten_images(np.concatenate(xs))
    y = np.concatenate(ys).astype(np.int64)
    runs = []
    for cs in CLS_SEEDS:
        spec, params = train_classifier(x, y, ccfg, C, cs, f"bound/k{k}")
        runs.append([top1_accuracy(spec, params, c.test) for c in split.clients])
    per = np.mean(runs, axis=0)
    print(f"real k={k} ({len(y)} imgs): {[round(a, 3) for a in per]} avg {per.mean():.4f}")
