"""Classifier capacity sweep: local (240 own-domain) vs perfect-synthesis
bound (480 cross-domain) at several widths and patiences."""
import numpy as np

from oscar_sim.evaluation import ClassifierConfig, flatten_images, top1_accuracy, train_classifier
from oscar_sim.synthdata import CorpusConfig, build_federated_split

SEED = 1288
CLS_SEEDS = (1288, 4711, 9001)
cfg = CorpusConfig(seed=SEED)
split = build_federated_split(cfg, "common")
C = cfg.n_categories

k = 10
xs, ys = [], []
for client in split.clients:
    for c in range(C):
        idx = np.flatnonzero(client.train.category_ids == c)[:k]
        xs.append(client.train.pixels[idx])
        ys.append(client.train.category_ids[idx])
bx = flatten_images(np.concatenate(xs))
by = np.concatenate(ys).astype(np.int64)

for width, patience, epochs in [(128, 20, 200), (256, 20, 200), (512, 20, 200), (256, 10, 120)]:
    ccfg = ClassifierConfig(width=width, patience=patience, max_epochs=epochs)
    loc_runs, bnd_runs = [], []
    for cs in CLS_SEEDS:
        accs = []
        for client in split.clients:
            spec, params = train_classifier(
                flatten_images(client.train.pixels),
                client.train.category_ids.astype(np.int64),
                ccfg, C, cs, f"w/local{client.client_id}",
            )
            accs.append(top1_accuracy(spec, params, client.test))
        loc_runs.append(accs)
        spec, params = train_classifier(bx, by, ccfg, C, cs, "w/bound")
        bnd_runs.append([top1_accuracy(spec, params, c.test) for c in split.clients])
    loc = float(np.mean(loc_runs))
    bnd = float(np.mean(bnd_runs))
    print(f"width={width} pat={patience} ep={epochs}: local {loc:.4f}  bound480 {bnd:.4f}  margin {100*(bnd-loc):+.1f}")
