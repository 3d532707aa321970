"""Probe condition separability and local/oracle baselines for the current renderer."""
import numpy as np

from oscar_sim.encoder import category_representation, embed_dataset, fit_standardizer
from oscar_sim.synthdata import CATEGORY_NAMES, CorpusConfig, build_federated_split, build_pretrain_corpus, render_image

SEED = 1288

config = CorpusConfig(seed=SEED)
corpus = build_pretrain_corpus(config, images_per_cell=200)
standardizer = fit_standardizer(corpus)
split = build_federated_split(config, mode="common")

reps, rep_cats = [], []
for client in split.clients:
    embs = embed_dataset(client.train, standardizer)
    for c in range(8):
        reps.append(category_representation(embs[client.train.category_ids == c]))
        rep_cats.append(c)
reps = np.stack(reps)
rep_cats = np.array(rep_cats)

confusion = np.zeros((8, 8), dtype=np.int64)
for client in split.clients:
    e = embed_dataset(client.test, standardizer)
    d2 = ((e[:, None, :] - reps[None, :, :]) ** 2).sum(axis=2)
    pred = rep_cats[d2.argmin(axis=1)]
    for t, p in zip(client.test.category_ids, pred):
        confusion[t, p] += 1
acc = np.trace(confusion) / confusion.sum()
print(f"nearest-rep category acc: {acc:.3f}")
per_cat = confusion.diagonal() / confusion.sum(axis=1)
for c in range(8):
    worst = [(int(p), int(confusion[c, p])) for p in np.argsort(-confusion[c]) if p != c and confusion[c, p] > 0][:2]
    print(f"  {CATEGORY_NAMES[c]:>13} {per_cat[c]:.2f}  confused-with {[(CATEGORY_NAMES[p], k) for p, k in worst]}")

# example renders, clean domain
for c in range(8):
    img = render_image(c, 0, 123).pixels
    print(CATEGORY_NAMES[c])
    for row in img[::2]:
        print("".join(" .:*#"[int(v * 4.99)] for v in row))
