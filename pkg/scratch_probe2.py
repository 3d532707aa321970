"""Classifier-only probe: local/oracle baselines + nearest-rep ceiling on the
current corpus nuisance settings.  No denoiser involved, runs in seconds."""
import time

import numpy as np

from oscar_sim.encoder import category_representation, embed_dataset, fit_standardizer
from oscar_sim.evaluation import (
    ClassifierConfig,
    flatten_images,
    top1_accuracy,
    train_classifier,
)
from oscar_sim.synthdata import CorpusConfig, build_federated_split, concat_datasets

SEED = 1288
CLS_SEEDS = (1288, 4711, 9001)
cfg = CorpusConfig(seed=SEED)
split = build_federated_split(cfg, "common")
ccfg = ClassifierConfig()
C = cfg.n_categories

t0 = time.time()
local_runs, oracle_runs = [], []
pooled_train = concat_datasets([c.train for c in split.clients], "client-train")
for cs in CLS_SEEDS:
    local_accs = []
    for client in split.clients:
        spec, params = train_classifier(
            flatten_images(client.train.pixels),
            client.train.category_ids.astype(np.int64),
            ccfg,
            C,
            cs,
            f"probe/local{client.client_id}",
        )
        local_accs.append(top1_accuracy(spec, params, client.test))
    local_runs.append(local_accs)
    spec, oracle_params = train_classifier(
        flatten_images(pooled_train.pixels),
        pooled_train.category_ids.astype(np.int64),
        ccfg,
        C,
        cs,
        "probe/oracle",
    )
    oracle_runs.append([top1_accuracy(spec, oracle_params, c.test) for c in split.clients])
local_per = np.mean(local_runs, axis=0)
oracle_per = np.mean(oracle_runs, axis=0)
print(f"local  {[round(a, 3) for a in local_per]} avg {local_per.mean():.4f}")
print(f"oracle {[round(a, 3) for a in oracle_per]} avg {oracle_per.mean():.4f}")
print(f"baselines {time.time() - t0:.0f}s ({len(CLS_SEEDS)} cls seeds)")

# nearest-representation ceiling in embedding space
std = fit_standardizer(pooled_train)
reps = {}
for client in split.clients:
    emb = embed_dataset(client.train, std, 32)
    for c in sorted(set(client.train.category_ids.tolist())):
        reps[(client.client_id, c)] = category_representation(
            emb[client.train.category_ids == c]
        )
keys = sorted(reps)
rep_mat = np.stack([reps[k] for k in keys])
rep_cats = np.array([c for (_, c) in keys])
hits = total = 0
for client in split.clients:
    emb = embed_dataset(client.test, std, 32)
    d2 = ((emb[:, None, :] - rep_mat[None, :, :]) ** 2).sum(axis=2)
    pred = rep_cats[np.argmin(d2, axis=1)]
    hits += int((pred == client.test.category_ids).sum())
    total += len(client.test)
print(f"nearest-rep ceiling {hits / total:.4f}")
