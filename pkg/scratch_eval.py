"""Measure the full chain with the pipeline classifier config: local, oracle,
perfect-synthesis bound, and real OSCAR from the checkpointed denoiser."""
import sys
import time

import numpy as np

from oscar_sim.diffusion import SampleRequest, from_model_space, read_denoiser, sample
from oscar_sim.encoder import category_representation, embed_dataset, fit_standardizer
from oscar_sim.evaluation import (
    ClassifierConfig,
    flatten_images,
    top1_accuracy,
    train_classifier,
)
from oscar_sim.synthdata import CorpusConfig, build_federated_split, build_pretrain_corpus

SEED = 1288
CLS_SEEDS = (1288, 4711, 9001)
cfg = CorpusConfig(seed=SEED)
split = build_federated_split(cfg, "common")
ccfg = ClassifierConfig()
C = cfg.n_categories

corpus = build_pretrain_corpus(cfg, images_per_cell=300)
standardizer = fit_standardizer(corpus)
model = read_denoiser("scratch_denoiser.osdm")

reps = {}
for client in split.clients:
    embs = embed_dataset(client.train, standardizer)
    for c in range(C):
        reps[(client.client_id, c)] = category_representation(
            embs[client.train.category_ids == c]
        )


def eval_on_clients(x, y):
    accs = np.zeros(len(split.clients))
    for cs in CLS_SEEDS:
        spec, params = train_classifier(x, y, ccfg, C, cs, "eval/global")
        accs += [top1_accuracy(spec, params, c.test) for c in split.clients]
    return accs / len(CLS_SEEDS)


t0 = time.time()
local_accs = np.zeros(len(split.clients))
for cs in CLS_SEEDS:
    for client in split.clients:
        spec, params = train_classifier(
            flatten_images(client.train.pixels),
            client.train.category_ids.astype(np.int64),
            ccfg, C, cs, f"eval/local{client.client_id}",
        )
        local_accs[client.client_id] += top1_accuracy(spec, params, client.test)
local_accs /= len(CLS_SEEDS)
local = float(local_accs.mean())
print(f"local  {[round(a, 3) for a in local_accs]} avg {local:.4f} ({time.time()-t0:.0f}s)", flush=True)

for n_steps, scale in [(100, 0.0), (100, 0.5), (100, 1.0), (100, 1.5), (100, 2.5), (200, 1.0)]:
    t0 = time.time()
    syn_x, syn_y = [], []
    for (cid, c), rep in reps.items():
        out = sample(
            model,
            SampleRequest(
                n_images=10,
                condition=rep,
                guidance_scale=scale,
                n_steps=n_steps,
                seed=SEED,
                rng_label=f"synth/client{cid}/cat{c}",
            ),
        )
        syn_x.append(from_model_space(out, 16))
        syn_y.append(np.full(10, c))
    x = flatten_images(np.concatenate(syn_x))
    y = np.concatenate(syn_y).astype(np.int64)
    accs = eval_on_clients(x, y)
    avg = float(accs.mean())
    print(
        f"steps={n_steps} s={scale}: oscar {[round(a, 3) for a in accs]} "
        f"avg {avg:.4f} margin {100*(avg-local):+.1f} ({time.time()-t0:.0f}s)",
        flush=True,
    )

# a few rendered samples for eyeballing
out = sample(model, SampleRequest(n_images=1, condition=reps[(0, 2)], guidance_scale=1.0,
                                  n_steps=100, seed=SEED, rng_label="peek/sq"))
img = from_model_space(out, 16)[0]
for row in img[::2]:
    print("".join(" .:*#"[int(np.clip(v, 0, 1) * 4.99)] for v in row))
