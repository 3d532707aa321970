"""Scratch pilot for the toy preset: synthesis quality and accuracy margins."""
import time

import numpy as np

from oscar_sim.numerics import (
    MlpSpec,
    RngStream,
    adam_init,
    adam_step,
    forward_backward,
    init_params,
    mlp_forward,
)
from oscar_sim.encoder import category_representation, embed_dataset, fit_standardizer
from oscar_sim.diffusion import (
    SampleRequest,
    make_denoiser,
    make_schedule,
    sample,
    to_model_space,
    from_model_space,
    train_denoiser,
)
from oscar_sim.synthdata import CorpusConfig, build_federated_split, build_pretrain_corpus

SEED = 1288
DIFF_STEPS = 15000
CLS_EPOCHS = 150


def train_classifier(x, y, label, n_classes=8, epochs=CLS_EPOCHS):
    spec = MlpSpec(in_dim=256, hidden=(128, 64), out_dim=n_classes, head="softmax_ce")
    params = init_params(spec, RngStream(SEED, f"{label}/init"))
    state = adam_init(params)
    stream = RngStream(SEED, f"{label}/batches")
    n = x.shape[0]
    for _ in range(epochs):
        order = stream.permutation(n)
        for i in range(0, n, 64):
            idx = order[i : i + 64]
            _, grads = forward_backward(spec, params, x[idx], y[idx])
            params, state = adam_step(params, grads, state)
    return spec, params


def accuracy(spec, params, x, y):
    logits = mlp_forward(spec, params, x)
    return float((logits.argmax(axis=1) == y).mean())


def flat01(pixels):
    return pixels.reshape(pixels.shape[0], -1).astype(np.float32)


t0 = time.time()
config = CorpusConfig(seed=SEED)
corpus = build_pretrain_corpus(config, images_per_cell=200)
standardizer = fit_standardizer(corpus)
conds = embed_dataset(corpus, standardizer)
x0 = to_model_space(corpus.pixels)
print(f"corpus+embed {time.time()-t0:.0f}s")

t0 = time.time()
sched = make_schedule(200)
model = make_denoiser(256, 32, sched, RngStream(SEED, "diffusion/init"))
model, _, losses = train_denoiser(
    model, x0, conds, RngStream(SEED, "diffusion/train"), steps=DIFF_STEPS, batch_size=64
)
print(f"diffusion {DIFF_STEPS} steps {time.time()-t0:.0f}s, loss {losses[0]:.3f} -> {np.mean(losses[-200:]):.3f}")

split = build_federated_split(config, mode="common")

t0 = time.time()
syn_x, syn_y = [], []
for client in split.clients:
    embs = embed_dataset(client.train, standardizer)
    for c in range(8):
        rep = category_representation(embs[client.train.category_ids == c])
        out = sample(
            model,
            SampleRequest(
                n_images=10,
                condition=rep,
                guidance_scale=1.0,
                n_steps=50,
                seed=SEED,
                rng_label=f"synth/client{client.client_id}/cat{c}",
            ),
        )
        syn_x.append(from_model_space(out, 16))
        syn_y.append(np.full(10, c))
syn_imgs = np.concatenate(syn_x)
syn_labels = np.concatenate(syn_y)
print(f"synthesis {time.time()-t0:.0f}s, {len(syn_imgs)} images")

# visual check: one synthesized image per category, client 0
for c in range(8):
    img = syn_imgs[c * 10]
    print(f"cat {c}")
    for row in img[::2]:
        print("".join(" .:*#"[int(v * 4.99)] for v in row[::1]))

t0 = time.time()
spec, params = train_classifier(flat01(syn_imgs), syn_labels, "global")
oscar_accs = []
for client in split.clients:
    oscar_accs.append(
        accuracy(spec, params, flat01(client.test.pixels), client.test.category_ids.astype(np.int64))
    )
print(f"global classifier {time.time()-t0:.0f}s")

t0 = time.time()
local_accs = []
for client in split.clients:
    lspec, lparams = train_classifier(
        flat01(client.train.pixels),
        client.train.category_ids.astype(np.int64),
        f"local{client.client_id}",
    )
    local_accs.append(
        accuracy(lspec, lparams, flat01(client.test.pixels), client.test.category_ids.astype(np.int64))
    )
print(f"locals {time.time()-t0:.0f}s")

pooled_x = np.concatenate([flat01(c.train.pixels) for c in split.clients])
pooled_y = np.concatenate([c.train.category_ids.astype(np.int64) for c in split.clients])
ospec, oparams = train_classifier(pooled_x, pooled_y, "oracle")
oracle_accs = [
    accuracy(ospec, oparams, flat01(c.test.pixels), c.test.category_ids.astype(np.int64))
    for c in split.clients
]

print("oscar ", [round(a, 3) for a in oscar_accs], "avg", round(np.mean(oscar_accs), 4))
print("local ", [round(a, 3) for a in local_accs], "avg", round(np.mean(local_accs), 4))
print("oracle", [round(a, 3) for a in oracle_accs], "avg", round(np.mean(oracle_accs), 4))
print("margin vs local: %+.2f pts" % (100 * (np.mean(oscar_accs) - np.mean(local_accs))))
print("gap vs oracle:   %+.2f pts" % (100 * (np.mean(oracle_accs) - np.mean(oscar_accs))))
