"""Which link is broken: condition separability, class consistency, or style?"""
import numpy as np

from oscar_sim.numerics import MlpSpec, RngStream, adam_init, adam_step, forward_backward, init_params, mlp_forward
from oscar_sim.encoder import category_representation, embed_dataset, embed, fit_standardizer
from oscar_sim.diffusion import SampleRequest, from_model_space, read_denoiser, sample
from oscar_sim.synthdata import CorpusConfig, build_federated_split, build_pretrain_corpus

SEED = 1288

config = CorpusConfig(seed=SEED)
corpus = build_pretrain_corpus(config, images_per_cell=200)
standardizer = fit_standardizer(corpus)
split = build_federated_split(config, mode="common")
model = read_denoiser("scratch_denoiser.osdm")

reps, rep_cats, rep_clients = [], [], []
for client in split.clients:
    embs = embed_dataset(client.train, standardizer)
    for c in range(8):
        reps.append(category_representation(embs[client.train.category_ids == c]))
        rep_cats.append(c)
        rep_clients.append(client.client_id)
reps = np.stack(reps)
rep_cats = np.array(rep_cats)
rep_clients = np.array(rep_clients)

# 1. nearest-representation classification of real test images
correct = total = 0
correct_dom = 0
for client in split.clients:
    e = embed_dataset(client.test, standardizer)
    d2 = ((e[:, None, :] - reps[None, :, :]) ** 2).sum(axis=2)
    pred = rep_cats[d2.argmin(axis=1)]
    pred_client = rep_clients[d2.argmin(axis=1)]
    correct += (pred == client.test.category_ids).sum()
    correct_dom += (pred_client == client.client_id).sum()
    total += len(client.test)
print(f"nearest-rep category acc: {correct/total:.3f}  client(domain) acc: {correct_dom/total:.3f}")

# 2. rep-space geometry: same-cat cross-client dist vs cross-cat dist
d2 = ((reps[:, None, :] - reps[None, :, :]) ** 2).sum(axis=2) ** 0.5
same = d2[(rep_cats[:, None] == rep_cats[None, :]) & (np.arange(48)[:, None] != np.arange(48)[None, :])]
diff = d2[rep_cats[:, None] != rep_cats[None, :]]
print(f"rep dist same-cat {same.mean():.2f}  cross-cat {diff.mean():.2f}")

# 3. oracle classifier on synthesized images (class consistency)
def train_cls(x, y, label, epochs=150):
    spec = MlpSpec(in_dim=256, hidden=(128, 64), out_dim=8, head="softmax_ce")
    params = init_params(spec, RngStream(SEED, f"{label}/init"))
    state = adam_init(params)
    stream = RngStream(SEED, f"{label}/batches")
    for _ in range(epochs):
        order = stream.permutation(x.shape[0])
        for i in range(0, x.shape[0], 64):
            idx = order[i : i + 64]
            _, grads = forward_backward(spec, params, x[idx], y[idx])
            params, state = adam_step(params, grads, state)
    return spec, params

def flat01(p):
    return p.reshape(p.shape[0], -1).astype(np.float32)

pooled_x = np.concatenate([flat01(c.train.pixels) for c in split.clients])
pooled_y = np.concatenate([c.train.category_ids.astype(np.int64) for c in split.clients])
ospec, oparams = train_cls(pooled_x, pooled_y, "oracle")

syn_x, syn_y, syn_client = [], [], []
for client in split.clients:
    for c in range(8):
        i = client.client_id * 8 + c
        out = sample(model, SampleRequest(
            n_images=10, condition=reps[i], guidance_scale=1.0, n_steps=200,
            seed=SEED, rng_label=f"synth/client{client.client_id}/cat{c}"))
        syn_x.append(from_model_space(out, 16))
        syn_y.append(np.full(10, c))
        syn_client.append(np.full(10, client.client_id))
syn_imgs = np.concatenate(syn_x)
syn_labels = np.concatenate(syn_y)
syn_clients = np.concatenate(syn_client)

logits = mlp_forward(ospec, oparams, flat01(syn_imgs))
pred = logits.argmax(axis=1)
print(f"oracle-on-synth acc: {(pred == syn_labels).mean():.3f}")
for c in range(8):
    m = syn_labels == c
    print(f"  cat {c}: oracle-on-synth {(pred[m] == c).mean():.2f}")

# 4. intensity stats real vs synth
real = np.concatenate([c.train.pixels for c in split.clients])
print(f"real mean {real.mean():.3f} std {real.std():.3f}  synth mean {syn_imgs.mean():.3f} std {syn_imgs.std():.3f}")

# 5. synth embeddings vs their conditioning rep (round trip through the model)
se = embed(syn_imgs, standardizer)
d2 = ((se[:, None, :] - reps[None, :, :]) ** 2).sum(axis=2)
pred_cat = rep_cats[d2.argmin(axis=1)]
print(f"synth nearest-rep matches conditioned cat: {(pred_cat == syn_labels).mean():.3f}")
