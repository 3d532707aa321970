"""Train a longer toy denoiser once and checkpoint it for sampling experiments."""
import sys
import time

import numpy as np

from oscar_sim.numerics import RngStream
from oscar_sim.encoder import embed_dataset, fit_standardizer
from oscar_sim.diffusion import (
    make_denoiser,
    make_schedule,
    to_model_space,
    train_denoiser,
    write_denoiser,
)
from oscar_sim.synthdata import CorpusConfig, build_pretrain_corpus

SEED = 1288
SEGMENTS = [(30000, 1e-3), (10000, 3e-4)]

config = CorpusConfig(seed=SEED)
corpus = build_pretrain_corpus(config, images_per_cell=300)
standardizer = fit_standardizer(corpus)
conds = embed_dataset(corpus, standardizer)
x0 = to_model_space(corpus.pixels)

sched = make_schedule(200)
model = make_denoiser(256, 32, sched, RngStream(SEED, "diffusion/init"))
stream = RngStream(SEED, "diffusion/train")
state = None
t0 = time.time()
for steps, lr in SEGMENTS:
    model, state, losses = train_denoiser(
        model, x0, conds, stream, steps=steps, batch_size=128, lr=lr, state=state
    )
    print(
        f"{steps} steps at lr={lr}: loss -> {np.mean(losses[-200:]):.4f} "
        f"({time.time()-t0:.0f}s)",
        flush=True,
    )
write_denoiser(model, "scratch_denoiser.osdm")
print("saved")
