"""Communication accounting: why uploading averaged embeddings once beats
shipping classifier weights for twenty rounds.

Run: python3 demos/communication_budget.py  (a few seconds)
"""
import numpy as np

from oscar_sim.evaluation import ClassifierConfig, classifier_spec
from oscar_sim.federation import (
    FULL_SCALE_CLASSIFIER_PARAMS,
    FULL_SCALE_FEDAVG_ROUNDS,
    MessageLog,
    account_messages,
    collect_uploads,
    full_scale_summary,
    oscar_upload_params,
    run_fedavg,
)
from oscar_sim.numerics import RngStream, init_params, param_count
from oscar_sim.encoder import fit_standardizer
from oscar_sim.synthdata import CorpusConfig, build_federated_split, build_pretrain_corpus

# --- deployment-scale arithmetic (exact integers) ---------------------------
print("per-client upload at deployment scale:")
for name, params in full_scale_summary().items():
    print(f"  {name:<15} {params:>12,} parameters  (~{params / 1e6:.2f}M)")
ratio = (FULL_SCALE_CLASSIFIER_PARAMS * FULL_SCALE_FEDAVG_ROUNDS) / oscar_upload_params(60, 512)
print(f"  embeddings-once vs 20-round weight shipping: {ratio:,.0f}x smaller")

# --- the simulator measures the same thing from its message log -------------
cfg = CorpusConfig(seed=0, n_categories=4, n_domains=3, n_clients=3,
                   images_per_category=8, test_images_per_category=4)
split = build_federated_split(cfg, "common")
corpus = build_pretrain_corpus(cfg, images_per_cell=10)
standardizer = fit_standardizer(corpus)

log = MessageLog()
collect_uploads(split, standardizer, embed_dim=32, log=log)
run_fedavg(split, ClassifierConfig(width=32, max_epochs=2), rounds=3,
           local_epochs=1, seed=0, log=log)

print("\ntoy run, measured from the message log:")
for method, rec in account_messages(log).items():
    print(f"  {method:<8} {rec.max_per_client:>8,} params/client over {rec.rounds} round(s)")
spec = classifier_spec(ClassifierConfig(width=32), 256, 4)
model_params = param_count(init_params(spec, RngStream(0, "demo/count")))
print(f"  (fedavg classifier has {model_params:,} parameters, uploaded every round)")
