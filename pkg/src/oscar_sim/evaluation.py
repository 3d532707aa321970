"""Global-classifier training and per-client evaluation.

The global classifier is a small dense net trained on synthesized images
only; every reported accuracy is measured on real held-out test images.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .numerics import (
    MlpSpec,
    ParamSet,
    RngStream,
    adam_init,
    adam_step,
    forward_backward,
    init_params,
    mlp_forward,
)
from .synthdata import Dataset, FederatedSplit, dataset_digest


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    """Training recipe for the dense classifiers used by every method.

    width is the first hidden layer; the second is width // 2. The default
    (128, 64) head on 16x16 inputs counts 41,672 parameters at 8 classes.
    """

    width: int = 128
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20

    def __post_init__(self):
        if self.width < 2:
            raise EvaluationError("classifier width must be >= 2")
        if self.lr <= 0:
            raise EvaluationError("classifier lr must be positive")
        if self.batch_size < 1:
            raise EvaluationError("classifier batch_size must be >= 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise EvaluationError("max_epochs and patience must be >= 1")


def classifier_spec(config: ClassifierConfig, in_dim: int, n_classes: int) -> MlpSpec:
    return MlpSpec(
        in_dim=in_dim,
        hidden=(config.width, config.width // 2),
        out_dim=n_classes,
        activation="silu",
        head="softmax_ce",
    )


def flatten_images(pixels: np.ndarray) -> np.ndarray:
    """Classifier inputs are raw [0, 1] intensities, flattened."""
    return pixels.reshape(pixels.shape[0], -1).astype(np.float32)


def fit_epochs(
    spec: MlpSpec,
    params: ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    stream: RngStream,
    epochs: int,
    batch_size: int,
    lr: float,
) -> ParamSet:
    """Plain Adam epochs from the given parameters; no validation, no stop."""
    state = adam_init(params)
    for _ in range(epochs):
        order = stream.permutation(x.shape[0])
        for lo in range(0, x.shape[0], batch_size):
            idx = order[lo : lo + batch_size]
            _, grads = forward_backward(spec, params, x[idx], y[idx])
            params, state = adam_step(params, grads, state, lr=lr)
    return params


def train_classifier(
    x: np.ndarray,
    y: np.ndarray,
    config: ClassifierConfig,
    n_classes: int,
    seed: int,
    label: str,
) -> tuple[MlpSpec, ParamSet]:
    """Early-stopped Adam training on a 90/10 split of (x, y).

    Holds out every tenth of the data as validation, stops once validation
    accuracy has not improved for `patience` epochs, and returns the
    parameters of the best validation epoch.
    """
    n = x.shape[0]
    if n < 2:
        raise EvaluationError("need at least 2 examples to split off validation")
    spec = classifier_spec(config, x.shape[1], n_classes)
    params = init_params(spec, RngStream(seed, f"{label}/init"))

    order = RngStream(seed, f"{label}/split").permutation(n)
    n_val = max(1, n // 10)
    val_idx, train_idx = order[:n_val], order[n_val:]
    xt, yt = x[train_idx], y[train_idx]
    xv, yv = x[val_idx], y[val_idx]

    state = adam_init(params)
    batches = RngStream(seed, f"{label}/batches")
    best_params, best_acc, since_best = params, -1.0, 0
    for _ in range(config.max_epochs):
        order = batches.permutation(xt.shape[0])
        for lo in range(0, xt.shape[0], config.batch_size):
            idx = order[lo : lo + config.batch_size]
            _, grads = forward_backward(spec, params, xt[idx], yt[idx])
            params, state = adam_step(params, grads, state, lr=config.lr)
        acc = float((mlp_forward(spec, params, xv).argmax(axis=1) == yv).mean())
        if acc > best_acc:
            best_params, best_acc, since_best = params, acc, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return spec, best_params


def train_global_classifier(
    d_syn: Dataset,
    config: ClassifierConfig,
    n_classes: int,
    seed: int,
    label: str = "global",
) -> tuple[MlpSpec, ParamSet]:
    """Train the server-side classifier on synthesized images only."""
    if len(d_syn) < n_classes:
        raise EvaluationError("synthesized dataset smaller than the class count")
    present = set(int(c) for c in np.unique(d_syn.category_ids))
    for c in range(n_classes):
        if c not in present:
            raise EvaluationError(f"class {c} absent from synthesized data")
    x = flatten_images(d_syn.pixels)
    y = d_syn.category_ids.astype(np.int64)
    return train_classifier(x, y, config, n_classes, seed, label)


def top1_accuracy(spec: MlpSpec, params: ParamSet, test: Dataset) -> float:
    """Fraction of argmax-correct predictions; argmax ties resolve to the
    lowest class index."""
    if len(test) == 0:
        raise EvaluationError("cannot score an empty test set")
    if test.origin == "synthesized":
        raise EvaluationError("refusing to report accuracy on synthesized images")
    logits = mlp_forward(spec, params, flatten_images(test.pixels))
    return float((logits.argmax(axis=1) == test.category_ids.astype(np.int64)).mean())


# ---------------------------------------------------------------------------
# result assembly


@dataclass(frozen=True)
class MethodResult:
    method: str
    per_client: tuple[float, ...]
    pooled: float
    test_digest: str  # identifies the exact test sets the numbers came from
    uploaded_params: int  # per client
    uploaded_bytes: int
    rounds: int


def split_test_digest(split: FederatedSplit) -> str:
    return "+".join(dataset_digest(c.test) for c in split.clients)


def evaluate_on_split(
    method: str,
    spec: MlpSpec,
    params_by_client: "ParamSet | list[ParamSet]",
    split: FederatedSplit,
    uploaded_params: int,
    rounds: int,
) -> MethodResult:
    """Score one model (or one model per client) on every client's test set.

    Accepts a single ParamSet for global models, or one ParamSet per client
    for the local baseline.
    """
    per_client = []
    for client in split.clients:
        params = (
            params_by_client[client.client_id]
            if isinstance(params_by_client, list)
            else params_by_client
        )
        per_client.append(top1_accuracy(spec, params, client.test))
    n = np.array([len(c.test) for c in split.clients], dtype=np.float64)
    pooled = float(np.dot(per_client, n) / n.sum())
    return MethodResult(
        method=method,
        per_client=tuple(per_client),
        pooled=pooled,
        test_digest=split_test_digest(split),
        uploaded_params=uploaded_params,
        uploaded_bytes=4 * uploaded_params,
        rounds=rounds,
    )


def build_report(results: list[MethodResult], seed: int) -> str:
    """CSV with one row per method and a fixed column order.

    Columns: method, client_1..client_R, avg (unweighted client mean),
    pooled (test-size-weighted), uploaded_params, uploaded_bytes, rounds,
    seed. Uploaded columns are per client.
    """
    if not results:
        raise EvaluationError("no results to report")
    digests = {r.test_digest for r in results}
    if len(digests) > 1:
        raise EvaluationError("methods evaluated on different test sets")
    n_clients = len(results[0].per_client)
    out = io.StringIO()
    cols = ["method"]
    cols += [f"client_{i + 1}" for i in range(n_clients)]
    cols += ["avg", "pooled", "uploaded_params", "uploaded_bytes", "rounds", "seed"]
    out.write(",".join(cols) + "\n")
    for r in results:
        cells = [r.method]
        cells += [f"{a:.4f}" for a in r.per_client]
        cells.append(f"{float(np.mean(r.per_client)):.4f}")
        cells.append(f"{r.pooled:.4f}")
        cells += [str(r.uploaded_params), str(r.uploaded_bytes), str(r.rounds), str(seed)]
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def sample_count_ablation(
    model,
    uploads,
    split: FederatedSplit,
    config: ClassifierConfig,
    n_list: tuple[int, ...] = (5, 10, 20, 30),
    guidance_scale: float = 1.0,
    n_steps: int = 50,
    seed: int = 0,
) -> str:
    """Re-synthesize and retrain at each per-representation sample count.

    Returns a CSV with one row per n. Per-image sampling streams make the
    first k images at any n identical to the n=k run, so rows differ only
    in how much synthetic data the classifier saw.
    """
    # imported here: federation depends on this module for its baselines
    from .federation import server_synthesize

    if not n_list:
        raise EvaluationError("n_list must be non-empty")
    for n in n_list:
        if n < 1:
            raise EvaluationError("n_per_rep must be >= 1")
    n_classes = split.config.n_categories
    out = io.StringIO()
    cols = ["n_per_rep"]
    cols += [f"client_{i + 1}" for i in range(len(split.clients))]
    cols += ["avg", "seed"]
    out.write(",".join(cols) + "\n")
    for n in n_list:
        d_syn = server_synthesize(
            model,
            uploads,
            n_per_rep=n,
            guidance_scale=guidance_scale,
            n_steps=n_steps,
            seed=seed,
        )
        spec, params = train_global_classifier(
            d_syn, config, n_classes, seed, label=f"ablate/n{n}"
        )
        accs = [top1_accuracy(spec, params, c.test) for c in split.clients]
        cells = [str(n)] + [f"{a:.4f}" for a in accs]
        cells += [f"{float(np.mean(accs)):.4f}", str(seed)]
        out.write(",".join(cells) + "\n")
    return out.getvalue()
