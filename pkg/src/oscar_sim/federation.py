"""One-shot protocol, baselines, message log, and communication accounting.

Clients run in-process as pure functions over their own data; every
protocol payload is recorded in an append-only message log whose float
counts and digests drive the accounting. The server-side synthesis path
receives category representations only, never client images.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    DenoiserModel,
    SampleRequest,
    from_model_space,
    q_sample,
    sample,
    sample_classifier_guided,
    time_embedding,
    to_model_space,
)
from .encoder import category_representation, embed_dataset
from .evaluation import (
    ClassifierConfig,
    classifier_spec,
    fit_epochs,
    flatten_images,
    top1_accuracy,
    train_classifier,
    train_global_classifier,
)
from .numerics import (
    MlpSpec,
    ParamSet,
    RngStream,
    adam_init,
    adam_step,
    forward_backward,
    init_params,
    logprob_input_grad,
    param_count,
)
from .synthdata import SYNTHETIC_DOMAIN, Dataset, FederatedSplit

CADO_TIME_DIM = 32

# Full-scale reference points for the accounting arithmetic: category count
# and embedding width per dataset, and a ResNet-18 backbone with a 60-way
# head for the multi-round baseline.
FULL_SCALE_UPLOAD_SHAPES = {"nico_plus_plus": (60, 512), "openimage": (80, 512)}
FULL_SCALE_CLASSIFIER_PARAMS = 11_690_000
FULL_SCALE_FEDAVG_ROUNDS = 20


class FederationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# message log


@dataclass(frozen=True)
class Message:
    method: str
    sender: str  # "client_<r>" or "server"
    kind: str
    n_floats: int
    digest: str

    def to_line(self) -> str:
        return f"{self.method} {self.sender} {self.kind} {self.n_floats} {self.digest}"

    @staticmethod
    def from_line(line: str) -> "Message":
        parts = line.split()
        if len(parts) != 5:
            raise FederationError(f"malformed message line: {line!r}")
        return Message(parts[0], parts[1], parts[2], int(parts[3]), parts[4])


@dataclass
class MessageLog:
    """Append-only record of every protocol message, one text line each."""

    records: list[Message] = field(default_factory=list)

    def append(self, method: str, sender: str, kind: str, payload: bytes) -> None:
        if len(payload) % 4 != 0:
            raise FederationError("payload length is not a multiple of 4 bytes")
        digest = hashlib.sha256(payload).hexdigest()
        self.records.append(Message(method, sender, kind, len(payload) // 4, digest))

    def upstream(self, method: str | None = None) -> list[Message]:
        return [
            m
            for m in self.records
            if m.sender != "server" and (method is None or m.method == method)
        ]

    def replace_method(self, method: str, other: "MessageLog") -> None:
        """Swap out all of one method's records, keeping the rest in order."""
        kept = [m for m in self.records if m.method != method]
        self.records = kept + [m for m in other.records if m.method == method]

    def to_text(self) -> str:
        return "".join(m.to_line() + "\n" for m in self.records)

    @staticmethod
    def from_text(text: str) -> "MessageLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        return MessageLog(records=[Message.from_line(ln) for ln in lines])


def client_name(client_id: int) -> str:
    return f"client_{client_id}"


def params_payload(params: ParamSet) -> bytes:
    """Canonical wire bytes for a ParamSet: name order, little-endian f32."""
    return b"".join(params[k].astype("<f4").tobytes() for k in sorted(params))


# ---------------------------------------------------------------------------
# uploads


@dataclass(frozen=True)
class OscarUpload:
    """Everything a client ever sends: one averaged embedding per category."""

    client_id: int
    representations: dict[int, np.ndarray]  # category_id -> (embed_dim,)
    embed_dim: int

    @property
    def n_params(self) -> int:
        return len(self.representations) * self.embed_dim

    def payload(self) -> bytes:
        """Canonical wire bytes: categories ascending, little-endian f32."""
        order = sorted(self.representations)
        return np.concatenate(
            [self.representations[c] for c in order]
        ).astype("<f4").tobytes()


def upload_to_json(upload: OscarUpload) -> dict:
    return {
        "client_id": upload.client_id,
        "embed_dim": upload.embed_dim,
        "representations": {
            str(c): [float(v) for v in vec]
            for c, vec in sorted(upload.representations.items())
        },
    }


def upload_from_json(obj: dict) -> OscarUpload:
    reps = {
        int(c): np.asarray(vec, dtype=np.float32)
        for c, vec in obj["representations"].items()
    }
    return OscarUpload(
        client_id=int(obj["client_id"]),
        representations=reps,
        embed_dim=int(obj["embed_dim"]),
    )


def uploads_to_json_text(uploads: list[OscarUpload]) -> str:
    return json.dumps([upload_to_json(u) for u in uploads], indent=2, sort_keys=True) + "\n"


def uploads_from_json_text(text: str) -> list[OscarUpload]:
    return [upload_from_json(obj) for obj in json.loads(text)]


@dataclass(frozen=True)
class ClassifierUpload:
    client_id: int
    spec: MlpSpec
    params: ParamSet

    @property
    def n_params(self) -> int:
        return param_count(self.params)

    def payload(self) -> bytes:
        return params_payload(self.params)


@dataclass(frozen=True)
class ModelUpdate:
    round_index: int
    client_id: int
    params: ParamSet
    n_samples: int

    def payload(self) -> bytes:
        return params_payload(self.params)


# ---------------------------------------------------------------------------
# one-shot protocol


def client_oscar_upload(client, standardizer, embed_dim: int = 32) -> OscarUpload:
    """Average the client's per-image embeddings within each category.

    Categories with no images are omitted rather than zero-filled, so the
    upload's parameter count reflects what the client actually holds.
    """
    if len(client.train) == 0:
        raise FederationError(f"client {client.client_id} has an empty train set")
    embeddings = embed_dataset(client.train, standardizer, dim=embed_dim)
    reps = {}
    for c in sorted(set(int(v) for v in client.train.category_ids)):
        mask = client.train.category_ids == c
        reps[c] = category_representation(embeddings[mask]).astype(np.float32)
    return OscarUpload(client_id=client.client_id, representations=reps, embed_dim=embed_dim)


def collect_uploads(
    split: FederatedSplit, standardizer, embed_dim: int = 32, log: MessageLog | None = None
) -> list[OscarUpload]:
    """Run the single upstream round: one upload per client, ever."""
    uploads = []
    for client in split.clients:
        upload = client_oscar_upload(client, standardizer, embed_dim)
        uploads.append(upload)
        if log is not None:
            log.append("oscar", client_name(client.client_id), "representations", upload.payload())
    return uploads


def _image_size_of(model: DenoiserModel) -> int:
    size = int(round(float(np.sqrt(model.data_dim))))
    if size * size != model.data_dim:
        raise FederationError("denoiser data_dim is not a square image")
    return size


def _require_trained(model: DenoiserModel) -> None:
    if model.train_steps == 0:
        raise FederationError("diffusion model is untrained")


def server_synthesize(
    model: DenoiserModel,
    uploads: list[OscarUpload],
    n_per_rep: int = 10,
    guidance_scale: float = 1.0,
    n_steps: int = 50,
    seed: int = 0,
) -> Dataset:
    """Sample n_per_rep images for every uploaded (client, category) vector.

    The only inputs beyond the pretrained model are the uploads themselves;
    labels come from the conditioning category.
    """
    _require_trained(model)
    if n_per_rep < 1:
        raise FederationError("n_per_rep must be >= 1")
    size = _image_size_of(model)
    pixels, categories = [], []
    for upload in sorted(uploads, key=lambda u: u.client_id):
        for c, rep in sorted(upload.representations.items()):
            flat = sample(
                model,
                SampleRequest(
                    n_images=n_per_rep,
                    condition=rep,
                    guidance_scale=guidance_scale,
                    n_steps=n_steps,
                    seed=seed,
                    rng_label=f"synth/client{upload.client_id}/cat{c}",
                ),
            )
            pixels.append(from_model_space(flat, size))
            categories.append(np.full(n_per_rep, c, dtype=np.uint32))
    n = sum(p.shape[0] for p in pixels)
    return Dataset(
        pixels=np.concatenate(pixels),
        category_ids=np.concatenate(categories),
        domain_ids=np.full(n, SYNTHETIC_DOMAIN, dtype=np.uint32),
        instance_seeds=np.arange(n, dtype=np.uint64),
        origin="synthesized",
    )


# ---------------------------------------------------------------------------
# baselines


@dataclass(frozen=True)
class LocalResult:
    spec: MlpSpec
    params_by_client: list[ParamSet]
    accuracies: tuple[float, ...]  # each client's model on its own test set


def run_local(
    split: FederatedSplit, config: ClassifierConfig, seed: int
) -> LocalResult:
    """Standalone per-client training; nothing is ever uploaded."""
    spec = None
    params_by_client = []
    accuracies = []
    for client in split.clients:
        spec, params = train_classifier(
            flatten_images(client.train.pixels),
            client.train.category_ids.astype(np.int64),
            config,
            split.config.n_categories,
            seed,
            label=f"local/client{client.client_id}",
        )
        params_by_client.append(params)
        accuracies.append(top1_accuracy(spec, params, client.test))
    return LocalResult(spec=spec, params_by_client=params_by_client, accuracies=tuple(accuracies))


def _average_updates(updates: list[ModelUpdate]) -> ParamSet:
    total = sum(u.n_samples for u in updates)
    if total == 0:
        raise FederationError("cannot average updates with zero total samples")
    averaged: ParamSet = {}
    for k in updates[0].params:
        acc = np.zeros_like(updates[0].params[k], dtype=np.float64)
        for u in updates:
            acc += (u.n_samples / total) * u.params[k]
        averaged[k] = acc.astype(updates[0].params[k].dtype)
    return averaged


def run_fedavg(
    split: FederatedSplit,
    config: ClassifierConfig,
    rounds: int = 20,
    local_epochs: int = 2,
    seed: int = 0,
    log: MessageLog | None = None,
) -> tuple[MlpSpec, ParamSet]:
    """Multi-round weight averaging over full uploaded weights.

    Every round broadcasts the global weights, trains each client for
    local_epochs from that common start, and averages the returned weights
    by client sample count. Batch orders are drawn from per-round streams
    shared across clients, so clients holding identical data produce
    identical updates.
    """
    if rounds < 1:
        raise FederationError("rounds must be >= 1")
    n_in = split.config.image_size ** 2
    spec = classifier_spec(config, n_in, split.config.n_categories)
    params = init_params(spec, RngStream(seed, "fedavg/init"))
    for r in range(rounds):
        if log is not None:
            log.append("fedavg", "server", "broadcast", params_payload(params))
        updates = []
        for client in split.clients:
            # fresh per-round stream per client: same label, so clients with
            # identical data see identical batch orders and updates agree
            local = fit_epochs(
                spec,
                params,
                flatten_images(client.train.pixels),
                client.train.category_ids.astype(np.int64),
                RngStream(seed, f"fedavg/round{r}/batches"),
                epochs=local_epochs,
                batch_size=config.batch_size,
                lr=config.lr,
            )
            update = ModelUpdate(
                round_index=r,
                client_id=client.client_id,
                params=local,
                n_samples=len(client.train),
            )
            updates.append(update)
            if log is not None:
                log.append(
                    "fedavg", client_name(client.client_id), "model_update", update.payload()
                )
        params = _average_updates(updates)
    return spec, params


def cado_classifier_spec(data_dim: int, n_classes: int) -> MlpSpec:
    """Timestep-conditioned classifier: noised image plus time embedding."""
    return MlpSpec(
        in_dim=data_dim + CADO_TIME_DIM,
        hidden=(128, 64),
        out_dim=n_classes,
        activation="silu",
        head="softmax_ce",
    )


def train_noise_aware_classifier(
    client,
    model: DenoiserModel,
    n_classes: int,
    seed: int,
    epochs: int = 100,
    batch_size: int = 64,
    lr: float = 1e-3,
) -> tuple[MlpSpec, ParamSet]:
    """Fit log p(y | x_t, t) on freshly noised local images.

    Each batch draws its own timesteps and noise, so the classifier sees
    the whole noise range and its input gradient stays meaningful at high t.
    """
    x0 = to_model_space(client.train.pixels)
    labels = client.train.category_ids.astype(np.int64)
    spec = cado_classifier_spec(x0.shape[1], n_classes)
    stream = RngStream(seed, f"cado/client{client.client_id}/train")
    params = init_params(spec, RngStream(seed, f"cado/client{client.client_id}/init"))
    state = adam_init(params)
    n = x0.shape[0]
    for _ in range(epochs):
        order = stream.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            t = stream.integers(1, model.schedule.t_train + 1, idx.shape[0])
            eps = stream.normal((idx.shape[0], x0.shape[1])).astype(np.float32)
            x_t = q_sample(x0[idx], t, eps, model.schedule)
            inputs = np.concatenate(
                [x_t, time_embedding(t, CADO_TIME_DIM)], axis=1
            ).astype(np.float32)
            _, grads = forward_backward(spec, params, inputs, labels[idx])
            params, state = adam_step(params, grads, state, lr=lr)
    return spec, params


def cado_synthesize(
    model: DenoiserModel,
    uploads: list[ClassifierUpload],
    n_classes: int,
    n_per_rep: int = 10,
    guidance_scale: float = 1.0,
    n_steps: int = 50,
    seed: int = 0,
) -> Dataset:
    """Classifier-guided sampling per (uploaded classifier, category)."""
    _require_trained(model)
    if n_per_rep < 1:
        raise FederationError("n_per_rep must be >= 1")
    size = _image_size_of(model)
    pixels, categories = [], []
    for upload in sorted(uploads, key=lambda u: u.client_id):
        for c in range(n_classes):
            def grad_fn(x, t, _upload=upload, _c=c):
                t_rows = np.full(x.shape[0], t, dtype=np.int64)
                inputs = np.concatenate(
                    [x, time_embedding(t_rows, CADO_TIME_DIM)], axis=1
                ).astype(np.float32)
                grad = logprob_input_grad(
                    _upload.spec,
                    _upload.params,
                    inputs,
                    np.full(x.shape[0], _c, dtype=np.int64),
                )
                return grad[:, : x.shape[1]].astype(np.float32)

            flat = sample_classifier_guided(
                model,
                SampleRequest(
                    n_images=n_per_rep,
                    condition=None,
                    guidance_scale=guidance_scale,
                    n_steps=n_steps,
                    seed=seed,
                    rng_label=f"cado-synth/client{upload.client_id}/cat{c}",
                ),
                grad_fn,
            )
            pixels.append(from_model_space(flat, size))
            categories.append(np.full(n_per_rep, c, dtype=np.uint32))
    n = sum(p.shape[0] for p in pixels)
    return Dataset(
        pixels=np.concatenate(pixels),
        category_ids=np.concatenate(categories),
        domain_ids=np.full(n, SYNTHETIC_DOMAIN, dtype=np.uint32),
        instance_seeds=np.arange(n, dtype=np.uint64),
        origin="synthesized",
    )


@dataclass(frozen=True)
class CadoResult:
    uploads: list[ClassifierUpload]
    d_syn: Dataset
    spec: MlpSpec
    params: ParamSet


def run_cado(
    split: FederatedSplit,
    model: DenoiserModel,
    config: ClassifierConfig,
    n_per_rep: int = 10,
    guidance_scale: float = 1.0,
    n_steps: int = 50,
    classifier_epochs: int = 100,
    seed: int = 0,
    log: MessageLog | None = None,
) -> CadoResult:
    """Classifier-upload baseline: one noise-aware classifier per client,
    server-side classifier-guided sampling, then global training as usual."""
    _require_trained(model)
    n_classes = split.config.n_categories
    uploads = []
    for client in split.clients:
        spec, params = train_noise_aware_classifier(
            client, model, n_classes, seed, epochs=classifier_epochs,
            batch_size=config.batch_size, lr=config.lr,
        )
        upload = ClassifierUpload(client_id=client.client_id, spec=spec, params=params)
        uploads.append(upload)
        if log is not None:
            log.append(
                "cado", client_name(client.client_id), "noise_classifier", upload.payload()
            )
    d_syn = cado_synthesize(
        model, uploads, n_classes,
        n_per_rep=n_per_rep, guidance_scale=guidance_scale,
        n_steps=n_steps, seed=seed,
    )
    spec, params = train_global_classifier(
        d_syn, config, n_classes, seed, label="global/cado"
    )
    return CadoResult(uploads=uploads, d_syn=d_syn, spec=spec, params=params)


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class AccountingRecord:
    method: str
    params_per_client: dict[str, int]
    bytes_per_client: dict[str, int]
    rounds: int

    @property
    def max_per_client(self) -> int:
        return max(self.params_per_client.values(), default=0)


def account_messages(log: MessageLog) -> dict[str, AccountingRecord]:
    """Exact upstream totals per method from the message log."""
    by_method: dict[str, dict[str, list[Message]]] = {}
    for m in log.upstream():
        by_method.setdefault(m.method, {}).setdefault(m.sender, []).append(m)
    records = {}
    for method, by_sender in sorted(by_method.items()):
        params = {s: sum(m.n_floats for m in msgs) for s, msgs in by_sender.items()}
        records[method] = AccountingRecord(
            method=method,
            params_per_client=params,
            bytes_per_client={s: 4 * p for s, p in params.items()},
            rounds=max(len(msgs) for msgs in by_sender.values()),
        )
    return records


def reduction_vs(accounting: dict[str, AccountingRecord], method: str) -> float:
    """1 - params(oscar) / params(method), on per-client maxima."""
    if "oscar" not in accounting or method not in accounting:
        raise FederationError(f"accounting lacks 'oscar' or '{method}'")
    other = accounting[method].max_per_client
    if other == 0:
        raise FederationError(f"method '{method}' uploaded nothing")
    return 1.0 - accounting["oscar"].max_per_client / other


def oscar_upload_params(n_categories: int, embed_dim: int) -> int:
    return n_categories * embed_dim


def full_scale_summary() -> dict[str, int]:
    """Per-client upload sizes at deployment scale, in exact parameters."""
    out = {
        name: oscar_upload_params(c, d)
        for name, (c, d) in FULL_SCALE_UPLOAD_SHAPES.items()
    }
    out["fedavg"] = FULL_SCALE_CLASSIFIER_PARAMS * FULL_SCALE_FEDAVG_ROUNDS
    return out
