"""Stage-oriented experiment orchestration and artifact management.

Every artifact is a pure function of (config, seed), so rerunning any
stage rewrites byte-identical files and the manifest digests double as a
determinism check. The expensive pretraining checkpoint is shared by all
methods and by the sample-count ablation.
"""
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, render_config
from .diffusion import (
    make_denoiser,
    make_schedule,
    read_classifier,
    read_denoiser,
    to_model_space,
    train_denoiser_staged,
    write_classifier,
    write_denoiser,
)
from .encoder import Standardizer, embed_dataset, fit_standardizer
from .evaluation import (
    MethodResult,
    build_report,
    evaluate_on_split,
    sample_count_ablation,
    split_test_digest,
    top1_accuracy,
    train_global_classifier,
)
from .federation import (
    ClassifierUpload,
    MessageLog,
    account_messages,
    cado_synthesize,
    collect_uploads,
    run_fedavg,
    run_local,
    server_synthesize,
    train_noise_aware_classifier,
    uploads_from_json_text,
    uploads_to_json_text,
)
from .numerics import RngStream
from .synthdata import (
    STYLE_POOL_SIZE,
    build_federated_split,
    build_pretrain_corpus,
    read_dataset,
    write_dataset,
)

log = logging.getLogger("oscar_sim")

STAGES = ("pretrain", "federate", "synthesize", "train", "evaluate", "report")

# canonical method order for reports
_METHOD_ORDER = ("oscar", "local", "fedavg", "cado")


class PipelineError(ValueError):
    pass


class Workspace:
    """Artifact paths under one output directory."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out = Path(config.run.out)
        self.effective_cfg = self.out / "effective.cfg"
        self.standardizer = self.out / "standardizer.json"
        self.denoiser = self.out / "denoiser.osdm"
        self.uploads = self.out / "uploads.json"
        self.messages = self.out / "messages.log"
        self.d_syn = self.out / "d_syn.osfd"
        self.d_syn_cado = self.out / "d_syn_cado.osfd"
        self.results = self.out / "results.json"
        self.report = self.out / "report.csv"
        self.ablation = self.out / "ablation.csv"
        self.manifest = self.out / "manifest.json"

    def cado_classifier(self, client_id: int) -> Path:
        return self.out / f"cado_classifier_client{client_id}.osdm"

    def method_classifier(self, method: str) -> Path:
        return self.out / f"classifier_{method}.osdm"

    def local_classifier(self, client_id: int) -> Path:
        return self.out / f"classifier_local_client{client_id}.osdm"

    def require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise PipelineError(f"run stage '{produced_by}' first")
        return path

    def write_text(self, path: Path, text: str) -> None:
        path.write_text(text, encoding="utf-8")

    def refresh_manifest(self) -> None:
        digests = {}
        for path in sorted(self.out.rglob("*")):
            if path.is_file() and path != self.manifest:
                rel = path.relative_to(self.out).as_posix()
                digests[rel] = hashlib.sha256(path.read_bytes()).hexdigest()
        body = json.dumps(digests, indent=2, sort_keys=True) + "\n"
        self.write_text(self.manifest, body)


def _methods(config: ExperimentConfig) -> tuple[str, ...]:
    return tuple(m for m in _METHOD_ORDER if m in config.federation.methods)


def _pretrain_pool(config: ExperimentConfig) -> tuple[int, ...]:
    # unique mode draws client domains from the whole style pool, so the
    # generative model must have seen every style it may be asked to render
    if config.federation.mode == "unique":
        return tuple(range(STYLE_POOL_SIZE))
    return tuple(range(config.corpus.n_domains))


def _load_standardizer(ws: Workspace) -> Standardizer:
    ws.require(ws.standardizer, "pretrain")
    return Standardizer.from_json(ws.standardizer.read_text(encoding="utf-8"))


def _load_log(ws: Workspace) -> MessageLog:
    if ws.messages.exists():
        return MessageLog.from_text(ws.messages.read_text(encoding="utf-8"))
    return MessageLog()


def stage_pretrain(config: ExperimentConfig, ws: Workspace) -> None:
    t0 = time.time()
    seed = config.run.seed
    corpus = build_pretrain_corpus(
        config.corpus_config(),
        images_per_cell=config.corpus.images_per_cell,
        domain_pool=_pretrain_pool(config),
    )
    standardizer = fit_standardizer(corpus)
    cond = embed_dataset(corpus, standardizer, dim=config.diffusion.embed_dim)
    x0 = to_model_space(corpus.pixels)
    d = config.diffusion
    schedule = make_schedule(d.t_train)
    model = make_denoiser(
        x0.shape[1], d.embed_dim, schedule, RngStream(seed, "diffusion/init")
    )
    model, losses = train_denoiser_staged(
        model, x0, cond, RngStream(seed, "diffusion/train"),
        steps=d.train_steps, batch_size=d.batch_size, lr=d.lr, p_uncond=d.p_uncond,
    )
    ws.write_text(ws.standardizer, standardizer.to_json() + "\n")
    write_denoiser(model, ws.denoiser)
    log.info(
        "pretrain: %d images, %d steps, loss %.3f -> %.3f (%.0fs)",
        len(corpus), d.train_steps, losses[0], float(np.mean(losses[-200:])),
        time.time() - t0,
    )


def stage_federate(config: ExperimentConfig, ws: Workspace) -> None:
    t0 = time.time()
    seed = config.run.seed
    standardizer = _load_standardizer(ws)
    split = build_federated_split(config.corpus_config(), mode=config.federation.mode)
    methods = _methods(config)
    msg_log = MessageLog()
    if "oscar" in methods:
        uploads = collect_uploads(
            split, standardizer, embed_dim=config.diffusion.embed_dim, log=msg_log
        )
        ws.write_text(ws.uploads, uploads_to_json_text(uploads))
    if "cado" in methods:
        model = read_denoiser(ws.require(ws.denoiser, "pretrain"))
        for client in split.clients:
            spec, params = train_noise_aware_classifier(
                client, model, config.corpus.n_categories, seed,
                epochs=config.federation.cado_epochs,
                batch_size=config.classifier.batch_size,
                lr=config.classifier.lr,
            )
            upload = ClassifierUpload(client.client_id, spec, params)
            msg_log.append(
                "cado", f"client_{client.client_id}", "noise_classifier", upload.payload()
            )
            write_classifier(spec, params, ws.cado_classifier(client.client_id))
    ws.write_text(ws.messages, msg_log.to_text())
    log.info("federate: %d messages (%.0fs)", len(msg_log.records), time.time() - t0)


def stage_synthesize(config: ExperimentConfig, ws: Workspace) -> None:
    t0 = time.time()
    seed = config.run.seed
    d, f = config.diffusion, config.federation
    methods = _methods(config)
    model = read_denoiser(ws.require(ws.denoiser, "pretrain"))
    if "oscar" in methods:
        uploads = uploads_from_json_text(
            ws.require(ws.uploads, "federate").read_text(encoding="utf-8")
        )
        d_syn = server_synthesize(
            model, uploads,
            n_per_rep=f.n_per_rep, guidance_scale=d.guidance_scale,
            n_steps=d.n_steps, seed=seed,
        )
        write_dataset(d_syn, ws.d_syn)
        log.info("synthesize: %d images for oscar", len(d_syn))
    if "cado" in methods:
        cls_uploads = []
        for client_id in range(config.corpus.n_clients):
            path = ws.require(ws.cado_classifier(client_id), "federate")
            spec, params = read_classifier(path)
            cls_uploads.append(ClassifierUpload(client_id, spec, params))
        d_syn_cado = cado_synthesize(
            model, cls_uploads, config.corpus.n_categories,
            n_per_rep=f.n_per_rep, guidance_scale=d.guidance_scale,
            n_steps=d.n_steps, seed=seed,
        )
        write_dataset(d_syn_cado, ws.d_syn_cado)
        log.info("synthesize: %d images for cado", len(d_syn_cado))
    log.info("synthesize done (%.0fs)", time.time() - t0)


def stage_train(config: ExperimentConfig, ws: Workspace) -> None:
    t0 = time.time()
    seed = config.run.seed
    n_classes = config.corpus.n_categories
    cls_config = config.classifier_config()
    methods = _methods(config)
    split = build_federated_split(config.corpus_config(), mode=config.federation.mode)
    if "oscar" in methods:
        d_syn = read_dataset(ws.require(ws.d_syn, "synthesize"), origin="synthesized")
        spec, params = train_global_classifier(
            d_syn, cls_config, n_classes, seed, label="global/oscar"
        )
        write_classifier(spec, params, ws.method_classifier("oscar"))
    if "local" in methods:
        result = run_local(split, cls_config, seed)
        for client, params in zip(split.clients, result.params_by_client):
            write_classifier(result.spec, params, ws.local_classifier(client.client_id))
    if "fedavg" in methods:
        msg_log = _load_log(ws)
        fed_log = MessageLog()
        spec, params = run_fedavg(
            split, cls_config,
            rounds=config.federation.rounds,
            local_epochs=config.federation.local_epochs,
            seed=seed, log=fed_log,
        )
        write_classifier(spec, params, ws.method_classifier("fedavg"))
        msg_log.replace_method("fedavg", fed_log)
        ws.write_text(ws.messages, msg_log.to_text())
    if "cado" in methods:
        d_syn_cado = read_dataset(
            ws.require(ws.d_syn_cado, "synthesize"), origin="synthesized"
        )
        spec, params = train_global_classifier(
            d_syn_cado, cls_config, n_classes, seed, label="global/cado"
        )
        write_classifier(spec, params, ws.method_classifier("cado"))
    log.info("train: methods %s (%.0fs)", ",".join(methods), time.time() - t0)


def stage_evaluate(config: ExperimentConfig, ws: Workspace) -> None:
    t0 = time.time()
    split = build_federated_split(config.corpus_config(), mode=config.federation.mode)
    methods = _methods(config)
    accounting = account_messages(_load_log(ws))
    results = {}
    for method in methods:
        if method == "local":
            spec = None
            accs = []
            for client in split.clients:
                path = ws.require(ws.local_classifier(client.client_id), "train")
                spec, params = read_classifier(path)
                accs.append(top1_accuracy(spec, params, client.test))
            n = np.array([len(c.test) for c in split.clients], dtype=np.float64)
            pooled = float(np.dot(accs, n) / n.sum())
            results[method] = {
                "per_client": accs,
                "pooled": pooled,
                "uploaded_params": 0,
                "uploaded_bytes": 0,
                "rounds": 0,
            }
            continue
        path = ws.require(ws.method_classifier(method), "train")
        spec, params = read_classifier(path)
        acct = accounting.get(method)
        uploaded = acct.max_per_client if acct else 0
        rounds = acct.rounds if acct else 0
        r = evaluate_on_split(method, spec, params, split, uploaded, rounds)
        results[method] = {
            "per_client": list(r.per_client),
            "pooled": r.pooled,
            "uploaded_params": r.uploaded_params,
            "uploaded_bytes": r.uploaded_bytes,
            "rounds": r.rounds,
        }
    body = {
        "seed": config.run.seed,
        "mode": config.federation.mode,
        "test_digest": split_test_digest(split),
        "methods": results,
    }
    ws.write_text(ws.results, json.dumps(body, indent=2, sort_keys=True) + "\n")
    log.info("evaluate: %s (%.0fs)", ",".join(methods), time.time() - t0)


def stage_report(config: ExperimentConfig, ws: Workspace) -> None:
    body = json.loads(ws.require(ws.results, "evaluate").read_text(encoding="utf-8"))
    results = []
    for method in _METHOD_ORDER:
        if method not in body["methods"]:
            continue
        entry = body["methods"][method]
        results.append(
            MethodResult(
                method=method,
                per_client=tuple(entry["per_client"]),
                pooled=entry["pooled"],
                test_digest=body["test_digest"],
                uploaded_params=entry["uploaded_params"],
                uploaded_bytes=entry["uploaded_bytes"],
                rounds=entry["rounds"],
            )
        )
    ws.write_text(ws.report, build_report(results, seed=body["seed"]))
    log.info("report: %s", ws.report)


_STAGE_FNS = {
    "pretrain": stage_pretrain,
    "federate": stage_federate,
    "synthesize": stage_synthesize,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_pipeline(config: ExperimentConfig, stage: str) -> Workspace:
    """Run one stage, or all of them in order. Returns the workspace."""
    if stage != "all" and stage not in _STAGE_FNS:
        raise PipelineError(f"unknown stage '{stage}'")
    ws = Workspace(config)
    ws.out.mkdir(parents=True, exist_ok=True)
    ws.write_text(ws.effective_cfg, render_config(config))
    for name in STAGES if stage == "all" else (stage,):
        log.info("stage %s", name)
        _STAGE_FNS[name](config, ws)
        ws.refresh_manifest()
    return ws


def run_ablation(
    config: ExperimentConfig, n_list: tuple[int, ...] = (5, 10, 20, 30)
) -> Workspace:
    """Sample-count sweep on top of existing pretrain + federate artifacts."""
    ws = Workspace(config)
    ws.out.mkdir(parents=True, exist_ok=True)
    ws.write_text(ws.effective_cfg, render_config(config))
    model = read_denoiser(ws.require(ws.denoiser, "pretrain"))
    uploads = uploads_from_json_text(
        ws.require(ws.uploads, "federate").read_text(encoding="utf-8")
    )
    split = build_federated_split(config.corpus_config(), mode=config.federation.mode)
    csv_text = sample_count_ablation(
        model, uploads, split, config.classifier_config(),
        n_list=n_list,
        guidance_scale=config.diffusion.guidance_scale,
        n_steps=config.diffusion.n_steps,
        seed=config.run.seed,
    )
    ws.write_text(ws.ablation, csv_text)
    ws.refresh_manifest()
    log.info("ablation: %s", ws.ablation)
    return ws
