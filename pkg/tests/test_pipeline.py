"""End-to-end checks for the staged pipeline on a miniature experiment."""
import dataclasses
import json

import numpy as np
import pytest

from oscar_sim.config import (
    ClassifierSection,
    CorpusSection,
    DiffusionSection,
    ExperimentConfig,
    FederationSection,
    RunSection,
)
from oscar_sim.pipeline import STAGES, PipelineError, Workspace, run_ablation, run_pipeline
from oscar_sim.synthdata import SYNTHETIC_DOMAIN, read_dataset


def mini_config(out: str, seed: int = 1288) -> ExperimentConfig:
    return ExperimentConfig(
        corpus=CorpusSection(
            n_categories=3,
            n_domains=2,
            n_clients=2,
            images_per_category=6,
            test_images_per_category=4,
            image_size=16,
            images_per_cell=12,
        ),
        diffusion=DiffusionSection(
            t_train=30,
            train_steps=60,
            batch_size=32,
            guidance_scale=1.5,
            n_steps=6,
            embed_dim=8,
        ),
        federation=FederationSection(rounds=2, local_epochs=1, cado_epochs=2, n_per_rep=2),
        classifier=ClassifierSection(width=16, max_epochs=6, patience=2, batch_size=16),
        run=RunSection(seed=seed, out=out),
    )


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline") / "out"
    config = mini_config(str(out))
    ws = run_pipeline(config, "all")
    return config, ws


class TestFullRun:
    def test_all_artifacts_exist(self, full_run):
        config, ws = full_run
        expected = [
            ws.effective_cfg,
            ws.standardizer,
            ws.denoiser,
            ws.uploads,
            ws.messages,
            ws.d_syn,
            ws.d_syn_cado,
            ws.results,
            ws.report,
            ws.manifest,
        ]
        expected += [ws.cado_classifier(i) for i in range(config.corpus.n_clients)]
        expected += [ws.method_classifier(m) for m in ("oscar", "fedavg", "cado")]
        expected += [ws.local_classifier(i) for i in range(config.corpus.n_clients)]
        for path in expected:
            assert path.is_file(), path.name

    def test_manifest_covers_every_file_except_itself(self, full_run):
        _, ws = full_run
        digests = json.loads(ws.manifest.read_text(encoding="utf-8"))
        on_disk = {
            p.relative_to(ws.out).as_posix()
            for p in ws.out.rglob("*")
            if p.is_file() and p != ws.manifest
        }
        assert set(digests) == on_disk

    def test_synthesized_set_size_and_labels(self, full_run):
        config, ws = full_run
        d_syn = read_dataset(ws.d_syn)
        c = config.corpus
        assert len(d_syn) == c.n_categories * c.n_clients * config.federation.n_per_rep
        # provenance survives serialization through the reserved domain id
        assert np.all(d_syn.domain_ids == SYNTHETIC_DOMAIN)
        assert set(np.unique(d_syn.category_ids)) == set(range(c.n_categories))

    def test_results_cover_all_methods(self, full_run):
        config, ws = full_run
        results = json.loads(ws.results.read_text(encoding="utf-8"))
        assert set(results["methods"]) == {"oscar", "local", "fedavg", "cado"}
        assert results["seed"] == config.run.seed
        for entry in results["methods"].values():
            assert len(entry["per_client"]) == config.corpus.n_clients
            for acc in entry["per_client"] + [entry["pooled"]]:
                assert 0.0 <= acc <= 1.0

    def test_report_rows_match_results(self, full_run):
        config, ws = full_run
        lines = ws.report.read_text(encoding="utf-8").splitlines()
        assert lines[0] == (
            "method,client_1,client_2,avg,pooled,uploaded_params,uploaded_bytes,rounds,seed"
        )
        assert [ln.split(",")[0] for ln in lines[1:]] == ["oscar", "local", "fedavg", "cado"]
        results = json.loads(ws.results.read_text(encoding="utf-8"))
        for ln in lines[1:]:
            cells = ln.split(",")
            entry = results["methods"][cells[0]]
            assert cells[3] == f"{np.mean(entry['per_client']):.4f}"
            assert cells[4] == f"{entry['pooled']:.4f}"
            assert cells[-1] == str(config.run.seed)

    def test_effective_config_echoes_run_settings(self, full_run):
        config, ws = full_run
        text = ws.effective_cfg.read_text(encoding="utf-8")
        assert f"seed = {config.run.seed}" in text
        assert "t_train = 30" in text

    def test_one_upstream_message_per_client_for_oscar(self, full_run):
        config, ws = full_run
        rows = [ln.split() for ln in ws.messages.read_text(encoding="utf-8").splitlines()]
        senders = [r[1] for r in rows if r[0] == "oscar" and r[1] != "server"]
        assert sorted(senders) == [f"client_{i}" for i in range(config.corpus.n_clients)]


class TestDeterminism:
    def test_same_seed_other_directory_reproduces_artifacts(self, full_run, tmp_path):
        _, ws = full_run
        out_b = tmp_path / "out_b"
        ws_b = run_pipeline(mini_config(str(out_b)), "all")
        a = json.loads(ws.manifest.read_text(encoding="utf-8"))
        b = json.loads(ws_b.manifest.read_text(encoding="utf-8"))
        # the effective config embeds the output path, so only that digest may move
        a.pop("effective.cfg")
        b.pop("effective.cfg")
        assert a == b

    def test_rerunning_one_stage_is_byte_stable(self, full_run):
        _, ws = full_run
        before = ws.d_syn.read_bytes()
        manifest_before = ws.manifest.read_bytes()
        run_pipeline(dataclasses.replace(ws.config), "synthesize")
        assert ws.d_syn.read_bytes() == before
        assert ws.manifest.read_bytes() == manifest_before


class TestStagePrerequisites:
    def test_synthesize_before_pretrain(self, tmp_path):
        config = mini_config(str(tmp_path / "out"))
        with pytest.raises(PipelineError, match="run stage 'pretrain' first"):
            run_pipeline(config, "synthesize")

    def test_train_before_synthesize(self, tmp_path):
        config = mini_config(str(tmp_path / "out"))
        with pytest.raises(PipelineError, match="run stage 'synthesize' first"):
            run_pipeline(config, "train")

    def test_ablation_needs_a_denoiser(self, tmp_path):
        config = mini_config(str(tmp_path / "out"))
        with pytest.raises(PipelineError, match="run stage 'pretrain' first"):
            run_ablation(config, (1, 2))

    def test_ablation_needs_uploads(self, full_run, tmp_path):
        _, done = full_run
        out = tmp_path / "out"
        out.mkdir()
        (out / "denoiser.osdm").write_bytes(done.denoiser.read_bytes())
        config = mini_config(str(out))
        with pytest.raises(PipelineError, match="run stage 'federate' first"):
            run_ablation(config, (1, 2))

    def test_unknown_stage_is_rejected(self, tmp_path):
        config = mini_config(str(tmp_path / "out"))
        with pytest.raises(PipelineError, match="unknown stage 'deploy'"):
            run_pipeline(config, "deploy")

    def test_stage_names_are_ordered(self):
        assert STAGES == ("pretrain", "federate", "synthesize", "train", "evaluate", "report")


class TestAblation:
    def test_ablation_writes_one_row_per_count(self, full_run):
        config, ws = full_run
        run_ablation(config, (1, 2))
        lines = ws.ablation.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "n_per_rep,client_1,client_2,avg,seed"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2"]
        for ln in lines[1:]:
            assert ln.split(",")[-1] == str(config.run.seed)
