import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from patternbank import cli
from patternbank import experiment as X
from patternbank.aggregation import row_normalize


def tiny_config(**overrides):
    base = dict(
        synthetic_num_cities=3, synthetic_nodes_per_city=6, synthetic_days=4,
        synthetic_noise_std=3.0, d=12, d_q=12, heads=2, ff_width=24,
        enc_depth=1, pretrain_epochs=2, pretrain_lr=1e-3, scales=(1, 3), K=4,
        meta_epochs=1, tasks_per_epoch=1, update_step=2, finetune_epochs=2,
        few_shot_days=1, eval_stride=144, train_stride=144, seed=0)
    base.update(overrides)
    return X.ExperimentConfig(**base)


class TestConfig:
    def test_defaults_match_reference_settings(self):
        cfg = X.ExperimentConfig()
        assert cfg.T0 == 288 and cfg.P == 12 and cfg.horizon == 36
        assert cfg.scales == (1, 3, 6, 12, 24)
        assert cfg.K == 10 and cfg.gamma == 10.0
        assert cfg.d == 128 and cfg.d_q == 128
        assert cfg.mask_ratio == 0.75
        assert cfg.pretrain_lr == 1e-4
        assert cfg.alpha == 5e-4 and cfg.beta == 5e-4
        assert cfg.finetune_lr == 1e-3 and cfg.finetune_weight_decay == 1e-2
        assert cfg.tasks_per_epoch == 2
        assert cfg.horizons_minutes == (10, 60, 120, 180)
        assert cfg.few_shot_days == 3

    def test_roundtrip(self, tmp_path):
        cfg = tiny_config(gamma=3.5, no_meta=True)
        f = tmp_path / "c.json"
        cfg.save(f)
        again = X.ExperimentConfig.load(f)
        assert again == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            X.ExperimentConfig.from_dict({"bogus_field": 1})

    def test_hash_covers_every_field(self):
        cfg = tiny_config()
        base_hash = X.config_hash(cfg)
        for f in dataclasses.fields(X.ExperimentConfig):
            raw = cfg.to_dict()
            old = raw[f.name]
            if isinstance(old, bool):
                raw[f.name] = not old
            elif isinstance(old, int):
                raw[f.name] = old + 1
            elif isinstance(old, float):
                raw[f.name] = old + 0.125
            elif isinstance(old, list):
                raw[f.name] = old + [99]
            else:
                raw[f.name] = "changed"
            mutated = X.ExperimentConfig.from_dict(raw)
            assert X.config_hash(mutated) != base_hash, f.name

    def test_ablation_flags_resolve(self):
        cfg = tiny_config(no_st_decoder=True, short_only_patterns=True)
        assert cfg.effective_decoder_variant == "T"
        assert cfg.effective_scales == (1,)

    def test_flag_changes_one_stage_hash_chain(self):
        base = X.stage_hashes(tiny_config())
        meta_only = X.stage_hashes(tiny_config(no_meta=True))
        assert meta_only["corpus"] == base["corpus"]
        assert meta_only["pretrain"] == base["pretrain"]
        assert meta_only["bank"] == base["bank"]
        assert meta_only["meta"] != base["meta"]
        dec = X.stage_hashes(tiny_config(no_st_decoder=True))
        assert dec["corpus"] == base["corpus"]
        assert dec["pretrain"] != base["pretrain"]


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    res = X.run_experiment(cfg, run_dir)
    return cfg, run_dir, res


class TestRunExperiment:
    def test_artifacts_exist(self, completed_run):
        _, run_dir, res = completed_run
        for rel in ("config.json", "manifest.json", "metrics.csv",
                    "metrics_ha.csv", "forecasts.csv",
                    "checkpoints/pretrain.npz", "checkpoints/bank.npz",
                    "checkpoints/theta_meta.npz", "checkpoints/theta_final.npz",
                    "traces/pretrain_curve.csv", "traces/cluster_report.csv",
                    "matrices/A_hat.csv", "figures/pretrain_curve.png",
                    "figures/metrics_by_horizon.png", "figures/adjacency.png"):
            assert (run_dir / rel).exists(), rel
        assert res.metrics.rows

    def test_rerun_uses_cache_and_reproduces_metrics(self, completed_run):
        cfg, run_dir, _ = completed_run
        before = (run_dir / "metrics.csv").read_bytes()
        logs = []
        X.run_experiment(cfg, run_dir, log=logs.append)
        assert any("cached" in m for m in logs)
        assert (run_dir / "metrics.csv").read_bytes() == before

    def test_bit_identical_across_fresh_runs(self, tmp_path):
        cfg = tiny_config(seed=5)
        a = tmp_path / "a"
        b = tmp_path / "b"
        X.run_experiment(cfg, a)
        X.run_experiment(cfg, b)
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "metrics_ha.csv").read_bytes() == (b / "metrics_ha.csv").read_bytes()

    def test_changed_config_invalidates_downstream_stage(self, completed_run):
        cfg, run_dir, _ = completed_run
        logs = []
        cfg2 = X.ExperimentConfig.from_dict({**cfg.to_dict(),
                                             "finetune_epochs": 3})
        X.run_experiment(cfg2, run_dir, log=logs.append)
        assert any("pretrain: cached" in m for m in logs)
        assert any("finetune: adapting" in m for m in logs)

    def test_no_reconstruction_swaps_operator_dump(self, tmp_path):
        cfg = tiny_config(no_reconstruction=True)
        run_dir = tmp_path / "noreco"
        X.run_experiment(cfg, run_dir)
        with open(run_dir / "config.json") as fh:
            assert json.load(fh)["no_reconstruction"] is True
        op = np.genfromtxt(run_dir / "matrices" / "A_operator.csv", delimiter=",")
        raw = np.genfromtxt(run_dir / "matrices" / "A.csv", delimiter=",")
        assert np.allclose(op, row_normalize(raw), atol=1e-9)

    def test_missing_upstream_artifact_names_stage(self, tmp_path):
        cfg = tiny_config()
        with pytest.raises(X.StageError, match="stage evaluate"):
            X.run_experiment(cfg, tmp_path / "cold", stages=("corpus", "evaluate"))


class TestAblations:
    def test_variant_enumeration_and_isolation(self, tmp_path):
        cfg = tiny_config(meta_epochs=1, finetune_epochs=1)
        results = X.run_ablations(cfg, tmp_path / "abl")
        assert set(results) == {"full", "no_meta", "no_st_decoder",
                                "short_only_patterns", "no_reconstruction"}
        table = (tmp_path / "abl" / "ablations.csv").read_text()
        assert "no_meta" in table and "full" in table
        assert (tmp_path / "abl" / "ablation_rmse.png").exists()
        # cache isolation: the no_meta variant shares the pretrain hash with
        # the full run but not the meta hash
        h_full = X.stage_hashes(cfg)
        h_nm = X.stage_hashes(X.ExperimentConfig.from_dict(
            {**cfg.to_dict(), "no_meta": True}))
        assert h_full["pretrain"] == h_nm["pretrain"]
        assert h_full["meta"] != h_nm["meta"]


class TestCli:
    def test_generate_synthetic(self, tmp_path, capsys):
        rc = cli.main(["generate-synthetic", "--out", str(tmp_path / "corpus"),
                       "--num-cities", "2", "--nodes-per-city", "4",
                       "--days", "2", "--seed", "3"])
        assert rc == 0
        assert (tmp_path / "corpus" / "synth0" / "speed.csv").exists()
        assert (tmp_path / "corpus" / "planted_labels.json").exists()

    def test_run_and_baseline(self, tmp_path, capsys):
        cfgfile = tmp_path / "cfg.json"
        tiny_config().save(cfgfile)
        rc = cli.main(["run", "--run-dir", str(tmp_path / "run"),
                       "--config", str(cfgfile)])
        out = capsys.readouterr().out
        assert rc == 0
        assert "horizon" in out
        rc = cli.main(["baseline-ha", "--run-dir", str(tmp_path / "run"),
                       "--config", str(cfgfile)])
        assert rc == 0
        assert "HA" in capsys.readouterr().out

    def test_flag_overrides_config(self, tmp_path):
        cfgfile = tmp_path / "cfg.json"
        tiny_config().save(cfgfile)
        rc = cli.main(["pretrain", "--run-dir", str(tmp_path / "run2"),
                       "--config", str(cfgfile), "--pretrain-epochs", "1",
                       "--scales", "1,3"])
        assert rc == 0
        saved = json.loads((tmp_path / "run2" / "config.json").read_text())
        assert saved["pretrain_epochs"] == 1
        assert saved["scales"] == [1, 3]

    def test_failure_exit_code_names_stage(self, tmp_path, capsys):
        cfgfile = tmp_path / "cfg.json"
        tiny_config().save(cfgfile)
        rc = cli.main(["evaluate", "--run-dir", str(tmp_path / "cold"),
                       "--config", str(cfgfile)])
        assert rc == 2
        assert "stage evaluate" in capsys.readouterr().err

    def test_loading_corpus_from_directory(self, tmp_path):
        rc = cli.main(["generate-synthetic", "--out", str(tmp_path / "corpus"),
                       "--num-cities", "3", "--nodes-per-city", "5",
                       "--days", "3", "--seed", "1"])
        assert rc == 0
        cfg = tiny_config(corpus_dir=str(tmp_path / "corpus"),
                          synthetic_num_cities=3)
        cfgfile = tmp_path / "cfg.json"
        cfg.save(cfgfile)
        rc = cli.main(["pretrain", "--run-dir", str(tmp_path / "runloaded"),
                       "--config", str(cfgfile)])
        assert rc == 0
