import hashlib
import json

import pytest

from advclip.cli import COMMANDS, ConfigError, apply_setting, build_config, dump_config, main
from advclip.harness import ExperimentConfig
from conftest import tiny_experiment


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return dump_config(tiny_experiment(root / "run"), root / "tiny.cfg")


@pytest.fixture(scope="module")
def pipeline_out(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    assert main(["pipeline", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    return out


def report_hashes(out):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted((out / "reports").glob("*.csv"))}


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_every_subcommand(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    assert "usage:" in capsys.readouterr().out


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_setting(ExperimentConfig(), "detector.gamma", "1")

    def test_section_rejected(self):
        with pytest.raises(ConfigError, match="section"):
            apply_setting(ExperimentConfig(), "detector.schedule", "1")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bad value"):
            apply_setting(ExperimentConfig(), "detector.n_ctx", "many")

    def test_types_coerced(self):
        cfg = ExperimentConfig()
        apply_setting(cfg, "attack.epsilons", "5/255,10/255")
        apply_setting(cfg, "detector.bottleneck", "none")
        apply_setting(cfg, "detector.augment.enabled", "false")
        apply_setting(cfg, "attack.pgd.steps", "3")
        assert cfg.attack.epsilons == (5 / 255, 10 / 255)
        assert cfg.detector.bottleneck is None and cfg.detector.augment.enabled is False
        assert cfg.attack_config("PGD", 10 / 255).steps == 3
        assert cfg.attack_config("BIM", 10 / 255).steps == 10

    def test_flags_override_file(self, tiny_cfg):
        cfg = build_config(tiny_cfg, ["seed=5"])
        assert cfg.seed == 5 and cfg.pool.train_clean == 16

    def test_env_out(self, monkeypatch, tmp_path):
        monkeypatch.setenv("ADVCLIP_OUT", str(tmp_path / "env"))
        assert build_config().out_dir == str(tmp_path / "env")
        assert build_config(out=tmp_path / "flag").out_dir == str(tmp_path / "flag")

    def test_dump_roundtrip(self, tmp_path):
        cfg = build_config(overrides=["attack.tim.kernel_size=5", "victim.corpus.classes=red circle,gray bar"])
        assert build_config(dump_config(cfg, tmp_path / "c.cfg")).digest() == cfg.digest()

    def test_bundled_configs_load(self):
        for name in ("paper-protocol", "desk"):
            assert build_config(name).attacks


class TestExitCodes:
    def test_bad_key_exit_2(self, capsys, tmp_path):
        code, _, err = run(capsys, "pretrain", "--set", "nope=1", "--out", str(tmp_path))
        assert code == 2 and err.startswith("error category=config")

    def test_missing_artifact_exit_3(self, capsys, tiny_cfg, tmp_path):
        code, _, err = run(capsys, "matrix", "--config", str(tiny_cfg), "--out", str(tmp_path))
        assert code == 3 and err.startswith("error category=missing")
        assert len(err.strip().splitlines()) == 1

    def test_missing_detector_exit_3(self, capsys, pipeline_out, tiny_cfg):
        code, _, err = run(capsys, "eval", "--config", str(tiny_cfg), "--out", str(pipeline_out),
                           "--detector", str(pipeline_out / "nothing.gct"))
        assert code == 3

    def test_gate_exit_4(self, capsys, tiny_cfg, tmp_path):
        code, _, err = run(capsys, "pretrain", "--config", str(tiny_cfg), "--set", "backbone.gate=1.01",
                           "--out", str(tmp_path))
        assert code == 4 and err.startswith("error category=gate")


class TestPipeline:
    def test_reports(self, pipeline_out):
        names = set(report_hashes(pipeline_out))
        for prefix in ("detectability", "cross_matrix", "robustness", "efficiency"):
            assert any(n.startswith(prefix) for n in names), prefix
        manifest = json.loads((pipeline_out / "run_manifest.json").read_text())
        assert set(manifest["reports"]) >= names

    def test_rerun_identical(self, pipeline_out, tiny_cfg, tmp_path):
        assert main(["pipeline", "--config", str(tiny_cfg), "--out", str(tmp_path)]) == 0
        assert report_hashes(tmp_path) == report_hashes(pipeline_out)

    def test_train_eval(self, capsys, pipeline_out, tiny_cfg):
        base = ["--config", str(tiny_cfg), "--out", str(pipeline_out)]
        code, out, _ = run(capsys, "train", "--mode", "adapter", "--attack", "PGD", *base)
        assert code == 0
        path = json.loads(out)["detector"]
        code, out, _ = run(capsys, "eval", "--detector", path, "--attack", "PGD,FGSM", *base)
        assert code == 0
        assert set(json.loads(out)) == {"PGD", "FGSM"}

    def test_verify(self, capsys, pipeline_out, tiny_cfg):
        corpus = next(pipeline_out.glob("corpus/*/*/index.json")).parent
        code, out, _ = run(capsys, "verify", str(corpus), "--config", str(tiny_cfg), "--out", str(pipeline_out))
        assert code == 0 and all(s["passed"] for s in json.loads(out)["shards"])

    def test_verify_detects_tampering(self, capsys, pipeline_out, tiny_cfg, tmp_path):
        import numpy as np

        from advclip.attacks import load_corpus, save_corpus

        corpus = next(pipeline_out.glob("corpus/*/*/index.json")).parent
        batches = load_corpus(corpus)
        batches[0].pixels[0] = np.clip(batches[0].pixels[0] + 0.2, 0, 1)
        save_corpus(tmp_path / "bad", batches)
        code, _, err = run(capsys, "verify", str(tmp_path / "bad"), "--config", str(tiny_cfg), "--out", str(tmp_path))
        assert code == 4 and "category=gate" in err
