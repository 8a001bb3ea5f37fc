"""End-to-end CLI runs on a micro dataset (seconds, not minutes)."""

import json
from pathlib import Path

import numpy as np
import pytest

from avrobust import pipeline
from avrobust.cli import main
from avrobust.config import parse_config
from avrobust.container import read_feature_file
from avrobust.metrics import EvalReport

MICRO = """
[dataset]
classes = 3
train_clips = 12
eval_clips = 8
duration = 1.0
max_labels = 2
band_lo = 4
band_width = 8
band_stride = 16
timbres = tone,noise,tone
video_dim = 8
video_windows = 4
seed = 0

[model]
conv_channels = 2,3
pool_time = 2,2
pool_freq = 2,2
transformer_blocks = 1
heads = 2
width = 8

[train]
epochs = 2
batch = 8
dropout = 0.0
seed = 0

[attack]
eps = 0.5
alpha = 0.1
steps = 4
batch = 8
seed = 0
"""


@pytest.fixture(scope="module")
def micro_workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro")
    cfg_path = root / "micro.ini"
    cfg_path.write_text(MICRO + f"\n[paths]\nworkdir = {root / 'run'}\n")
    assert main(["synth", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path)]) == 0
    return root, cfg_path


class TestPipelineCommands:
    def test_synth_outputs(self, micro_workdir):
        root, _ = micro_workdir
        workdir = root / "run"
        manifest = (workdir / "manifest.jsonl").read_text().splitlines()
        assert len(manifest) == 20
        records = [json.loads(line) for line in manifest]
        assert len({r["id"] for r in records}) == 20
        splits = {r["split"] for r in records}
        assert splits == {"train", "eval"}
        feats = read_feature_file(workdir / records[0]["features"])
        assert feats.shape == (40, 64)
        classes = json.loads((workdir / "classes.json").read_text())
        assert len(classes["classes"]) == 3

    def test_attack_and_eval_chain(self, micro_workdir):
        root, cfg_path = micro_workdir
        workdir = root / "run"
        assert main(["attack", "--config", str(cfg_path)]) == 0
        delta = read_feature_file(workdir / "delta.avfb")
        assert delta.shape == (40, 64)
        assert np.sqrt((delta.astype(np.float64) ** 2).sum()) <= 0.5 + 1e-9
        sidecar = json.loads((workdir / "delta.json").read_text())
        assert sidecar["norm"] == "l2" and sidecar["steps"] == 4
        assert sidecar["manifest_hash"] == pipeline.file_sha256(workdir / "manifest.jsonl")

        assert main(["eval", "--config", str(cfg_path)]) == 0
        assert main(["eval", "--config", str(cfg_path), "--perturbation",
                     str(workdir / "delta.avfb"), "--out",
                     str(workdir / "report_attacked.json")]) == 0
        clean = EvalReport.from_json((workdir / "report_clean.json").read_text())
        attacked = EvalReport.from_json((workdir / "report_attacked.json").read_text())
        assert clean.meta["perturbation"] == "clean"
        assert attacked.meta["perturbation"] != "clean"
        assert clean.meta["checkpoint"] == attacked.meta["checkpoint"]

        assert main(["report", "--clean", str(workdir / "report_clean.json"),
                     "--attacked", str(workdir / "report_attacked.json"),
                     "--out", str(workdir / "compare.csv")]) == 0
        header = (workdir / "compare.csv").read_text().splitlines()[0]
        assert header == "class_id,class_name,ap_clean,ap_attacked,abs_drop,rel_drop"

    def test_masked_attack_sidecar_and_support(self, micro_workdir):
        root, cfg_path = micro_workdir
        workdir = root / "run"
        out = workdir / "delta_masked.avfb"
        assert main(["attack", "--config", str(cfg_path), "--freq-mask", "0:20",
                     "--time-mask", "0:20", "--out", str(out)]) == 0
        sidecar = json.loads((workdir / "delta_masked.json").read_text())
        assert sidecar["mask"] == {"f_lo": 0, "f_hi": 20, "t_lo": 0, "t_hi": 20}
        delta = read_feature_file(out)
        assert np.all(delta[:, 20:] == 0.0)
        assert np.all(delta[20:, :] == 0.0)

    def test_zero_steps_attack_writes_zero_delta(self, micro_workdir):
        root, cfg_path = micro_workdir
        workdir = root / "run"
        out = workdir / "delta_zero.avfb"
        assert main(["attack", "--config", str(cfg_path), "--steps", "0",
                     "--out", str(out)]) == 0
        np.testing.assert_array_equal(read_feature_file(out), np.zeros((40, 64)))


class TestExitCodes:
    def test_missing_config_file_is_io_error(self):
        assert main(["synth", "--config", "/nonexistent/config.ini"]) == 3

    def test_bad_config_value_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[attack]\neps = -1\n")
        assert main(["synth", "--config", str(bad)]) == 2

    def test_bad_cli_eps_is_config_error(self, micro_workdir):
        _, cfg_path = micro_workdir
        assert main(["attack", "--config", str(cfg_path), "--eps", "-2"]) == 2

    def test_invalid_mask_geometry_is_validation_error(self, micro_workdir):
        _, cfg_path = micro_workdir
        assert main(["attack", "--config", str(cfg_path),
                     "--freq-mask", "0:999"]) == 4

    def test_train_without_manifest_is_validation_error(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text(MICRO + f"\n[paths]\nworkdir = {tmp_path / 'empty'}\n")
        assert main(["train", "--config", str(cfg)]) == 4

    def test_eval_with_wrong_geometry_perturbation(self, micro_workdir, tmp_path):
        root, cfg_path = micro_workdir
        from avrobust import attacks as atk
        pert = atk.Perturbation(
            delta=np.zeros((8, 64)),
            config=atk.AttackConfig(norm="l2", epsilon=1.0, alpha=0.1, steps=0),
            provenance={"manifest_hash": "x", "steps_run": 0})
        atk.save_perturbation(tmp_path / "wrong.avfb", pert)
        assert main(["eval", "--config", str(cfg_path), "--perturbation",
                     str(tmp_path / "wrong.avfb")]) == 4

    def test_env_workdir_used_when_unset(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.ini"
        cfg.write_text(MICRO.replace("train_clips = 12", "train_clips = 2")
                       .replace("eval_clips = 8", "eval_clips = 2"))
        monkeypatch.setenv("AVROBUST_WORKDIR", str(tmp_path / "envrun"))
        assert main(["synth", "--config", str(cfg)]) == 0
        assert (tmp_path / "envrun" / "manifest.jsonl").exists()


class TestSweep:
    def test_empty_plan_header_only(self, micro_workdir):
        root, cfg_path = micro_workdir
        out = root / "run" / "sweep_empty.csv"
        assert main(["sweep", "--config", str(cfg_path), "--axis", "freq",
                     "--masks", "", "--out", str(out)]) == 0
        assert out.read_text() == "freq_mask,eps,norm,alpha,map,auc,dprime\n"

    def test_freq_sweep_table_shape(self, micro_workdir):
        root, cfg_path = micro_workdir
        out = root / "run" / "sweep_freq.csv"
        assert main(["sweep", "--config", str(cfg_path), "--axis", "freq",
                     "--masks", "none,0:32", "--eps-list", "0.2,0.5",
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "freq_mask,eps,norm,alpha,map,auc,dprime"
        # 2 masks x 2 eps + 1 clean row
        assert len(lines) == 1 + 1 + 4
        assert lines[1].startswith("No,-,-,-")
        assert sum(line.startswith("0-32") for line in lines) == 2

    def test_fusion_sweep_rows(self, micro_workdir):
        root, cfg_path = micro_workdir
        out = root / "run" / "sweep_fusion.csv"
        assert main(["sweep", "--config", str(cfg_path), "--axis", "fusion",
                     "--fusions", "audio_only,late", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "fusion,attack,map,auc,dprime"
        assert len(lines) == 5   # 2 fusions x {no, yes}
        assert lines[1].split(",")[:2] == ["audio_only", "no"]
        assert lines[2].split(",")[:2] == ["audio_only", "yes"]


class TestDeterminism:
    def test_end_to_end_byte_identical(self, tmp_path):
        """Identical config + seeds -> byte-identical artifacts."""
        outputs = []
        for name in ("a", "b"):
            wd = tmp_path / name
            cfg = tmp_path / f"{name}.ini"
            cfg.write_text(MICRO.replace("train_clips = 12", "train_clips = 6")
                           .replace("eval_clips = 8", "eval_clips = 4")
                           + f"\n[paths]\nworkdir = {wd}\n")
            assert main(["synth", "--config", str(cfg)]) == 0
            assert main(["train", "--config", str(cfg)]) == 0
            assert main(["attack", "--config", str(cfg)]) == 0
            assert main(["eval", "--config", str(cfg)]) == 0
            assert main(["eval", "--config", str(cfg), "--perturbation",
                         str(wd / "delta.avfb"),
                         "--out", str(wd / "report_attacked.json")]) == 0
            outputs.append(wd)
        a, b = outputs
        for rel in ("manifest.jsonl", "features/train_00000.avfb", "model.ckpt",
                    "loss_curve.csv", "delta.avfb", "delta.json"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        # reports embed the checkpoint hash; compare everything else
        ra = json.loads((a / "report_clean.json").read_text())
        rb = json.loads((b / "report_clean.json").read_text())
        assert ra["aggregate"] == rb["aggregate"]
        assert ra["classes"] == rb["classes"]
        assert (a / "report_attacked.json").read_bytes() == \
               (b / "report_attacked.json").read_bytes()
