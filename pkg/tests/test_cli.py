"""CLI: argument handling, run-config schema, and end-to-end subcommands."""

import json
import subprocess
import sys

import numpy as np
import pytest

from femseg import __version__
from femseg.cli import ConfigError, load_run_config, main
from femseg.data import load_manifest, read_volume
from femseg.model import UNetConfig, build, save_checkpoint

TINY_MODEL = {"rank": 3, "features": 2, "levels": 1}
TINY_TRAIN = {"max_epochs": 2, "learning_rate": 1e-4, "seed": 3}


def write_config(path, **overrides) -> str:
    body = {"model": TINY_MODEL, "train": TINY_TRAIN, "folds": 2,
            "precision": "f32"}
    body.update(overrides)
    path.write_text(json.dumps(body), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    """A four-subject phantom cohort generated through the CLI itself."""
    out = tmp_path_factory.mktemp("cohort")
    code = main(["phantom", "--out", str(out), "--count", "4",
                 "--extents", "32,32,8", "--seed", "5"])
    assert code == 0
    return out


class TestArgumentHandling:
    def test_no_arguments_prints_usage_and_exits_2(self, capsys):
        assert main([]) == 2
        err = capsys.readouterr().err
        assert "usage:" in err and "command is required" in err

    def test_unknown_subcommand_exits_2(self, capsys):
        assert main(["segmentate"]) == 2
        assert "usage:" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self, capsys):
        assert main(["phantom", "--out", "x", "--frobnicate"]) == 2
        assert "usage:" in capsys.readouterr().err

    def test_version_flag(self, capsys):
        assert main(["--version"]) == 0
        assert f"femseg {__version__}" in capsys.readouterr().out

    def test_subcommand_help_exits_0(self, capsys):
        assert main(["cv", "--help"]) == 0
        assert "--config" in capsys.readouterr().out

    def test_missing_required_flag_exits_2(self, capsys):
        assert main(["cv"]) == 2
        assert "--config" in capsys.readouterr().err

    def test_bad_threads_flag_exits_2(self, tmp_path, capsys):
        assert main(["phantom", "--out", str(tmp_path / "c"), "--count", "1",
                     "--threads", "0"]) == 2
        assert "thread count" in capsys.readouterr().err

    def test_bad_threads_env_exits_2(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("FEMSEG_THREADS", "lots")
        assert main(["phantom", "--out", str(tmp_path / "c"), "--count", "1"]) == 2
        assert "FEMSEG_THREADS" in capsys.readouterr().err

    def test_thread_cap_accepted(self, tmp_path):
        assert main(["phantom", "--out", str(tmp_path / "c"), "--count", "1",
                     "--extents", "32,32,8", "--threads", "1"]) == 0

    def test_module_invocation_smoke(self):
        result = subprocess.run([sys.executable, "-m", "femseg", "--version"],
                                capture_output=True, text=True, timeout=120)
        assert result.returncode == 0
        assert f"femseg {__version__}" in result.stdout


class TestRunConfigSchema:
    def write(self, tmp_path, body) -> str:
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(body), encoding="utf-8")
        return str(path)

    def test_defaults_mirror_headline_models(self, tmp_path):
        cfg = load_run_config(self.write(tmp_path, {}))
        assert cfg["model"] == UNetConfig(rank=3, in_channels=1, classes=2,
                                          features=32, levels=4, padding="same")
        assert cfg["train"].learning_rate == 5e-5
        assert cfg["train"].batch_size == 1
        assert cfg["folds"] == 4 and cfg["precision"] == "f64"
        assert cfg["post_process"] is None

        cfg2d = load_run_config(self.write(tmp_path, {"model": {"rank": 2}}))
        assert cfg2d["model"] == UNetConfig(rank=2, in_channels=3, classes=2,
                                            features=64, levels=4, padding="valid")

    @pytest.mark.parametrize("body,fragment", [
        ({"learning_rate": 1e-3}, "unknown key(s) in run config"),
        ({"model": {"rank": 3, "депth": 4}}, "unknown key(s) in 'model'"),
        ({"model": {"rank": 4}}, "rank must be 2 or 3"),
        ({"model": {"features": 0}}, "invalid 'model'"),
        ({"model": {"rank": 2, "padding": "same"}}, "invalid 'model'"),
        ({"train": {"momentum": 0.9}}, "unknown key(s) in 'train'"),
        ({"train": {"batch_size": 4}}, "invalid 'train'"),
        ({"folds": 1}, "folds must be >="),
        ({"folds": True}, "folds must be an integer"),
        ({"post_process": "yes"}, "post_process"),
        ({"precision": "f16"}, "precision"),
        ({"slab_slices": 0}, "slab_slices"),
        ({"target_xy": [64]}, "target_xy"),
        ({"target_xy": [64, 1]}, "target_xy"),
        ({"validation_ids": "s01"}, "validation_ids"),
        ({"manifest": 7}, "manifest"),
    ])
    def test_schema_violations(self, tmp_path, body, fragment):
        with pytest.raises(ConfigError, match=".*"):
            try:
                load_run_config(self.write(tmp_path, body))
            except ConfigError as err:
                assert fragment in str(err)
                raise

    def test_not_json_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{nope", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_run_config(str(path))
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(str(tmp_path / "absent.json"))

    def test_array_config_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(ConfigError, match="JSON object"):
            load_run_config(str(path))


class TestPhantomCommand:
    def test_cohort_layout(self, cohort):
        entries = load_manifest(cohort / "manifest.json")
        assert [e.subject_id for e in entries] == ["s000", "s001", "s002", "s003"]
        image = read_volume(entries[0].image_path)
        assert image.values.shape == (8, 32, 32)
        record = json.loads((cohort / "run.json").read_text())
        assert record["command"] == "phantom"
        assert record["seed"] == 5 and record["version"] == __version__
        assert "manifest.json" in record["files"]
        assert len(record["files"]) == 9  # 4 images + 4 masks + manifest

    def test_same_seed_reproduces_volumes(self, cohort, tmp_path):
        again = tmp_path / "again"
        assert main(["phantom", "--out", str(again), "--count", "4",
                     "--extents", "32,32,8", "--seed", "5"]) == 0
        assert ((again / "s000_img.fsv").read_bytes()
                == (cohort / "s000_img.fsv").read_bytes())

    def test_bad_count_exits_2(self, tmp_path, capsys):
        assert main(["phantom", "--out", str(tmp_path / "c"), "--count", "0"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_extents_exit_2(self, tmp_path, capsys):
        assert main(["phantom", "--out", str(tmp_path / "c"),
                     "--extents", "64,64"]) == 2
        assert "usage:" in capsys.readouterr().err


class TestTrainCommand:
    def test_train_round_trip(self, cohort, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json",
                           manifest=str(cohort / "manifest.json"),
                           validation_ids=["s003"])
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "model.ckpt").is_file()
        assert (out / "epochs.csv").is_file()
        record = json.loads((out / "run.json").read_text())
        assert record["command"] == "train"
        assert record["precision"] == "f32"
        assert record["config"]["validation_ids"] == ["s003"]
        assert record["config"]["train"]["max_epochs"] == 2
        assert sorted(record["files"]) == ["epochs.csv", "model.ckpt"]
        assert "best epoch" in capsys.readouterr().out

    def test_missing_validation_ids_exits_2(self, cohort, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json",
                           manifest=str(cohort / "manifest.json"))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
        assert "validation_ids" in capsys.readouterr().err

    def test_unknown_validation_id_exits_2(self, cohort, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json",
                           manifest=str(cohort / "manifest.json"),
                           validation_ids=["s999"])
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
        assert "s999" in capsys.readouterr().err

    def test_missing_manifest_key_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", validation_ids=["s003"])
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
        assert "manifest" in capsys.readouterr().err


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    """An untrained (but valid) tiny 3D model checkpoint."""
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    config = UNetConfig(rank=3, in_channels=1, classes=2, features=2, levels=1,
                        padding="same")
    save_checkpoint(path, config, build(config, seed=0, dtype=np.float64))
    return path


class TestInferCommand:
    def test_maps_masks_and_wall_time(self, cohort, checkpoint, tmp_path, capsys):
        out = tmp_path / "maps"
        assert main(["infer", "--checkpoint", str(checkpoint),
                     "--image", str(cohort / "s000_img.fsv"),
                     "--image", str(cohort / "s001_img.fsv"),
                     "--out", str(out), "--threshold", "0.5",
                     "--precision", "f32"]) == 0
        captured = capsys.readouterr().out
        assert "s000_img.fsv:" in captured and " s" in captured
        prob = read_volume(out / "s000_img_map.fsv")
        assert prob.kind == "map" and prob.values.shape == (8, 32, 32)
        assert prob.values.dtype == np.float32
        mask = read_volume(out / "s000_img_mask.fsv")
        assert mask.values.dtype == np.uint8
        record = json.loads((out / "run.json").read_text())
        assert record["config"]["post_process"] is False  # 3D default
        assert len(record["files"]) == 4

    def test_post_process_flag_recorded(self, cohort, checkpoint, tmp_path):
        out = tmp_path / "maps"
        assert main(["infer", "--checkpoint", str(checkpoint),
                     "--image", str(cohort / "s000_img.fsv"),
                     "--out", str(out), "--threshold", "0.5",
                     "--post-process"]) == 0
        record = json.loads((out / "run.json").read_text())
        assert record["config"]["post_process"] is True

    def test_missing_checkpoint_exits_1(self, cohort, tmp_path, capsys):
        assert main(["infer", "--checkpoint", str(tmp_path / "nope.ckpt"),
                     "--image", str(cohort / "s000_img.fsv"),
                     "--out", str(tmp_path / "x")]) == 1
        assert "error" in capsys.readouterr().err

    def test_mask_as_image_exits_1(self, cohort, checkpoint, tmp_path, capsys):
        assert main(["infer", "--checkpoint", str(checkpoint),
                     "--image", str(cohort / "s000_msk.fsv"),
                     "--out", str(tmp_path / "x")]) == 1
        assert "mask" in capsys.readouterr().err


@pytest.fixture(scope="module")
def maps_dir(cohort, checkpoint, tmp_path_factory):
    out = tmp_path_factory.mktemp("maps")
    images = []
    for i in range(4):
        images += ["--image", str(cohort / f"s{i:03d}_img.fsv")]
    assert main(["infer", "--checkpoint", str(checkpoint), *images,
                 "--out", str(out)]) == 0
    return out


class TestEvalCommand:
    def test_eval_prints_threshold_and_writes_report(self, cohort, maps_dir,
                                                     tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--pred", str(maps_dir), "--truth", str(cohort),
                     "--out", str(out)]) == 0
        captured = capsys.readouterr().out
        assert "optimal threshold:" in captured
        assert "AUC:" in captured and "AP:" in captured
        assert (out / "report.txt").is_file()
        assert (out / "curves" / "roc.csv").is_file()
        rows = (out / "report.csv").read_text().splitlines()
        assert len(rows) == 1 + 4 + 1   # header + subjects + aggregate
        assert rows[1].startswith("s000,")

    def test_eval_threshold_override(self, cohort, maps_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--pred", str(maps_dir), "--truth", str(cohort),
                     "--out", str(out), "--threshold", "0.25"]) == 0
        assert "scoring at requested threshold: 0.250000" in capsys.readouterr().out
        record = json.loads((out / "run.json").read_text())
        assert record["config"]["threshold"] == 0.25

    def test_eval_empty_pred_dir_exits_1(self, cohort, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", "--pred", str(empty), "--truth", str(cohort),
                     "--out", str(tmp_path / "x")]) == 1
        assert "no" in capsys.readouterr().err

    def test_eval_unmatched_subject_exits_1(self, maps_dir, tmp_path, capsys):
        lonely = tmp_path / "truth"
        lonely.mkdir()
        assert main(["eval", "--pred", str(maps_dir), "--truth", str(lonely),
                     "--out", str(tmp_path / "x")]) == 1
        assert "matching truth" in capsys.readouterr().err


class TestCvCommand:
    def test_cv_end_to_end(self, cohort, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json",
                           manifest=str(cohort / "manifest.json"))
        out = tmp_path / "cv"
        assert main(["cv", "--config", cfg, "--out", str(out)]) == 0
        assert "3D CNN, F:2, L:1" in capsys.readouterr().out
        record = json.loads((out / "run.json").read_text())
        assert record["command"] == "cv"
        assert record["config"]["folds"] == 2
        assert record["config"]["post_process"] is False
        assert record["seed"] == 3 and record["precision"] == "f32"
        for name in ["report.txt", "report.csv", "curves/mean.csv",
                     "curves/roc.svg", "fold0/model.ckpt", "fold1/epochs.csv"]:
            assert name in record["files"]
            assert (out / name).is_file()

    def test_cv_seed_flag_overrides_config(self, cohort, tmp_path):
        cfg = write_config(tmp_path / "cfg.json",
                           manifest=str(cohort / "manifest.json"))
        out = tmp_path / "cv"
        assert main(["cv", "--config", cfg, "--out", str(out),
                     "--seed", "11"]) == 0
        record = json.loads((out / "run.json").read_text())
        assert record["seed"] == 11
        assert record["config"]["train"]["seed"] == 11

    def test_cv_without_out_anywhere_exits_2(self, cohort, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json",
                           manifest=str(cohort / "manifest.json"))
        assert main(["cv", "--config", cfg]) == 2
        assert "output directory" in capsys.readouterr().err

    def test_cv_out_from_config_resolves_against_config_dir(self, cohort,
                                                            tmp_path):
        cfg = write_config(tmp_path / "cfg.json",
                           manifest=str(cohort / "manifest.json"),
                           out="nested/run")
        assert main(["cv", "--config", cfg]) == 0
        assert (tmp_path / "nested" / "run" / "report.txt").is_file()


class TestCurvesCommand:
    def test_render_from_cv_outputs(self, cohort, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json",
                           manifest=str(cohort / "manifest.json"))
        cv_out = tmp_path / "cv"
        assert main(["cv", "--config", cfg, "--out", str(cv_out)]) == 0
        capsys.readouterr()
        plot_out = tmp_path / "plots"
        assert main(["curves",
                     "--csv", str(cv_out / "curves" / "fold0.csv"),
                     "--csv", str(cv_out / "curves" / "fold1.csv"),
                     "--kind", "prc", "--label", "tiny 3D",
                     "--out", str(plot_out)]) == 0
        svg = plot_out / "prc.svg"
        assert svg.is_file() and svg.read_text().startswith("<?xml")
        record = json.loads((plot_out / "run.json").read_text())
        assert record["config"]["kind"] == "prc"

    def test_malformed_csv_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n", encoding="utf-8")
        assert main(["curves", "--csv", str(bad),
                     "--out", str(tmp_path / "p")]) == 1
        assert "curve CSV" in capsys.readouterr().err

    def test_bad_kind_exits_2(self, tmp_path, capsys):
        assert main(["curves", "--csv", "x.csv", "--kind", "det",
                     "--out", str(tmp_path / "p")]) == 2
        assert "usage:" in capsys.readouterr().err
