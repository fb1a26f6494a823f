import hashlib
import json
import re

import pytest

from trajcap import cli
from trajcap.dataset import render_camera_image, scene_from_dict
from trajcap.geometry import load_calibration
from trajcap.raster import RgbImage, read_ppm, write_ppm
from trajcap.verify import CheckResult, golden_dir

RUN = ["--epochs", "1", "--batch-size", "8"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--seed", "2", "--n-standard", "20", "--n-pairs", "8",
                     "--n-eval-pairs", "3", "--out", str(root)]) == 0
    return root


class TestRender:
    def test_golden_fixtures(self, tmp_path, capsys):
        g = golden_dir()
        digests = json.loads((g / "digests.json").read_text())
        scenes = json.loads((g / "scenes.json").read_text())
        cam = load_calibration(g / "calib.json")
        for fid in ("std-0001", "pair-0000-b"):
            cam_path = tmp_path / f"{fid}-camera.ppm"
            write_ppm(render_camera_image(scene_from_dict(scenes[fid]), cam), cam_path)
            out = tmp_path / fid
            rc = cli.main(["render", "--plan", str(g / "plans" / f"{fid}.json"), "--calib",
                           str(g / "calib.json"), "--overlay", str(cam_path), "--out", str(out)])
            assert rc == 0
            img = read_ppm(out / "trajectory.ppm")
            assert (img.width, img.height) == (cam.width, cam.height)
            assert img.digest() == digests[fid]["trajectory"]
            assert read_ppm(out / "overlaid.ppm").digest() == digests[fid]["overlay"]
        assert "sha256=" in capsys.readouterr().out

    def test_overlay_size_mismatch_exits_2(self, tmp_path, capsys):
        g = golden_dir()
        write_ppm(RgbImage.blank(32, 48), tmp_path / "small.ppm")
        rc = cli.main(["render", "--plan", str(g / "plans" / "std-0000.json"), "--calib",
                       str(g / "calib.json"), "--overlay", str(tmp_path / "small.ppm"),
                       "--out", str(tmp_path / "o")])
        assert rc == 2
        err = capsys.readouterr().err
        assert "camera 32x48" in err and "trajectory 64x64" in err
        assert not (tmp_path / "o" / "trajectory.ppm").exists()

    def test_malformed_plan_reports_position(self, tmp_path, capsys):
        (tmp_path / "plan.json").write_text('{\n "trajectory": [\n')
        rc = cli.main(["render", "--plan", str(tmp_path / "plan.json"), "--calib",
                       str(golden_dir() / "calib.json"), "--out", str(tmp_path)])
        assert rc == 2
        assert "plan.json:3:" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path):
        assert cli.main(["render", "--plan", str(tmp_path / "nope.json"), "--calib", "x.json"]) == 2


class TestGenData:
    def test_default_counts(self, tmp_path):
        assert cli.main(["gen-data", "--n-eval-pairs", "0", "--out", str(tmp_path)]) == 0
        assert len((tmp_path / "manifest.jsonl").read_text().splitlines()) == 800

    def test_same_seed_same_manifest(self, tmp_path):
        for name in ("a", "b"):
            cli.main(["gen-data", "--seed", "5", "--n-standard", "6", "--n-pairs", "2", "--out", str(tmp_path / name)])
        assert sha(tmp_path / "a" / "manifest.jsonl") == sha(tmp_path / "b" / "manifest.jsonl")
        assert sha(tmp_path / "a" / "images" / "pair-0001-b.ppm") == sha(tmp_path / "b" / "images" / "pair-0001-b.ppm")

    def test_zero_counts(self, tmp_path, capsys):
        assert cli.main(["gen-data", "--n-standard", "0", "--n-pairs", "0", "--out", str(tmp_path)]) == 2
        assert "empty dataset" in capsys.readouterr().err

    def test_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("T2C_SEED", "5")
        cli.main(["gen-data", "--n-standard", "6", "--n-pairs", "2", "--out", str(tmp_path / "env")])
        monkeypatch.delenv("T2C_SEED")
        cli.main(["gen-data", "--seed", "5", "--n-standard", "6", "--n-pairs", "2", "--out", str(tmp_path / "flag")])
        assert sha(tmp_path / "env" / "manifest.jsonl") == sha(tmp_path / "flag" / "manifest.jsonl")

    def test_default_out_is_timestamped(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(["gen-data", "--n-standard", "2", "--n-pairs", "0", "--n-eval-pairs", "0"]) == 0
        (run,) = (tmp_path / "runs").iterdir()
        assert re.fullmatch(r"\d{8}-\d{6}", run.name)
        assert (run / "manifest.jsonl").is_file()


class TestTrainEval:
    def test_train_is_reproducible(self, data, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["train", "--data", str(data), "--fusion", "xattn", "--xattn-query", "trajectory",
                             "--seed", "3", *RUN, "--out", str(tmp_path / name)]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert sha(a / "model.ckpt") == sha(b / "model.ckpt")
        assert (a / "train_log.csv").read_text() == (b / "train_log.csv").read_text()
        assert json.loads((a / "model.json").read_text())["config"]["xattn_query"] == "trajectory"
        for name in ("a", "b"):
            assert cli.main(["eval", "--checkpoint", str(tmp_path / name), "--data", str(data),
                             "--split", "ambiguous", "--out", str(tmp_path / f"eval-{name}")]) == 0
        assert sha(tmp_path / "eval-a" / "eval_table.json") == sha(tmp_path / "eval-b" / "eval_table.json")
        assert sha(tmp_path / "eval-a" / "per_sample.csv") == sha(tmp_path / "eval-b" / "per_sample.csv")

    def test_baseline_trains_with_plans_present(self, data, tmp_path):
        assert cli.main(["train", "--data", str(data), "--fusion", "baseline", *RUN, "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "config.json").read_text())["fusion"] == "baseline"

    def test_config_file_and_flag_precedence(self, data, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"fusion": "overlay", "epochs": 3, "data_dir": str(data)}))
        assert cli.main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path / "o")]) == 0
        saved = json.loads((tmp_path / "o" / "config.json").read_text())
        assert (saved["fusion"], saved["epochs"]) == ("overlay", 1)

    def test_baseline_with_query_is_user_error(self, data, tmp_path, capsys):
        rc = cli.main(["train", "--data", str(data), "--fusion", "baseline", "--xattn-query", "image",
                       "--out", str(tmp_path)])
        assert rc == 2
        assert "baseline" in capsys.readouterr().err

    def test_missing_data_dir(self, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path)]) == 2
        assert cli.main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 2

    def test_echo_oracle(self, data, tmp_path, capsys):
        assert cli.main(["eval", "--oracle", "echo", "--data", str(data), "--out", str(tmp_path)]) == 0
        assert set(json.loads((tmp_path / "eval_table.json").read_text()).values()) == {1.0}
        assert "1.0000" in capsys.readouterr().out

    def test_missing_checkpoint(self, data, tmp_path, capsys):
        assert cli.main(["eval", "--checkpoint", str(tmp_path), "--data", str(data), "--out", str(tmp_path)]) == 2
        assert "missing checkpoint" in capsys.readouterr().err

    def test_corrupted_sidecar(self, data, tmp_path):
        assert cli.main(["train", "--data", str(data), "--fusion", "baseline", *RUN, "--out", str(tmp_path)]) == 0
        (tmp_path / "model.json").write_text("[]")
        assert cli.main(["eval", "--checkpoint", str(tmp_path), "--data", str(data), "--out", str(tmp_path)]) == 2


class TestAblateVerify:
    def test_ablate_format(self, data, tmp_path, capsys):
        assert cli.main(["ablate", "--data", str(data), *RUN, "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        report = json.loads((tmp_path / "ablation.json").read_text())
        keys = ["whole_b4", "whole_rl", "action_b4", "action_rl", "just_b4", "just_rl"]
        assert set(report["test"]) == {"image", "trajectory"}
        assert all(list(row) == keys for row in report["test"].values())
        assert set(report["ambiguous"]["image"]) == set(keys) | {"action_accuracy"}
        table = out.split("\n\n")[0].splitlines()
        assert len(table) == 4 and table[2].startswith("image") and table[3].startswith("trajectory")
        assert all(len(line.split()) == 7 for line in table[2:])

    def test_verify_quick(self, capsys):
        assert cli.main(["verify", "--seeds", "2", "--pairs", "50"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 4 and "all checks passed" in out

    def test_verify_failure_exits_1(self, monkeypatch):
        import trajcap.verify
        monkeypatch.setattr(trajcap.verify, "run_all",
                            lambda **kw: [CheckResult("gradients", False, "broken", 0.0)])
        assert cli.main(["verify"]) == 1


class TestExitCodes:
    def test_bad_usage_is_2(self):
        assert cli.main(["frobnicate"]) == 2
        assert cli.main(["train", "--fusion", "sum"]) == 2

    def test_help_is_0(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "gen-data" in capsys.readouterr().out

    def test_internal_failure_is_1(self, tmp_path, monkeypatch, capsys):
        def boom(*a, **kw):
            raise RuntimeError("disk on fire")
        monkeypatch.setattr(cli, "generate_corpus", boom)
        assert cli.main(["gen-data", "--out", str(tmp_path)]) == 1
        assert "internal error" in capsys.readouterr().err
