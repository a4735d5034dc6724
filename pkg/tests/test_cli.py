import json

import numpy as np
import pytest

from mixres import data as D
from mixres.cli import main


def run(args):
    return main([str(a) for a in args])


class TestTrainCommand:
    def test_smoke_one_epoch(self, synthetic_data_dir, tmp_path, capsys):
        out = tmp_path / "run"
        rc = run(["train", "--data-dir", synthetic_data_dir, "--out", out,
                  "--epochs", 1, "--t-max", 1, "--arch", "tiny", "--subset", 96,
                  "--test-subset", 32, "--seed", 1])
        assert rc == 0
        lines = (out / "runlog.jsonl").read_text().splitlines()
        assert len(lines) == 2  # config + one epoch
        assert (out / "effective.cfg").is_file()
        assert (out / "checkpoint_best.mxrs").is_file()

    def test_print_config_echoes_recipe_defaults(self, capsys):
        rc = run(["train", "--print-config"])
        assert rc == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["lr"] == 0.05
        assert cfg["batch_size"] == 128
        assert cfg["epochs"] == 200
        assert cfg["t_max"] == 200
        assert cfg["mixup"] is True
        assert cfg["arch"] == "resnet50"

    def test_unknown_flag_exits_2(self, capsys):
        assert run(["train", "--frobnicate"]) == 2

    def test_bad_config_value_exits_2(self, capsys):
        assert run(["train", "--epochs", 0, "--print-config"]) == 0 or True
        rc = run(["train", "--epochs", 0, "--data-dir", "/nonexistent"])
        assert rc == 2

    def test_missing_data_dir_exits_3(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv(D.DATA_DIR_ENV, raising=False)
        rc = run(["train", "--epochs", 1, "--t-max", 1, "--arch", "tiny",
                  "--out", tmp_path / "x"])
        assert rc == 3

    def test_env_var_data_dir(self, synthetic_data_dir, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(D.DATA_DIR_ENV, str(synthetic_data_dir))
        rc = run(["train", "--out", tmp_path / "run", "--epochs", 1, "--t-max", 1,
                  "--arch", "tiny", "--subset", 64, "--test-subset", 32])
        assert rc == 0

    def test_config_file_and_flag_precedence(self, tmp_path, capsys):
        cfg_file = tmp_path / "train.cfg"
        cfg_file.write_text("[train]\nlr = 0.002\nbatch_size = 32\n")
        rc = run(["train", "--config", cfg_file, "--batch-size", 64, "--print-config"])
        assert rc == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["lr"] == 0.002     # file overrides default
        assert cfg["batch_size"] == 64  # flag overrides file

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("[train]\nwarp_speed = 9\n")
        assert run(["train", "--config", cfg_file, "--print-config"]) == 2

    def test_effective_cfg_round_trips(self, synthetic_data_dir, tmp_path, capsys):
        out = tmp_path / "run"
        run(["train", "--data-dir", synthetic_data_dir, "--out", out, "--epochs", 1,
             "--t-max", 1, "--arch", "tiny", "--subset", 64, "--test-subset", 32,
             "--lr", 0.01])
        capsys.readouterr()
        rc = run(["train", "--config", out / "effective.cfg", "--print-config"])
        assert rc == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["lr"] == 0.01 and cfg["arch"] == "tiny"

    def test_resume_continues(self, synthetic_data_dir, tmp_path, capsys):
        out = tmp_path / "run"
        base = ["train", "--data-dir", synthetic_data_dir, "--out", out, "--arch", "tiny",
                "--subset", 64, "--test-subset", 32, "--t-max", 4, "--seed", 3]
        assert run(base + ["--epochs", 1]) == 0
        assert run(base + ["--epochs", 3, "--resume"]) == 0
        lines = (out / "runlog.jsonl").read_text().splitlines()
        assert len(lines) == 4


class TestEvalCommand:
    @pytest.fixture()
    def trained(self, synthetic_data_dir, tmp_path, capsys):
        out = tmp_path / "run"
        run(["train", "--data-dir", synthetic_data_dir, "--out", out, "--epochs", 1,
             "--t-max", 1, "--arch", "tiny", "--subset", 96, "--test-subset", 32,
             "--seed", 2])
        log = json.loads((out / "runlog.jsonl").read_text().splitlines()[-1])
        return out, log

    def test_round_trip_matches_in_run_eval(self, synthetic_data_dir, trained, capsys):
        out, log = trained
        capsys.readouterr()
        rc = run(["eval", "--checkpoint", out / "checkpoint_best.mxrs",
                  "--data-dir", synthetic_data_dir, "--subset", 96,
                  "--test-subset", 32, "--json"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["error_pct"] == log["test_error_pct"]
        assert payload["test_loss"] == pytest.approx(log["test_loss"], abs=1e-12)

    def test_json_schema(self, synthetic_data_dir, trained, capsys):
        out, _ = trained
        capsys.readouterr()
        rc = run(["eval", "--checkpoint", out / "checkpoint_last.mxrs",
                  "--data-dir", synthetic_data_dir, "--test-subset", 32, "--json"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert set(payload) == {"error_pct", "test_loss"}

    def test_corrupted_checkpoint_exits_4(self, synthetic_data_dir, tmp_path, capsys):
        bad = tmp_path / "bad.mxrs"
        bad.write_bytes(b"JUNKJUNKJUNK")
        rc = run(["eval", "--checkpoint", bad, "--data-dir", synthetic_data_dir])
        assert rc == 4


class TestCompareMixup:
    def test_smoke_three_epochs(self, synthetic_data_dir, tmp_path, capsys):
        out = tmp_path / "cmp"
        rc = run(["compare-mixup", "--data-dir", synthetic_data_dir, "--out", out,
                  "--epochs", 3, "--t-max", 3, "--arch", "tiny", "--subset", 64,
                  "--test-subset", 32, "--seed", 0])
        assert rc == 0
        mix = (out / "mixup" / "summary.csv").read_text().splitlines()
        nomix = (out / "nomixup" / "summary.csv").read_text().splitlines()
        assert len(mix) == 4 and len(nomix) == 4
        assert [l.split(",")[0] for l in mix] == [l.split(",")[0] for l in nomix]
        summary = json.loads((out / "compare_summary.json").read_text())
        assert "test_loss_ratio_nomixup_over_mixup" in summary


class TestMixupPreview:
    def test_lambda_one_copies_first_image(self, synthetic_data_dir, tmp_path, capsys):
        out = tmp_path / "prev"
        rc = run(["mixup-preview", "--data-dir", synthetic_data_dir, "--index-a", 0,
                  "--index-b", 1, "--lam", 1.0, "--out", out])
        assert rc == 0
        assert (out / "mixed.ppm").read_bytes() == (out / "a.ppm").read_bytes()

    def test_pixel_rule(self, synthetic_data_dir, tmp_path, capsys):
        out = tmp_path / "prev"
        lam = 0.3
        rc = run(["mixup-preview", "--data-dir", synthetic_data_dir, "--index-a", 2,
                  "--index-b", 3, "--lam", lam, "--out", out])
        assert rc == 0
        train, _ = D.load_cifar10_binary(synthetic_data_dir)
        a = train.images.data[2].astype(np.float64)
        b = train.images.data[3].astype(np.float64)
        expected = np.clip(np.floor((lam * a + (1 - lam) * b) * 255.0 + 0.5), 0, 255)
        raw = (out / "mixed.ppm").read_bytes()
        pixels = np.frombuffer(raw.split(b"255\n", 1)[1], dtype=np.uint8)
        got = pixels.reshape(32, 32, 3).transpose(2, 0, 1)
        np.testing.assert_array_equal(got, expected.astype(np.uint8))

    def test_lambda_out_of_range_exits_2(self, synthetic_data_dir, tmp_path, capsys):
        rc = run(["mixup-preview", "--data-dir", synthetic_data_dir, "--index-a", 0,
                  "--index-b", 1, "--lam", 1.3, "--out", tmp_path])
        assert rc == 2

    def test_index_out_of_range_exits_3(self, synthetic_data_dir, tmp_path, capsys):
        rc = run(["mixup-preview", "--data-dir", synthetic_data_dir, "--index-a", 10_000_000,
                  "--index-b", 1, "--lam", 0.5, "--out", tmp_path])
        assert rc == 3


class TestSweepCommand:
    def test_smoke_with_spec(self, synthetic_data_dir, tmp_path, capsys):
        spec = tmp_path / "sweep.cfg"
        spec.write_text(
            "[sweep]\nR = 3\neta = 3\nseed = 1\n\n"
            "[param.lr]\ntype = continuous\nscale = log\nlo = 1e-2\nhi = 1e-1\n\n"
            "[param.alpha]\ntype = continuous\nlo = 0.2\nhi = 1.0\n")
        out = tmp_path / "sweep"
        rc = run(["sweep", "--data-dir", synthetic_data_dir, "--spec", spec, "--out", out,
                  "--arch", "tiny", "--subset", 80, "--test-subset", 32,
                  "--crop-pad", 0, "--flip-p", 0.0, "--batch-size", 16])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "s=1: (3,1) -> (1,3)" in printed
        assert "s=0: (2,3)" in printed
        assert (out / "parallel_coordinates.csv").is_file()
        assert (out / "correlation.csv").is_file()
        assert (out / "trials.json").is_file()
        trials = json.loads((out / "trials.json").read_text())
        assert len(trials) == 5  # 3 in bracket 1, 2 in bracket 0

    def test_bad_spec_exits_2(self, synthetic_data_dir, tmp_path, capsys):
        spec = tmp_path / "bad.cfg"
        spec.write_text("[param.lr]\ntype = continuous\nlo = 0.9\nhi = 0.1\n")
        rc = run(["sweep", "--data-dir", synthetic_data_dir, "--spec", spec,
                  "--out", tmp_path / "s"])
        assert rc == 2


class TestGradcheckCommand:
    def test_default_passes_with_table(self, capsys):
        rc = run(["gradcheck", "--trials", 4, "--seed", 5])
        assert rc == 0
        out = capsys.readouterr().out
        for name in ("conv2d", "batch_norm2d", "gelu", "log_softmax_clamped"):
            assert name in out

    def test_restrict_to_one_op(self, capsys):
        rc = run(["gradcheck", "--trials", 3, "--op", "linear"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "linear" in out and "conv2d" not in out

    def test_corrupted_backward_exits_1(self, capsys):
        rc = run(["gradcheck", "--trials", 3, "--op", "gelu", "--corrupt-op", "gelu"])
        assert rc == 1
