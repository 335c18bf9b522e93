import json

import numpy as np
import pytest
import yaml

from sgdr import cli
from sgdr.metrics import EvalReport, parse_table
from sgdr.networks import read_checkpoint_manifest
from sgdr.plots import CURVES, OVERLAY_COLORS, overlay

TINY_FLAGS = ["--width", "0.0625", "--batch-size", "2", "--epochs-constant", "1", "--epochs-decay", "0",
              "--no-augment"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-data", "--out", str(out), "--size", "32", "--n-source", "4", "--n-target", "4",
                     "--n-eval", "2", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), *TINY_FLAGS]) == 0
    return out


class TestGenData:
    def test_counts(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert cli.main(["gen-data", "--out", str(out), "--size", "64", "--n-source", "40", "--n-target", "40",
                         "--n-eval", "10", "--seed", "7"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert sum(len(v["samples"]) for v in manifest["domains"].values()) == 90
        assert capsys.readouterr().out.strip().endswith("manifest.json")

    def test_rerun_identical(self, data_dir, tmp_path):
        again = tmp_path / "again"
        cli.main(["gen-data", "--out", str(again), "--size", "32", "--n-source", "4", "--n-target", "4",
                  "--n-eval", "2", "--seed", "3"])
        for f in sorted(p.relative_to(data_dir) for p in data_dir.rglob("*") if p.is_file()):
            assert (data_dir / f).read_bytes() == (again / f).read_bytes()

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["gen-data", "--size", "32"])
        assert exc.value.code == 2


class TestConfigPrecedence:
    def _args(self, argv):
        return cli.build_parser().parse_args(["train", "--out", "x", *argv])

    def test_three_layers(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({"seed": 5, "batch_size": 8, "weights": {"lambda_cc": 3.0}}))
        # preset default only
        c = cli.resolve_config(self._args(["--preset", "desk"]))
        assert (c.seed, c.batch_size, c.epochs_constant) == (0, 4, 30)
        # file over preset
        c = cli.resolve_config(self._args(["--preset", "desk", "--config", str(cfg)]))
        assert (c.seed, c.batch_size, c.weights.lambda_cc, c.weights.lambda_recon) == (5, 8, 3.0, 10.0)
        # flag over file
        c = cli.resolve_config(self._args(["--preset", "desk", "--config", str(cfg), "--seed", "9",
                                           "--lambda-cc", "4"]))
        assert (c.seed, c.batch_size, c.weights.lambda_cc) == (9, 8, 4.0)

    def test_json_config_and_ablation_flags(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"ablation": {"use_Lv_seg": False}}))
        c = cli.resolve_config(self._args(["--config", str(cfg), "--ablate-content-disc"]))
        assert not c.ablation.use_Lv_seg and not c.ablation.use_content_discriminator
        assert c.ablation.use_feature_discriminator and c.epochs_constant == 150

    def test_unknown_field_rejected(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("learning_rate: 0.1\n")
        with pytest.raises(KeyError):
            cli.resolve_config(self._args(["--config", str(cfg)]))


class TestTrain:
    def test_run_manifest(self, trained, data_dir):
        rm = json.loads((trained / cli.RUN_MANIFEST).read_text())
        w = rm["config"]["weights"]
        assert [w[k] for k in ("lambda_cc", "lambda_recon", "lambda_latent", "lambda_c_adv", "lambda_domain_adv",
                               "lambda_seg", "lambda_f_adv", "lambda_KL")] == [10, 10, 10, 1, 1, 1, 1, 0.01]
        assert rm["data"] == str(data_dir.resolve()) and rm["revision"].startswith("sgdr ")
        assert rm["seed"] == 0 and rm["kind"] == "run_manifest"

    def test_replay_from_manifest(self, trained, tmp_path):
        out = tmp_path / "replay"
        assert cli.main(["train", "--config", str(trained / cli.RUN_MANIFEST), "--out", str(out)]) == 0
        assert (out / "train_log.jsonl").read_text() == (trained / "train_log.jsonl").read_text()
        assert (out / "metrics_history.jsonl").read_text() == (trained / "metrics_history.jsonl").read_text()

    def test_ablated_term_is_zero(self, data_dir, tmp_path):
        out = tmp_path / "abl"
        assert cli.main(["train", "--data", str(data_dir), "--out", str(out), *TINY_FLAGS,
                         "--ablate-content-disc"]) == 0
        rows = [json.loads(ln) for ln in (out / "train_log.jsonl").read_text().splitlines()]
        assert rows and all(r["c_adv"] == 0.0 and r["D_content"] == 0.0 for r in rows)

    def test_no_adaptation_baseline(self, data_dir, tmp_path):
        out = tmp_path / "noad"
        assert cli.main(["train", "--data", str(data_dir), "--out", str(out), *TINY_FLAGS,
                         "--no-adaptation"]) == 0
        rows = [json.loads(ln) for ln in (out / "train_log.jsonl").read_text().splitlines()]
        assert all(r["cc"] == 0.0 and r["seg_v"] == 0.0 and r["D_src"] == 0.0 for r in rows)
        manifest = read_checkpoint_manifest(sorted((out / "checkpoints").glob("*.ckpt"))[-1])
        assert manifest["meta"]["inference_encoder"] == "E_c_src"

    def test_divergence_exit_code(self, data_dir, tmp_path, monkeypatch, capsys):
        from sgdr.losses import TrainingDivergenceError

        def boom(*a, **k):
            raise TrainingDivergenceError("cc", float("nan"))

        monkeypatch.setattr(cli, "train", boom)
        code = cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path / "d"), *TINY_FLAGS])
        assert code == cli.EXIT_DIVERGED and "cc" in capsys.readouterr().err


class TestEval:
    def test_self_consistency_is_perfect(self, trained, data_dir, tmp_path, capsys):
        ckpt = sorted((trained / "checkpoints").glob("*.ckpt"))[-1]
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir), "--out", str(tmp_path),
                         "--self-consistency"]) == 0
        report = EvalReport.from_json((tmp_path / "eval_report.json").read_text())
        assert report.mean_dice == 100.0
        assert "MYO LV RV Average" in " ".join(capsys.readouterr().out.split())

    def test_report_roundtrip(self, trained, data_dir, tmp_path):
        ckpt = sorted((trained / "checkpoints").glob("*.ckpt"))[-1]
        cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir), "--out", str(tmp_path)])
        report = EvalReport.from_json((tmp_path / "eval_report.json").read_text())
        assert EvalReport.from_json(report.to_json()) == report
        parsed = parse_table((tmp_path / "eval_table.txt").read_text())
        assert parsed["Dice(%)"]["Average"] == pytest.approx(report.mean_dice, abs=0.01)

    def test_missing_checkpoint(self, data_dir, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(data_dir),
                         "--out", str(tmp_path)]) == cli.EXIT_MISSING


class TestAblate:
    def test_table_has_four_rows(self, data_dir, tmp_path):
        out = tmp_path / "sweep"
        assert cli.main(["ablate", "--data", str(data_dir), "--out", str(out), *TINY_FLAGS]) == 0
        text = (out / "ablation_table.txt").read_text()
        rows = cli.parse_ablation_table(text)
        assert list(rows) == [label for label, _ in cli.ABLATION_ROWS]
        assert "# No adaptation" in text
        # a second call reuses finished runs
        before = (out / "sgdr" / "train_log.jsonl").stat().st_mtime_ns
        cli.main(["ablate", "--data", str(data_dir), "--out", str(out), *TINY_FLAGS])
        assert (out / "sgdr" / "train_log.jsonl").stat().st_mtime_ns == before


class TestPlot:
    def test_one_file_per_curve_and_deterministic(self, trained, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["plot", "--run", str(trained), "--out", str(a)]) == 0
        cli.main(["plot", "--run", str(trained), "--out", str(b)])
        for name in CURVES:
            assert (a / f"loss_{name}.png").exists()
        assert (a / "dice_per_class.png").exists() and (a / "qualitative.png").exists()
        for f in a.iterdir():
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name

    def test_empty_log(self, tmp_path):
        (tmp_path / "train_log.jsonl").write_text("")
        assert cli.main(["plot", "--run", str(tmp_path)]) != 0

    def test_overlay_colors(self):
        assert OVERLAY_COLORS == {1: (0, 0, 1), 2: (0, 1, 0), 3: (1, 0, 0)}
        labels = np.array([[0, 1], [2, 3]])
        rgb = overlay(np.full((2, 2), -1.0), labels, alpha=1.0)
        np.testing.assert_array_equal(rgb[0, 0], [0, 0, 0])
        np.testing.assert_array_equal(rgb[0, 1], [0, 0, 1])   # MYO blue
        np.testing.assert_array_equal(rgb[1, 0], [0, 1, 0])   # LV green
        np.testing.assert_array_equal(rgb[1, 1], [1, 0, 0])   # RV red
