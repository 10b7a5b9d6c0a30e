import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from corrpose import config as cf
from corrpose.cli import main
from corrpose.training import evaluate_model, train_model


def micro_config(tmp_path, **overrides):
    payload = {
        "network": {"n_points_obs": 32, "n_points_model": 32, "seed": 1,
                    "c_local": 12, "c_raw": 24, "c_branch": 12, "c_f": 24},
        "data": {"data_dir": str(tmp_path / "data"), "count": 40,
                 "split_ratio": 0.8, "n_dense": 512},
        "epochs": 2, "batch_size": 8, "seed": 7,
        "out_dir": str(tmp_path / "run"),
        "val_fraction": 0.1, "val_max": 4,
    }
    payload.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return path


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestConfig:
    def test_defaults_match_stated_hyperparameters(self):
        cfg = cf.RunConfig()
        assert cfg.network.n_points_obs == 1024
        assert cfg.network.n_points_model == 1024
        assert cfg.loss_weights.lambda_p2p == 5.0
        assert cfg.loss_weights.lambda_c2c == 1.0
        assert cfg.loss_weights.lambda_pose == 1.0
        assert cfg.loss_weights.lambda_conf == 1.0
        assert cfg.loss_weights.w == 0.01
        assert cfg.refine_iters == 2
        assert cfg.lr == 1e-3

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"learning_rate": 0.1}))
        with pytest.raises(cf.ConfigError):
            cf.load_config(path)

    def test_unknown_section_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"network": {"n_pts": 3}}))
        with pytest.raises(cf.ConfigError):
            cf.load_config(path)

    def test_round_trip(self, tmp_path):
        cfg = cf.RunConfig(seed=9, out_dir="x")
        path = tmp_path / "c.json"
        cf.save_config(cfg, path)
        assert cf.load_config(path) == cfg


class TestSynthCommand:
    def test_creates_split(self, tmp_path, capsys):
        assert main(["synth", "--config", str(micro_config(tmp_path))]) == 0
        train = (tmp_path / "data" / "train.jsonl").read_text().splitlines()
        test = (tmp_path / "data" / "test.jsonl").read_text().splitlines()
        assert len(train) == 32
        assert len(test) == 8
        shapes = {json.loads(l)["shape_id"] for l in train + test}
        assert len(shapes) == 4

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = micro_config(tmp_path)
        main(["synth", "--config", str(cfg)])
        first = tree_digest(tmp_path / "data")
        main(["synth", "--config", str(cfg)])
        assert tree_digest(tmp_path / "data") == first

    def test_missing_config_gives_config_exit_code(self, tmp_path, capsys):
        assert main(["synth", "--config", str(tmp_path / "absent.json")]) == 1


class TestTrainCommand:
    def test_loss_decreases_over_smoke_run(self, tmp_path):
        # 50 steps over 8 samples at batch 8
        cfg_path = micro_config(
            tmp_path,
            data={"data_dir": str(tmp_path / "data"), "count": 10,
                  "split_ratio": 0.8, "n_dense": 512},
            epochs=50, batch_size=8, val_fraction=0.0, val_max=0)
        assert main(["synth", "--config", str(cfg_path)]) == 0
        assert main(["train", "--config", str(cfg_path)]) == 0
        rows = (tmp_path / "run" / "train_log.csv").read_text().splitlines()[1:]
        assert len(rows) == 50
        first_total = float(rows[0].split(",")[-1])
        last_total = float(rows[-1].split(",")[-1])
        assert last_total < first_total

    def test_train_without_dataset_is_config_error(self, tmp_path):
        cfg_path = micro_config(tmp_path)
        assert main(["train", "--config", str(cfg_path)]) == 1

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        cfg_path = micro_config(tmp_path, epochs=4,
                                out_dir=str(tmp_path / "full"))
        main(["synth", "--config", str(cfg_path)])
        main(["train", "--config", str(cfg_path)])
        full_rows = (tmp_path / "full" / "train_log.csv").read_text().splitlines()[1:]

        half_path = micro_config(tmp_path, epochs=2,
                                 out_dir=str(tmp_path / "half"))
        main(["train", "--config", str(half_path)])
        resumed_path = micro_config(tmp_path, epochs=4,
                                    out_dir=str(tmp_path / "resumed"))
        assert main(["train", "--config", str(resumed_path),
                     "--checkpoint", str(tmp_path / "half" / "final.ckpt")]) == 0
        resumed_rows = (tmp_path / "resumed" / "train_log.csv").read_text().splitlines()[1:]
        assert resumed_rows == full_rows[len(full_rows) - len(resumed_rows):]

    def test_lambda_conf_zero_still_logs_conf(self, tmp_path):
        cfg_path = micro_config(
            tmp_path, epochs=1,
            loss_weights={"lambda_conf": 0.0})
        main(["synth", "--config", str(cfg_path)])
        assert main(["train", "--config", str(cfg_path)]) == 0
        rows = (tmp_path / "run" / "train_log.csv").read_text().splitlines()
        assert rows[0] == "step,loss_p2p,loss_c2c,loss_pose,loss_conf,total"
        conf_vals = [float(r.split(",")[4]) for r in rows[1:]]
        assert all(v > 0 for v in conf_vals)


class TestEvalCommand:
    @pytest.fixture()
    def trained(self, tmp_path):
        cfg_path = micro_config(tmp_path)
        main(["synth", "--config", str(cfg_path)])
        main(["train", "--config", str(cfg_path)])
        return cfg_path, tmp_path / "run" / "final.ckpt"

    def test_summary_schema(self, trained, tmp_path, capsys):
        cfg_path, ckpt = trained
        assert main(["eval", "--config", str(cfg_path),
                     "--checkpoint", str(ckpt), "--with-oracle"]) == 0
        summary = json.loads(capsys.readouterr().out)
        for key in ("auc", "below_2cm", "add_s_10pct_diameter", "mean_add",
                    "cd_p2p", "cd_c2c"):
            assert key in summary
        assert "oracle" in summary
        assert "unrefined" in summary
        eval_dir = tmp_path / "run" / "eval"
        assert (eval_dir / "metrics_refined.csv").is_file()
        assert (eval_dir / "metrics_unrefined.csv").is_file()
        assert (eval_dir / "metrics_oracle.csv").is_file()
        header = (eval_dir / "metrics_refined.csv").read_text().splitlines()[0]
        assert header == "sample_id,add,adds,auc_contrib,below_2cm"

    def test_eval_does_not_mutate_inputs(self, trained, tmp_path):
        cfg_path, ckpt = trained
        data_before = tree_digest(tmp_path / "data")
        ckpt_before = ckpt.read_bytes()
        main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt)])
        assert tree_digest(tmp_path / "data") == data_before
        assert ckpt.read_bytes() == ckpt_before

    def test_perfect_predictor_scores_perfectly(self, trained, tmp_path, monkeypatch):
        # inject gt poses as predictions through the full eval path
        from corrpose import training

        real = training._predict_pose

        def gt_predictor(net, sample, refine_iters):
            _, result = real(net, sample, 0)
            return sample.gt, result

        monkeypatch.setattr(training, "_predict_pose", gt_predictor)
        cfg_path, ckpt = trained
        cfg = cf.load_config(cfg_path)
        summary = training.evaluate_model(cfg, ckpt, refine_iters=0,
                                          out_dir=tmp_path / "gt_eval", dump_recon=0)
        assert summary["unrefined"]["mean_add"] == 0.0
        assert abs(summary["unrefined"]["auc"] - 100.0) < 0.1
        assert summary["unrefined"]["below_2cm"] == 100.0
        assert summary["unrefined"]["add_s_10pct_diameter"] == 100.0

    def test_missing_checkpoint_is_config_error(self, tmp_path):
        cfg_path = micro_config(tmp_path)
        assert main(["eval", "--config", str(cfg_path),
                     "--checkpoint", str(tmp_path / "nope.ckpt")]) == 1


class TestInferCommand:
    def test_record_schema(self, tmp_path, capsys):
        cfg_path = micro_config(tmp_path)
        main(["synth", "--config", str(cfg_path)])
        main(["train", "--config", str(cfg_path)])
        manifest = json.loads((tmp_path / "data" / "test.jsonl").read_text().splitlines()[0])
        out_json = tmp_path / "pose.json"
        att_csv = tmp_path / "attention.csv"
        code = main([
            "infer", "--config", str(cfg_path),
            "--checkpoint", str(tmp_path / "run" / "final.ckpt"),
            "--obs", str(tmp_path / "data" / manifest["obs_ply"]),
            "--model", str(tmp_path / "data" / manifest["model_ply"]),
            "--out", str(out_json), "--dump-attention", str(att_csv),
        ])
        assert code == 0
        record = json.loads(out_json.read_text())
        assert len(record["R"]) == 9
        assert len(record["t"]) == 3
        assert set(record["scores_summary"]) == {"min", "mean", "max"}
        assert 0.0 < record["scores_summary"]["min"] <= record["scores_summary"]["max"] < 1.0
        r = np.array(record["R"]).reshape(3, 3)
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
        assert att_csv.is_file()


class TestDeterminism:
    def test_same_seed_bit_identical_training(self, tmp_path):
        cfg_path = micro_config(tmp_path, out_dir=str(tmp_path / "a"))
        main(["synth", "--config", str(cfg_path)])
        assert main(["train", "--config", str(cfg_path)]) == 0
        cfg_path_b = micro_config(tmp_path, out_dir=str(tmp_path / "b"))
        assert main(["train", "--config", str(cfg_path_b)]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()
        assert (a / "train_log.csv").read_text() == (b / "train_log.csv").read_text()
