import json

import numpy as np
import pytest

from dissim import cli
from dissim.reports import read_matrix_csv

TINY_MODEL = {"block_depths": [1, 1, 1, 1], "block_channels": [8, 8, 16, 16],
              "bottleneck": False, "num_classes": 4, "input_shape": [3, 16, 16]}


def write_config(path, out_dir, n_models=2, lam=1.0, tap_ids=(2,), epochs=1, seed=11):
    doc = {
        "schema_version": 1,
        "dataset": {"kind": "synth", "n_train": 128, "n_test": 64,
                    "classes": 4, "side": 16, "seed": 7},
        "model": TINY_MODEL,
        "n_models": n_models,
        "seed": seed,
        "out_dir": str(out_dir),
        "training": {"metric": "ExpVar", "lambda": lam, "tap_ids": list(tap_ids),
                     "epochs": epochs, "batch_size": 32, "base_lr": 0.05},
        "augment": {"enabled": False},
    }
    path.write_text(json.dumps(doc))
    return path


def run(args):
    return cli.main(["--log-level", "warning", *args])


class TestTrainCommand:
    def test_structural_outputs(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", tmp_path / "run", n_models=3)
        assert run(["train", "--config", str(cfg)]) == 0
        names = sorted(p.name for p in (tmp_path / "run").iterdir())
        assert names == ["model_001.ckpt", "model_001.stats.jsonl",
                         "model_002.ckpt", "model_002.stats.jsonl",
                         "model_003.ckpt", "model_003.stats.jsonl",
                         "resolved_config.json"]

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", tmp_path / "runA")
        assert run(["train", "--config", str(cfg)]) == 0
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "runB")]) == 0
        for name in ("model_001.ckpt", "model_002.ckpt"):
            a = (tmp_path / "runA" / name).read_bytes()
            b = (tmp_path / "runB" / name).read_bytes()
            assert a == b

    def test_invalid_config_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", tmp_path / "run", lam=1.0, tap_ids=())
        assert run(["train", "--config", str(cfg)]) == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert run(["train", "--config", str(tmp_path / "none.json")]) == 2

    def test_divergence_exits_3(self, tmp_path):
        doc = json.loads(write_config(tmp_path / "cfg.json", tmp_path / "run",
                                      lam=0.0, tap_ids=()).read_text())
        doc["training"]["base_lr"] = 1e9
        (tmp_path / "cfg.json").write_text(json.dumps(doc))
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert run(["train", "--config", str(tmp_path / "cfg.json")]) == 3

    def test_seed_override_changes_models(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", tmp_path / "runA", n_models=1,
                           lam=0.0, tap_ids=())
        run(["train", "--config", str(cfg)])
        run(["train", "--config", str(cfg), "--out", str(tmp_path / "runB"),
             "--seed-override", "99"])
        a = (tmp_path / "runA" / "model_001.ckpt").read_bytes()
        b = (tmp_path / "runB" / "model_001.ckpt").read_bytes()
        assert a != b


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    cfg = write_config(root / "cfg.json", root / "run", n_models=2, epochs=2)
    assert run(["train", "--config", str(cfg)]) == 0
    return root


class TestEvalCommand:
    def test_reports_written_and_consistent(self, trained_run, tmp_path):
        ck = [str(trained_run / "run" / f"model_{i:03d}.ckpt") for i in (1, 2)]
        out = tmp_path / "rep"
        assert run(["eval", *ck, "--config", str(trained_run / "cfg.json"),
                    "--out", str(out)]) == 0
        doc = json.loads(out.with_suffix(".json").read_text())
        assert doc["schema_version"] == 1
        assert doc["n_models"] == 2 and len(doc["pairs"]) == 1
        assert (tmp_path / "rep_kappa.png").exists()
        # CSV round-trips the pair values at full precision
        lines = out.with_suffix(".csv").read_text().splitlines()
        assert lines[0].startswith("model_a,model_b,kappa")
        assert lines[-1].startswith("average")

    def test_identical_checkpoints_kappa_one(self, trained_run, tmp_path):
        ck = str(trained_run / "run" / "model_001.ckpt")
        out = tmp_path / "same"
        assert run(["eval", ck, ck, "--config", str(trained_run / "cfg.json"),
                    "--out", str(out)]) == 0
        doc = json.loads(out.with_suffix(".json").read_text())
        kappa = doc["pairs"][0]["kappa"]
        # identical models: kappa 1 unless accuracy is degenerate (0 or 1)
        assert kappa == 1.0 or doc["degenerate_kappa_pairs"] == 1

    def test_five_checkpoints_ten_pairs(self, trained_run, tmp_path):
        ck = [str(trained_run / "run" / f"model_{i:03d}.ckpt") for i in (1, 2)]
        paths = [ck[0], ck[1], ck[0], ck[1], ck[0]]
        out = tmp_path / "five"
        assert run(["eval", *paths, "--config", str(trained_run / "cfg.json"),
                    "--out", str(out)]) == 0
        doc = json.loads(out.with_suffix(".json").read_text())
        assert len(doc["pairs"]) == 10

    def test_averages_recompute_from_pair_rows(self, trained_run, tmp_path):
        ck = [str(trained_run / "run" / f"model_{i:03d}.ckpt") for i in (1, 2)]
        out = tmp_path / "avg"
        run(["eval", ck[0], ck[1], ck[0], "--config", str(trained_run / "cfg.json"),
             "--out", str(out)])
        doc = json.loads(out.with_suffix(".json").read_text())
        kappas = [p["kappa"] for p in doc["pairs"] if p["kappa"] is not None]
        if kappas:
            assert doc["mean_kappa"] == pytest.approx(np.mean(kappas), abs=1e-12)
        jsds = [p["jsd_percent"] for p in doc["pairs"]]
        assert doc["mean_jsd"] == pytest.approx(np.mean(jsds), abs=1e-12)

    def test_single_checkpoint_exits_2(self, trained_run, tmp_path):
        ck = str(trained_run / "run" / "model_001.ckpt")
        assert run(["eval", ck, "--config", str(trained_run / "cfg.json"),
                    "--out", str(tmp_path / "x")]) == 2

    def test_corrupt_checkpoint_exits_4(self, trained_run, tmp_path):
        ck = trained_run / "run" / "model_001.ckpt"
        bad = tmp_path / "bad.ckpt"
        raw = bytearray(ck.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        bad.write_bytes(bytes(raw))
        assert run(["eval", str(bad), str(ck), "--config", str(trained_run / "cfg.json"),
                    "--out", str(tmp_path / "y")]) == 4


class TestHeatmapCommand:
    def test_outputs_and_round_trip(self, trained_run, tmp_path):
        ck = [str(trained_run / "run" / f"model_{i:03d}.ckpt") for i in (1, 2)]
        out = tmp_path / "hm"
        assert run(["heatmap", *ck, "--config", str(trained_run / "cfg.json"),
                    "--out", str(out)]) == 0
        matrix = read_matrix_csv(out.with_suffix(".csv"))
        assert matrix.shape == (4, 4)
        diag_lines = (tmp_path / "hm_diagonal.csv").read_text().splitlines()
        assert len(diag_lines) == 5  # header + 4 taps
        png = (tmp_path / "hm.png").read_bytes()
        assert png[:8] == b"\x89PNG\r\n\x1a\n"

    def test_self_heatmap_diagonal_ones(self, trained_run, tmp_path):
        ck = str(trained_run / "run" / "model_001.ckpt")
        out = tmp_path / "self"
        assert run(["heatmap", ck, ck, "--config", str(trained_run / "cfg.json"),
                    "--out", str(out)]) == 0
        matrix = read_matrix_csv(out.with_suffix(".csv"))
        assert np.abs(np.diag(matrix) - 1.0).max() < 1e-6

    def test_csv_full_precision_round_trip(self, trained_run, tmp_path):
        from dissim.reports import write_matrix_csv
        m = np.random.default_rng(0).random((3, 5))
        write_matrix_csv(m, tmp_path / "m.csv")
        assert np.array_equal(read_matrix_csv(tmp_path / "m.csv"), m)

    def test_png_dimensions_scale_with_taps(self, trained_run, tmp_path):
        import struct
        ck = [str(trained_run / "run" / f"model_{i:03d}.ckpt") for i in (1, 2)]
        out = tmp_path / "dims"
        run(["heatmap", *ck, "--config", str(trained_run / "cfg.json"), "--out", str(out)])
        raw = (tmp_path / "dims.png").read_bytes()
        # width/height live in the IHDR chunk right after the signature
        w, h = struct.unpack(">II", raw[16:24])
        from dissim.reports import HEATMAP_CELL_PX
        assert (w, h) == (4 * HEATMAP_CELL_PX, 4 * HEATMAP_CELL_PX)

    def test_rendering_deterministic(self, trained_run, tmp_path):
        ck = [str(trained_run / "run" / f"model_{i:03d}.ckpt") for i in (1, 2)]
        run(["heatmap", *ck, "--config", str(trained_run / "cfg.json"),
             "--out", str(tmp_path / "r1")])
        run(["heatmap", *ck, "--config", str(trained_run / "cfg.json"),
             "--out", str(tmp_path / "r2")])
        assert (tmp_path / "r1.png").read_bytes() == (tmp_path / "r2.png").read_bytes()
        assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
