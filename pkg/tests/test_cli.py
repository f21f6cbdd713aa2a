import csv
import json

import numpy as np
import pytest

from conftest import SMALL_ARCH, make_dataset
from demnet.checkpoint import Checkpoint, save_checkpoint
from demnet.cli import main
from demnet.data import read_manifest, read_tile, write_tile
from demnet.model import OUTPUT_SCALE_M, ModelParams, build_demnet, init_params, zeros_like_params


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> ingest -> train on a reduced network, shared by the smoke tests."""
    root = tmp_path_factory.mktemp("cli")

    def main_(argv):
        return main([str(a) for a in argv])

    assert main_(["generate", "--out", root / "raw", "--pairs", "2", "--size", "300", "--seed", "4"]) == 0
    assert main_(["ingest", "--out", root / "ds", "--pairs-manifest", root / "raw" / "pairs.jsonl",
                 "--window", "280", "--step", "20", "--target", "140"]) == 0
    assert main_(["train", "--out", root / "run", "--manifest", root / "ds" / "manifest.jsonl", "--epochs", "2",
                 "--batch-size", "4", "--channel-scale", "0.125", "--checkpoint-every", "1"]) == 0
    return root


def test_generate_and_ingest_outputs(pipeline):
    raw = read_manifest(pipeline / "raw" / "pairs.jsonl")
    assert len(raw.sources) == 2
    assert read_tile(pipeline / "raw" / "pair_000.dem.tile").shape == (300, 300)
    ds = read_manifest(pipeline / "ds" / "manifest.jsonl")
    assert len(ds.samples) == 8 and len(ds.ids("train")) == 5
    resolved = json.loads((pipeline / "ds" / "resolved_config.json").read_text())
    assert resolved["command"] == "ingest" and resolved["target"] == 140


def test_train_outputs(pipeline):
    run_dir = pipeline / "run"
    rows = list(csv.DictReader(open(run_dir / "metrics.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert (run_dir / "checkpoint_0001.demn").exists() and (run_dir / "checkpoint_last.demn").exists()


def test_eval_prints_mean_rmse(pipeline, capsys):
    code, out, _ = run(capsys, "eval", "--out", pipeline / "eval", "--checkpoint", pipeline / "run" / "checkpoint_last.demn",
                       "--manifest", pipeline / "ds" / "manifest.jsonl")
    assert code == 0
    s = summary(out)
    assert s["images"] == 3 and s["mean_rmse_m"] > 0
    assert (pipeline / "eval" / "eval_bins.csv").exists()


def test_predict_writes_tile_preview_and_latency(pipeline, capsys):
    code, out, _ = run(capsys, "predict", "--out", pipeline / "pred", "--checkpoint",
                       pipeline / "run" / "checkpoint_last.demn", "--slc", pipeline / "raw" / "pair_001.slc.tile",
                       "--preview", "--repeats", "2")
    assert code == 0
    assert read_tile(pipeline / "pred" / "dem.tile").shape == (140, 140)
    assert (pipeline / "pred" / "dem_preview.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    latency = json.loads((pipeline / "pred" / "latency.json").read_text())
    assert latency["repeats"] == 2 and latency["forward_ms"] > 0
    assert summary(out)["throughput_hz"] == pytest.approx(1000 / latency["forward_ms"])


def test_profile_has_one_row_per_azimuth_pixel(pipeline, capsys):
    code, out, _ = run(capsys, "profile", "--out", pipeline / "prof", "--checkpoint",
                       pipeline / "run" / "checkpoint_last.demn", "--manifest", pipeline / "ds" / "manifest.jsonl")
    assert code == 0
    rows = list(csv.DictReader(open(pipeline / "prof" / "profile.csv")))
    assert len(rows) == 140
    assert list(rows[0]) == ["azimuth", "gt_r30", "pred_r30", "gt_r120", "pred_r120"]
    assert summary(out)["ranges"] == [30, 120]


def test_config_file_and_flag_precedence(pipeline, tmp_path, capsys):
    cfg = tmp_path / "gen.yaml"
    cfg.write_text("pairs: 1\nsize: 200\nseed: 9\n")
    code, out, _ = run(capsys, "generate", "--config", cfg, "--out", tmp_path / "g", "--size", "150")
    assert code == 0 and summary(out)["pairs"] == 1
    resolved = json.loads((tmp_path / "g" / "resolved_config.json").read_text())
    assert resolved["size"] == 150 and resolved["seed"] == 9


def test_eval_identity_checkpoint_prints_zero(tmp_path, capsys):
    make_dataset(tmp_path, n_pairs=1, flat_dem=500.0)
    manifest = tmp_path / "ds" / "manifest.jsonl"
    params = zeros_like_params(init_params(build_demnet(**SMALL_ARCH), 0))
    params["ConvOutput/bias"][:] = 500.0 / OUTPUT_SCALE_M
    save_checkpoint(Checkpoint(ModelParams(params), None, read_manifest(manifest).stats, bytes(32), 0, SMALL_ARCH),
                    tmp_path / "id.demn")
    code, out, _ = run(capsys, "eval", "--out", tmp_path / "e", "--checkpoint", tmp_path / "id.demn",
                       "--manifest", manifest)
    assert code == 0 and summary(out)["mean_rmse_m"] == 0.0


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["train", "--no-such-flag"]) == 2
    assert main(["frobnicate"]) == 2


def test_runtime_errors_exit_1_with_one_line(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--out", tmp_path, "--checkpoint", tmp_path / "missing.demn",
                       "--manifest", tmp_path / "missing.jsonl")
    assert code == 1
    line = [l for l in err.splitlines() if l.startswith("error:")]
    assert len(line) == 1 and line[0].startswith("error: eval: ")
    bad = tmp_path / "bad.yaml"
    bad.write_text("epochz: 3\n")
    code, _, err = run(capsys, "train", "--config", bad, "--manifest", "x")
    assert code == 1 and "unknown keys" in err
    code, _, err = run(capsys, "train", "--out", tmp_path / "t")
    assert code == 1 and "needs --manifest" in err


def test_corrupt_checkpoint_reports_magic(tmp_path, capsys):
    (tmp_path / "c.demn").write_bytes(b"JUNKJUNKJUNK")
    write_tile(tmp_path / "s.tile", np.ones((8, 8), np.complex64))
    code, _, err = run(capsys, "predict", "--out", tmp_path / "p", "--checkpoint", tmp_path / "c.demn",
                       "--slc", tmp_path / "s.tile")
    assert code == 1 and "error: predict: CheckpointError:" in err and "bad magic" in err


def test_thread_limit_env(monkeypatch, pipeline, capsys):
    monkeypatch.setenv("DEMNET_NUM_THREADS", "1")
    code, _, _ = run(capsys, "eval", "--out", pipeline / "eval1", "--checkpoint",
                     pipeline / "run" / "checkpoint_last.demn", "--manifest", pipeline / "ds" / "manifest.jsonl")
    assert code == 0
    assert np.isfinite(json.loads((pipeline / "eval1" / "resolved_config.json").read_text())["bins"])
