import json

import numpy as np
import pytest
from PIL import Image

from mos import cli
from mos.data import generate_synthetic
from mos.preview import read_ppm, rederive_m2s, slot_pixel_mismatches, write_ppm
from mos.stitching import m2m_targets, m2s_labels, stitch_permutation
from mos.trainer import TrainingAborted

TINY = {"image_size": 32, "patch_size": 8, "embed_dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2.0,
        "head_hidden": 32, "head_out": 16, "batch_size": 8, "epochs": 1, "warmup_epochs": 0}


def test_ppm_round_trip_and_pillow_agrees(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    assert np.array_equal(read_ppm(path), img)
    with Image.open(path) as im:
        assert im.format == "PPM" and np.array_equal(np.asarray(im), img)


def test_preview_example(tmp_path):
    out = tmp_path / "pv"
    assert cli.run(["stitch-preview", "--n", "3", "--r", "2", "--S", "1", "--out-dir", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.ppm")) == [f"stitched_00{i}.ppm" for i in range(3)]
    side = json.loads((out / "batch.json").read_text())
    assert side["N"] == 3 and side["M"] == 4
    # 3 < 2M-1: correspondence targets are undefined for this batch
    assert side["y_m2m"] is None and side["w_m2m"] is None
    assert np.array_equal(rederive_m2s(side), m2s_labels(3, 4))
    assert side["q"] == stitch_permutation(3, 4).q.tolist()
    assert slot_pixel_mismatches(out) == 0
    for i in range(3):
        with Image.open(out / f"stitched_00{i}.ppm") as im:
            assert im.size == (32, 32)


def test_preview_sidecar_rebuilds_m2m(tmp_path):
    out = tmp_path / "pv"
    assert cli.run(["stitch-preview", "--n", "8", "--r", "2", "--S", "2", "--size", "16",
                    "--out-dir", str(out)]) == 0
    side = json.loads((out / "batch.json").read_text())
    t = m2m_targets(8, 4)
    assert side["y_m2m"] == t.y_m2m.tolist() and side["w_m2m"] == t.w_m2m.tolist()
    assert np.array_equal(rederive_m2s(side), np.asarray(side["y_m2s"]))
    assert {slot["scale"] for row in side["provenance"] for slot in row} <= {1, 2}
    assert all(len(slot["crops"]) == slot["scale"] ** 2 for row in side["provenance"] for slot in row)
    assert slot_pixel_mismatches(out) == 0


def test_preview_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.run(["stitch-preview", "--n", "4", "--r", "2", "--size", "16", "--seed", "3",
                        "--out-dir", str(tmp_path / d)]) == 0
    for f in (tmp_path / "a").rglob("*.*"):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_preview_bad_factor_is_usage_error(tmp_path):
    assert cli.run(["stitch-preview", "--n", "3", "--r", "3", "--size", "16", "--out-dir", str(tmp_path)]) == 1


def test_verify_targets(capsys):
    assert cli.run(["verify-targets", "--max-n", "32"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["mismatched"] == 0 and report["compared"] > 0


def test_missing_dataset_path(tmp_path, capsys):
    missing = str(tmp_path / "nope.bin")
    assert cli.run(["pretrain", "--data", missing, "--out-dir", str(tmp_path / "o")]) == 2
    assert missing in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
    assert cli.run(["pretrain", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1


def test_invalid_combination_before_compute(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "batch_size": 4, "r_choices": [2]}))  # N=4 < 2M-1=7
    assert cli.run(["pretrain", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o" / "metrics.jsonl").exists()


def test_bad_subcommand():
    assert cli.run(["train-everything"]) == 1


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("MOS_THREADS", "many")
    assert cli.run(["verify-targets", "--max-n", "4"]) == 1


def test_numeric_failure_exit(monkeypatch, tmp_path):
    import mos.trainer

    def boom(*a, **k):
        raise TrainingAborted(7, RuntimeError("non-finite loss"))

    monkeypatch.setattr(mos.trainer, "pretrain", boom)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.run(["pretrain", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 3


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    d = tmp_path_factory.mktemp("cifar")
    path = d / "syn.bin"
    assert cli.run(["export-synthetic", "--n", "24", "--size", "32", "--seed", "2", "--out", str(path)]) == 0
    return d, path


def test_export_synthetic_format(exported):
    _, path = exported
    blob = path.read_bytes()
    assert len(blob) == 24 * 3073
    assert [blob[k * 3073] for k in range(6)] == [0, 1, 2, 0, 1, 2]
    ref = generate_synthetic(24, 3, 32, 2)
    px = np.frombuffer(blob[1:3073], np.uint8).reshape(3, 32, 32).transpose(1, 2, 0)
    assert np.array_equal(px, np.rint(ref.images[0] * 255).astype(np.uint8))


def test_export_requires_32px(tmp_path):
    assert cli.run(["export-synthetic", "--size", "16", "--out", str(tmp_path / "x.bin")]) == 1


def test_pretrain_and_evaluate(exported, capsys):
    d, path = exported
    cfg = d / "run.json"
    cfg.write_text(json.dumps(TINY))
    out = d / "run"
    assert cli.run(["pretrain", "--config", str(cfg), "--data", str(path), "--out-dir", str(out)]) == 0
    echoed = json.loads((out / "run_config.json").read_text())
    assert echoed["embed_dim"] == 16 and echoed["data"] == [str(path)]
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 3
    metrics_file = d / "evals.jsonl"
    capsys.readouterr()
    common = ["--checkpoint", str(out / "final.ckpt"), "--data", str(path), "--test-data", str(path),
              "--metrics-out", str(metrics_file)]
    assert cli.run(["eval-knn", *common, "--k", "3"]) == 0
    knn = json.loads(capsys.readouterr().out)
    assert knn["metric"] == "knn" and knn["k"] == 3 and 0 <= knn["accuracy"] <= 1
    assert cli.run(["eval-linear", *common, "--probe-epochs", "3"]) == 0
    lines = [json.loads(s) for s in metrics_file.read_text().splitlines()]
    assert [r["metric"] for r in lines] == ["knn", "linear"]
    # flags override file values
    assert cli.run(["pretrain", "--config", str(cfg), "--data", str(path), "--epochs", "0",
                    "--out-dir", str(d / "zero")]) == 0
    assert json.loads((d / "zero" / "run_config.json").read_text())["epochs"] == 0


def test_grad_check_command(tmp_path, capsys):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"depth": 1, "embed_dim": 8, "head_hidden": 8, "head_out": 8}))
    assert cli.run(["grad-check", "--config", str(cfg)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["passed"] and res["momentum_grads_zero"] and res["max_rel_error"] < 1e-4
