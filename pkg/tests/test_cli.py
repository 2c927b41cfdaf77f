"""Command-line workflow: the full pipeline plus exit codes and the run log."""

import json
import os

import numpy as np
import pytest

from chaosmark import tensor_store
from chaosmark.cli import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_REJECTED,
    EXIT_USAGE,
    main,
)


def read_run_log(directory):
    path = os.path.join(directory, "runs.jsonl")
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> train -> embed -> attack, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("flow")
    dirs = {name: str(root / name) for name in
            ("data", "extra", "model", "marked", "attacked")}
    manifest = str(root / "manifest.json")

    assert main(["gen-data", "--samples", "400", "--features", "8",
                 "--classes", "3", "--noise", "0.05", "--seed", "3",
                 "--out", dirs["data"]]) == EXIT_OK
    # same generator seed, fewer samples: fresh draws around the same blob
    # centers, so the attack fine-tunes on the task the net was trained for
    assert main(["gen-data", "--samples", "300", "--features", "8",
                 "--classes", "3", "--noise", "0.05", "--seed", "3",
                 "--out", dirs["extra"]]) == EXIT_OK
    assert main(["train", "--data", dirs["data"], "--hidden", "16,8",
                 "--epochs", "8", "--decay", "0", "--seed", "3",
                 "--out", dirs["model"]]) == EXIT_OK
    model = os.path.join(dirs["model"], "model.cwmt")
    assert main(["embed", "--model", model, "--manifest", manifest,
                 "--r", "3.9", "--x0", "0.5", "--epsilon", "0.01",
                 "--seed", "0", "--out", dirs["marked"]]) == EXIT_OK
    marked = os.path.join(dirs["marked"], "watermarked.cwmt")
    assert main(["attack", "--model", marked, "--data", dirs["extra"],
                 "--epochs", "2", "--seed", "5",
                 "--out", dirs["attacked"]]) == EXIT_OK
    return {"root": root, "dirs": dirs, "manifest": manifest, "model": model,
            "marked": marked,
            "attacked": os.path.join(dirs["attacked"], "attacked.cwmt")}


def test_gen_data_outputs(pipeline):
    data_dir = pipeline["dirs"]["data"]
    assert os.path.exists(os.path.join(data_dir, "features.idx"))
    assert os.path.exists(os.path.join(data_dir, "labels.idx"))
    records = read_run_log(data_dir)
    assert len(records) == 1
    assert records[0]["command"] == "gen-data"
    assert records[0]["exit_status"] == 0
    assert records[0]["options"]["samples"] == 400


def test_train_outputs(pipeline):
    model_dir = pipeline["dirs"]["model"]
    for name in ("model.cwmt", "model.cwmt.arch.json", "metrics.csv",
                 "metrics.txt", "loss_trace.csv", "fig_loss.png"):
        assert os.path.exists(os.path.join(model_dir, name)), name


def test_embed_outputs(pipeline):
    marked_dir = pipeline["dirs"]["marked"]
    assert os.path.exists(pipeline["marked"])
    # the architecture sidecar rides along so the marked model stays trainable
    assert os.path.exists(os.path.join(marked_dir, "watermarked.cwmt.arch.json"))
    manifest = tensor_store.load_manifest(pipeline["manifest"])
    assert manifest.layer == "dense1/kernel"
    assert manifest.params.r == 3.9


def test_attack_outputs(pipeline):
    attacked_dir = pipeline["dirs"]["attacked"]
    assert os.path.exists(pipeline["attacked"])
    accuracy = open(os.path.join(attacked_dir, "accuracy.csv")).read()
    assert accuracy.startswith("measure,value")
    assert "accuracy_before" in accuracy and "accuracy_after" in accuracy


def test_verify_confirms_after_attack(pipeline, tmp_path):
    out = str(tmp_path / "verify")
    code = main(["verify", "--suspect", pipeline["attacked"],
                 "--reference", pipeline["model"],
                 "--manifest", pipeline["manifest"],
                 "--seed", "8", "--out", out])
    assert code == EXIT_OK
    report = open(os.path.join(out, "report.txt")).read()
    assert "decision           : confirmed" in report
    assert os.path.exists(os.path.join(out, "trace.csv"))
    assert os.path.exists(os.path.join(out, "fig_trace.png"))
    assert read_run_log(out)[0]["decision"] == "confirmed"


def test_verify_rejects_unrelated_claim(pipeline, tmp_path):
    # a manifest whose key was never embedded in the suspect
    wrong_dir = str(tmp_path / "wrongmark")
    wrong_manifest = str(tmp_path / "wrong_manifest.json")
    assert main(["embed", "--model", pipeline["model"],
                 "--manifest", wrong_manifest, "--r", "3.62", "--x0", "0.21",
                 "--epsilon", "0.03", "--seed", "0",
                 "--out", wrong_dir]) == EXIT_OK
    out = str(tmp_path / "verify_wrong")
    code = main(["verify", "--suspect", pipeline["attacked"],
                 "--reference", pipeline["model"],
                 "--manifest", wrong_manifest,
                 "--seed", "8", "--out", out])
    assert code == EXIT_REJECTED


def test_density_tables_and_figure(pipeline, tmp_path):
    out = str(tmp_path / "density")
    code = main(["density", pipeline["model"], pipeline["marked"],
                 "--layer", "dense1/kernel", "--bins", "40", "--out", out])
    assert code == EXIT_OK
    assert os.path.exists(os.path.join(out, "density_model.csv"))
    assert os.path.exists(os.path.join(out, "density_watermarked.csv"))
    assert os.path.exists(os.path.join(out, "fig_density.png"))


def test_density_zero_range_layer_fails_cleanly(tmp_path):
    flat = tensor_store.ModelWeights(
        [tensor_store.WeightTensor("flat", np.full((3, 3), 0.5))]
    )
    path = str(tmp_path / "flat.cwmt")
    tensor_store.save_weights(flat, path)
    out = str(tmp_path / "density")
    code = main(["density", path, "--layer", "flat", "--out", out])
    assert code == EXIT_DATA
    assert read_run_log(out)[0]["exit_status"] == EXIT_DATA


def test_detect_runs_end_to_end(pipeline, tmp_path):
    out = str(tmp_path / "detect")
    code = main(["detect", "--original", pipeline["model"],
                 "--watermarked", pipeline["marked"],
                 "--finetuned", pipeline["attacked"],
                 "--data", pipeline["dirs"]["data"], "--layer", "dense1",
                 "--threshold", "0.6", "--epochs", "200", "--seed", "2",
                 "--out", out])
    assert code == EXIT_OK
    assert os.path.exists(os.path.join(out, "confusion.csv"))
    assert os.path.exists(os.path.join(out, "fig_confusion.png"))
    summary = open(os.path.join(out, "detect_summary.txt")).read()
    assert summary.startswith("held-out accuracy:")
    assert "(eval split)" in summary


def test_detect_rejects_full_train_fraction(pipeline, tmp_path):
    out = str(tmp_path / "detect_bad")
    code = main(["detect", "--original", pipeline["model"],
                 "--watermarked", pipeline["marked"],
                 "--finetuned", pipeline["attacked"],
                 "--data", pipeline["dirs"]["data"], "--layer", "dense1",
                 "--train-fraction", "1.0", "--seed", "2", "--out", out])
    assert code == EXIT_USAGE


# --- exit codes and options ------------------------------------------------------


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["train"]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == EXIT_USAGE


def test_no_command_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_missing_model_file_is_data_error(pipeline, tmp_path, capsys):
    out = str(tmp_path / "gone")
    code = main(["attack", "--model", str(tmp_path / "nope.cwmt"),
                 "--data", pipeline["dirs"]["data"], "--seed", "0", "--out", out])
    assert code == EXIT_DATA
    assert "error:" in capsys.readouterr().err
    assert read_run_log(out)[0]["exit_status"] == EXIT_DATA


def test_invalid_key_is_usage_error(pipeline, tmp_path):
    out = str(tmp_path / "badkey")
    code = main(["embed", "--model", pipeline["model"],
                 "--manifest", str(tmp_path / "m.json"), "--r", "5.0",
                 "--seed", "0", "--out", out])
    assert code == EXIT_USAGE


def test_config_file_defaults_flags_override(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"samples": 60, "noise": 0.02}))
    out = str(tmp_path / "data")
    code = main(["gen-data", "--config", str(config), "--samples", "80",
                 "--seed", "1", "--out", out])
    assert code == EXIT_OK
    record = read_run_log(out)[0]
    assert record["options"]["samples"] == 80  # flag beats config
    assert record["options"]["noise"] == 0.02  # config beats default
    assert "80 samples" in capsys.readouterr().out


def test_missing_config_file_is_usage_error(tmp_path):
    out = str(tmp_path / "data")
    assert main(["gen-data", "--config", str(tmp_path / "absent.json"),
                 "--seed", "1", "--out", out]) == EXIT_USAGE


def test_no_figures_skips_plots(tmp_path, pipeline):
    out = str(tmp_path / "model2")
    code = main(["train", "--data", pipeline["dirs"]["data"], "--hidden", "8",
                 "--epochs", "2", "--no-figures", "--seed", "0", "--out", out])
    assert code == EXIT_OK
    assert not os.path.exists(os.path.join(out, "fig_loss.png"))


def test_random_seed_announced_when_omitted(tmp_path, capsys):
    out = str(tmp_path / "data")
    code = main(["gen-data", "--samples", "30", "--features", "4",
                 "--classes", "2", "--out", out])
    assert code == EXIT_OK
    assert "seed not given" in capsys.readouterr().out
    assert isinstance(read_run_log(out)[0]["options"]["seed"], int)


def test_same_seed_reproduces_artifacts_byte_for_byte(tmp_path, pipeline):
    outs = [str(tmp_path / name) for name in ("a", "b")]
    for out in outs:
        assert main(["gen-data", "--samples", "50", "--features", "4",
                     "--classes", "2", "--seed", "9", "--out", out]) == EXIT_OK
        assert main(["train", "--data", out, "--hidden", "8", "--epochs", "2",
                     "--no-figures", "--seed", "9",
                     "--out", out + "_model"]) == EXIT_OK
    for name in ("features.idx", "labels.idx"):
        first = open(os.path.join(outs[0], name), "rb").read()
        second = open(os.path.join(outs[1], name), "rb").read()
        assert first == second
    first = open(os.path.join(outs[0] + "_model", "model.cwmt"), "rb").read()
    second = open(os.path.join(outs[1] + "_model", "model.cwmt"), "rb").read()
    assert first == second


def test_run_log_accumulates(tmp_path):
    out = str(tmp_path / "log")
    for seed in ("1", "2"):
        assert main(["gen-data", "--samples", "30", "--features", "4",
                     "--classes", "2", "--seed", seed, "--out", out]) == EXIT_OK
    records = read_run_log(out)
    assert len(records) == 2
    assert all("duration_s" in record and "argv" in record for record in records)
