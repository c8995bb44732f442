"""End-to-end command line workflow and exit-code policy."""

import json

import numpy as np
import pytest
import torch

from octaseg.cli import main

torch.set_num_threads(1)

FAST_TRAIN = ["--set", "train.epochs=1", "--set", "train.input_size=32",
              "--set", "train.mc_samples=2", "--set", "train.val_period=5",
              "--set", "train.augment=false"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    code = main(["synth-data", "--out", str(data), "--count", "10",
                 "--seed", "1", "--size", "32"])
    assert code == 0
    code = main(["train", "--data", str(data), "--out", str(root / "run"),
                 "--variant", "M*3", *FAST_TRAIN])
    assert code == 0
    return root


def test_synth_data_layout(workspace):
    data = workspace / "data"
    assert len(list((data / "images").glob("*.png"))) == 10
    assert len(list((data / "region").glob("*.png"))) == 10
    assert len(list((data / "vessel").glob("*.png"))) == 10


def test_train_writes_resolved_config(workspace):
    run = workspace / "run"
    assert (run / "checkpoint.pt").is_file()
    assert (run / "config.yaml").is_file()
    record = json.loads((run / "record.json").read_text())
    assert record["epochs"] == 1


def test_infer_and_evaluate(workspace):
    code = main(["infer", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
                 "--input", str(workspace / "data" / "images"),
                 "--out", str(workspace / "inf"), "--mc-samples", "2"])
    assert code == 0
    assert (workspace / "inf" / "manifest.json").is_file()
    code = main(["evaluate", "--checkpoint",
                 str(workspace / "run" / "checkpoint.pt"),
                 "--data", str(workspace / "data"),
                 "--out", str(workspace / "eval"), "--split", "test"])
    assert code == 0
    assert (workspace / "eval" / "metrics.csv").is_file()


def test_report_command(workspace):
    code = main(["report", "--run", str(workspace / "run"),
                 "--data", str(workspace / "data"),
                 "--out", str(workspace / "rep")])
    assert code == 0
    assert (workspace / "rep" / "panels.png").is_file()


def test_ablate_subset(workspace, tmp_path):
    code = main(["ablate", "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "abl"), "--variants", "M0",
                 *FAST_TRAIN])
    assert code == 0
    assert (tmp_path / "abl" / "ablation.csv").is_file()


def test_validation_failures_exit_2(workspace, tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "r"),
                 "--set", "train.epochs=nope"]) == 2
    assert main(["infer", "--checkpoint", str(tmp_path / "no.pt"),
                 "--input", str(workspace / "data" / "images"),
                 "--out", str(tmp_path / "o")]) == 2
    # eight samples split 60/10/30 leave the val bucket empty
    assert main(["synth-data", "--out", str(tmp_path / "d8"),
                 "--count", "8", "--seed", "4", "--size", "32"]) == 0
    assert main(["evaluate", "--checkpoint",
                 str(workspace / "run" / "checkpoint.pt"),
                 "--data", str(tmp_path / "d8"),
                 "--out", str(tmp_path / "e"), "--split", "val"]) == 2


def test_divergence_exits_3(workspace, tmp_path):
    poisoned = tmp_path / "poisoned.pt"
    payload = torch.load(workspace / "run" / "checkpoint.pt",
                         weights_only=False)
    name = next(iter(payload["state_dict"]))
    payload["state_dict"][name] = torch.full_like(
        payload["state_dict"][name], float("nan"))
    torch.save(payload, poisoned)
    code = main(["train", "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "r"), "--variant", "M*3",
                 *FAST_TRAIN, "--set", "train.epochs=2",
                 "--resume", str(poisoned)])
    assert code == 3
