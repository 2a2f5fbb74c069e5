import json

import numpy as np
import pytest

from unicd import checkpoint as ckpt
from unicd.analysis import read_pgm
from unicd.cli import ABLATIONS, main
from unicd.tensor import ops
from unicd.tensor.io import load_tensor

TRAIN = ["train", "--task", "bcd", "--tiny", "--seed", "7", "--iters", "4", "--samples", "3", "--batch-size", "2"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(TRAIN + ["--out", str(out)]) == 0
    return out


class TestTrain:
    def test_artifacts(self, trained):
        assert (trained / "checkpoint.uckp").exists()
        assert ckpt.config_path(trained / "checkpoint.uckp").exists()
        trace = (trained / "trace.tsv").read_text().splitlines()
        assert trace[0].startswith("step\ttask") and len(trace) == 1 + 3  # stage-1 share of 4 iterations
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["seed"] == 7
        assert manifest["config"]["train"]["weight_decay"] == 5e-4  # defaults echoed

    def test_rerun_reproduces(self, trained, tmp_path):
        assert main(["rerun", str(trained / "manifest.json"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "trace.tsv").read_bytes() == (trained / "trace.tsv").read_bytes()
        assert (tmp_path / "checkpoint.uckp").read_bytes() == (trained / "checkpoint.uckp").read_bytes()

    def test_scd_classes(self, tmp_path):
        argv = ["train", "--task", "scd", "--classes", "4", "--tiny", "--iters", "1", "--samples", "2",
                "--batch-size", "1", "--out", str(tmp_path)]
        assert main(argv) == 0
        ck = ckpt.load(tmp_path / "checkpoint.uckp")
        assert ck.params["head.outputs.sem_t1.weight"].shape[0] == 5

    def test_stage_two_without_init(self, tmp_path, capsys):
        assert main(["train", "--stage", "2", "--tiny", "--out", str(tmp_path)]) == 2
        assert "error[config]" in capsys.readouterr().err

    def test_stage_two_from_checkpoint(self, trained, tmp_path):
        argv = ["train", "--stage", "2", "--init", str(trained / "checkpoint.uckp"), "--iters", "5", "--samples", "3",
                "--batch-size", "2", "--out", str(tmp_path)]
        assert main(argv) == 0
        assert ckpt.load(tmp_path / "checkpoint.uckp").stage == 2

    def test_bad_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        cfg.write_text(json.dumps({"model": {"stage_dims": [4, 6, 16, 32]}}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_missing_init(self, tmp_path):
        assert main(["train", "--init", str(tmp_path / "nope.uckp"), "--out", str(tmp_path)]) == 3


class TestEval:
    @pytest.mark.parametrize("fmt", ["csv", "table"])
    def test_formats(self, trained, capsys, fmt):
        assert main(["eval", str(trained / "checkpoint.uckp"), "--samples", "2", "--format", fmt]) == 0
        out = capsys.readouterr().out
        if fmt == "csv":
            assert out.splitlines()[0] == "dataset,task,metric,value"
            assert {line.split(",")[2] for line in out.splitlines()[1:]} == {"precision", "recall", "f1", "iou"}
        else:
            assert out.startswith("synthetic [bcd]")

    def test_task_mismatch(self, trained):
        assert main(["eval", str(trained / "checkpoint.uckp"), "--task", "scd"]) == 2

    def test_empty_dataset(self, trained):
        assert main(["eval", str(trained / "checkpoint.uckp"), "--samples", "0"]) == 2

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.uckp"
        bad.write_bytes(b"XXXX" + bytes(20))
        assert main(["eval", str(bad)]) == 3
        assert "error[io]" in capsys.readouterr().err

    def test_writes_manifest(self, trained, tmp_path):
        assert main(["eval", str(trained / "checkpoint.uckp"), "--samples", "2", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.csv").read_text().startswith("dataset,task,metric,value")
        assert json.loads((tmp_path / "manifest.json").read_text())["command"] == "eval"


class TestAblate:
    def test_shared_dataset_hash(self, tmp_path, capsys):
        argv = ["ablate", "--axis", "fixed-thresholds", "--tiny", "--iters", "2", "--samples", "2", "--batch-size", "1",
                "--probe", "1", "--format", "csv", "--out", str(tmp_path)]
        assert main(argv) == 0
        rows = [r.split(",") for r in capsys.readouterr().out.splitlines()[1:]]
        assert {r[0] for r in rows} == {"baseline", "fixed-thresholds"}
        assert len({r[3] for r in rows}) == 1
        assert "distractor_response" in {r[1] for r in rows}
        assert (tmp_path / "ablation.csv").exists()

    def test_axes(self):
        assert ABLATIONS["fixed-thresholds"] == {"fcpg_mode": "fixed"}
        assert ABLATIONS["no-fcpg"] == {"fcpg": False}

    def test_unknown_axis(self):
        assert main(["ablate", "--axis", "no-decoder", "--tiny"]) == 2


class TestGradcheck:
    def test_list(self, capsys):
        assert main(["gradcheck", "--list"]) == 0
        names = capsys.readouterr().out.split()
        assert {"conv2d_3x3", "selective_scan", "fcpg_adaptive", "model_scd"} <= set(names)

    def test_subset_report(self, capsys):
        assert main(["gradcheck", "--only", "sigmoid", "layer_norm"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split()[0] == "sigmoid" and lines[0].split()[2] == "PASS"
        assert float(lines[0].split()[1]) <= 1e-4

    def test_unknown_case(self):
        assert main(["gradcheck", "--only", "nope"]) == 2

    def test_sign_flip_canary(self, monkeypatch, capsys):
        real = ops.conv2d_backward

        def flipped(*args, **kwargs):
            gx, gw = real(*args, **kwargs)
            return gx, -gw
        monkeypatch.setattr(ops, "conv2d_backward", flipped)
        assert main(["gradcheck", "--only", "conv2d_3x3", "sigmoid"]) == 1
        out = capsys.readouterr().out
        assert "conv2d_3x3" in out.splitlines()[-1] and "FAIL" in out
        assert "sigmoid" not in out.splitlines()[-1]


class TestExportFeatures:
    def test_untrained_export(self, tmp_path, capsys):
        assert main(["export-features", "--tiny", "--out", str(tmp_path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "stage,channels,height,width,inside_outside_ratio"
        for s in range(1, 5):
            c, h, w = (int(v) for v in lines[s].split(",")[1:4])
            img = read_pgm((tmp_path / f"stage{s}.pgm").read_bytes())
            assert img.shape == (h, w)
            assert load_tensor(tmp_path / f"stage{s}.utsr").shape == (c, h, w)
        assert (tmp_path / "stage1.pgm").read_bytes().startswith(b"P5\n16 8\n255\n")

    def test_from_checkpoint(self, trained, tmp_path):
        argv = ["export-features", "--checkpoint", str(trained / "checkpoint.uckp"), "--stage", "4",
                "--out", str(tmp_path)]
        assert main(argv) == 0
        assert (tmp_path / "stage4.pgm").exists() and not (tmp_path / "stage1.pgm").exists()

    @pytest.mark.parametrize("stage", ["5", "0", "x"])
    def test_bad_stage(self, tmp_path, stage):
        assert main(["export-features", "--tiny", "--stage", stage, "--out", str(tmp_path)]) == 2

    def test_rerun_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["export-features", "--tiny", "--stage", "2", "--out", str(a)]) == 0
        assert main(["rerun", str(a / "manifest.json"), "--out", str(b)]) == 0
        assert np.array_equal(load_tensor(a / "stage2.utsr"), load_tensor(b / "stage2.utsr"))


def test_gradcheck_manifest_rerun(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gradcheck", "--only", "sigmoid", "--out", str(a)]) == 0
    assert main(["rerun", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert (a / "gradcheck.txt").read_bytes() == (b / "gradcheck.txt").read_bytes()
