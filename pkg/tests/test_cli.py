import json
import math
import os

import pytest

from conftest import TINY, run_cli_pipeline
from intrayolo.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, git_blob_hash, main
from intrayolo.dataset import load_manifest
from intrayolo.evaluation import METRICS, parse_report


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_cli_pipeline(tmp_path_factory.mktemp("cli"))


def test_pipeline_artifacts_and_run_records(pipeline):
    for key in ("teacher", "pseudo", "student", "dets", "report"):
        assert os.path.getsize(pipeline[key]) > 0
    assert os.path.exists(pipeline["student"] + ".decisions.jsonl")
    record = json.load(open(pipeline["student"] + ".run.json"))
    assert record["command"] == "train-student"
    assert record["config"]["distill"]["mode"] == "ppo"
    assert record["inputs"]["pseudo"]["blob"] == git_blob_hash(pipeline["pseudo"])
    assert "images_tree" in record["inputs"]["data"]
    assert os.path.exists(os.path.join(pipeline["data"], "run.json"))
    (name, values), = parse_report(open(pipeline["report"]).read())
    assert name == "ppo" and set(values) == set(METRICS)


def test_eval_on_ground_truth_scores_one(pipeline, tmp_path):
    val = f"{pipeline['data']}/val.json"
    doc = json.load(open(val))
    dets = [{"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 1.0}
            for a in doc["annotations"]]
    path = tmp_path / "gt_dets.json"
    path.write_text(json.dumps(dets))
    out = tmp_path / "gt.report.txt"
    assert main(["eval", "--data", val, "--dets", f"gt={path}", "--out", str(out)]) == EXIT_OK
    result = json.load(open(tmp_path / "gt.report.json"))["gt"]
    for m in METRICS:
        v = result["mean"][m]
        assert v is None or (isinstance(v, float) and (math.isnan(v) or v == pytest.approx(1.0)))
    assert result["mean"]["mAP"] == pytest.approx(1.0)


def test_pseudo_labels_feed_eval_directly(pipeline, tmp_path):
    out = tmp_path / "pseudo.report.txt"
    assert main(["eval", "--data", f"{pipeline['data']}/train.json", "--dets", pipeline["pseudo"],
                 "--out", str(out), "--format", "table1"]) == EXIT_OK
    assert out.read_text().split()[0] == "Model"


def test_train_student_none_is_bit_identical(pipeline, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"s{k}.pt"
        assert main(["train-student", "--data", f"{pipeline['data']}/train.json", "--mode", "none",
                     "--steps", "4", "--out", str(out)] + TINY) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_stats_and_render(pipeline, tmp_path):
    out = tmp_path / "stats.txt"
    assert main(["stats", "--data", f"{pipeline['data']}/manifest.json", "--out", str(out)]) == EXIT_OK
    assert "fraction below 0.58% of image area" in out.read_text()
    first = load_manifest(f"{pipeline['data']}/val.json").images[0].id
    assert main(["render", "--data", f"{pipeline['data']}/val.json", "--dets", pipeline["dets"],
                 "--out", str(tmp_path / "r"), "--image-id", str(first)]) == EXIT_OK
    assert sorted(os.listdir(tmp_path / "r")) == [f"{first:05d}.png", "run.json"]


def test_config_file_and_set_precedence(pipeline, tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[student]\nsteps = 9\n")
    out = tmp_path / "s.pt"
    argv = ["train-student", "--data", f"{pipeline['data']}/train.json", "--out", str(out),
            "--config", str(ini), "--set", "student.steps=2"] + TINY
    assert main(argv) == EXIT_OK
    record = json.load(open(str(out) + ".run.json"))
    assert record["config"]["student"]["steps"] == 2


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["synth"],
    ["synth", "--out", "x", "--bogus"],
    ["synth", "--out", "x", "--set", "distill.phi=3"],
    ["synth", "--out", "x", "--set", "nosuch.key=1"],
    ["synth", "--out", "x", "--set", "malformed"],
])
def test_usage_and_config_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_static_mode_without_pseudo_is_usage_error(pipeline, tmp_path):
    argv = ["train-student", "--data", f"{pipeline['data']}/train.json", "--mode", "static", "--phi", "0.2",
            "--out", str(tmp_path / "s.pt")] + TINY
    assert main(argv) == EXIT_USAGE


def test_runtime_failures_exit_2(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    argv = ["infer", "--model", str(bad), "--data", f"{pipeline['data']}/val.json", "--out", str(tmp_path / "d.json")]
    assert main(argv) == EXIT_RUNTIME
    assert "error: infer" in capsys.readouterr().err
    assert main(["stats", "--data", str(tmp_path / "missing.json")]) == EXIT_RUNTIME


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "train-student" in capsys.readouterr().out
