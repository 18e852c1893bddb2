import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

EXPERIMENT_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def experiments(tmp_path_factory):
    """Full synthetic experiments (teacher, pseudo-labels, distillation sweep), one per seed.

    Computed lazily and shared by every test that needs them.
    """
    from intrayolo.pipeline import run_experiment

    cache = {}

    def get(seed):
        if seed not in cache:
            cache[seed] = run_experiment(seed, str(tmp_path_factory.mktemp(f"experiment{seed}")))
        return cache[seed]

    return get


TINY = ["--set", "data.image_size=128", "--set", "teacher.input_size=64", "--set", "student.input_size=128",
        "--set", "teacher.backbone_channels=8,8,16,16", "--set", "student.backbone_channels=8,8,16,16",
        "--set", "teacher.neck_width=8", "--set", "student.neck_width=8"]


def run_cli_pipeline(root, mode="ppo", n=12, steps=6):
    """synth -> train-teacher -> pseudo-label --slice -> train-student -> infer --slice -> eval.

    Returns the paths of the primary artifacts.
    """
    from intrayolo.cli import main

    root = str(root)
    p = {k: os.path.join(root, v) for k, v in {
        "data": "data", "teacher": "teacher.pt", "pseudo": "pseudo.json", "student": "student.pt",
        "dets": "dets.json", "report": "report.txt"}.items()}
    steps_ = [
        ["synth", "--out", p["data"], "--n", str(n), "--seed", "3"],
        ["train-teacher", "--data", f"{p['data']}/train.json", "--out", p["teacher"], "--steps", str(steps)],
        ["pseudo-label", "--teacher", p["teacher"], "--data", f"{p['data']}/train.json", "--out", p["pseudo"],
         "--slice", "--score-floor", "0.0"],
        ["train-student", "--data", f"{p['data']}/train.json", "--pseudo", p["pseudo"], "--mode", mode,
         "--phi", "0.1", "--out", p["student"], "--steps", str(steps)],
        ["infer", "--model", p["student"], "--data", f"{p['data']}/val.json", "--out", p["dets"], "--slice"],
        ["eval", "--data", f"{p['data']}/val.json", "--dets", f"{mode}={p['dets']}", "--out", p["report"]],
    ]
    for argv in steps_:
        code = main(argv + TINY)
        assert code == 0, argv
    return p


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
