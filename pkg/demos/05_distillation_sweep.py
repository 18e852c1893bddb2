"""The distillation ablation on synthetic data: no distillation, static
IoU gates and the PPO gate, each student evaluated on the same split.

    python3 demos/05_distillation_sweep.py 0 1 2

Each seed takes roughly 20 minutes on one CPU core.
"""

import logging
import sys
import tempfile

from intrayolo.evaluation import report_rows
from intrayolo.pipeline import run_experiment

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

for seed in [int(s) for s in sys.argv[1:]] or [0]:
    with tempfile.TemporaryDirectory() as work:
        exp = run_experiment(seed, work)
    print(f"\nseed {seed}")
    print("teacher, full frame vs sliced")
    print(report_rows([("full", exp.teacher_full), ("sliced", exp.teacher_sliced)]))
    sliced, full = exp.small_pseudo_counts()
    print(f"small pseudo-labels: sliced {sliced}, full frame {full}")
    print(report_rows(exp.rows))
    print("minutes:", {k: round(v / 60, 1) for k, v in exp.timings.items()})
