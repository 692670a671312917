"""
End-to-end desk experiment: three seeds, full preset budgets at f32.

Takes a long time on a laptop; enable with CONDA_DESK_SLOW=1.
"""

import os
from dataclasses import replace

import numpy as np
import pytest

from modules import cli
from modules.metrics import scores
from modules.network import Backbone
from modules.selftrain import evaluate_set
from utils.config import apply_overrides, preset

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.getenv("CONDA_DESK_SLOW") != "1", reason="set CONDA_DESK_SLOW=1"),
]

SEEDS = (0, 1, 2)


def target_miou(cfg, params, target):
    return 100.0 * scores(evaluate_set(Backbone(cfg.model, params), target, cfg.sensor))["miou"]


@pytest.fixture(scope="module")
def results():
    out = []
    for seed in SEEDS:
        cfg = apply_overrides(preset("desk"), seed=seed, precision="f32")
        source, target = cli.load_domains(cfg)
        w_pre = cli._pretrained(cfg, source)
        separate = replace(cfg, pseudo=replace(cfg.pseudo, sigma=0.0, mixing="separate")).validate()
        row = {
            "seed": seed,
            "source_only": target_miou(cfg, w_pre, target),
            "conda": target_miou(cfg, cli._selftrain(cfg, w_pre, source, target, None).params, target),
            "separate": target_miou(separate, cli._selftrain(separate, w_pre, source, target, None).params, target),
        }
        out.append(row)
    return out


def test_conda_beats_source_only_on_every_seed(results):
    for row in results:
        assert row["conda"] >= row["source_only"] + 3.0, row


def test_concatenation_beats_separate_batches_on_average(results):
    conda = np.mean([r["conda"] for r in results])
    separate = np.mean([r["separate"] for r in results])
    assert conda >= separate + 1.0, results
