import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from decsal.config import ExperimentConfig, load_config
from decsal.pipeline import Experiment

ROOT = Path(__file__).resolve().parents[1]
EXAMPLE_CONFIG = ROOT / "configs" / "example.toml"


@dataclass
class DeskRun:
    """The example experiment trained once per session (data through fine-tuning)."""
    cfg: ExperimentConfig
    exp: Experiment
    seconds: dict


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> DeskRun:
    cfg = load_config(EXAMPLE_CONFIG)
    exp = Experiment(cfg, tmp_path_factory.mktemp("desk"))
    seconds = {}
    for stage in ("data", "vocab", "pretrain", "finetune"):
        start = time.perf_counter()
        exp.run_stage(stage)
        seconds[stage] = time.perf_counter() - start
    return DeskRun(cfg, exp, seconds)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line straight to the terminal, then assert."""
    def report(criterion: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, f"{criterion}: {detail}"
    return report
