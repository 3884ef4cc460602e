import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from argb.checkpoint import load_checkpoint
from argb.model import ARGBModel

ROOT = Path(__file__).resolve().parents[1]
DESK_DIR = ROOT / "artifacts" / "desk"
DESK_CKPT = DESK_DIR / "argb.ckpt"


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="slow; use --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_model(num_experts=3, embedding_dim=128, seed=0):
    torch.manual_seed(seed)
    return ARGBModel(num_experts, embedding_dim).eval()


@pytest.fixture
def small_model():
    return make_model()


@pytest.fixture(scope="session")
def desk_checkpoint():
    """The desk-trained autoencoder; trained through the CLI if the artifact is absent."""
    if not DESK_CKPT.exists():
        subprocess.run(
            [sys.executable, "-m", "argb.cli", "train-argb", "--config", str(ROOT / "configs" / "desk.json"), "--out", str(DESK_DIR)],
            check=True,
        )
    ckpt = load_checkpoint(DESK_CKPT)
    ckpt.model.freeze()
    return ckpt


@pytest.fixture(scope="session")
def desk_model(desk_checkpoint):
    return desk_checkpoint.model


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in order."""
    lines = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            num = int(nodeid.split("test_criterion_")[1].split("_")[0])
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            status = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
            lines.append((num, f"criterion {num:2d}: {status}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
