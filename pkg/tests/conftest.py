import json
import time
from pathlib import Path

import numpy as np
import pytest

from domain_ensemble.corpus import BOS_ID


class HashModel:
    """Deterministic random next-token model for fuzzing.

    Every (source, history) pair gets its own Dirichlet draw, so the model is
    a valid conditional distribution without any structure to exploit.
    ``zero_bos`` removes the begin marker from the support.
    """

    def __init__(self, vocab_size, seed, concentration=1.0, zero_bos=True):
        self.vocab_size = vocab_size
        self.seed = seed
        self.concentration = concentration
        self.zero_bos = zero_bos

    def step(self, x, h):
        rng = np.random.default_rng([self.seed, len(h), *x, 99, *h])
        p = rng.dirichlet(np.full(self.vocab_size, self.concentration))
        p = np.maximum(p, 1e-6)
        if self.zero_bos:
            p[BOS_ID] = 0.0
        return p / p.sum()

    def step_batch(self, x, histories):
        return np.stack([self.step(x, h) for h in histories])


@pytest.fixture
def hash_model():
    return HashModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _run_cli_experiment(out_dir: Path) -> float:
    from domain_ensemble.cli import main

    start = time.perf_counter()
    code = main(["run-experiment", "--out-dir", str(out_dir)])
    elapsed = time.perf_counter() - start
    assert code == 0, f"run-experiment exited with {code}"
    return elapsed


@pytest.fixture(scope="session")
def experiment_runs(tmp_path_factory):
    """Two full default runs of run-experiment (shared by every end-to-end test)."""
    base = tmp_path_factory.mktemp("experiment")
    first, second = base / "run1", base / "run2"
    t1 = _run_cli_experiment(first)
    t2 = _run_cli_experiment(second)
    summary = json.loads((first / "summary.json").read_text())
    return {"dirs": (first, second), "seconds": (t1, t2), "summary": summary}


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance suite's CRITERION lines, which pytest captures by default."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) == "call":
                lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith("CRITERION")]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(ln)
