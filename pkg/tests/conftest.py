from __future__ import annotations

import numpy as np
import pytest

from depvec.corpora import generate_desk_corpora
from depvec.mir import load_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpora")
    generate_desk_corpora(seed=0, out_dir=out)
    return out


@pytest.fixture(scope="session")
def corpora(corpus_dir):
    names = ("pretrain", "classify", "clone", "motivating", "names", "probe_token", "probe_struct")
    return {n: load_corpus(corpus_dir / f"{n}.jsonl") for n in names}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Records one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
