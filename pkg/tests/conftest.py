import os
from contextlib import contextmanager

import pytest
import torch

from mttgan.demo import write_covid_corpus, write_kaggle_corpus

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def demo_corpus(tmp_path_factory):
    """Procedural corpora large enough for the desk profile (200 reals per class after capping)."""
    root = tmp_path_factory.mktemp("demo")
    kaggle = write_kaggle_corpus(root / "chest_xray", per_class=210, size=(72, 64), seed=0)
    covid, meta = write_covid_corpus(root / "covid", n_covid=220, size=(72, 64), seed=0)
    return {"kaggle_root": kaggle, "covid_root": covid, "covid_metadata": meta}


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    kaggle = write_kaggle_corpus(root / "chest_xray", per_class=12, size=(20, 18), seed=1)
    covid, meta = write_covid_corpus(root / "covid", n_covid=12, n_lateral=3, n_other=2, size=(20, 18), seed=1)
    return {"kaggle_root": kaggle, "covid_root": covid, "covid_metadata": meta}


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    @contextmanager
    def record(name: str):
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            line = f"FAIL  {name}: {'; '.join(notes + [str(exc).splitlines()[0] if str(exc) else type(exc).__name__])}"
            ACCEPTANCE_LINES.append(line)
            print(line)
            raise
        line = f"PASS  {name}" + (f": {'; '.join(notes)}" if notes else "")
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
