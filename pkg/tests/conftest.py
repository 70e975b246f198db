import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from kercnn import autodiff as ad
from kercnn.data import DATA_ROOT_ENV

REPO = Path(__file__).resolve().parents[1]

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, REPO / "data"))


def have_mnist() -> bool:
    root = data_root() / "mnist"
    return any((root / f).exists() for f in ("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"))


@pytest.fixture(autouse=True)
def float64_default():
    # tests assume double precision unless they say otherwise
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


needs_mnist = pytest.mark.skipif(not have_mnist(), reason="MNIST files not under the data root")


# --------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str, expected_failure: bool = False):
        verdict = "PASS" if ok else ("FAIL (expected, see notes)" if expected_failure else "FAIL")
        ACCEPTANCE[number] = f"criterion {number:>2}: {verdict}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
