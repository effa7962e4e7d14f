import sys
import warnings
from functools import lru_cache
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from opfglobal.case_io import load_case  # noqa: E402
from opfglobal.cases import case_path  # noqa: E402
from opfglobal.qcqp import build_qcqp  # noqa: E402
from opfglobal.reform import build_reformulation  # noqa: E402
from opfglobal.sdp import solve_sdp  # noqa: E402

DATA = Path(__file__).parent / "data"


def fixture_path(name: str) -> Path:
    return DATA / name


@lru_cache(maxsize=None)
def pipeline(name: str):
    """(case, model, sdp result, reformulation) for a bundled or test case."""
    path = DATA / f"{name}.m"
    if not path.exists():
        path = case_path(name)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        case = load_case(path)
    model = build_qcqp(case)
    sdp = solve_sdp(model)
    return case, model, sdp, build_reformulation(model, sdp)


@pytest.fixture
def two_bus_case():
    return load_case(DATA / "two_bus.m")


@pytest.fixture
def two_bus_model(two_bus_case):
    return build_qcqp(two_bus_case)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
