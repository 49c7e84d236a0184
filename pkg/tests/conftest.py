import json
import pathlib

import pytest

from loraserve import sgmv

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


@pytest.fixture(params=sgmv.available_backends())
def backend(request):
    prev = sgmv.set_backend(request.param)
    yield request.param
    sgmv.set_backend(prev)


@pytest.fixture
def small_fixture():
    return json.loads((FIXTURES / "sgmv_small.json").read_text())


# one line per acceptance criterion, shown after the run even when output is captured
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
