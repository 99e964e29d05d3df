import sys
from pathlib import Path

import pytest

from scfi.asm import assemble
from scfi.pipeline import bundled_programs

HERE = Path(__file__).parent
DATA = HERE / "data"
sys.path.insert(0, str(HERE))

PROGRAMS = {p.stem: p for p in bundled_programs()}


def program_text(name: str) -> str:
    return PROGRAMS[name].read_text()


def program(name: str):
    return assemble(program_text(name))


@pytest.fixture
def data_dir() -> Path:
    return DATA


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
