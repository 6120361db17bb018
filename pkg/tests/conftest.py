import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memarena.tasks import load_suite  # noqa: E402


@pytest.fixture(scope="session")
def suite():
    return load_suite()


@pytest.fixture(scope="session")
def by_id(suite):
    return {t.task_id: t for t in suite}


ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
