import pytest

from wavmtl.data import synth_dataset

# criterion number -> (title, passed, detail), filled in by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def corpus():
    """The default synthetic corpus (seed 7), built once per session."""
    return synth_dataset()


@pytest.fixture(scope="session")
def acceptance():
    def record(number, title, passed, detail):
        ACCEPTANCE[number] = (title, bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{verdict}] {title}: {detail}")
