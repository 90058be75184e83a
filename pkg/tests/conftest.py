import pytest

from speechsql.semql import default_grammar
from speechsql.synth import builtin_schemas


@pytest.fixture(scope="session")
def grammar():
    return default_grammar()


@pytest.fixture(scope="session")
def schemas():
    return {s.db_id: s for s in builtin_schemas()}


@pytest.fixture(scope="session")
def wimmera(schemas):
    return schemas["wimmera"]


@pytest.fixture(scope="session")
def products(schemas):
    return schemas["products"]


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran in this session."""
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
