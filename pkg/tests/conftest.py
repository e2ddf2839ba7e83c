import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from probesql.bench import build_all  # noqa: E402

_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def bench(tmp_path_factory) -> dict[str, Path]:
    """Smoke benchmark and case-study fixture, built once per session."""
    out = tmp_path_factory.mktemp("bench")
    paths = build_all(out)
    paths["root"] = out
    return paths


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if _ACCEPTANCE.get(name) != "FAIL":
            _ACCEPTANCE[name] = status


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for test_name, title in CRITERIA.items():
        status = _ACCEPTANCE.get(test_name, "NOT RUN")
        terminalreporter.write_line(f"[{status}] {title}")
