import re

import pytest

from gridplan.agents import builtin_agents
from gridplan.data import generate_records
from gridplan.env import EnvConfig, EnvKind


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False,
        help="run slow opt-in tests (multi-hour training runs)",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow suite is opt-in; pass --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# ---------------------------------------------------------------------------
# Acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

_CRITERION_RE = re.compile(r"test_criterion_(\d+)_(\w+)")
_criterion_outcomes: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION_RE.search(report.nodeid)
    if not m:
        return
    num, label = int(m.group(1)), m.group(2)
    if report.when == "call":
        outcome = "PASS" if report.passed else "FAIL"
        _criterion_outcomes[num] = (label, outcome)
    elif report.when == "setup" and report.skipped:
        _criterion_outcomes[num] = (label, "SKIP (opt-in, pass --runslow)")
    elif report.when == "setup" and report.failed:
        _criterion_outcomes[num] = (label, "FAIL (setup)")


def pytest_terminal_summary(terminalreporter):
    if not _criterion_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criterion_outcomes):
        label, outcome = _criterion_outcomes[num]
        terminalreporter.write_line(f"criterion {num:2d} {label}: {outcome}")


# ---------------------------------------------------------------------------
# Shared fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def gotoobj_cfg():
    return EnvConfig.make(EnvKind.GOTO_OBJ)


@pytest.fixture(scope="session")
def agents():
    return builtin_agents()


@pytest.fixture(scope="session")
def small_records(gotoobj_cfg, agents):
    """30 expert records for the standard agent, reused across tests."""
    return generate_records(gotoobj_cfg, agents[0], 30, seed=0)


@pytest.fixture(scope="session")
def small_records_agent3(gotoobj_cfg, agents):
    return generate_records(gotoobj_cfg, agents[3], 30, seed=0)
