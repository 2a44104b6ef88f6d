"""Shared fixtures and the acceptance summary hook.

Tests marked ``acceptance("...")`` roll up into one PASS/FAIL line per
criterion name in the terminal summary, so the release gate is readable
at a glance even when the suite is long.
"""

from __future__ import annotations

import numpy as np
import pytest

_ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(name): release gate criterion, reported in the summary"
    )


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    marker_name = getattr(report, "_acceptance_name", None)
    if marker_name is not None:
        _ACCEPTANCE_RESULTS.append((marker_name, report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None and marker.args:
        report._acceptance_name = marker.args[0]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    # Several tests may share one criterion name; the criterion passes
    # only if every one of them passed.
    order: list[str] = []
    passed: dict[str, bool] = {}
    for name, outcome in _ACCEPTANCE_RESULTS:
        if name not in passed:
            order.append(name)
            passed[name] = True
        passed[name] = passed[name] and outcome == "passed"
    terminalreporter.section("acceptance criteria")
    for name in order:
        word = "PASS" if passed[name] else "FAIL"
        terminalreporter.write_line(f"{word} {name}")


@pytest.fixture
def rng():
    """Fresh numpy generator, independent of the package's own streams."""
    return np.random.default_rng(20240816)
