"""Shared pytest wiring.

The acceptance tests in test_acceptance.py each map to one gate criterion;
after the run we print a one-line verdict per criterion so the tee'd log is
auditable without scrolling through the full -v listing.
"""

import os

import pytest

_ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}
_ACCEPTANCE_LABELS: dict[str, str] = {}


def pytest_collection_modifyitems(config, items):
    run_hw = os.environ.get("FSYNC_HARDWARE_TESTS") == "1"
    skip_hw = pytest.mark.skip(reason="hardware fsync tests disabled; set FSYNC_HARDWARE_TESTS=1")
    for item in items:
        if "hardware" in item.keywords and not run_hw:
            item.add_marker(skip_hw)
        if item.module.__name__ == "test_acceptance":
            doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
            _ACCEPTANCE_LABELS[item.nodeid] = doc


def pytest_runtest_logreport(report):
    if report.nodeid in _ACCEPTANCE_LABELS and report.when == "call":
        _ACCEPTANCE_RESULTS[report.nodeid] = (report.outcome, _ACCEPTANCE_LABELS[report.nodeid])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE_RESULTS):
        outcome, label = _ACCEPTANCE_RESULTS[nodeid]
        tag = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        tr.write_line(f"[{tag}] {label}")
