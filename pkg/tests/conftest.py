"""Installs the solver recorders before any test module imports the package."""

import numpy as np
import pytest

import recorders


def pytest_collection_modifyitems(items):
    # the acceptance module reads tallies gathered by all other tests
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    if recorders.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(recorders.acceptance_lines):
            terminalreporter.write_line(recorders.acceptance_lines[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
