"""Shared pytest configuration."""

import pytest

from crossdiff.tensor import set_default_dtype


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Run slow acceptance experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64_default():
    """Every test starts in double precision; the CLI may switch it."""
    set_default_dtype("float64")
    yield
    set_default_dtype("float64")
