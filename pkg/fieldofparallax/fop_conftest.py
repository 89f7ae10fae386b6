"""
conftest utilities. Import this file in conftest.py so pytest can find all fixtures.
"""
import logging
from typing import List

# pylint: disable=redefined-outer-name
import numpy as np
import pytest
from _pytest.config.argparsing import Parser
from _pytest.fixtures import SubRequest

from fieldofparallax.fop_utils import derive_rng


def pytest_addoption(parser: Parser) -> None:
    """Add fop parameters to pytest CLI."""
    parser.addoption(
        "--fop-log-level",
        type=int,
        choices=[logging.DEBUG, logging.INFO, logging.WARNING, logging.ERROR],
        default=logging.INFO,
        help="fop logger log level",
    )
    parser.addoption("--fop-seeds", type=int, default=10, help="number of seeds of the multi-seed property tests")


@pytest.fixture(scope="session", autouse=True)
def log_level(request: SubRequest) -> None:
    """Set fop logger level from the fop-log-level option."""
    logging.getLogger("fop").setLevel(request.config.getoption("--fop-log-level"))


@pytest.fixture(scope="session")
def seeds(request: SubRequest) -> List[int]:
    """Yield the seeds of the multi-seed property tests."""
    return list(range(request.config.getoption("--fop-seeds")))


@pytest.fixture
def rng(request: SubRequest) -> np.random.Generator:
    """Yield generator named after the requesting test, the same test always draws the same numbers."""
    return derive_rng(0, request.node.nodeid)
