"""
Standard pytest fixtures and hooks definition file.
"""
# pylint: disable=unused-import
from fieldofparallax.fop_conftest import log_level, pytest_addoption, rng, seeds
