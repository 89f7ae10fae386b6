"""
Tests for pyfop.
"""
from fieldofparallax import set_logger

set_logger()
