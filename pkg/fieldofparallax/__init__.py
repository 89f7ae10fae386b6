"""
fieldofparallax package.
"""
import logging
import sys
from enum import Enum


class RepresentationTag(Enum):
    """List light-field representations that can enter the encoder."""

    # pylint: disable=invalid-name
    sai = 1
    focal_stack = 2


class FopError(Exception):
    """Base exception for field of parallax exceptions."""


def set_logger() -> None:
    """Create and set fop logger.

    Log level is set by the fop-log-level pytest option or the --log-level cli option.
    """
    logger = logging.getLogger("fop")
    formatter = logging.Formatter(
        "%(asctime)s [%(levelname)8s] {%(filename)s:%(lineno)d} %(message)s", datefmt="%Y-%B-%d:%H:%M:%S"
    )
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(formatter)
    logger.addHandler(handler)
