"""
Field of parallax utilities.
"""
import hashlib
import zlib
from typing import Iterable, List

import numpy as np


def is_true(str_value: str) -> bool:
    """Return True if string represents True value else return False.

    :param str_value: String to evaluate.
    """
    return str_value.strip().lower() in ("true", "yes", "on", "1")


def is_false(str_value: str) -> bool:
    """Return True if string represents False value else return False.

    :param str_value: String to evaluate.
    """
    return str_value.strip().lower() in ("false", "no", "off", "0", "none")


def parse_bool_list(str_value: str) -> List[bool]:
    """Parse comma separated booleans, for example "true,false,true,false".

    :param str_value: String to parse.
    """
    values = []
    for item in str_value.split(","):
        if is_true(item):
            values.append(True)
        elif is_false(item):
            values.append(False)
        else:
            raise ValueError(f"{item!r} is not a boolean")
    return values


def parse_float_list(str_value: str) -> List[float]:
    """Parse comma separated reals, for example "-1,0,1.5".

    :param str_value: String to parse.
    """
    return [float(item) for item in str_value.split(",") if item.strip()]


def parse_int_list(str_value: str) -> List[int]:
    """Parse comma separated integers, for example "8,16,32,64".

    :param str_value: String to parse.
    """
    return [int(item) for item in str_value.split(",") if item.strip()]


def derive_rng(seed: int, name: str) -> np.random.Generator:
    """Return the named child generator of the root seed.

    The same (seed, name) pair always yields the same stream and different names yield independent streams.

    :param seed: root seed of the run.
    :param name: stream name, for example "adapter.init".
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


def arrays_digest(arrays: Iterable[np.ndarray]) -> str:
    """Return sha256 hex digest over the raw bytes of the arrays, in order.

    :param arrays: arrays to hash.
    """
    digest = hashlib.sha256()
    for array in arrays:
        digest.update(str(array.shape).encode())
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()
