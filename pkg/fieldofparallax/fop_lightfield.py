"""
Light field container, LFR file format, sub-aperture extraction and view selection.

LFR format (little-endian): magic "LFR1", five u32 fields A_v, A_u, H, W, C, then A_v*A_u*H*W*C float32 samples in
(v, u, y, x, c) row-major order. The header is 24 bytes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from fieldofparallax import FopError

logger = logging.getLogger("fop.fieldofparallax")

LFR_MAGIC = b"LFR1"
LFR_HEADER = np.dtype([("magic", "S4"), ("dims", "<u4", (5,))])
LFR_SAMPLE = np.dtype("<f4")
MAX_SAMPLES = (np.iinfo(np.int64).max - LFR_HEADER.itemsize) // LFR_SAMPLE.itemsize


class LightFieldError(FopError):
    """Base class for light field errors."""


class BadMagicError(LightFieldError):
    """File does not start with the LFR magic."""


class TruncatedFileError(LightFieldError):
    """File is shorter than its header declares."""


class TrailingDataError(LightFieldError):
    """File is longer than its header declares."""


class DimensionOverflowError(LightFieldError):
    """Zero dimension or sample count that does not fit the format."""


class SampleRangeError(LightFieldError):
    """Sample outside [0, 1] or not finite."""


class IoFailureError(LightFieldError):
    """Light field file could not be written or read."""


class OutOfRangeError(LightFieldError):
    """View coordinate outside the angular grid."""


class KTooLargeError(LightFieldError):
    """More views requested than the angular grid holds."""


class EmptySelectionError(LightFieldError):
    """View selection without views."""


class DuplicateViewsError(LightFieldError):
    """View selection names the same view twice."""


class ViewStrategy(Enum):
    """View selection strategies."""

    # pylint: disable=invalid-name
    corners_plus_center = 1
    sparse_max_divergence = 2
    min_angular_difference = 3
    fixed_five = 4
    explicit = 5


@dataclass(frozen=True)
class ViewCoord:
    """Angular coordinate of a sub-aperture view, u is the column and v is the row."""

    u: int
    v: int

    def __str__(self) -> str:
        return f"{self.u},{self.v}"

    @classmethod
    def parse(cls, text: str) -> ViewCoord:
        """Parse "u,v" text."""
        u, v = (int(part) for part in text.split(","))
        return cls(u, v)


@dataclass(frozen=True)
class LightField:
    """4D light field L(u, v, x, y) with C channels, data layout (v, u, y, x, c), float32 samples in [0, 1].

    The data array is made read-only on construction so a LightField can be shared freely.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 5:
            raise DimensionOverflowError(f"light field data must be 5D (v, u, y, x, c), got shape {data.shape}")
        if min(data.shape) == 0:
            raise DimensionOverflowError(f"light field has a zero dimension {data.shape}")
        if not np.all(np.isfinite(data)):
            raise SampleRangeError("light field holds non finite samples")
        if data.min() < 0.0 or data.max() > 1.0:
            raise SampleRangeError(f"light field samples outside [0, 1]: [{data.min()}, {data.max()}]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LightField):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self) -> int:
        return hash((self.data.shape, self.data.tobytes()))

    def __repr__(self) -> str:
        angular = f"{self.angular_rows}x{self.angular_cols}"
        return f"LightField(angular={angular}, spatial={self.height}x{self.width}x{self.channels})"

    def coords(self) -> List[ViewCoord]:
        """Return all view coordinates in row-major (v, then u) order."""
        return [ViewCoord(u, v) for v in range(self.angular_rows) for u in range(self.angular_cols)]

    def contains(self, coord: ViewCoord) -> bool:
        """Return True if the coordinate is inside the angular grid."""
        return 0 <= coord.u < self.angular_cols and 0 <= coord.v < self.angular_rows

    @property
    def angular_rows(self) -> int:
        """A_v."""
        return self.data.shape[0]

    @property
    def angular_cols(self) -> int:
        """A_u."""
        return self.data.shape[1]

    @property
    def height(self) -> int:
        """H."""
        return self.data.shape[2]

    @property
    def width(self) -> int:
        """W."""
        return self.data.shape[3]

    @property
    def channels(self) -> int:
        """C."""
        return self.data.shape[4]

    @property
    def center(self) -> ViewCoord:
        """Central view, rounded towards the top-left for even grids."""
        return ViewCoord((self.angular_cols - 1) // 2, (self.angular_rows - 1) // 2)

    @property
    def num_views(self) -> int:
        """A_v * A_u."""
        return self.angular_rows * self.angular_cols


@dataclass(frozen=True)
class ViewSelection:
    """Ordered, distinct views picked from a light field."""

    strategy: ViewStrategy
    coords: Tuple[ViewCoord, ...]

    def __post_init__(self) -> None:
        if not self.coords:
            raise EmptySelectionError("view selection must hold at least one view")
        if len(set(self.coords)) != len(self.coords):
            raise DuplicateViewsError(f"view selection holds duplicate views {self}")

    def __str__(self) -> str:
        return " ".join(str(c) for c in self.coords)

    @property
    def k(self) -> int:
        """Number of selected views."""
        return len(self.coords)


def from_uint8(array: np.ndarray) -> LightField:
    """Create light field from 8 bit samples, rescaled by 1/255.

    :param array: (A_v, A_u, H, W, C) uint8 array.
    """
    return LightField(np.asarray(array, dtype=np.uint8).astype(np.float32) / np.float32(255.0))


def encode_lfr(lf: LightField) -> bytes:
    """Return the LFR encoding of the light field."""
    header = np.zeros((), dtype=LFR_HEADER)
    header["magic"] = LFR_MAGIC
    header["dims"] = lf.data.shape
    return header.tobytes() + lf.data.astype(LFR_SAMPLE, copy=False).tobytes()


def decode_lfr(buffer: bytes) -> LightField:
    """Decode LFR bytes into a light field.

    :param buffer: complete file content.
    """
    if len(buffer) < len(LFR_MAGIC) or buffer[: len(LFR_MAGIC)] != LFR_MAGIC:
        raise BadMagicError(f"bad magic {buffer[:len(LFR_MAGIC)]!r}, expected {LFR_MAGIC!r}")
    if len(buffer) < LFR_HEADER.itemsize:
        raise TruncatedFileError(f"header needs {LFR_HEADER.itemsize} bytes, got {len(buffer)}")
    header = np.frombuffer(buffer, dtype=LFR_HEADER, count=1)[0]
    dims = tuple(int(d) for d in header["dims"])
    if 0 in dims:
        raise DimensionOverflowError(f"zero dimension in header {dims}")
    count = 1
    for dim in dims:
        count *= dim
    if count > MAX_SAMPLES:
        raise DimensionOverflowError(f"header declares {count} samples")
    expected = LFR_HEADER.itemsize + count * LFR_SAMPLE.itemsize
    if len(buffer) < expected:
        raise TruncatedFileError(f"payload needs {expected} bytes, got {len(buffer)}")
    if len(buffer) > expected:
        raise TrailingDataError(f"{len(buffer) - expected} bytes after payload")
    samples = np.frombuffer(buffer, dtype=LFR_SAMPLE, count=count, offset=LFR_HEADER.itemsize)
    return LightField(samples.reshape(dims))


def save_lfr(lf: LightField, path: Union[str, Path]) -> None:
    """Write light field to LFR file.

    :param lf: light field to save.
    :param path: destination file.
    """
    try:
        Path(path).write_bytes(encode_lfr(lf))
    except OSError as error:
        raise IoFailureError(f"cannot write {path}: {error}") from error
    logger.debug(f"saved {lf!r} to {path}")


def load_lfr(path: Union[str, Path]) -> LightField:
    """Read light field from LFR file.

    :param path: source file.
    """
    try:
        buffer = Path(path).read_bytes()
    except OSError as error:
        raise IoFailureError(f"cannot read {path}: {error}") from error
    lf = decode_lfr(buffer)
    logger.debug(f"loaded {lf!r} from {path}")
    return lf


def extract_view(lf: LightField, coord: ViewCoord) -> np.ndarray:
    """Return a writable copy of sub-aperture image (v, u) as H x W x C float32.

    :param lf: source light field.
    :param coord: requested view.
    """
    if not lf.contains(coord):
        raise OutOfRangeError(f"view {coord} outside {lf.angular_cols}x{lf.angular_rows} grid")
    return lf.data[coord.v, coord.u].copy()


def gather_views(lf: LightField, selection: ViewSelection) -> np.ndarray:
    """Return the selected views stacked as K x H x W x C float32."""
    return np.stack([extract_view(lf, coord) for coord in selection.coords])


def select_views(
    lf: LightField, strategy: ViewStrategy, k: int, coords: Optional[Sequence[ViewCoord]] = None
) -> ViewSelection:
    """Select sub-aperture views.

    corners_plus_center and fixed_five ignore k (beyond the range check) and return 3 and 5 views on grids large enough
    to hold them. Ties are broken in row-major order everywhere.

    :param lf: source light field.
    :param strategy: selection strategy.
    :param k: requested number of views.
    :param coords: views for the explicit strategy.
    """
    if k < 1:
        raise KTooLargeError(f"k must be at least 1, got {k}")
    if k > lf.num_views:
        raise KTooLargeError(f"k={k} exceeds {lf.num_views} views")
    center = lf.center
    if strategy == ViewStrategy.corners_plus_center:
        picked = [ViewCoord(0, 0), ViewCoord(lf.angular_cols - 1, lf.angular_rows - 1), center]
    elif strategy == ViewStrategy.fixed_five:
        picked = [
            center,
            ViewCoord(center.u, 0),
            ViewCoord(0, center.v),
            ViewCoord(2 * center.u, center.v),
            ViewCoord(center.u, 2 * center.v),
        ]
    elif strategy == ViewStrategy.min_angular_difference:
        ranked = sorted(lf.coords(), key=lambda c: ((c.u - center.u) ** 2 + (c.v - center.v) ** 2, c.v, c.u))
        picked = ranked[:k]
    elif strategy == ViewStrategy.sparse_max_divergence:
        picked = _farthest_points(lf, center, k)
    else:
        if coords is None:
            raise OutOfRangeError("explicit strategy requires coordinates")
        picked = list(coords)
        if len(picked) != k:
            raise KTooLargeError(f"explicit strategy got {len(picked)} coordinates for k={k}")
        if len(set(picked)) != len(picked):
            raise DuplicateViewsError(f"explicit coordinates are not distinct: {picked}")
    for coord in picked:
        if not lf.contains(coord):
            raise OutOfRangeError(f"view {coord} outside {lf.angular_cols}x{lf.angular_rows} grid")
    selection = ViewSelection(strategy, tuple(_unique(picked)))
    logger.debug(f"{strategy.name} selected {selection}")
    return selection


def _unique(coords: Iterable[ViewCoord]) -> List[ViewCoord]:
    seen = set()
    unique = []
    for coord in coords:
        if coord not in seen:
            seen.add(coord)
            unique.append(coord)
    return unique


def _farthest_points(lf: LightField, start: ViewCoord, k: int) -> List[ViewCoord]:
    """Greedy farthest-point sampling in (u, v), exact integer distances, row-major ties."""
    candidates = lf.coords()
    u = np.array([c.u for c in candidates], dtype=np.int64)
    v = np.array([c.v for c in candidates], dtype=np.int64)
    chosen = [candidates.index(start)]
    taken = np.zeros(len(candidates), dtype=bool)
    taken[chosen[0]] = True
    nearest = (u - start.u) ** 2 + (v - start.v) ** 2
    while len(chosen) < k:
        # argmax returns the first maximum, candidates are row-major
        index = int(np.argmax(np.where(taken, -1, nearest)))
        chosen.append(index)
        taken[index] = True
        nearest = np.minimum(nearest, (u - u[index]) ** 2 + (v - v[index]) ** 2)
    return [candidates[i] for i in chosen]
