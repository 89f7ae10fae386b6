"""
Depth variance representation - focal slices and focal stacks synthesized by shift-and-sum refocusing.

Sign convention: view (u, v) is translated by (slope * (u - u_c), slope * (v - v_c)) pixels along (x, y) before
averaging, where (u_c, v_c) is the continuous center of the angular grid. A scene point whose views are displaced by
delta * (u - u_c, v - v_c) is brought into focus at slope = -delta.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from fieldofparallax import FopError
from fieldofparallax.fop_lightfield import IoFailureError, LightField, load_lfr, save_lfr

logger = logging.getLogger("fop.fieldofparallax")

MAX_SLICES = 12
STACK_MANIFEST = "slopes.txt"


class RefocusError(FopError):
    """Base class for refocus errors."""


class SlopeTooLargeError(RefocusError):
    """Shift of the outermost view would exceed the image."""


class UnsortedSlopesError(RefocusError):
    """Slopes are not strictly increasing."""


class EmptySlopesError(RefocusError):
    """No slopes requested."""


class TooManySlopesError(RefocusError):
    """More slopes requested than a focal stack holds."""


class NonPositiveInputError(RefocusError):
    """Depth or calibration parameter is not positive."""


class ImageTooSmallError(RefocusError):
    """Image has no interior pixels for the Laplacian."""


@dataclass(frozen=True)
class FocalSlice:
    """Image refocused at a disparity slope."""

    slope: float
    image: np.ndarray


@dataclass(frozen=True)
class FocalStack:
    """Focal slices ordered by strictly increasing slope."""

    slices: Tuple[FocalSlice, ...]
    source_dims: Tuple[int, int, int]

    def __post_init__(self) -> None:
        _check_slopes([s.slope for s in self.slices])
        for focal_slice in self.slices:
            if focal_slice.image.shape != self.source_dims:
                raise RefocusError(f"slice shape {focal_slice.image.shape} differs from {self.source_dims}")

    def __len__(self) -> int:
        return len(self.slices)

    def images(self) -> np.ndarray:
        """Return the slices stacked as S x H x W x C float32."""
        return np.stack([s.image for s in self.slices])

    @property
    def slopes(self) -> List[float]:
        """Slice slopes in stack order."""
        return [s.slope for s in self.slices]


def max_angular_offset(lf: LightField) -> float:
    """Largest per-axis distance between a view and the continuous grid center."""
    return max((lf.angular_cols - 1) / 2, (lf.angular_rows - 1) / 2)


def synthesize_slice(lf: LightField, slope: float) -> FocalSlice:
    """Refocus the light field at the requested slope.

    Every view is translated with bilinear interpolation and zero padding, the translated views are summed and each
    pixel is normalized by the summed interpolation weight of the views that reach it.

    :param lf: source light field.
    :param slope: disparity pixels per unit angular offset.
    """
    offset = max_angular_offset(lf)
    if abs(slope) * offset >= min(lf.height, lf.width):
        raise SlopeTooLargeError(f"slope {slope} shifts views by {abs(slope) * offset} px on {lf.height}x{lf.width}")
    if slope == 0:
        image = np.mean(lf.data, axis=(0, 1), dtype=np.float64)
        return FocalSlice(float(slope), image.astype(np.float32))

    u_c = (lf.angular_cols - 1) / 2
    v_c = (lf.angular_rows - 1) / 2
    total = np.zeros((lf.height, lf.width, lf.channels), dtype=np.float64)
    weight = np.zeros((lf.height, lf.width, 1), dtype=np.float64)
    ones = np.ones((lf.height, lf.width, 1), dtype=np.float64)
    for v in range(lf.angular_rows):
        for u in range(lf.angular_cols):
            shift = (slope * (v - v_c), slope * (u - u_c), 0.0)
            view = lf.data[v, u].astype(np.float64)
            total += ndimage.shift(view, shift, order=1, mode="grid-constant", cval=0.0)
            weight += ndimage.shift(ones, shift, order=1, mode="grid-constant", cval=0.0)
    uncovered = int(np.count_nonzero(weight <= 0))
    if uncovered:
        logger.warning(f"{uncovered} pixels receive no view at slope {slope}, set to 0")
    image = np.divide(total, weight, out=np.zeros_like(total), where=weight > 0)
    return FocalSlice(float(slope), np.clip(image, 0.0, 1.0).astype(np.float32))


def build_stack(lf: LightField, slopes: Sequence[float]) -> FocalStack:
    """Build focal stack with one slice per slope.

    :param lf: source light field.
    :param slopes: strictly increasing slopes, 1 to 12 of them.
    """
    _check_slopes(slopes)
    logger.debug(f"building focal stack at slopes {list(slopes)}")
    return FocalStack(tuple(synthesize_slice(lf, s) for s in slopes), (lf.height, lf.width, lf.channels))


def slope_from_depth(depth: float, calibration: float) -> float:
    """Return z/d, the angular offset magnitude at which depth d is in focus.

    :param depth: scene depth d.
    :param calibration: calibration parameter z.
    """
    if depth <= 0 or calibration <= 0:
        raise NonPositiveInputError(f"depth and calibration must be positive, got d={depth}, z={calibration}")
    return calibration / depth


def sharpness(image: np.ndarray) -> float:
    """Return the variance of the discrete Laplacian over interior pixels, averaged over channels.

    :param image: H x W x C (or H x W) image.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., np.newaxis]
    if image.shape[0] < 3 or image.shape[1] < 3:
        raise ImageTooSmallError(f"image {image.shape[:2]} has no interior pixels")
    variances = [np.var(ndimage.laplace(image[..., c])[1:-1, 1:-1]) for c in range(image.shape[2])]
    return float(np.mean(variances))


def scan_focus(lf: LightField, slopes: Sequence[float], margin: int = 0) -> Tuple[float, List[float]]:
    """Return the sharpest slope and the sharpness of every scanned slope.

    :param lf: source light field.
    :param slopes: slopes to scan.
    :param margin: pixels cropped from each border before measuring sharpness.
    """
    scores = []
    for slope in slopes:
        image = synthesize_slice(lf, slope).image
        if margin:
            image = image[margin:-margin, margin:-margin]
        scores.append(sharpness(image))
    best = float(slopes[int(np.argmax(scores))])
    logger.debug(f"sharpest slope {best} out of {len(slopes)}")
    return best, scores


def save_stack(stack: FocalStack, directory: Union[str, Path]) -> List[Path]:
    """Export focal stack as single-view LFR files plus a slopes manifest.

    :param stack: focal stack to export.
    :param directory: output directory, created if missing.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as error:
        raise IoFailureError(f"cannot create {directory}: {error}") from error
    paths = []
    for index, focal_slice in enumerate(stack.slices):
        path = directory.joinpath(f"slice_{index:03d}.lfr")
        save_lfr(LightField(focal_slice.image[np.newaxis, np.newaxis]), path)
        paths.append(path)
    manifest = directory.joinpath(STACK_MANIFEST)
    try:
        manifest.write_text("".join(f"{slope!r}\n" for slope in stack.slopes))
    except OSError as error:
        raise IoFailureError(f"cannot write {manifest}: {error}") from error
    logger.info(f"saved {len(stack)} focal slices to {directory}")
    return paths + [manifest]


def load_stack(directory: Union[str, Path]) -> FocalStack:
    """Load focal stack exported by save_stack.

    :param directory: directory holding the slices and the slopes manifest.
    """
    directory = Path(directory)
    try:
        slopes = [float(line) for line in directory.joinpath(STACK_MANIFEST).read_text().splitlines() if line.strip()]
    except OSError as error:
        raise IoFailureError(f"cannot read {directory.joinpath(STACK_MANIFEST)}: {error}") from error
    slices = []
    for index, slope in enumerate(slopes):
        lf = load_lfr(directory.joinpath(f"slice_{index:03d}.lfr"))
        slices.append(FocalSlice(slope, np.array(lf.data[0, 0])))
    return FocalStack(tuple(slices), slices[0].image.shape if slices else (0, 0, 0))


def _check_slopes(slopes: Sequence[float]) -> None:
    if len(slopes) == 0:
        raise EmptySlopesError("at least one slope is required")
    if len(slopes) > MAX_SLICES:
        raise TooManySlopesError(f"{len(slopes)} slopes requested, focal stacks hold at most {MAX_SLICES}")
    if any(b <= a for a, b in zip(slopes, slopes[1:])):
        raise UnsortedSlopesError(f"slopes must be strictly increasing: {list(slopes)}")
