"""
Two-step angular adapter and its ablation variants.

Step one reduces every view's tokens to a channel-wise supremum (projection difference) and a channel-wise uniform mean
(adjacency divergence), and maps the pair to a 16-wide angular query. Step two broadcasts the query to every token as
the angular marker, concatenates it to the tokens and runs a down-projection, GELU, up-projection and scaled residual.

Adapter checkpoint format (little-endian): magic "FOPA", u32 C, u32 mode id, then w_q, b_q, w_d, b_d, w_u, b_u as
float64, repeated K times for hard_per_view.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from fieldofparallax import FopError, RepresentationTag
from fieldofparallax.fop_tensor import (
    ShapeMismatchError,
    Tensor,
    add,
    broadcast_rows,
    concat_last,
    gelu,
    linear,
    reduce_max,
    reduce_mean,
    scale,
)

logger = logging.getLogger("fop.fieldofparallax")

HIDDEN_WIDTH = 16
BLOCK_NAMES = ("w_q", "b_q", "w_d", "b_d", "w_u", "b_u")
CHECKPOINT_MAGIC = b"FOPA"
CHECKPOINT_HEADER = np.dtype([("magic", "S4"), ("channels", "<u4"), ("mode", "<u4")])
CHECKPOINT_VALUE = np.dtype("<f8")


class AdapterError(FopError):
    """Base class for adapter errors."""


class EmptyTokensError(AdapterError):
    """View without tokens."""


class ModeParamMismatchError(AdapterError):
    """Number of parameter sets does not fit the adapter mode."""


class CheckpointError(AdapterError):
    """Adapter checkpoint cannot be read or written."""


class AdapterMode(Enum):
    """Adapter variants, the id is stored in checkpoints."""

    # pylint: disable=invalid-name
    shared = 0
    hard_per_view = 1
    consistency_only = 2
    difference_only = 3


@dataclass
class AdapterParams:
    """Weights of one adapter, matrices stored as (out x in)."""

    w_q: Tensor
    b_q: Tensor
    w_d: Tensor
    b_d: Tensor
    w_u: Tensor
    b_u: Tensor
    gamma: float = 1.0

    def __post_init__(self) -> None:
        channels, hidden = self.channels, self.hidden
        expected = {
            "w_q": (hidden, 2 * channels),
            "b_q": (hidden,),
            "w_d": (hidden, channels + hidden),
            "b_d": (hidden,),
            "w_u": (channels, hidden),
            "b_u": (channels,),
        }
        for name, tensor in self.tensors().items():
            if tensor.shape != expected[name]:
                raise ShapeMismatchError(f"adapter block {name} has shape {tensor.shape}, expected {expected[name]}")
        if not math.isfinite(self.gamma):
            raise AdapterError(f"adapter scale must be finite, got {self.gamma}")

    def tensors(self) -> "OrderedDict[str, Tensor]":
        """Return the six blocks in declaration order."""
        return OrderedDict((name, getattr(self, name)) for name in BLOCK_NAMES)

    @property
    def channels(self) -> int:
        """Token channels C."""
        return self.w_u.shape[0]

    @property
    def hidden(self) -> int:
        """Query and bottleneck width."""
        return self.w_q.shape[0]

    @property
    def num_scalars(self) -> int:
        """Number of trainable scalars."""
        return sum(t.size for t in self.tensors().values())


@dataclass
class TokenSet:
    """K views of B x N x C tokens from one representation."""

    views: List[Tensor]
    tag: RepresentationTag = RepresentationTag.sai

    def __post_init__(self) -> None:
        if not self.views:
            raise EmptyTokensError("token set needs at least one view")
        shape = self.views[0].shape
        for view in self.views:
            if view.ndim != 3 or view.shape != shape:
                raise ShapeMismatchError(f"views must share a B x N x C shape, got {view.shape} and {shape}")

    def __len__(self) -> int:
        return len(self.views)

    @property
    def k(self) -> int:
        """Number of views."""
        return len(self.views)

    @property
    def shape(self) -> Tuple[int, int, int]:
        """(B, N, C) shared by all views."""
        return self.views[0].shape


def init_adapter(
    channels: int,
    rng: np.random.Generator,
    hidden: int = HIDDEN_WIDTH,
    gamma: float = 1.0,
    zero_up: bool = True,
    prefix: str = "",
) -> AdapterParams:
    """Create adapter weights.

    Query and down projections are uniform in +-1/sqrt(fan_in), biases are zero, and with zero_up the up projection is
    zero so the fresh adapter is the identity.

    :param channels: token channels C.
    :param rng: generator to draw from.
    :param hidden: query and bottleneck width.
    :param gamma: residual scale.
    :param zero_up: zero the up projection, else draw it like the others (used by gradient checks).
    :param prefix: prefix of the tensor names.
    """

    def uniform(shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    w_u = np.zeros((channels, hidden)) if zero_up else uniform((channels, hidden), hidden)
    b_u = np.zeros(channels) if zero_up else uniform((channels,), hidden)
    blocks = {
        "w_q": uniform((hidden, 2 * channels), 2 * channels),
        "b_q": np.zeros(hidden),
        "w_d": uniform((hidden, channels + hidden), channels + hidden),
        "b_d": np.zeros(hidden),
        "w_u": w_u,
        "b_u": b_u,
    }
    return AdapterParams(
        **{name: Tensor(value, requires_grad=True, name=prefix + name) for name, value in blocks.items()}, gamma=gamma
    )


def count_params(mode: AdapterMode, k: int, channels: int, hidden: int = HIDDEN_WIDTH) -> int:
    """Return the number of trainable adapter scalars.

    :param mode: adapter mode.
    :param k: number of views.
    :param channels: token channels C.
    :param hidden: query and bottleneck width.
    """
    query = hidden * 2 * channels + hidden
    down = hidden * (channels + hidden) + hidden
    up = channels * hidden + channels
    per_adapter = query + down + up
    return k * per_adapter if mode == AdapterMode.hard_per_view else per_adapter


def projection_difference(x: Tensor) -> Tensor:
    """Channel-wise supremum over the tokens of a B x N x C view."""
    _check_tokens(x)
    return reduce_max(x, axis=1)


def adjacency_divergence(x: Tensor) -> Tensor:
    """Channel-wise uniform mean over the tokens of a B x N x C view."""
    _check_tokens(x)
    return reduce_mean(x, axis=1)


def angular_query(x_f: Tensor, x_e: Tensor, params: AdapterParams) -> Tensor:
    """Map the concatenated view statistics (B x 2C) to the B x 16 angular query."""
    if x_f.ndim != 2 or x_f.shape != x_e.shape or x_f.shape[1] != params.channels:
        raise ShapeMismatchError(f"query inputs {x_f.shape} and {x_e.shape} for C={params.channels}")
    return linear(concat_last(x_f, x_e), params.w_q, params.b_q)


def angular_marker(x_q: Tensor, tokens: int) -> Tensor:
    """Broadcast the angular query to every token position."""
    return broadcast_rows(x_q, tokens)


def apply_adapter(
    tokens: TokenSet, mode: AdapterMode, params: Union[AdapterParams, Sequence[AdapterParams]]
) -> TokenSet:
    """Adapt every view, preserving its B x N x C shape.

    :param tokens: views to adapt.
    :param mode: adapter variant.
    :param params: one parameter set, or K of them for hard_per_view.
    """
    outputs = [_adapt_view(x, mode, p)[0] for x, p in zip(tokens.views, _params_per_view(tokens, mode, params))]
    return TokenSet(outputs, tokens.tag)


def compute_markers(
    tokens: TokenSet, mode: AdapterMode, params: Union[AdapterParams, Sequence[AdapterParams]]
) -> List[Tensor]:
    """Return the B x N x 16 angular marker of every view."""
    return [_marker(x, mode, p) for x, p in zip(tokens.views, _params_per_view(tokens, mode, params))]


def save_adapter(path: Union[str, Path], mode: AdapterMode, params: Sequence[AdapterParams]) -> None:
    """Write adapter checkpoint.

    :param path: destination file.
    :param mode: adapter mode, stored as its id.
    :param params: parameter sets, K of them for hard_per_view.
    """
    if not params or (mode != AdapterMode.hard_per_view and len(params) != 1):
        raise ModeParamMismatchError(f"{mode.name} cannot store {len(params)} parameter sets")
    header = np.zeros((), dtype=CHECKPOINT_HEADER)
    header["magic"] = CHECKPOINT_MAGIC
    header["channels"] = params[0].channels
    header["mode"] = mode.value
    blocks = [t.data.astype(CHECKPOINT_VALUE).tobytes() for p in params for t in p.tensors().values()]
    try:
        Path(path).write_bytes(header.tobytes() + b"".join(blocks))
    except OSError as error:
        raise CheckpointError(f"cannot write {path}: {error}") from error
    logger.info(f"saved {mode.name} adapter checkpoint with {len(params)} parameter sets to {path}")


def load_adapter(
    path: Union[str, Path], gamma: float = 1.0, hidden: int = HIDDEN_WIDTH, prefix: str = ""
) -> Tuple[AdapterMode, List[AdapterParams]]:
    """Read adapter checkpoint.

    Tensor names are prefix + block name, hard_per_view sets add "view<i>." after the prefix.

    :param path: source file.
    :param gamma: residual scale, not stored in checkpoints.
    :param hidden: query and bottleneck width of the stored adapter.
    :param prefix: prefix of the tensor names.
    """
    try:
        buffer = Path(path).read_bytes()
    except OSError as error:
        raise CheckpointError(f"cannot read {path}: {error}") from error
    if len(buffer) < CHECKPOINT_HEADER.itemsize or buffer[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    header = np.frombuffer(buffer, dtype=CHECKPOINT_HEADER, count=1)[0]
    channels = int(header["channels"])
    try:
        mode = AdapterMode(int(header["mode"]))
    except ValueError as error:
        raise CheckpointError(f"unknown adapter mode id {int(header['mode'])}") from error
    per_adapter = count_params(AdapterMode.shared, 1, channels, hidden)
    payload = np.frombuffer(buffer, dtype=CHECKPOINT_VALUE, offset=CHECKPOINT_HEADER.itemsize)
    sets, remainder = divmod(payload.size, per_adapter)
    if channels == 0 or sets == 0 or remainder or (mode != AdapterMode.hard_per_view and sets != 1):
        raise CheckpointError(f"{path} payload of {payload.size} values does not fit {mode.name} with C={channels}")
    shapes = {
        "w_q": (hidden, 2 * channels),
        "b_q": (hidden,),
        "w_d": (hidden, channels + hidden),
        "b_d": (hidden,),
        "w_u": (channels, hidden),
        "b_u": (channels,),
    }
    params, offset = [], 0
    for index in range(sets):
        set_prefix = prefix + (f"view{index}." if mode == AdapterMode.hard_per_view else "")
        blocks = {}
        for name in BLOCK_NAMES:
            size = int(np.prod(shapes[name]))
            values = payload[offset : offset + size].reshape(shapes[name])
            blocks[name] = Tensor(values, requires_grad=True, name=set_prefix + name)
            offset += size
        params.append(AdapterParams(**blocks, gamma=gamma))
    return mode, params


def _check_tokens(x: Tensor) -> None:
    if x.ndim != 3:
        raise ShapeMismatchError(f"tokens must be B x N x C, got {x.shape}")
    if x.shape[1] == 0:
        raise EmptyTokensError(f"view without tokens, shape {x.shape}")


def _params_per_view(
    tokens: TokenSet, mode: AdapterMode, params: Union[AdapterParams, Sequence[AdapterParams]]
) -> List[AdapterParams]:
    param_sets = [params] if isinstance(params, AdapterParams) else list(params)
    if mode == AdapterMode.hard_per_view:
        if len(param_sets) != tokens.k:
            raise ModeParamMismatchError(f"hard_per_view needs {tokens.k} parameter sets, got {len(param_sets)}")
        return param_sets
    if len(param_sets) != 1:
        raise ModeParamMismatchError(f"{mode.name} shares one parameter set, got {len(param_sets)}")
    return param_sets * tokens.k


def _marker(x: Tensor, mode: AdapterMode, params: AdapterParams) -> Tensor:
    if x.shape[2:] != (params.channels,):
        raise ShapeMismatchError(f"tokens {x.shape} for adapter with C={params.channels}")
    x_e = projection_difference(x)
    x_f = adjacency_divergence(x)
    if mode == AdapterMode.consistency_only:
        x_q = angular_query(x_f, x_f, params)
    elif mode == AdapterMode.difference_only:
        x_q = angular_query(x_e, x_e, params)
    else:
        x_q = angular_query(x_f, x_e, params)
    return angular_marker(x_q, x.shape[1])


def _adapt_view(x: Tensor, mode: AdapterMode, params: AdapterParams) -> Tuple[Tensor, Tensor]:
    marker = _marker(x, mode, params)
    down = gelu(linear(concat_last(x, marker), params.w_d, params.b_d))
    up = linear(down, params.w_u, params.b_u)
    return add(x, scale(up, params.gamma)), marker
