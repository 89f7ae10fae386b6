"""
Multi-view encoder with frozen backbone stand-in, per-stage angular adapters, point-wise view fusion and toy heads.

Every view runs through the same four stages. Stage s mixes its tokens with a frozen linear + GELU block, optionally
adapts them, and (stages 1-3) merges 2x2 token cells into the next stage. The K per-view stage features are summed
point-wise, upsampled to the stage 1 grid and concatenated for the head.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from fieldofparallax import FopError, RepresentationTag
from fieldofparallax.fop_adapter import AdapterMode, AdapterParams, TokenSet, apply_adapter, init_adapter
from fieldofparallax.fop_lightfield import LightField, ViewSelection, gather_views
from fieldofparallax.fop_refocus import FocalStack
from fieldofparallax.fop_tensor import (
    ShapeMismatchError,
    Tensor,
    bce_with_logits,
    concat_last,
    cross_entropy,
    gather_tokens,
    gelu,
    linear,
    sum_tensors,
)
from fieldofparallax.fop_utils import arrays_digest, derive_rng

logger = logging.getLogger("fop.fieldofparallax")

NUM_STAGES = 4


class EncoderError(FopError):
    """Base class for encoder errors."""


class IndivisibleDimsError(EncoderError):
    """Image does not split into whole patches or token cells."""


class EncoderConfigError(EncoderError):
    """Inconsistent encoder configuration."""


class RepresentationMismatchError(EncoderError):
    """Input representation has no adapters in the encoder parameters."""


class HeadKind(Enum):
    """Toy head kinds."""

    # pylint: disable=invalid-name
    segmentation = 1
    saliency = 2


@dataclass
class EncoderConfig:
    """Encoder hyper parameters."""

    patch_size: int = 4
    stage_channels: Tuple[int, ...] = (8, 16, 32, 64)
    adapter_placement: Tuple[bool, ...] = (False, True, True, True)
    k: int = 3
    representation_tag: RepresentationTag = RepresentationTag.sai
    num_classes: int = 5
    seed: int = 0
    adapter_mode: AdapterMode = AdapterMode.shared
    head_kind: HeadKind = HeadKind.segmentation
    in_channels: int = 3
    gamma: float = 1.0
    hidden_width: int = 16

    def __post_init__(self) -> None:
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.adapter_placement = tuple(bool(p) for p in self.adapter_placement)
        if len(self.stage_channels) != NUM_STAGES or len(self.adapter_placement) != NUM_STAGES:
            raise EncoderConfigError(f"{NUM_STAGES} stage channels and placements required")
        if min(self.stage_channels) < 1 or any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise EncoderConfigError(f"stage channels must be positive and nondecreasing: {self.stage_channels}")
        if self.k < 1 or self.patch_size < 1 or self.num_classes < 1 or self.in_channels < 1 or self.hidden_width < 1:
            raise EncoderConfigError(f"counts must be positive: {self}")

    def check_image(self, height: int, width: int) -> Tuple[int, int]:
        """Return the stage 1 token grid of an image, or raise if it does not split into whole cells."""
        if height % self.patch_size or width % self.patch_size:
            raise IndivisibleDimsError(f"patch size {self.patch_size} does not divide {height}x{width}")
        grid = (height // self.patch_size, width // self.patch_size)
        cell = 2 ** (NUM_STAGES - 1)
        if grid[0] % cell or grid[1] % cell:
            raise IndivisibleDimsError(f"token grid {grid} does not merge {NUM_STAGES - 1} times")
        return grid

    @property
    def head_outputs(self) -> int:
        """Logits per token."""
        return self.num_classes if self.head_kind == HeadKind.segmentation else 1

    @property
    def uses_adapter(self) -> bool:
        """True if any stage applies an adapter."""
        return any(self.adapter_placement)


@dataclass
class BackboneParams:
    """Frozen backbone stand-in weights."""

    embed_w: Tensor
    embed_b: Tensor
    block_w: List[Tensor]
    block_b: List[Tensor]
    merge_w: List[Tensor]
    merge_b: List[Tensor]

    def tensors(self) -> "OrderedDict[str, Tensor]":
        """Return all backbone tensors by name."""
        named = OrderedDict([("embed_w", self.embed_w), ("embed_b", self.embed_b)])
        for stage, (weight, bias) in enumerate(zip(self.block_w, self.block_b), start=1):
            named[f"stage{stage}.block_w"] = weight
            named[f"stage{stage}.block_b"] = bias
        for stage, (weight, bias) in enumerate(zip(self.merge_w, self.merge_b), start=1):
            named[f"stage{stage}.merge_w"] = weight
            named[f"stage{stage}.merge_b"] = bias
        return named

    def digest(self) -> str:
        """Return the hash of the backbone bytes."""
        return arrays_digest(t.data for t in self.tensors().values())


@dataclass
class ToyHead:
    """Linear map from the concatenated multi-scale features to per-token logits."""

    kind: HeadKind
    weight: Tensor
    bias: Tensor

    def tensors(self) -> "OrderedDict[str, Tensor]":
        """Return head tensors by name."""
        return OrderedDict([("head.weight", self.weight), ("head.bias", self.bias)])


@dataclass
class EncoderParams:
    """Backbone, per representation and stage adapters, and head."""

    backbone: BackboneParams
    adapters: Dict[RepresentationTag, List[List[AdapterParams]]]
    head: ToyHead

    def stage_adapters(self, tag: RepresentationTag, stage: int) -> List[AdapterParams]:
        """Return the adapter parameter sets of a stage, one or K of them."""
        if tag not in self.adapters:
            raise RepresentationMismatchError(f"no adapters for representation {tag.name}")
        return self.adapters[tag][stage]

    def adapter_tensors(self, tag: RepresentationTag) -> List[Tensor]:
        """Return all adapter tensors of a representation."""
        return [t for stage in self.adapters[tag] for p in stage for t in p.tensors().values()]

    def trainable(self, tag: RepresentationTag) -> List[Tensor]:
        """Return the tensors updated by training, adapters of the representation then head."""
        return self.adapter_tensors(tag) + list(self.head.tensors().values())


@dataclass
class EncoderInput:
    """K x B x H x W x C images of one representation."""

    images: np.ndarray
    tag: RepresentationTag = RepresentationTag.sai

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 5:
            raise ShapeMismatchError(f"encoder input must be K x B x H x W x C, got {self.images.shape}")

    @classmethod
    def from_views(cls, lf: LightField, selection: ViewSelection) -> "EncoderInput":
        """Sub-aperture views of a single scene."""
        return cls(gather_views(lf, selection)[:, np.newaxis], RepresentationTag.sai)

    @classmethod
    def from_stack(cls, stack: FocalStack) -> "EncoderInput":
        """Focal slices of a single scene."""
        return cls(stack.images()[:, np.newaxis], RepresentationTag.focal_stack)

    @classmethod
    def batch(cls, inputs: Sequence["EncoderInput"]) -> "EncoderInput":
        """Stack scenes along the batch axis."""
        tags = {i.tag for i in inputs}
        shapes = {(i.k,) + i.images.shape[2:] for i in inputs}
        if len(tags) != 1 or len(shapes) != 1:
            raise ShapeMismatchError(f"cannot batch inputs with tags {tags} and shapes {shapes}")
        return cls(np.concatenate([i.images for i in inputs], axis=1), inputs[0].tag)

    @property
    def k(self) -> int:
        """Number of views or slices."""
        return self.images.shape[0]

    @property
    def batch_size(self) -> int:
        """Number of scenes."""
        return self.images.shape[1]


@dataclass
class StageOutput:
    """Per-view and fused features of one stage."""

    index: int
    grid: Tuple[int, int]
    views: List[Tensor]
    fused: Tensor


@dataclass
class ForwardResult:
    """Encoder outputs."""

    stages: List[StageOutput] = field(default_factory=list)
    features: Optional[Tensor] = None
    logits: Optional[Tensor] = None


def init_encoder(config: EncoderConfig, zero_up: bool = True) -> EncoderParams:
    """Create encoder weights from the configuration seed.

    Backbone weights are frozen (no gradients). Every stage gets adapters for both representations, whether the stage
    applies them or not.

    :param config: encoder configuration.
    :param zero_up: start every adapter as the identity.
    """
    rng = derive_rng(config.seed, "encoder.backbone")
    channels = config.stage_channels

    def frozen(shape: Tuple[int, ...], fan_in: int, name: str) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), name=name)

    patch_dim = config.patch_size**2 * config.in_channels
    backbone = BackboneParams(
        embed_w=frozen((channels[0], patch_dim), patch_dim, "embed_w"),
        embed_b=Tensor(np.zeros(channels[0]), name="embed_b"),
        block_w=[frozen((c, c), c, f"stage{s + 1}.block_w") for s, c in enumerate(channels)],
        block_b=[Tensor(np.zeros(c), name=f"stage{s + 1}.block_b") for s, c in enumerate(channels)],
        merge_w=[
            frozen((channels[s + 1], 4 * channels[s]), 4 * channels[s], f"stage{s + 1}.merge_w") for s in range(3)
        ],
        merge_b=[Tensor(np.zeros(channels[s + 1]), name=f"stage{s + 1}.merge_b") for s in range(3)],
    )

    adapters: Dict[RepresentationTag, List[List[AdapterParams]]] = {}
    sets = config.k if config.adapter_mode == AdapterMode.hard_per_view else 1
    for tag in RepresentationTag:
        adapter_rng = derive_rng(config.seed, f"encoder.adapter.{tag.name}")
        adapters[tag] = [
            [
                init_adapter(
                    c, adapter_rng, config.hidden_width, config.gamma, zero_up, f"{tag.name}.stage{s + 1}.view{i}."
                )
                for i in range(sets)
            ]
            for s, c in enumerate(channels)
        ]

    head_rng = derive_rng(config.seed, "encoder.head")
    features = sum(channels)
    bound = 1.0 / math.sqrt(features)
    head = ToyHead(
        config.head_kind,
        Tensor(head_rng.uniform(-bound, bound, size=(config.head_outputs, features)), True, "head.weight"),
        Tensor(np.zeros(config.head_outputs), True, "head.bias"),
    )
    return EncoderParams(backbone, adapters, head)


def merge_index(grid: Tuple[int, int]) -> np.ndarray:
    """Return the (N/4) x 4 token index of the 2x2 cells of a grid.

    Cells are row-major, each row lists (top-left, top-right, bottom-left, bottom-right).
    """
    rows, cols = grid
    r, c = np.meshgrid(np.arange(0, rows, 2), np.arange(0, cols, 2), indexing="ij")
    top_left = (r * cols + c).reshape(-1)
    return np.stack([top_left, top_left + 1, top_left + cols, top_left + cols + 1], axis=1)


def upsample_index(grid: Tuple[int, int], factor: int) -> np.ndarray:
    """Return the N x 1 index of the coarse token covering every fine token of grid, nearest neighbour."""
    rows, cols = grid
    r, c = np.meshgrid(np.arange(rows) // factor, np.arange(cols) // factor, indexing="ij")
    return (r * (cols // factor) + c).reshape(-1, 1)


def patch_embed(images: np.ndarray, patch_size: int, weight: Tensor, bias: Tensor) -> Tensor:
    """Embed non-overlapping patches as tokens.

    Patches are flattened in (row, column, channel) order and mapped linearly, tokens are row-major over the patch grid.

    :param images: H x W x C image or B x H x W x C batch.
    :param patch_size: patch side in pixels.
    :param weight: C_out x (patch_size^2 * C) weights.
    :param bias: C_out bias.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[np.newaxis]
    batch, height, width, channels = images.shape
    if height % patch_size or width % patch_size:
        raise IndivisibleDimsError(f"patch size {patch_size} does not divide {height}x{width}")
    rows, cols = height // patch_size, width // patch_size
    patches = images.reshape(batch, rows, patch_size, cols, patch_size, channels).transpose(0, 1, 3, 2, 4, 5)
    return linear(Tensor(patches.reshape(batch, rows * cols, patch_size * patch_size * channels)), weight, bias)


def stage_forward(
    tokens: List[Tensor],
    stage: int,
    grid: Tuple[int, int],
    config: EncoderConfig,
    backbone: BackboneParams,
    adapters: Sequence[AdapterParams],
    tag: RepresentationTag = RepresentationTag.sai,
) -> Tuple[StageOutput, Optional[List[Tensor]]]:
    """Run one stage over all views.

    :param tokens: K views of B x N x C_s tokens.
    :param stage: zero based stage index.
    :param grid: token grid of the stage.
    :param config: encoder configuration.
    :param backbone: frozen weights, shared by all views.
    :param adapters: stage adapter parameter sets.
    :param tag: representation of the views.
    :returns: stage features and the merged tokens of the next stage (None after the last stage).
    """
    channels = config.stage_channels[stage]
    for view in tokens:
        if view.ndim != 3 or view.shape[1:] != (grid[0] * grid[1], channels):
            expected = (grid[0] * grid[1], channels)
            raise ShapeMismatchError(f"stage {stage + 1} expects B x {expected[0]} x {expected[1]}, got {view.shape}")
    mixed = [gelu(linear(view, backbone.block_w[stage], backbone.block_b[stage])) for view in tokens]
    if config.adapter_placement[stage]:
        mixed = apply_adapter(TokenSet(mixed, tag), config.adapter_mode, adapters).views
    output = StageOutput(stage, grid, mixed, sum_tensors(mixed))
    if stage == NUM_STAGES - 1:
        return output, None
    index = merge_index(grid)
    merged = [linear(gather_tokens(view, index), backbone.merge_w[stage], backbone.merge_b[stage]) for view in mixed]
    return output, merged


def forward(inputs: EncoderInput, config: EncoderConfig, params: EncoderParams) -> ForwardResult:
    """Encode the views, fuse them per stage and apply the head.

    :param inputs: K x B x H x W x C images.
    :param config: encoder configuration.
    :param params: encoder weights.
    """
    if inputs.k != config.k:
        raise ShapeMismatchError(f"input holds {inputs.k} views, encoder configured for {config.k}")
    if inputs.images.shape[-1] != config.in_channels:
        raise ShapeMismatchError(f"input has {inputs.images.shape[-1]} channels, encoder expects {config.in_channels}")
    grid = config.check_image(*inputs.images.shape[2:4])
    backbone = params.backbone
    tokens: Optional[List[Tensor]] = [
        patch_embed(view, config.patch_size, backbone.embed_w, backbone.embed_b) for view in inputs.images
    ]
    result = ForwardResult()
    stage_grid = grid
    for stage in range(NUM_STAGES):
        output, tokens = stage_forward(
            tokens, stage, stage_grid, config, backbone, params.stage_adapters(inputs.tag, stage), inputs.tag
        )
        result.stages.append(output)
        stage_grid = (stage_grid[0] // 2, stage_grid[1] // 2)

    features = result.stages[0].fused
    for output in result.stages[1:]:
        features = concat_last(features, gather_tokens(output.fused, upsample_index(grid, 2**output.index)))
    result.features = features
    result.logits = linear(features, params.head.weight, params.head.bias)
    return result


def head_loss(result: ForwardResult, targets: np.ndarray, config: EncoderConfig) -> Tensor:
    """Cross entropy against B x N class labels, or binary cross entropy against B x N saliency targets."""
    if config.head_kind == HeadKind.segmentation:
        return cross_entropy(result.logits, targets)
    return bce_with_logits(result.logits, targets)


def predict(result: ForwardResult, config: EncoderConfig) -> np.ndarray:
    """Return B x N class labels, or B x N saliency probabilities."""
    if config.head_kind == HeadKind.segmentation:
        return np.argmax(result.logits.data, axis=-1)
    return special.expit(result.logits.data[..., 0])
