"""
Synthetic view-disparity task, frozen-backbone toy training and adapter ablations.
"""
import csv
import io
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from fieldofparallax import FopError, RepresentationTag
from fieldofparallax.fop_adapter import AdapterMode
from fieldofparallax.fop_encoder import (
    EncoderConfig,
    EncoderInput,
    EncoderParams,
    HeadKind,
    forward,
    head_loss,
    init_encoder,
    predict,
)
from fieldofparallax.fop_lightfield import LightField, ViewStrategy, select_views
from fieldofparallax.fop_metrics import ConfusionMatrix, mae, segmentation_report
from fieldofparallax.fop_refocus import build_stack
from fieldofparallax.fop_tensor import NonFiniteError, Tensor
from fieldofparallax.fop_utils import derive_rng

logger = logging.getLogger("fop.fieldofparallax")

# Rectangle labels 1..4 in pairs sharing a texture family, told apart only by disparity.
DISPARITIES = {1: -1, 2: 1, 3: -2, 4: 2}
FAMILY_TINTS = ((0.55, 0.55, 0.55), (0.85, 0.35, 0.25), (0.25, 0.35, 0.85))
NUM_CLASSES = len(DISPARITIES) + 1
ANGULAR = 5
SIZE = 32


class TrainingError(FopError):
    """Base class for training errors."""


class DivergedLossError(TrainingError):
    """Loss became NaN or infinite."""


class BackboneMutatedError(TrainingError):
    """Frozen backbone bytes changed during training."""


@dataclass(frozen=True)
class Rect:
    """Rectangle in center view pixels."""

    top: int
    left: int
    height: int
    width: int
    label: int

    @property
    def disparity(self) -> int:
        """Pixel shift per unit angular offset."""
        return DISPARITIES[self.label]


@dataclass
class SyntheticScene:
    """Light field with center view labels."""

    lf: LightField
    rects: List[Rect]
    pixel_labels: np.ndarray
    labels: np.ndarray
    saliency: np.ndarray


@dataclass
class TrainingConfig:
    """Toy training hyper parameters."""

    steps: int = 60
    lr: float = 1e-2
    batch_size: int = 4
    heldout_size: int = 4
    strategy: ViewStrategy = ViewStrategy.corners_plus_center
    slopes: Tuple[float, ...] = (-1.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1 or self.heldout_size < 1:
            raise TrainingError(f"steps and batch sizes must be positive: {self}")
        if not self.lr >= 0:
            raise TrainingError(f"learning rate must be non negative, got {self.lr}")


@dataclass
class TrainingReport:
    """Per step training loss and final held-out metrics."""

    losses: List[float] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)
    backbone_digest: str = ""

    @property
    def final_loss(self) -> float:
        """Loss of the last step."""
        return self.losses[-1]

    def to_csv(self) -> str:
        """Return step,loss rows and a final metric line."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(self.losses):
            writer.writerow([step, repr(loss)])
        writer.writerow([f"{name}={value!r}" for name, value in self.metrics.items()])
        return buffer.getvalue()

    def save(self, path: Union[str, Path]) -> None:
        """Write CSV report."""
        Path(path).write_text(self.to_csv())
        logger.info(f"saved training report to {path}")


@dataclass
class AblationRow:
    """Final losses of one arm over all seeds."""

    arm: str
    losses: List[float]

    @property
    def median(self) -> float:
        """Median final loss."""
        return statistics.median(self.losses)


@dataclass
class AblationTable:
    """Median final training loss per arm."""

    study: str
    rows: List[AblationRow] = field(default_factory=list)

    def __str__(self) -> str:
        lines = [f"{'arm':<36} median_loss  losses"]
        for row in self.rows:
            losses = " ".join(f"{loss:.6f}" for loss in row.losses)
            lines.append(f"{row.arm:<36} {row.median:.6f}     {losses}")
        return "\n".join(lines)

    def median(self, arm: str) -> float:
        """Median final loss of an arm."""
        return next(row.median for row in self.rows if row.arm == arm)


def render_views(rects: Sequence[Rect], textures: Sequence[np.ndarray], background: np.ndarray) -> np.ndarray:
    """Paint the rectangles over the background in every view, returns A x A x S x S x C.

    Rectangles are painted in list order, so later rectangles occlude earlier ones. In view (u, v) a rectangle with
    disparity d is translated by d * (u - u_c, v - v_c) pixels along (x, y).
    """
    size = background.shape[0]
    center = (ANGULAR - 1) // 2
    views = np.empty((ANGULAR, ANGULAR) + background.shape, dtype=np.float32)
    for v in range(ANGULAR):
        for u in range(ANGULAR):
            view = background.copy()
            for rect, texture in zip(rects, textures):
                top = rect.top + rect.disparity * (v - center)
                left = rect.left + rect.disparity * (u - center)
                y0, y1 = max(top, 0), min(top + rect.height, size)
                x0, x1 = max(left, 0), min(left + rect.width, size)
                if y0 < y1 and x0 < x1:
                    view[y0:y1, x0:x1] = texture[y0 - top : y1 - top, x0 - left : x1 - left]
            views[v, u] = view
    return views


def make_synthetic_task(seed: int, patch_size: int = 4) -> SyntheticScene:
    """Generate a procedural view-disparity scene.

    Two to four textured rectangles at distinct disparities are painted over a static background, nearer rectangles
    (larger disparity) on top. Rectangles with labels 2k-1 and 2k share a texture distribution and differ only by
    disparity. Token labels are the center view labels sampled at patch centers.

    :param seed: scene seed.
    :param patch_size: patch size of the stage 1 token grid.
    """
    rng = derive_rng(seed, "task.scene")
    count = int(rng.integers(2, 5))
    labels = sorted(rng.choice(sorted(DISPARITIES), size=count, replace=False).tolist(), key=DISPARITIES.get)
    rects = []
    for label in labels:
        height, width = (int(d) for d in rng.integers(8, 17, size=2))
        top, left = int(rng.integers(0, SIZE - height + 1)), int(rng.integers(0, SIZE - width + 1))
        rects.append(Rect(top, left, height, width, int(label)))

    def texture(family: int, shape: Tuple[int, int]) -> np.ndarray:
        grain = rng.uniform(0.3, 1.0, size=shape + (1,))
        return np.clip(grain * np.array(FAMILY_TINTS[family]), 0.0, 1.0)

    background = texture(0, (SIZE, SIZE))
    textures = [texture(1 + (rect.label - 1) // 2, (rect.height, rect.width)) for rect in rects]
    lf = LightField(render_views(rects, textures, background))

    pixel_labels = np.zeros((SIZE, SIZE), dtype=np.int64)
    for rect in rects:
        pixel_labels[rect.top : rect.top + rect.height, rect.left : rect.left + rect.width] = rect.label
    token_labels = pixel_labels[patch_size // 2 :: patch_size, patch_size // 2 :: patch_size]
    return SyntheticScene(lf, rects, pixel_labels, token_labels, (token_labels > 0).astype(np.float64))


def scene_input(scene: SyntheticScene, encoder_config: EncoderConfig, training_config: TrainingConfig) -> EncoderInput:
    """Build the encoder input of a scene in the configured representation."""
    if encoder_config.representation_tag == RepresentationTag.focal_stack:
        return EncoderInput.from_stack(build_stack(scene.lf, training_config.slopes))
    selection = select_views(scene.lf, training_config.strategy, encoder_config.k)
    return EncoderInput.from_views(scene.lf, selection)


def make_batch(
    seeds: Sequence[int], encoder_config: EncoderConfig, training_config: TrainingConfig
) -> Tuple[EncoderInput, np.ndarray, np.ndarray]:
    """Return encoder input, B x N labels and B x N saliency of the scenes."""
    scenes = [make_synthetic_task(int(seed), encoder_config.patch_size) for seed in seeds]
    inputs = EncoderInput.batch([scene_input(scene, encoder_config, training_config) for scene in scenes])
    labels = np.stack([scene.labels.reshape(-1) for scene in scenes])
    saliency = np.stack([scene.saliency.reshape(-1) for scene in scenes])
    return inputs, labels, saliency


def evaluate(
    inputs: EncoderInput, labels: np.ndarray, saliency: np.ndarray, config: EncoderConfig, params: EncoderParams
) -> Dict[str, float]:
    """Return held-out metrics, acc/macc/miou for segmentation and mae for saliency."""
    result = forward(inputs, config, params)
    prediction = predict(result, config)
    if config.head_kind == HeadKind.saliency:
        return {"mae": mae(prediction, saliency)}
    return segmentation_report(ConfusionMatrix.empty(config.num_classes).accumulate(prediction, labels))


def train_toy(
    scene_gen_seed: int,
    config: EncoderConfig,
    training_config: Optional[TrainingConfig] = None,
    params: Optional[EncoderParams] = None,
) -> TrainingReport:
    """Train adapters and head with plain SGD on synthetic scenes while the backbone stays frozen.

    :param scene_gen_seed: seed of the training and held-out scenes.
    :param config: encoder configuration, its seed drives the weights.
    :param training_config: steps, learning rate and batch sizes.
    :param params: weights to train in place, fresh ones from config if None.
    """
    training_config = training_config or TrainingConfig()
    if config.k != _input_views(config, training_config):
        raise TrainingError(f"encoder expects {config.k} views, input yields {_input_views(config, training_config)}")
    params = params or init_encoder(config)
    count = training_config.batch_size + training_config.heldout_size
    seeds = derive_rng(scene_gen_seed, "task.seeds").integers(0, 2**31, size=count)
    train_seeds, heldout_seeds = seeds[: training_config.batch_size], seeds[training_config.batch_size :]
    inputs, labels, saliency = make_batch(train_seeds, config, training_config)
    targets = labels if config.head_kind == HeadKind.segmentation else saliency
    trainable = params.trainable(inputs.tag)
    digest = params.backbone.digest()

    report = TrainingReport(backbone_digest=digest)
    for step in range(training_config.steps):
        for tensor in trainable:
            tensor.zero_grad()
        try:
            loss = head_loss(forward(inputs, config, params), targets, config)
        except NonFiniteError as error:
            raise DivergedLossError(f"loss diverged at step {step}: {error}") from error
        loss.backward()
        report.losses.append(loss.item())
        _sgd_step(trainable, training_config.lr)
        logger.debug(f"step {step} loss {report.losses[-1]:.6f}")

    if params.backbone.digest() != digest:
        raise BackboneMutatedError(f"backbone hash changed from {digest}")
    heldout = make_batch(heldout_seeds, config, training_config)
    report.metrics = evaluate(*heldout, config, params)
    logger.info(f"trained {training_config.steps} steps, final loss {report.final_loss:.6f}, metrics {report.metrics}")
    return report


def ablation_arms(study: str, base: EncoderConfig) -> List[Tuple[str, EncoderConfig, Optional[ViewStrategy]]]:
    """Return the (arm name, encoder config, view strategy) arms of a study.

    :param study: "modes" compares adapter variants, "views" compares view selection strategies with and without
        adapter.
    :param base: configuration the arms are derived from.
    """
    placement = base.adapter_placement if any(base.adapter_placement) else (False, True, True, True)
    off = (False,) * 4
    if study == "modes":
        modes = (AdapterMode.shared, AdapterMode.consistency_only, AdapterMode.difference_only)
        modes += (AdapterMode.hard_per_view,)
        arms = [(mode.name, replace(base, adapter_mode=mode, adapter_placement=placement), None) for mode in modes]
        every_stage = replace(base, adapter_mode=AdapterMode.shared, adapter_placement=(True,) * 4)
        arms.append(("every_stage", every_stage, None))
        arms.append(("no_adapter", replace(base, adapter_placement=off), None))
        return arms
    if study == "views":
        arms = []
        for strategy, k in (
            (ViewStrategy.corners_plus_center, 3),
            (ViewStrategy.sparse_max_divergence, 4),
            (ViewStrategy.min_angular_difference, 5),
            (ViewStrategy.fixed_five, 5),
        ):
            views = replace(base, k=k, representation_tag=RepresentationTag.sai)
            arms.append((f"{strategy.name}", replace(views, adapter_placement=placement), strategy))
            arms.append((f"{strategy.name}_no_adapter", replace(views, adapter_placement=off), strategy))
        return arms
    raise TrainingError(f"unknown ablation study {study!r}, expected modes or views")


def run_ablation(
    study: str,
    seeds: Sequence[int],
    base: Optional[EncoderConfig] = None,
    training_config: Optional[TrainingConfig] = None,
) -> AblationTable:
    """Train every arm of a study on paired seeds and tabulate median final losses.

    Seed i drives both the scenes and the weights of every arm, so arms differ only in what they ablate.
    """
    base = base or EncoderConfig()
    training_config = training_config or TrainingConfig()
    table = AblationTable(study)
    for arm, config, strategy in ablation_arms(study, base):
        arm_training = replace(training_config, strategy=strategy) if strategy else training_config
        losses = [train_toy(seed, replace(config, seed=seed), arm_training).final_loss for seed in seeds]
        table.rows.append(AblationRow(arm, losses))
        logger.info(f"ablation {study} arm {arm} median loss {table.rows[-1].median:.6f}")
    return table


def _input_views(config: EncoderConfig, training_config: TrainingConfig) -> int:
    if config.representation_tag == RepresentationTag.focal_stack:
        return len(training_config.slopes)
    if training_config.strategy == ViewStrategy.corners_plus_center:
        return 3
    if training_config.strategy == ViewStrategy.fixed_five:
        return 5
    return config.k


def _sgd_step(tensors: Sequence[Tensor], lr: float) -> None:
    for tensor in tensors:
        if tensor.grad is not None:
            tensor.data -= lr * tensor.grad
