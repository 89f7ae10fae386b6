"""
Tests for the synthetic task, toy training and ablations.
"""
from pathlib import Path

import numpy as np
import pytest

from fieldofparallax import RepresentationTag
from fieldofparallax.fop_encoder import EncoderConfig, HeadKind, init_encoder
from fieldofparallax.fop_lightfield import ViewStrategy
from fieldofparallax.fop_training import (
    ANGULAR,
    NUM_CLASSES,
    SIZE,
    AblationRow,
    AblationTable,
    Rect,
    TrainingConfig,
    TrainingError,
    ablation_arms,
    make_batch,
    make_synthetic_task,
    render_views,
    run_ablation,
    train_toy,
)

QUICK = TrainingConfig(steps=3, batch_size=2, heldout_size=2)


def test_scene_determinism() -> None:
    """A scene seed always yields the same light field and labels."""
    first, second = make_synthetic_task(5), make_synthetic_task(5)
    assert first.lf == second.lf
    assert np.array_equal(first.labels, second.labels)
    assert first.rects == second.rects
    assert make_synthetic_task(6).lf != first.lf


@pytest.mark.parametrize("seed", range(8))
def test_scene_labels(seed: int) -> None:
    """Labels cover the token grid, stay in range and match the rectangles."""
    scene = make_synthetic_task(seed)
    assert scene.lf.data.shape == (ANGULAR, ANGULAR, SIZE, SIZE, 3)
    assert scene.labels.shape == (SIZE // 4, SIZE // 4)
    assert 0 <= scene.labels.min() and scene.labels.max() < NUM_CLASSES
    assert 2 <= len(scene.rects) <= 4
    assert len({rect.label for rect in scene.rects}) == len(scene.rects)
    assert [rect.disparity for rect in scene.rects] == sorted(rect.disparity for rect in scene.rects)
    assert np.array_equal(scene.saliency, (scene.labels > 0).astype(float))
    assert np.array_equal(scene.labels, scene.pixel_labels[2::4, 2::4])


def test_render_views() -> None:
    """Painted views match a pixel loop, later rectangles on top."""
    rng = np.random.default_rng(0)
    rects = [Rect(2, 3, 4, 5, label=1), Rect(4, 4, 3, 3, label=4)]
    textures = [rng.uniform(size=(r.height, r.width, 2)) for r in rects]
    background = rng.uniform(size=(12, 12, 2))
    views = render_views(rects, textures, background)
    center = (ANGULAR - 1) // 2
    for v in range(ANGULAR):
        for u in range(ANGULAR):
            for y in range(12):
                for x in range(12):
                    expected = background[y, x]
                    for rect, texture in zip(rects, textures):
                        top = rect.top + rect.disparity * (v - center)
                        left = rect.left + rect.disparity * (u - center)
                        if top <= y < top + rect.height and left <= x < left + rect.width:
                            expected = texture[y - top, x - left]
                    assert np.array_equal(views[v, u, y, x], expected.astype(np.float32))


def test_make_batch() -> None:
    """Batches stack scenes, flatten labels and honour the representation."""
    config = EncoderConfig()
    inputs, labels, saliency = make_batch([1, 2], config, QUICK)
    assert inputs.images.shape == (3, 2, SIZE, SIZE, 3)
    assert labels.shape == saliency.shape == (2, 64)
    stack_config = EncoderConfig(representation_tag=RepresentationTag.focal_stack)
    stack_inputs, _, _ = make_batch([1], stack_config, QUICK)
    assert stack_inputs.tag == RepresentationTag.focal_stack
    assert stack_inputs.k == len(QUICK.slopes)


def test_zero_learning_rate() -> None:
    """Without updates the loss stays constant."""
    report = train_toy(3, EncoderConfig(), TrainingConfig(steps=4, lr=0.0, batch_size=2, heldout_size=2))
    assert len(report.losses) == 4
    assert len(set(report.losses)) == 1


def test_training_reduces_loss() -> None:
    """SGD lowers the training loss."""
    report = train_toy(3, EncoderConfig(), TrainingConfig(steps=10, batch_size=2, heldout_size=2))
    assert report.final_loss < report.losses[0]
    assert set(report.metrics) == {"acc", "macc", "miou"}


def test_backbone_untouched() -> None:
    """Training leaves the frozen backbone bit-exact."""
    config = EncoderConfig(seed=4)
    params = init_encoder(config)
    digest = params.backbone.digest()
    report = train_toy(1, config, QUICK, params)
    assert report.backbone_digest == digest
    assert params.backbone.digest() == digest
    assert any(np.any(t.data != 0.0) for t in params.adapter_tensors(RepresentationTag.sai) if "w_u" in t.name)


def test_reproducible_report(tmp_path: Path) -> None:
    """Same seeds give byte identical reports."""
    first = train_toy(2, EncoderConfig(seed=1), QUICK)
    second = train_toy(2, EncoderConfig(seed=1), QUICK)
    assert first.to_csv() == second.to_csv()
    lines = first.to_csv().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == QUICK.steps + 2
    assert lines[-1].startswith("acc=")
    first.save(tmp_path.joinpath("report.csv"))
    assert tmp_path.joinpath("report.csv").read_text() == first.to_csv()


def test_saliency_training() -> None:
    """Saliency heads report mean absolute error."""
    report = train_toy(0, EncoderConfig(head_kind=HeadKind.saliency), QUICK)
    assert set(report.metrics) == {"mae"}
    assert 0.0 <= report.metrics["mae"] <= 1.0


def test_focal_stack_training() -> None:
    """Focal stacks train through their own adapters."""
    config = EncoderConfig(k=3, representation_tag=RepresentationTag.focal_stack)
    params = init_encoder(config)
    train_toy(0, config, QUICK, params)
    assert all(t.grad is None for t in params.adapter_tensors(RepresentationTag.sai))
    assert any(t.grad is not None for t in params.adapter_tensors(RepresentationTag.focal_stack))


def test_training_errors() -> None:
    """View counts must match the strategy, hyper parameters must be valid."""
    with pytest.raises(TrainingError):
        train_toy(0, EncoderConfig(k=4), QUICK)
    with pytest.raises(TrainingError):
        train_toy(0, EncoderConfig(k=2, representation_tag=RepresentationTag.focal_stack), QUICK)
    with pytest.raises(TrainingError):
        TrainingConfig(steps=0)
    with pytest.raises(TrainingError):
        TrainingConfig(lr=-1.0)


def test_ablation_arms() -> None:
    """Studies list their arms, unknown studies are rejected."""
    modes = ablation_arms("modes", EncoderConfig())
    assert [arm for arm, _, _ in modes] == [
        "shared",
        "consistency_only",
        "difference_only",
        "hard_per_view",
        "every_stage",
        "no_adapter",
    ]
    assert not modes[-1][1].uses_adapter
    assert modes[-2][1].adapter_placement == (True, True, True, True)
    views = ablation_arms("views", EncoderConfig())
    assert len(views) == 8
    assert {config.k for _, config, strategy in views if strategy == ViewStrategy.fixed_five} == {5}
    with pytest.raises(TrainingError):
        ablation_arms("heads", EncoderConfig())


def test_ablation_table() -> None:
    """Tables report medians per arm."""
    table = AblationTable("modes", [AblationRow("shared", [0.3, 0.1, 0.2]), AblationRow("no_adapter", [0.5, 0.4])])
    assert table.median("shared") == 0.2
    assert table.median("no_adapter") == pytest.approx(0.45)
    lines = str(table).splitlines()
    assert lines[0].split() == ["arm", "median_loss", "losses"]
    assert lines[1].split()[:2] == ["shared", "0.200000"]


@pytest.mark.slow
def test_adapter_beats_frozen_baseline() -> None:
    """Shared adapters reach a lower median training loss than the adapter-free encoder."""
    table = run_ablation("modes", range(5), training_config=TrainingConfig(steps=60))
    assert table.median("shared") < table.median("no_adapter")
