"""
Command line entry point.

Exit codes: 0 success, 1 check failure, 2 usage or input error.
"""
import argparse
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from fieldofparallax import FopError, RepresentationTag, set_logger
from fieldofparallax.fop_adapter import AdapterMode, TokenSet, apply_adapter, init_adapter, save_adapter
from fieldofparallax.fop_encoder import EncoderConfig, EncoderInput, HeadKind, forward, head_loss, init_encoder
from fieldofparallax.fop_lightfield import (
    IoFailureError,
    LightField,
    ViewCoord,
    ViewStrategy,
    from_uint8,
    load_lfr,
    save_lfr,
    select_views,
)
from fieldofparallax.fop_metrics import ConfusionMatrix, format_report, mae, segmentation_report
from fieldofparallax.fop_refocus import build_stack, save_stack, sharpness
from fieldofparallax.fop_tensor import Tensor, grad_check, sum_all, sum_tensors
from fieldofparallax.fop_training import (
    NUM_CLASSES,
    TrainingConfig,
    make_synthetic_task,
    run_ablation,
    train_toy,
)
from fieldofparallax.fop_utils import derive_rng, parse_bool_list, parse_float_list, parse_int_list

logger = logging.getLogger("fop.fieldofparallax")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2
MANIFEST_NAME = "manifest.yaml"
DEFAULT_TOL = {"adapter": 1e-5, "encoder": 1e-4}


class ConfigError(FopError):
    """Bad configuration file or flag value."""


@dataclass
class RunManifest:
    """Record of one command run, written next to its outputs."""

    command: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    started: str = ""
    wall_clock: float = 0.0
    passed: bool = True
    summary: str = ""

    def save(self, path: Path) -> None:
        """Write manifest as YAML."""
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as yaml_file:
            yaml.safe_dump(asdict(self), yaml_file, sort_keys=False)
        logger.info(f"saved run manifest to {path}")


def _yaml_safe(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.name
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_yaml_safe(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if value is None or isinstance(value, (bool, int, float, str)):
        return value
    return str(value)


#
# Commands.
#


def _load_array(path: Path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError, EOFError) as error:
        raise IoFailureError(f"cannot read npy array {path}: {error}") from error


def cmd_convert(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Convert a (A_v, A_u, H, W, C) npy array into an LFR file, uint8 arrays are rescaled by 1/255."""
    array = _load_array(args.input)
    lf = from_uint8(array) if array.dtype == np.uint8 else LightField(array)
    save_lfr(lf, args.out)
    manifest.inputs.append(str(args.input))
    manifest.outputs.append(str(args.out))
    manifest.summary = repr(lf)
    print(repr(lf))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Write a synthetic view-disparity scene and its labels."""
    scene = make_synthetic_task(args.seed, args.patch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_lfr(scene.lf, out.joinpath("scene.lfr"))
    for name, array in (("labels", scene.labels), ("pixel_labels", scene.pixel_labels), ("saliency", scene.saliency)):
        np.save(out.joinpath(f"{name}.npy"), array)
        manifest.outputs.append(str(out.joinpath(f"{name}.npy")))
    manifest.outputs.insert(0, str(out.joinpath("scene.lfr")))
    for rect in scene.rects:
        size = f"{rect.height}x{rect.width}"
        print(f"label={rect.label} disparity={rect.disparity} top={rect.top} left={rect.left} size={size}")
    manifest.summary = f"{len(scene.rects)} rectangles"
    return EXIT_OK


def cmd_refocus(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Build a focal stack and export it, prints the sharpness of every slice."""
    lf = load_lfr(args.input)
    stack = build_stack(lf, args.slopes)
    paths = save_stack(stack, args.out)
    scores = [sharpness(image) for image in stack.images()]
    for index, (slope, score) in enumerate(zip(stack.slopes, scores)):
        print(f"slice={index} slope={slope!r} sharpness={score:.6e}")
    best = int(np.argmax(scores))
    print(f"sharpest={best} slope={stack.slopes[best]!r}")
    manifest.inputs.append(str(args.input))
    manifest.outputs.extend(str(p) for p in paths)
    manifest.summary = f"sharpest slice {best}"
    return EXIT_OK


def cmd_select(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Print the selected views as "u,v" pairs."""
    lf = load_lfr(args.input)
    selection = select_views(lf, ViewStrategy[args.strategy], args.k, args.coords)
    print(selection)
    manifest.inputs.append(str(args.input))
    manifest.summary = str(selection)
    return EXIT_OK


def _adapter_loss_fn(args: argparse.Namespace) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    rng = derive_rng(args.seed, "gradcheck.adapter")
    mode = AdapterMode[args.mode]
    views = [Tensor(rng.normal(size=(args.b, args.n, args.c))) for _ in range(args.k)]
    sets = args.k if mode == AdapterMode.hard_per_view else 1
    params = [init_adapter(args.c, rng, zero_up=False, prefix=f"view{i}.") for i in range(sets)]

    def loss_fn() -> Tensor:
        return sum_tensors([sum_all(view) for view in apply_adapter(TokenSet(views), mode, params).views])

    return loss_fn, [t for p in params for t in p.tensors().values()]


def _encoder_loss_fn(args: argparse.Namespace) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    config = EncoderConfig(
        patch_size=1,
        stage_channels=(args.c // 2, args.c // 2, args.c, args.c),
        adapter_placement=(True,) * 4,
        k=args.k,
        num_classes=3,
        seed=args.seed,
        adapter_mode=AdapterMode[args.mode],
        hidden_width=4,
    )
    params = init_encoder(config, zero_up=False)
    rng = derive_rng(args.seed, "gradcheck.encoder")
    inputs = EncoderInput(rng.uniform(size=(args.k, args.b, 8, 8, config.in_channels)))
    labels = rng.integers(0, config.num_classes, size=(args.b, 64))

    def loss_fn() -> Tensor:
        return head_loss(forward(inputs, config, params), labels, config)

    return loss_fn, params.trainable(RepresentationTag.sai)


def cmd_gradcheck(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Compare back-propagated and finite difference gradients of the adapter or the whole toy encoder."""
    loss_fn, params = _adapter_loss_fn(args) if args.target == "adapter" else _encoder_loss_fn(args)
    tol = args.tol if args.tol is not None else DEFAULT_TOL[args.target]
    report = grad_check(loss_fn, params, h=args.h, tol=tol)
    print(report)
    verdict = "pass" if report.passed else "fail"
    print(f"max_rel_err={report.max_rel_err:.3e} tol={tol:.1e} {verdict}")
    manifest.passed = report.passed
    manifest.summary = f"max_rel_err={report.max_rel_err:.3e} {verdict}"
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _encoder_config(args: argparse.Namespace) -> EncoderConfig:
    return EncoderConfig(
        patch_size=args.patch_size,
        stage_channels=tuple(args.stage_channels),
        adapter_placement=tuple(args.placement),
        k=args.k,
        representation_tag=RepresentationTag[args.representation],
        num_classes=NUM_CLASSES,
        seed=args.seed,
        adapter_mode=AdapterMode[args.mode],
        head_kind=HeadKind[args.head],
        gamma=args.gamma,
    )


def _training_config(args: argparse.Namespace) -> TrainingConfig:
    return TrainingConfig(
        steps=args.steps,
        lr=args.lr,
        batch_size=args.batch_size,
        strategy=ViewStrategy[args.strategy],
        slopes=tuple(args.slopes),
    )


def cmd_train(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Train adapters and head on synthetic scenes, write the CSV report and the adapter checkpoints."""
    config = _encoder_config(args)
    params = init_encoder(config)
    report = train_toy(args.seed, config, _training_config(args), params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out.joinpath("report.csv"))
    manifest.outputs.append(str(out.joinpath("report.csv")))
    for stage, placed in enumerate(config.adapter_placement):
        if placed:
            path = out.joinpath(f"adapter_stage{stage + 1}.fopa")
            save_adapter(path, config.adapter_mode, params.stage_adapters(config.representation_tag, stage))
            manifest.outputs.append(str(path))
    print(f"final_loss={report.final_loss:.6f}")
    print(format_report(report.metrics))
    manifest.summary = f"final loss {report.final_loss:.6f}"
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Run an ablation study over paired seeds, fails when the shared adapter does not beat no adapter."""
    seeds = list(range(args.seed, args.seed + args.seeds))
    table = run_ablation(args.study, seeds, _encoder_config(args), _training_config(args))
    print(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    out.joinpath("ablation.txt").write_text(f"{table}\n")
    manifest.outputs.append(str(out.joinpath("ablation.txt")))
    passed = True
    if args.study == "modes":
        passed = table.median("shared") < table.median("no_adapter")
        print(f"shared<no_adapter {'pass' if passed else 'fail'}")
    manifest.passed = passed
    manifest.summary = "ordering holds" if passed else "shared adapter did not beat no adapter"
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_eval(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Print miou (acc, macc, miou) or mae of a prediction against ground truth, both npy files."""
    pred = _load_array(args.pred)
    gt = _load_array(args.gt)
    manifest.inputs.extend([str(args.pred), str(args.gt)])
    if args.metric == "mae":
        metrics = {"mae": mae(pred, gt)}
    else:
        num_classes = args.num_classes
        if num_classes is None:
            valid = gt[gt != args.ignore_label]
            num_classes = int(max(valid.max(initial=0), pred.max(initial=0))) + 1
        matrix = ConfusionMatrix.empty(num_classes).accumulate(pred, gt, args.ignore_label)
        metrics = segmentation_report(matrix)
    text = format_report(metrics)
    print(text)
    manifest.summary = text.replace("\n", " ")
    return EXIT_OK


#
# Parser.
#


def _add_encoder_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=[m.name for m in AdapterMode], default="shared")
    parser.add_argument("--strategy", choices=[s.name for s in ViewStrategy], default="corners_plus_center")
    parser.add_argument("--representation", choices=[t.name for t in RepresentationTag], default="sai")
    parser.add_argument("--head", choices=[h.name for h in HeadKind], default="segmentation")
    parser.add_argument("--placement", type=parse_bool_list, default=[False, True, True, True])
    parser.add_argument("--stage-channels", type=parse_int_list, default=[8, 16, 32, 64])
    parser.add_argument("--k", type=int, default=3)
    parser.add_argument("--patch-size", type=int, default=4)
    parser.add_argument("--gamma", type=float, default=1.0)
    parser.add_argument("--slopes", type=parse_float_list, default=[-1.0, 0.0, 1.0])
    parser.add_argument("--steps", type=int, default=60)
    parser.add_argument("--lr", type=float, default=1e-2)
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument("--out", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    """Create the fop argument parser, one sub-parser per command."""
    parser = argparse.ArgumentParser(prog="fop", description="Field of parallax light field toolkit.")
    parser.add_argument("--config", type=Path, help="YAML file of flag defaults, command line flags win.")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], default="WARNING")
    parser.add_argument("--manifest", type=Path, help="Run manifest path for commands without output directory.")
    parser.add_argument("--seed", type=int, default=0)
    seed_parent = argparse.ArgumentParser(add_help=False)
    seed_parent.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Root seed, also after the command.")
    commands = parser.add_subparsers(dest="command", required=True)

    convert = commands.add_parser("convert", help="Convert npy light field to LFR.", parents=[seed_parent])
    convert.add_argument("--in", dest="input", type=Path, required=True)
    convert.add_argument("--out", type=Path, required=True)
    convert.set_defaults(handler=cmd_convert)

    synth = commands.add_parser("synth", help="Write a synthetic view-disparity scene.", parents=[seed_parent])
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--patch-size", type=int, default=4)
    synth.set_defaults(handler=cmd_synth)

    refocus = commands.add_parser("refocus", help="Build and export a focal stack.", parents=[seed_parent])
    refocus.add_argument("--in", dest="input", type=Path, required=True)
    refocus.add_argument("--slopes", type=parse_float_list, required=True)
    refocus.add_argument("--out", type=Path, required=True)
    refocus.set_defaults(handler=cmd_refocus)

    select = commands.add_parser("select", help="Print selected sub-aperture views.", parents=[seed_parent])
    select.add_argument("--in", dest="input", type=Path, required=True)
    select.add_argument("--strategy", choices=[s.name for s in ViewStrategy], required=True)
    select.add_argument("--k", type=int, required=True)
    select.add_argument("--coords", type=ViewCoord.parse, nargs="+", help="u,v pairs for the explicit strategy.")
    select.set_defaults(handler=cmd_select)

    gradcheck = commands.add_parser("gradcheck", help="Finite difference gradient check.", parents=[seed_parent])
    gradcheck.add_argument("--target", choices=["adapter", "encoder"], default="adapter")
    gradcheck.add_argument("--c", type=int, default=8)
    gradcheck.add_argument("--n", type=int, default=8)
    gradcheck.add_argument("--k", type=int, default=3)
    gradcheck.add_argument("--b", type=int, default=2)
    gradcheck.add_argument("--mode", choices=[m.name for m in AdapterMode], default="shared")
    gradcheck.add_argument("--tol", type=float, help="Largest accepted relative error, per target default.")
    gradcheck.add_argument("--h", type=float, default=1e-5)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    train = commands.add_parser("train", help="Train adapters and head on synthetic scenes.", parents=[seed_parent])
    train.add_argument("--task", choices=["synth"], default="synth")
    _add_encoder_flags(train)
    train.set_defaults(handler=cmd_train)

    ablate = commands.add_parser("ablate", help="Adapter mode or view strategy ablation.", parents=[seed_parent])
    ablate.add_argument("--study", choices=["modes", "views"], default="modes")
    ablate.add_argument("--seeds", type=int, default=5)
    _add_encoder_flags(ablate)
    ablate.set_defaults(handler=cmd_ablate)

    evaluate = commands.add_parser("eval", help="Evaluate predictions against ground truth.", parents=[seed_parent])
    evaluate.add_argument("--pred", type=Path, required=True)
    evaluate.add_argument("--gt", type=Path, required=True)
    evaluate.add_argument("--metric", choices=["miou", "mae"], default="miou")
    evaluate.add_argument("--num-classes", type=int)
    evaluate.add_argument("--ignore-label", type=int, default=255)
    evaluate.set_defaults(handler=cmd_eval)
    return parser


def load_config(path: Path) -> Dict[str, Any]:
    """Load flat YAML mapping of flag defaults, keys are long flag names with - or _."""
    try:
        with open(path, "r") as yaml_file:
            content = yaml.safe_load(yaml_file)
    except (OSError, yaml.YAMLError) as error:
        raise ConfigError(f"cannot load config {path}: {error}") from error
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ConfigError(f"config {path} must be a key: value mapping")
    return {str(key).lstrip("-").replace("-", "_"): value for key, value in content.items()}


def _config_names(action: argparse.Action) -> List[str]:
    long_flags = [opt[2:].replace("-", "_") for opt in action.option_strings if opt.startswith("--")]
    return [action.dest] + long_flags


def _config_value(action: argparse.Action, key: str, value: Any) -> Any:
    """Convert a YAML value the way argparse converts the flag's text."""
    if value is None:
        return None
    many = action.nargs in ("+", "*") or isinstance(action.nargs, int)
    if many:
        items = value if isinstance(value, list) else [value]
    else:
        # list flags such as --slopes take one comma separated string
        items = [",".join(str(v) for v in value) if isinstance(value, list) else value]
    converted = []
    for item in items:
        if action.type is not None:
            try:
                item = action.type(item if isinstance(item, str) else str(item))
            except (ValueError, TypeError, argparse.ArgumentTypeError) as error:
                raise ConfigError(f"config key {key}: invalid value {item!r}: {error}") from error
        if action.choices is not None and item not in action.choices:
            raise ConfigError(f"config key {key}: {item!r} not one of {sorted(action.choices)}")
        converted.append(item)
    return converted if many else converted[0]


def apply_config(parser: argparse.ArgumentParser, config: Dict[str, Any]) -> None:
    """Install config values as parser and sub-parser defaults.

    Keys are long flag names or destinations, so `in` and `input` both set --in.
    """
    # pylint: disable=protected-access
    groups = [action for action in parser._actions if isinstance(action, argparse._SubParsersAction)]
    sub_parsers = [p for action in groups for p in action.choices.values()]
    skipped = (argparse._SubParsersAction, argparse._HelpAction)
    known = set()
    for each in [parser] + sub_parsers:
        values = {}
        for action in each._actions:
            # suppressed flags such as the per command --seed fall back to the root parser
            if isinstance(action, skipped) or action.default == argparse.SUPPRESS:
                continue
            for key in _config_names(action):
                if key in config:
                    values[action.dest] = _config_value(action, key, config[key])
                    action.required = False
                    known.add(key)
        each.set_defaults(**values)
    unknown = set(config) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse command line, config file values act as defaults."""
    parser = build_parser()
    pre_parser = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre_parser.add_argument("--config", type=Path)
    known, _ = pre_parser.parse_known_args(argv)
    if known.config:
        apply_config(parser, load_config(known.config))
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run fop command and return its exit code."""
    try:
        args = parse_args(argv)
    except ConfigError as error:
        print(f"{type(error).__name__}: {error}", file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as error:
        return int(error.code or 0)

    if not logging.getLogger("fop").handlers:
        set_logger()
    logging.getLogger("fop").setLevel(args.log_level)

    config = {k: _yaml_safe(v) for k, v in vars(args).items() if k not in ("handler", "config", "manifest")}
    manifest = RunManifest(args.command, config, seed=args.seed, started=datetime.now(timezone.utc).isoformat())
    start = time.perf_counter()
    try:
        code = args.handler(args, manifest)
    except (FopError, OSError) as error:
        print(f"{type(error).__name__}: {error}", file=sys.stderr)
        manifest.passed = False
        manifest.summary = f"{type(error).__name__}: {error}"
        code = EXIT_ERROR
    manifest.wall_clock = time.perf_counter() - start

    out = getattr(args, "out", None)
    manifest_path = args.manifest
    if manifest_path is None and out is not None and Path(out).is_dir():
        manifest_path = Path(out).joinpath(MANIFEST_NAME)
    if manifest_path is not None:
        try:
            manifest.save(manifest_path)
        except OSError as error:
            print(f"cannot write manifest {manifest_path}: {error}", file=sys.stderr)
            code = EXIT_ERROR
    return code


if __name__ == "__main__":
    sys.exit(main())
