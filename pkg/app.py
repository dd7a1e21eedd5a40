import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from config import PRESET_CLASSES, load_settings, pipeline_config, preprocess_config, train_config
from kidney.errors import KidneyError
from kidney.models.pipeline_model import load_models, predict_directory, predict_file
from kidney.models.trainer_model import PRESETS, build_slabs, split_cases, train
from kidney.utils.dice_utils import evaluate_directory, update_table
from kidney.utils.gradcheck_utils import CASE_BUILDERS, run_gradcheck_suite
from kidney.utils.logger import configure_logger
from kidney.utils.phantom_utils import generate_phantom, random_phantom_spec
from kidney.utils.preprocess_utils import load_prepared_case, preprocess_case
from kidney.utils.volume_utils import case_paths, list_cases, read_volume, write_volume


load_dotenv()

logger = logging.getLogger(__name__)
configure_logger(logger)


EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_INCOMPATIBLE_CHECKPOINT = 4
EXIT_FORMAT = 5
EXIT_NUMERICAL = 6
EXIT_GRADCHECK = 7
EXIT_DATA = 8

EXIT_CODES = {
    "usage": EXIT_USAGE,
    "incompatible_checkpoint": EXIT_INCOMPATIBLE_CHECKPOINT,
    "format": EXIT_FORMAT,
    "numerical": EXIT_NUMERICAL,
    "data": EXIT_DATA,
    "geometry": EXIT_DATA,
}


class GradcheckFailure(Exception):
    category = "gradcheck"


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _add_common(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", default=default, help="key=value file overriding the preset defaults")
    parser.add_argument("--scale", choices=sorted(PRESET_CLASSES), default="desk" if default is None else default,
                        help="preset that sets sizes, epochs and thresholds coherently")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--jobs", type=int, default=default)


def build_parser() -> argparse.ArgumentParser:
    """Global options are accepted before or after the subcommand."""
    parser = argparse.ArgumentParser(prog="kidney", description="Multi-stage 2.5D kidney and tumor segmentation.")
    _add_common(parser, None)
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common, argparse.SUPPRESS)
    commands = parser.add_subparsers(dest="command", required=True)

    phantom = commands.add_parser("phantom", parents=[common], help="generate synthetic labelled volumes")
    phantom.add_argument("--count", type=int, required=True)
    phantom.add_argument("--tumor-fraction", type=float, default=None)
    phantom.add_argument("--dims", type=_ints)
    phantom.add_argument("--spacing", type=_floats)
    phantom.add_argument("--out", required=True)

    preprocess = commands.add_parser("preprocess", parents=[common], help="reslice, window and standardize a case directory")
    preprocess.add_argument("--in", dest="in_dir", required=True)
    preprocess.add_argument("--out", required=True)
    preprocess.add_argument("--thickness", type=float)
    preprocess.add_argument("--hu-min", type=float)
    preprocess.add_argument("--hu-max", type=float)

    trainer = commands.add_parser("train", parents=[common], help="train one network preset")
    trainer.add_argument("--preset", choices=sorted(PRESETS), required=True)
    trainer.add_argument("--stage", type=int, choices=(1, 2), required=True)
    trainer.add_argument("--data", required=True)
    trainer.add_argument("--out", required=True)
    trainer.add_argument("--epochs", type=int)

    predict = commands.add_parser("predict", parents=[common], help="segment a volume or a directory of volumes")
    predict.add_argument("--stage1", required=True)
    predict.add_argument("--stage2", required=True, help="comma-separated stage-2 checkpoints")
    predict.add_argument("--in", dest="in_path", required=True)
    predict.add_argument("--out", required=True)
    predict.add_argument("--overlay")
    predict.add_argument("--ensemble", choices=("mean", "vote"))
    predict.add_argument("--include-stage1", action="store_true", default=None)

    evaluate = commands.add_parser("evaluate", parents=[common], help="Dice report of predictions against ground truth")
    evaluate.add_argument("--pred", required=True)
    evaluate.add_argument("--gt", required=True)
    evaluate.add_argument("--report", required=True)
    evaluate.add_argument("--name", default="model")
    evaluate.add_argument("--table", help="summary CSV to add or replace this model's row in")

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable op")
    gradcheck.add_argument("--op", choices=sorted(CASE_BUILDERS))
    gradcheck.add_argument("--cases", type=int, default=5)
    return parser


##################################################
# Subcommands
##################################################


def run_phantom(args, settings: dict) -> None:
    dims = args.dims or settings["phantom_dims"]
    spacing = args.spacing or settings["phantom_spacing"]
    tumor_fraction = settings["tumor_fraction"] if args.tumor_fraction is None else args.tumor_fraction
    rng = np.random.default_rng(settings["seed"])
    logger.info(f"Received request to generate {args.count} phantoms in {args.out}")
    for index in range(args.count):
        spec = random_phantom_spec(rng, dims, spacing, with_tumor=bool(rng.random() < tumor_fraction),
                                   single_kidney_probability=settings["single_kidney_probability"],
                                   noise_sigma=settings["noise_sigma"])
        image, labels = generate_phantom(spec)
        image_path, label_path = case_paths(args.out, f"phantom_{index:03d}")
        write_volume(image, image_path)
        write_volume(labels, label_path)
    logger.info(f"Successfully generated {args.count} phantoms")


def run_preprocess(args, settings: dict) -> None:
    cfg = preprocess_config(settings)
    volume_ids = list_cases(args.in_dir)
    if not volume_ids:
        raise FileNotFoundError(f"No image volumes in {args.in_dir}")
    logger.info(f"Received request to preprocess {len(volume_ids)} cases from {args.in_dir}")
    for volume_id in volume_ids:
        image_path, label_path = case_paths(args.in_dir, volume_id)
        labels = read_volume(label_path) if label_path.exists() else None
        case = preprocess_case(read_volume(image_path), labels, cfg, volume_id)
        out_image, out_labels = case_paths(args.out, volume_id)
        write_volume(case.image, out_image)
        if case.labels is not None:
            write_volume(case.labels, out_labels)
    logger.info(f"Successfully preprocessed {len(volume_ids)} cases into {args.out}")


def run_train(args, settings: dict) -> None:
    cfg = train_config(settings, args.preset, args.stage)
    size = settings["stage1_size"] if cfg.stage == 1 else settings["roi_size"]
    network = cfg.build_network(input_size=size)
    volume_ids = list_cases(args.data)
    train_ids, val_ids = split_cases(volume_ids, cfg.validation_fraction, cfg.seed)
    logger.info(f"Training on {len(train_ids)} volumes, validating on {len(val_ids)}: {val_ids}")
    train_slabs = build_slabs([load_prepared_case(args.data, v) for v in train_ids], cfg.stage, size)
    val_slabs = build_slabs([load_prepared_case(args.data, v) for v in val_ids], cfg.stage, size)
    train(network, train_slabs, val_slabs, cfg,
          checkpoint_path=args.out, log_path=f"{args.out}.log.csv")


def run_predict(args, settings: dict) -> None:
    cfg = pipeline_config(settings)
    stage2 = [path for path in args.stage2.split(",") if path]
    models = load_models(args.stage1, stage2, cfg.preprocess.stage1_size)
    if Path(args.in_path).is_dir():
        predict_directory(args.in_path, args.out, models, cfg, jobs=settings["jobs"], overlay_dir=args.overlay)
    else:
        predict_file(args.in_path, args.out, models, cfg, overlay_dir=args.overlay)


def run_evaluate(args, settings: dict) -> None:
    report = evaluate_directory(args.pred, args.gt, args.name, jobs=settings["jobs"])
    report.to_csv(args.report)
    if args.table:
        update_table(report, args.table)


def run_gradcheck(args, settings: dict) -> None:
    results = run_gradcheck_suite([args.op] if args.op else None, cases=args.cases, seed=settings["seed"])
    print(f"{'op':<24} {'max_rel_error':>14}  status")
    for result in results:
        print(f"{result.op:<24} {result.max_relative_error:>14.3e}  {'ok' if result.passed else 'FAIL'}")
    failed = [result.op for result in results if not result.passed]
    if failed:
        raise GradcheckFailure(f"Gradient check failed for {', '.join(failed)}")


COMMANDS = {
    "phantom": run_phantom,
    "preprocess": run_preprocess,
    "train": run_train,
    "predict": run_predict,
    "evaluate": run_evaluate,
    "gradcheck": run_gradcheck,
}


def _fail(category: str, message: str, code: int) -> int:
    print(f"error={category} message={' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    """Runs one subcommand and maps every failure to an exit code.

    Args:
        argv (list[str] | None): Arguments without the program name; defaults to sys.argv[1:].

    Returns:
        int: 0 on success, otherwise the code of the error category (see README).
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        settings = load_settings(PRESET_CLASSES[args.scale], args.config, seed=args.seed, jobs=args.jobs,
                                 thickness=getattr(args, "thickness", None),
                                 hu_min=getattr(args, "hu_min", None),
                                 hu_max=getattr(args, "hu_max", None),
                                 max_epochs=getattr(args, "epochs", None),
                                 ensemble_mode=getattr(args, "ensemble", None),
                                 include_stage1=getattr(args, "include_stage1", None))
        logger.info(f"Resolved configuration for {args.command}: "
                    f"{json.dumps({'args': vars(args), 'settings': settings}, sort_keys=True, default=str)}")
        COMMANDS[args.command](args, settings)
    except GradcheckFailure as e:
        return _fail(e.category, e, EXIT_GRADCHECK)
    except FileNotFoundError as e:
        return _fail("missing_file", e, EXIT_MISSING_FILE)
    except KidneyError as e:
        return _fail(e.category, e, EXIT_CODES.get(e.category, EXIT_INTERNAL))
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}")
        return _fail("internal", e, EXIT_INTERNAL)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
