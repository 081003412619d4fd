"""Command-line entry point: data generation, training, inference, evaluation."""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Type, TypeVar

from pydantic import BaseModel

from common.config import ConfigError, Settings, get_settings, load_flat_config
from common.errors import BaseAppError
from common.logging_utils import configure_logging
from common.run_manifest import RunRecorder
from repositories.dataset_repo import DatasetItem, DatasetRepository
from schemas.config import SceneConfig, TrainConfig
from schemas.detections import TimingReport
from services.dataset_service import DatasetService, train_val_split
from services.evaluation_service import EvaluationService, write_report
from services.inference_service import BOUNDARY_CONF, DETECT_CONF, InferenceService, load_detector, load_gce
from services.training_service import (
    FoldSplit,
    configure_runtime,
    probe_gce,
    run_kfold_ablation,
    run_training,
    with_weights,
)

ConfigT = TypeVar("ConfigT", bound=BaseModel)
Handler = Callable[[argparse.Namespace, Settings, List[str]], int]


def _seed(value: str) -> int:
    seed = int(value)
    if seed < 0:
        raise argparse.ArgumentTypeError("seed must be >= 0")
    return seed


def _positive(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return number


def _seed_list(value: str) -> List[int]:
    return [_seed(token) for token in value.split(",") if token.strip()]


def _load_config(path: Optional[Path], model: Type[ConfigT], seed: Optional[int]) -> ConfigT:
    config = load_flat_config(path, model) if path is not None else model()
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    return config


@contextmanager
def _recording(recorder: RunRecorder, out_dir: Path) -> Iterator[RunRecorder]:
    try:
        yield recorder
    except BaseAppError as exc:
        recorder.finish(out_dir, error=exc.diagnostic())
        raise
    recorder.finish(out_dir)


def _split_items(
    repository: DatasetRepository, fold: Optional[int], folds_dir: Optional[Path]
) -> Tuple[List[DatasetItem], List[DatasetItem]]:
    if fold is None:
        return repository.load_items(), []
    train_ids, val_ids = train_val_split(repository.load_folds(folds_dir), fold)
    return repository.load_items(train_ids), repository.load_items(val_ids)


def _ablation_splits(repository: DatasetRepository, args: argparse.Namespace) -> List[FoldSplit]:
    folds = repository.load_folds(args.folds)
    held_out = range(len(folds)) if args.all_folds else [args.fold]
    splits = []
    for fold in held_out:
        train_ids, val_ids = train_val_split(folds, fold)
        splits.append(
            FoldSplit(fold=fold, train_items=repository.load_items(train_ids), val_items=repository.load_items(val_ids))
        )
    return splits


# --------------------------------------------------------------------- #
# Commands                                                              #
# --------------------------------------------------------------------- #


def cmd_gen_data(args: argparse.Namespace, settings: Settings, argv: List[str]) -> int:
    cfg = _load_config(args.config, SceneConfig, args.seed)
    recorder = RunRecorder("gen-data", argv, config_path=args.config, config=cfg, seed=cfg.seed)
    with _recording(recorder, args.out):
        repository = DatasetRepository(args.out)
        DatasetService(repository).generate(cfg, args.count, folds=args.folds)
        recorder.add_output(repository.annotation_path)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_relmap(args: argparse.Namespace, settings: Settings, argv: List[str]) -> int:
    recorder = RunRecorder("relmap", argv)
    with _recording(recorder, args.out):
        written = DatasetService(DatasetRepository(args.dataset)).export_relation_maps(
            args.out, downsample=args.downsample
        )
        for path in written:
            recorder.add_output(path)
    print(f"wrote {len(written)} relation maps to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace, settings: Settings, argv: List[str]) -> int:
    cfg = _load_config(args.config, TrainConfig, args.seed)
    if args.alpha_r is not None or args.alpha_e is not None:
        cfg = with_weights(
            cfg,
            alpha_r=cfg.weights.alpha_r if args.alpha_r is None else args.alpha_r,
            alpha_e=cfg.weights.alpha_e if args.alpha_e is None else args.alpha_e,
        )
    if args.epochs_per_step is not None:
        cfg = cfg.model_copy(update={"epochs_per_step": args.epochs_per_step})

    recorder = RunRecorder("train", argv, config_path=args.config, config=cfg, seed=cfg.seed)
    with _recording(recorder, args.out):
        configure_runtime(settings.runtime.num_threads)
        train_items, val_items = _split_items(DatasetRepository(args.dataset), args.fold, args.folds)
        summary = run_training(
            train_items,
            cfg,
            args.out,
            val_items=val_items or None,
            num_workers=settings.runtime.num_workers,
        )
        recorder.add_output(args.out / "training_summary.json")
        for path in summary.checkpoints.values():
            recorder.add_output(path)
        if summary.loss_log:
            recorder.add_output(summary.loss_log)

    print(f"trained {summary.detector_steps} detector / {summary.gce_steps} evaluator steps")
    if summary.validation is not None:
        print(f"validation AP={summary.validation.ap} AP50={summary.validation.ap50} recall={summary.validation.recall}")
    return 0


def cmd_infer(args: argparse.Namespace, settings: Settings, argv: List[str]) -> int:
    recorder = RunRecorder("infer", argv, config_path=args.ckpt)
    with _recording(recorder, args.out):
        configure_runtime(settings.runtime.num_threads)
        service = InferenceService(load_detector(args.ckpt))
        records, timing, written = service.detect_directory(args.images, args.out, conf=args.conf, top_k=args.topk)
        for path in written:
            recorder.add_output(path)

    mean = "-" if timing.mean_ms is None else f"{timing.mean_ms:.2f} ms"
    print(f"{len(records)} detections over {len(timing.images)} images, mean time per image {mean}")
    return 0


def cmd_boundary(args: argparse.Namespace, settings: Settings, argv: List[str]) -> int:
    recorder = RunRecorder("boundary", argv, config_path=args.ckpt)
    with _recording(recorder, args.out):
        configure_runtime(settings.runtime.num_threads)
        service = InferenceService(load_detector(args.ckpt))
        records, written = service.boundary_directory(args.images, args.out, conf=args.conf)
        for path in written:
            recorder.add_output(path)
    print(f"wrote {len(records)} boundary polylines to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace, settings: Settings, argv: List[str]) -> int:
    out_dir = args.out or args.dets.parent
    recorder = RunRecorder("eval", argv)
    with _recording(recorder, out_dir):
        speed_ms = None
        if args.timing is not None:
            speed_ms = TimingReport.model_validate_json(args.timing.read_text(encoding="utf-8")).mean_ms
        report = EvaluationService().evaluate_files(args.dets, args.gt, folds_dir=args.folds, speed_ms=speed_ms)
        recorder.add_output(write_report(report, out_dir / "metrics.json"))
    print(report.table())
    return 0


def cmd_ablate(args: argparse.Namespace, settings: Settings, argv: List[str]) -> int:
    cfg = _load_config(args.config, TrainConfig, None)
    if args.epochs_per_step is not None:
        cfg = cfg.model_copy(update={"epochs_per_step": args.epochs_per_step})
    recorder = RunRecorder("ablate", argv, config_path=args.config, config=cfg, seed=args.seeds[0])
    with _recording(recorder, args.out):
        configure_runtime(settings.runtime.num_threads)
        report = run_kfold_ablation(
            _ablation_splits(DatasetRepository(args.dataset), args),
            cfg,
            args.seeds,
            args.out,
            alpha_e_sweep=args.alpha_e_sweep,
            num_workers=settings.runtime.num_workers,
        )
        path = args.out / "ablation.json"
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        recorder.add_output(path)
    print(report.table())
    return 0


def cmd_score_gce(args: argparse.Namespace, settings: Settings, argv: List[str]) -> int:
    recorder = RunRecorder("score-gce", argv, config_path=args.ckpt)
    with _recording(recorder, args.out):
        configure_runtime(settings.runtime.num_threads)
        repository = DatasetRepository(args.dataset)
        train_items, val_items = _split_items(repository, args.fold, args.folds)
        report = probe_gce(load_detector(args.ckpt / "detector"), load_gce(args.ckpt / "gce"), val_items or train_items)
        path = args.out / "gce_probe.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        recorder.add_output(path)
    print(f"real pairs {report.real_mean:.4f}  predicted pairs {report.predicted_mean:.4f}")
    return 0


def cmd_serve(args: argparse.Namespace, settings: Settings, argv: List[str]) -> int:
    import uvicorn

    if args.ckpt is not None:
        os.environ["LANDMARK_CHECKPOINT"] = str(args.ckpt)
        get_settings.cache_clear()

    from main import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level=settings.log_level.lower())
    return 0


# --------------------------------------------------------------------- #
# Parser                                                                #
# --------------------------------------------------------------------- #


def _add_fold_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--fold", type=int, default=None, help="held-out fold index")
    parser.add_argument("--folds", type=Path, default=None, help="fold manifest directory (default: <dataset>/folds)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landmarks", description="Shape-aware landmark detection toolkit")
    parser.add_argument("--log-level", default=None, help="overrides LANDMARK_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--config", type=Path, default=None)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--count", type=int, default=250)
    gen.add_argument("--folds", type=int, default=5)
    gen.add_argument("--seed", type=_seed, default=None)
    gen.set_defaults(handler=cmd_gen_data)

    relmap = commands.add_parser("relmap", help="export ground-truth relation heatmaps")
    relmap.add_argument("--dataset", type=Path, required=True)
    relmap.add_argument("--out", type=Path, required=True)
    relmap.add_argument("--downsample", type=int, default=4)
    relmap.set_defaults(handler=cmd_relmap)

    train = commands.add_parser("train", help="run the three-phase training")
    train.add_argument("--config", type=Path, default=None)
    train.add_argument("--dataset", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--alpha-r", type=float, default=None, help="relation heatmap weight (0 disables)")
    train.add_argument("--alpha-e", type=float, default=None, help="adversarial weight (0 disables the evaluator)")
    train.add_argument("--epochs-per-step", type=_positive, default=None)
    train.add_argument("--seed", type=_seed, default=None)
    _add_fold_args(train)
    train.set_defaults(handler=cmd_train)

    infer = commands.add_parser("infer", help="detect landmarks in a directory of images")
    infer.add_argument("--ckpt", type=Path, required=True)
    infer.add_argument("--images", type=Path, required=True)
    infer.add_argument("--out", type=Path, required=True)
    infer.add_argument("--conf", type=float, default=DETECT_CONF)
    infer.add_argument("--topk", type=int, default=20)
    infer.set_defaults(handler=cmd_infer)

    boundary = commands.add_parser("boundary", help="draw boundary polylines from detections")
    boundary.add_argument("--ckpt", type=Path, required=True)
    boundary.add_argument("--images", type=Path, required=True)
    boundary.add_argument("--out", type=Path, required=True)
    boundary.add_argument("--conf", type=float, default=BOUNDARY_CONF)
    boundary.set_defaults(handler=cmd_boundary)

    evaluate = commands.add_parser("eval", help="score a detections document against ground truth")
    evaluate.add_argument("--dets", type=Path, required=True)
    evaluate.add_argument("--gt", type=Path, required=True)
    evaluate.add_argument("--folds", type=Path, default=None)
    evaluate.add_argument("--timing", type=Path, default=None, help="timing.json written by infer")
    evaluate.add_argument("--out", type=Path, default=None)
    evaluate.set_defaults(handler=cmd_eval)

    ablate = commands.add_parser("ablate", help="train every regularisation setting over several seeds")
    ablate.add_argument("--config", type=Path, default=None)
    ablate.add_argument("--dataset", type=Path, required=True)
    ablate.add_argument("--out", type=Path, required=True)
    ablate.add_argument("--seeds", type=_seed_list, default=[0, 1, 2])
    ablate.add_argument("--epochs-per-step", type=_positive, default=None)
    ablate.add_argument("--alpha-e-sweep", action="store_true")
    ablate.add_argument("--folds", type=Path, default=None)
    ablate.add_argument("--fold", type=int, default=0)
    ablate.add_argument("--all-folds", action="store_true", help="hold out every fold in turn and average")
    ablate.set_defaults(handler=cmd_ablate)

    probe = commands.add_parser("score-gce", help="mean evaluator scores on real and predicted pairs")
    probe.add_argument("--ckpt", type=Path, required=True, help="phase checkpoint directory holding detector/ and gce/")
    probe.add_argument("--dataset", type=Path, required=True)
    probe.add_argument("--out", type=Path, required=True)
    _add_fold_args(probe)
    probe.set_defaults(handler=cmd_score_gce)

    serve = commands.add_parser("serve", help="run the HTTP inference service")
    serve.add_argument("--ckpt", type=Path, default=None)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(handler=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv_list = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv_list)
    try:
        settings = get_settings()
    except ConfigError as exc:
        print(f"error[config_error]: {exc}", file=sys.stderr)
        return 1

    configure_logging(args.log_level or settings.log_level)
    handler: Handler = args.handler
    try:
        return handler(args, settings, argv_list)
    except BaseAppError as exc:
        print(exc.diagnostic(), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
