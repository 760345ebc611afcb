"""Command-line entry point for the landmark detection pipeline.

Subcommands: train-detector, train-landmarks, train-all, predict, evaluate,
report and sweep. Dataset root, output directory and weights registry may
come from flags or the CEPHALO_DATA_ROOT / CEPHALO_OUTPUT_DIR /
CEPHALO_WEIGHTS_REGISTRY environment variables; flags take precedence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig
from .data import load_dataset, load_images, read_annotations, split_folds
from .decode import evaluate as evaluate_metrics
from .region import DetectorTrainConfig, load_detector, save_detector, train_detector

log = logging.getLogger("cephalo")


def _env_default(flag_value, env_name, fallback=None):
    if flag_value is not None:
        return flag_value
    return os.environ.get(env_name, fallback)


def _load_config(args) -> RunConfig:
    config = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    if getattr(args, "rcnn_pad", None) is not None:
        config = dataclasses.replace(config, rcnn_pad=args.rcnn_pad)
    if getattr(args, "fallback", None) is not None:
        config = dataclasses.replace(config, fallback=args.fallback)
    if getattr(args, "score_threshold", None) is not None:
        detector = dataclasses.replace(config.detector, score_threshold=args.score_threshold)
        config = dataclasses.replace(config, detector=detector)
    if getattr(args, "artefact_rate", None) is not None:
        aug = dataclasses.replace(config.augmentation, artefact_rate=args.artefact_rate)
        config = dataclasses.replace(config, augmentation=aug)
    if getattr(args, "top_k", None) is not None:
        config = dataclasses.replace(config, top_k=args.top_k)
    if getattr(args, "max_epochs", None) is not None:
        config = dataclasses.replace(config, max_epochs=args.max_epochs)
    if getattr(args, "device", None) is not None:
        config = dataclasses.replace(config, device=args.device)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "variant", None) is not None:
        spec = dataclasses.replace(config.model, variant=args.variant)
        config = dataclasses.replace(config, model=spec)
    if getattr(args, "weights", None) is not None:
        spec = dataclasses.replace(config.model, pretrained_weights_ref=args.weights)
        config = dataclasses.replace(config, model=spec)
    if getattr(args, "preprocess", None) is not None:
        config = dataclasses.replace(config, preprocess=args.preprocess)
    return config


def _require(value, name: str):
    if value is None:
        raise SystemExit(f"error: {name} is required (flag or environment variable)")
    return value


def _load_records(args, config: RunConfig):
    data_root = _require(_env_default(args.data_root, "CEPHALO_DATA_ROOT"), "--data-root")
    annotations = getattr(args, "annotations", None)
    if annotations:
        return load_dataset(data_root, annotations, ruler_length_mm=config.ruler_length_mm)
    ids = getattr(args, "image_ids", None)
    return load_images(data_root, image_ids=ids or None)


def _out_dir(args) -> Path:
    out = _require(_env_default(args.output_dir, "CEPHALO_OUTPUT_DIR", "runs"), "--output-dir")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train_detector(args) -> int:
    config = _load_config(args)
    records = _load_records(args, config)
    out_dir = _out_dir(args)
    train_cfg = DetectorTrainConfig(epochs=args.epochs, lr=args.detector_lr,
                                    pad=config.rcnn_pad, device=config.device,
                                    seed=config.seed)
    detector = train_detector(records, config.detector, train_cfg)
    path = out_dir / "detector.pt"
    save_detector(detector, path)
    config.to_yaml(out_dir / "run_config.yaml")
    print(f"detector checkpoint written to {path}")
    return 0


def cmd_train_landmarks(args) -> int:
    from .train import train_fold

    config = _load_config(args)
    records = _load_records(args, config)
    out_dir = _out_dir(args)
    detector = load_detector(args.detector) if args.detector else None
    folds = split_folds([r.image_id for r in records], config.n_folds, config.seed)
    state = train_fold(config, args.fold, records, folds.train_ids(args.fold),
                       folds.fold_ids(args.fold), out_dir, detector)
    config.to_yaml(out_dir / "run_config.yaml")
    print(f"fold {args.fold}: best val MRE {state.best_val_mre_mm:.4f} mm "
          f"-> {state.checkpoint_path}")
    return 0


def cmd_train_all(args) -> int:
    from .train import train_all

    config = _load_config(args)
    records = _load_records(args, config)
    out_dir = _out_dir(args)
    detector = load_detector(args.detector) if args.detector else None
    detector_train = None
    if detector is None and args.detector_epochs > 0:
        detector_train = DetectorTrainConfig(epochs=args.detector_epochs,
                                             pad=config.rcnn_pad, device=config.device,
                                             seed=config.seed)
    result = train_all(config, records, out_dir, detector=detector,
                       detector_train=detector_train)
    config.to_yaml(out_dir / "run_config.yaml")
    for row in result["metrics"]["folds"]:
        print(f"fold {row['fold']}: MRE {row['mre_mm']:.4f} mm, SDR {row['sdr_2mm_pct']:.2f}%")
    ens = result["metrics"]["ensemble"]
    print(f"ensemble: MRE {ens['mre_mm']:.4f} mm, SDR {ens['sdr_2mm_pct']:.2f}%")
    return 0


def cmd_predict(args) -> int:
    from .predict import predict_records, write_submission

    config = _load_config(args)
    records = _load_records(args, config)
    out_dir = _out_dir(args)
    detector = load_detector(args.detector) if args.detector else None
    bundles, failures = predict_records(config, args.checkpoints, records,
                                        detector=detector, preprocess=args.mode)
    path = out_dir / args.submission_name
    write_submission(bundles, path)
    print(f"wrote {len(bundles)} predictions to {path}")
    if failures:
        log.error("failed on %d image(s): %s", len(failures), ", ".join(failures))
        return 1
    return 0


def cmd_evaluate(args) -> int:
    from .predict import read_submission

    predictions = read_submission(args.predictions)
    annotations = read_annotations(args.annotations)
    preds, gts, spacings, ids = [], [], [], []
    for image_id, spacing, landmarks in annotations:
        if image_id not in predictions:
            log.warning("no prediction for image %s; skipped", image_id)
            continue
        preds.append(predictions[image_id])
        gts.append(landmarks.points)
        spacings.append(spacing)
        ids.append(image_id)
    if not preds:
        raise SystemExit("error: no overlapping image ids between predictions and annotations")
    report = evaluate_metrics(preds, gts, spacings, ids)
    out_dir = _out_dir(args)
    report.to_json(out_dir / "eval_report.json")
    print(f"MRE: {report.mre_mm:.4f} mm")
    print(f"SDR@2mm: {report.sdr_2mm_pct:.2f} %")
    return 0


def cmd_report(args) -> int:
    from .report import make_report

    artifacts = make_report(args.run_dir, args.output_dir)
    for path in artifacts:
        print(f"wrote {path}")
    return 0


def cmd_sweep(args) -> int:
    from .report import (ARTEFACT_SWEEP_DEFAULT, PADDING_SWEEP_DEFAULT,
                         TOPK_SWEEP_DEFAULT, run_artefact_sweep, run_padding_sweep,
                         run_topk_sweep)

    config = _load_config(args)
    records = _load_records(args, config)
    out_dir = _out_dir(args)
    if args.axis == "padding":
        values = PADDING_SWEEP_DEFAULT if not args.values else [
            v if v in ("pad_crop", "pad_resize") else int(v) for v in args.values]
        path = run_padding_sweep(config, records, out_dir, values=values, fold=args.fold)
    elif args.axis == "artefact-rate":
        rates = ARTEFACT_SWEEP_DEFAULT if not args.values else [float(v) for v in args.values]
        path = run_artefact_sweep(config, records, out_dir, rates=rates, fold=args.fold)
    else:
        if not args.checkpoints:
            raise SystemExit("error: top-k sweep needs --checkpoints")
        ks = TOPK_SWEEP_DEFAULT if not args.values else [int(v) for v in args.values]
        detector = load_detector(args.detector) if args.detector else None
        path = run_topk_sweep(config, args.checkpoints, records, out_dir, ks=ks,
                              detector=detector)
    print(f"sweep results written to {path}")
    return 0


def _add_common(parser: argparse.ArgumentParser, with_data=True):
    parser.add_argument("--config", help="RunConfig YAML file")
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--device", default=None)
    parser.add_argument("--seed", type=int, default=None)
    if with_data:
        parser.add_argument("--data-root", default=None)
        parser.add_argument("--annotations", default=None)
        parser.add_argument("--image-ids", nargs="*", default=None)


def _add_train_overrides(parser: argparse.ArgumentParser):
    parser.add_argument("--rcnn-pad", type=float, default=None)
    parser.add_argument("--fallback", choices=["none", "pad_crop", "pad_resize"], default=None)
    parser.add_argument("--score-threshold", type=float, default=None)
    parser.add_argument("--artefact-rate", type=float, default=None)
    parser.add_argument("--top-k", type=int, default=None)
    parser.add_argument("--max-epochs", type=int, default=None)
    parser.add_argument("--variant", choices=["nano", "tiny"], default=None)
    parser.add_argument("--weights", default=None, help="pretrained encoder weights ref")
    parser.add_argument("--preprocess", default=None,
                        choices=["gt_box", "detector", "pad_crop", "pad_resize"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cephalo",
                                     description="Cephalometric landmark detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-detector", help="fit the region detector on GT boxes")
    _add_common(p)
    _add_train_overrides(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--detector-lr", type=float, default=5e-3)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-landmarks", help="train one cross-validation fold")
    _add_common(p)
    _add_train_overrides(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--detector", default=None, help="detector checkpoint path")
    p.set_defaults(func=cmd_train_landmarks)

    p = sub.add_parser("train-all", help="train detector plus every fold")
    _add_common(p)
    _add_train_overrides(p)
    p.add_argument("--detector", default=None, help="reuse an existing detector checkpoint")
    p.add_argument("--detector-epochs", type=int, default=10)
    p.set_defaults(func=cmd_train_all)

    p = sub.add_parser("predict", help="run inference and write a submission CSV")
    _add_common(p)
    _add_train_overrides(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--detector", default=None)
    p.add_argument("--mode", default="detector",
                   choices=["detector", "gt_box", "pad_crop", "pad_resize"])
    p.add_argument("--submission-name", default="submission.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a submission CSV against annotations")
    p.add_argument("--predictions", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render sweep plots and the CV table")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    _add_common(p)
    _add_train_overrides(p)
    p.add_argument("axis", choices=["padding", "artefact-rate", "top-k"])
    p.add_argument("--values", nargs="*", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--checkpoints", nargs="*", default=None)
    p.add_argument("--detector", default=None)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
