"""Operator entry points: train, calibrate, infer, evaluate, sweep,
phantom, serve.

Exit codes: 0 success, 2 config/usage, 3 data or IO, 4 model mismatch,
1 unexpected failure. Every command is deterministic under --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config, write_effective_config
from .errors import CheckpointError, ConfigError, ValidationError

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4


def _load_healthy_slices(config: PipelineConfig):
    """Training/validation slices per the [data] section."""
    from .phantom import generate_phantom_set

    data = config.data
    if data.kind == "phantom":
        spec = dataclasses.replace(config.phantom.spec, lesion=False)
        train, _ = generate_phantom_set(spec, config.phantom.count)
        val, _ = generate_phantom_set(
            spec, config.phantom.validation_count, seed_offset=10_000_000
        )
        return train, val
    if data.kind == "dataset":
        from .data import load_slice_dataset

        slices, _ = load_slice_dataset(data.dataset_dir)
        n_val = max(1, int(round(0.1 * len(slices))))
        return slices[n_val:], slices[:n_val]
    if data.kind == "nifti_dir":
        from .data import extract_slices, load_volume

        root = Path(data.nifti_dir)
        if not root.is_dir():
            raise ValidationError(f"nifti_dir {root} is not a directory")
        slices = []
        for path in sorted(root.glob("*.nii*")):
            volume = load_volume(path)
            slices.extend(
                extract_slices(
                    volume,
                    axis=data.axis,
                    min_brain_fraction=data.min_brain_fraction,
                    subject_id=path.stem.replace(".nii", ""),
                    modality=data.modality,
                )
            )
        if not slices:
            raise ValidationError(f"no usable slices under {root}")
        n_val = max(1, int(round(0.1 * len(slices))))
        return slices[n_val:], slices[:n_val]
    raise ConfigError(f"unknown data kind {data.kind!r}")


def _load_eval_dataset(dataset_dir: str):
    from .data import load_slice_dataset

    slices, lesions = load_slice_dataset(dataset_dir)
    return slices, lesions


def cmd_phantom(args, config: PipelineConfig) -> int:
    from .data import save_slice_dataset
    from .phantom import generate_phantom_set

    spec = config.phantom.spec
    if args.lesion:
        spec = dataclasses.replace(spec, lesion=True)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    count = args.count or config.phantom.count
    out = Path(args.out or "phantoms")
    slices, lesions = generate_phantom_set(spec, count)
    manifest = save_slice_dataset(out, slices, lesions)
    write_effective_config(config, out / "config.ini")
    print(f"wrote {count} phantoms to {out} (manifest: {manifest})")
    return EXIT_OK


def cmd_train(args, config: PipelineConfig) -> int:
    from .models import KIND_MAIN_NO_GUIDE, train_init, train_main

    train_config = config.train
    if args.seed is not None:
        train_config = dataclasses.replace(train_config, seed=args.seed)
    if args.device:
        train_config = dataclasses.replace(train_config, device=args.device)
    if args.epochs:
        train_config = dataclasses.replace(train_config, epochs=args.epochs)
    out = Path(args.out or "models/run")
    out.mkdir(parents=True, exist_ok=True)

    healthy, _ = _load_healthy_slices(config)
    print(f"training on {len(healthy)} healthy slices -> {out}")

    init_model, init_log = train_init(healthy, train_config, checkpoint_dir=out)
    init_log.write_jsonl(out / "train_init.jsonl")
    print(f"init model: val loss {init_log.losses('val')[-1]:.5f}")

    main_model, main_log = train_main(healthy, train_config, checkpoint_dir=out)
    main_log.write_jsonl(out / "train_main.jsonl")
    print(f"main model: val loss {main_log.losses('val')[-1]:.5f}")

    if args.ablation:
        ng_model, ng_log = train_main(
            healthy, train_config, checkpoint_dir=out, kind=KIND_MAIN_NO_GUIDE
        )
        ng_log.write_jsonl(out / "train_main_no_guide.jsonl")
        print(f"no-guide model: val loss {ng_log.losses('val')[-1]:.5f}")

    write_effective_config(config, out / "config.ini")
    return EXIT_OK


def cmd_calibrate(args, config: PipelineConfig) -> int:
    from .calibration import calibrate_tau
    from .models import load_checkpoint

    model_dir = Path(args.model_dir)
    main_model = load_checkpoint(model_dir / "main.pt", device=args.device or "cpu")
    _, validation = _load_healthy_slices(config)
    percentile = args.percentile or config.percentile
    seed = args.seed if args.seed is not None else config.seed
    result = calibrate_tau(
        validation, main_model, percentile, config.train.mask_config, seed=seed
    )
    out_path = model_dir / "calibration.json"
    out_path.write_text(json.dumps(result.to_dict(), indent=2))
    print(f"tau = {result.tau:.6f} (percentile {percentile}, {result.sample_count} samples)")
    print(f"wrote {out_path}")
    return EXIT_OK


def _resolve_tau(args, config: PipelineConfig, model_dir: Path) -> float:
    if args.tau is not None:
        return args.tau
    calib_path = model_dir / "calibration.json"
    if not calib_path.exists():
        raise ConfigError(
            f"no --tau given and {calib_path} does not exist; run `calibrate` first"
        )
    from .calibration import CalibrationResult

    calibration = CalibrationResult.from_dict(json.loads(calib_path.read_text()))
    percentile = args.percentile or config.percentile
    return calibration.tau_for_percentile(percentile)


def cmd_infer(args, config: PipelineConfig) -> int:
    from .models import load_checkpoint
    from .refinement import RefinementConfig, export_trace, run_refinement

    model_dir = Path(args.model_dir)
    main_model = load_checkpoint(model_dir / "main.pt", device=args.device or "cpu")
    init_model = load_checkpoint(model_dir / "init.pt", device=args.device or "cpu")
    tau = _resolve_tau(args, config, model_dir)
    radius = main_model.radius if main_model.radius is not None else config.refinement.radius
    refine = RefinementConfig(
        tau=tau,
        first_shrink_percentile=config.refinement.first_shrink_percentile,
        termination_fraction=config.refinement.termination_fraction,
        max_iterations=config.refinement.max_iterations,
        radius=radius,
    )
    seed = args.seed if args.seed is not None else config.seed

    slices, _ = _load_eval_dataset(args.data)
    out = Path(args.out or "inference")
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for i, slc in enumerate(slices):
        trace = run_refinement(
            slc.pixels, slc.brain_mask, main_model, init_model, refine, seed=seed
        )
        slice_dir = out / f"slice_{i:05d}"
        export_trace(trace, slice_dir)
        np.save(slice_dir / "segmentation.npy", trace.final_segmentation.plane)
        rows.append(
            {
                "slice": i,
                "subject_id": slc.subject_id,
                "iterations": len(trace.states),
                "termination_reason": trace.termination_reason,
                "segmentation_area": trace.final_segmentation.area,
            }
        )
    (out / "summary.json").write_text(json.dumps({"tau": tau, "slices": rows}, indent=2))
    write_effective_config(
        dataclasses.replace(config, refinement=refine, seed=seed), out / "config.ini"
    )
    print(f"segmented {len(slices)} slices -> {out}")
    return EXIT_OK


def cmd_evaluate(args, config: PipelineConfig) -> int:
    from .masking import SpatialMask
    from .metrics import evaluate_segmentations

    slices, lesions = _load_eval_dataset(args.data)
    if lesions is None:
        raise ValidationError(f"dataset {args.data} carries no ground-truth lesion masks")
    pred_root = Path(args.pred)
    predictions = []
    for i in range(len(slices)):
        seg_path = pred_root / f"slice_{i:05d}" / "segmentation.npy"
        if not seg_path.exists():
            raise ValidationError(f"missing prediction {seg_path}")
        predictions.append(SpatialMask(np.load(seg_path)))

    report = evaluate_segmentations(
        predictions, lesions, [s.subject_id for s in slices]
    )
    payload = report.to_dict()

    if args.oracle:
        payload["oracle"] = _oracle_rows(args, config, slices, lesions, pred_root)

    out = Path(args.out or "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(payload, indent=2))
    (out / "metrics.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return EXIT_OK


def _oracle_rows(args, config, slices, lesions, pred_root):
    # Oracle replay needs the traces; re-run refinement with the persisted
    # inference config so masks and error maps are reconstructed exactly.
    run_config = load_config(pred_root / "config.ini")
    from .models import load_checkpoint
    from .metrics import best_iteration_oracle, dice
    from .refinement import run_refinement

    model_dir = Path(args.model_dir)
    main_model = load_checkpoint(model_dir / "main.pt")
    init_model = load_checkpoint(model_dir / "init.pt")
    schedule = sorted(
        {run_config.refinement.tau * f for f in (0.6, 0.8, 1.0, 1.25, 1.6)}
    )
    rows = []
    for slc, gt in zip(slices, lesions):
        trace = run_refinement(
            slc.pixels,
            slc.brain_mask,
            main_model,
            init_model,
            run_config.refinement,
            seed=run_config.seed,
        )
        base = dice(trace.final_segmentation, gt)
        best_iter, best_dice, _ = best_iteration_oracle(trace, gt, schedule)
        rows.append(
            {
                "subject_id": slc.subject_id,
                "pipeline_dice": base,
                "oracle_dice": best_dice,
                "oracle_iteration": best_iter,
            }
        )
    return rows


def cmd_sweep(args, config: PipelineConfig) -> int:
    from .calibration import (
        collect_masked_errors,
        sensitivity_sweep_radius,
        sensitivity_sweep_tau,
    )
    from .models import load_checkpoint

    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    slices, lesions = _load_eval_dataset(args.data)
    if lesions is None:
        raise ValidationError("sweep needs a labeled dataset")
    eval_set = list(zip(slices, lesions))
    seed = args.seed if args.seed is not None else config.seed
    out = Path(args.out or "sweep")
    out.mkdir(parents=True, exist_ok=True)

    if args.kind == "tau":
        model_dir = Path(args.model_dir)
        main_model = load_checkpoint(model_dir / "main.pt")
        init_model = load_checkpoint(model_dir / "init.pt")
        _, validation = _load_healthy_slices(config)
        pool, _ = collect_masked_errors(
            validation, main_model, config.train.mask_config, seed=seed
        )
        refine = dataclasses.replace(
            config.refinement,
            radius=main_model.radius if main_model.radius is not None else config.refinement.radius,
        )
        rows = sensitivity_sweep_tau(
            eval_set, main_model, init_model, grid, refine, pool, seed=seed
        )
        x_key, x_label = "percentile", "calibration percentile"
    else:
        healthy, validation = _load_healthy_slices(config)
        rows = sensitivity_sweep_radius(
            healthy, validation, eval_set, grid, config.train, config.percentile
        )
        x_key, x_label = "radius", "guide radius (px)"

    (out / f"sweep_{args.kind}.json").write_text(json.dumps(rows, indent=2))
    _plot_sweep(rows, x_key, x_label, out / f"sweep_{args.kind}.png")
    for row in rows:
        print(row)
    return EXIT_OK


def _plot_sweep(rows, x_key, x_label, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r[x_key] for r in rows], [r["mean_dice"] for r in rows], marker="o")
    ax.set_xlabel(x_label)
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_serve(args, config: PipelineConfig) -> int:
    from .service import ServiceConfig, run_service

    service = config.service
    if args.model_dir:
        service = dataclasses.replace(service, model_dir=args.model_dir)
    if args.port:
        service = dataclasses.replace(service, port=args.port)
    service = ServiceConfig.with_env_overrides(**dataclasses.asdict(service))
    run_service(service)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskrefine",
        description="Iterative mask-shrinking anomaly segmentation pipeline",
    )
    parser.add_argument("--config", help="INI config file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override every RNG seed")
    parser.add_argument("--device", default=None, help="torch device (default cpu)")
    parser.add_argument("--out", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom slice dataset")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--lesion", action="store_true")

    p = sub.add_parser("train", help="train init + main models on healthy slices")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--ablation", action="store_true", help="also train the no-guide variant")

    p = sub.add_parser("calibrate", help="derive tau from healthy validation errors")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--percentile", type=float, default=None)

    p = sub.add_parser("infer", help="run iterative refinement over a dataset")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True, help="slice dataset directory")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--percentile", type=float, default=None)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="inference output directory")
    p.add_argument("--data", required=True, help="dataset directory with lesion masks")
    p.add_argument("--model-dir", default=None, help="needed with --oracle")
    p.add_argument("--oracle", action="store_true", help="add per-image best-iteration rows")

    p = sub.add_parser("sweep", help="tau or radius sensitivity sweep")
    p.add_argument("--kind", choices=("tau", "radius"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--model-dir", default=None)
    p.add_argument("--data", required=True)

    p = sub.add_parser("serve", help="start the interactive session service")
    p.add_argument("--model-dir", default=None)
    p.add_argument("--port", type=int, default=None)

    return parser


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ValidationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort categorization
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
