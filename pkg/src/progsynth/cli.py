"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Errors go to stderr
as a single line ``progsynth: error: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from progsynth import io
from progsynth.baselines import Baseline3DConfig, synthesize_3dgan, train_2dgan, train_3dgan
from progsynth.metrics import compare_reports, evaluate_volumes
from progsynth.phantom import generate_dataset
from progsynth.pipeline import PipelineConfig, PipelineHistory, PipelineModels, run_pipeline
from progsynth.volume import Orientation

CANONICAL_STAGES = ("axial", "coronal", "sagittal")


class UsageError(Exception):
    pass


def parse_stages(text: str) -> list[str]:
    stages = [s.strip().lower() for s in text.split(",") if s.strip()]
    if not stages or stages[0] != "axial":
        raise UsageError("--stages must start with axial")
    if any(s not in CANONICAL_STAGES for s in stages) or len(set(stages)) != len(stages):
        raise UsageError(f"--stages must be a subset of {','.join(CANONICAL_STAGES)} without repeats")
    if [CANONICAL_STAGES.index(s) for s in stages] != sorted(CANONICAL_STAGES.index(s) for s in stages):
        raise UsageError("--stages must follow the order axial,coronal,sagittal")
    return stages


def _add_training_args(p: argparse.ArgumentParser, epochs: int, base: int, depth: int):
    p.add_argument("--data", required=True, help="dataset directory with train/ and val/ splits")
    p.add_argument("--out", required=True, help="output model directory")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=base)
    p.add_argument("--depth", type=int, default=depth)
    p.add_argument("--lambda-pix", type=float, default=100.0)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--no-select", action="store_true", help="keep last-epoch weights instead of best validation PSNR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progsynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic phantom datasets")
    psub = phantom.add_subparsers(dest="phantom_command", required=True)
    gen = psub.add_parser("gen", help="generate a train/val/test phantom dataset")
    gen.add_argument("--n-train", type=int, default=35)
    gen.add_argument("--n-val", type=int, default=5)
    gen.add_argument("--n-test", type=int, default=10)
    gen.add_argument("--size", type=int, default=32)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--noise-std", type=float, default=0.02)
    gen.add_argument("--out", required=True)
    gen.add_argument("--overwrite", action="store_true")

    train = sub.add_parser("train", help="train the progressive pipeline")
    _add_training_args(train, epochs=8, base=16, depth=3)
    train.add_argument("--stages", default="axial,coronal,sagittal")
    train.add_argument("--refine-with-sources", action="store_true",
                       help="also feed PD/T2 slices to the refinement stages")

    base = sub.add_parser("train-baseline", help="train a comparison model")
    base.add_argument("--kind", choices=("2d", "3d"), required=True)
    _add_training_args(base, epochs=8, base=0, depth=0)

    syn = sub.add_parser("synthesize", help="synthesize T1 volumes for a split")
    syn.add_argument("--models", required=True)
    syn.add_argument("--input", required=True, help="split directory of subjects")
    syn.add_argument("--out", required=True)
    syn.add_argument("--upto", choices=CANONICAL_STAGES, default=None,
                     help="stop the pipeline after this stage")

    ev = sub.add_parser("evaluate", help="score synthesized volumes against references")
    ev.add_argument("--refs", required=True)
    ev.add_argument("--syns", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--method", default=None)
    ev.add_argument("--dataset-id", default=None)
    ev.add_argument("--seed", type=int, default=None)

    mon = sub.add_parser("montage", help="PGM montage of centre slices")
    mon.add_argument("--ref", required=True, help="reference volume (.ovol)")
    mon.add_argument("--volume", action="append", default=[], help="volume to compare (.ovol), repeatable")
    mon.add_argument("--label", action="append", default=[], help="label per --volume, in order")
    mon.add_argument("--out", required=True)

    cmp_ = sub.add_parser("report-compare", help="PSNR/FID deltas of report A relative to report B")
    cmp_.add_argument("--a", required=True)
    cmp_.add_argument("--b", required=True)
    return parser


def _pipeline_config(args, **extra) -> PipelineConfig:
    kwargs = dict(seed=args.seed, epochs=args.epochs, lambda_pix=args.lambda_pix, lr=args.lr,
                  select_on_val=not args.no_select, **extra)
    if args.batch_size:
        kwargs["batch_size"] = args.batch_size
    if args.base_channels:
        kwargs["base_channels"] = args.base_channels
    if args.depth:
        kwargs["depth"] = args.depth
    return PipelineConfig(**kwargs)


def cmd_phantom_gen(args) -> int:
    m = generate_dataset(args.n_train, args.n_val, args.n_test, args.size, args.seed, args.out,
                         noise_std=args.noise_std, overwrite=args.overwrite)
    print(f"wrote {sum(len(v) for v in m.splits.values())} subjects to {args.out} ({m.dataset_id})")
    return 0


def cmd_train(args) -> int:
    from progsynth.pipeline import train_pipeline

    stages = parse_stages(args.stages)
    refinements = tuple(Orientation(s) for s in stages[1:])
    cfg = _pipeline_config(args, refinements=refinements)
    train = io.load_split(Path(args.data) / "train")
    val = io.load_split(Path(args.data) / "val")
    models, history = train_pipeline(train, val, cfg)
    io.save_pipeline(args.out, models, history)
    for rec in history.stages:
        print(f"stage {rec.orientation}: best val PSNR {rec.best_val_psnr}")
    return 0


def cmd_train_baseline(args) -> int:
    train = io.load_split(Path(args.data) / "train")
    val = io.load_split(Path(args.data) / "val")
    if args.kind == "2d":
        cfg = _pipeline_config(args, refinements=())
        g, record = train_2dgan(train, val, cfg)
        history = PipelineHistory([record])
        io.save_pipeline(args.out, PipelineModels(g, config=cfg), history, method="2d-gan")
        print(f"2d-gan: best val PSNR {record.best_val_psnr}")
        return 0
    kwargs = dict(epochs=args.epochs, lambda_pix=args.lambda_pix, lr=args.lr, rng_seed=args.seed,
                  select_on_val=not args.no_select)
    if args.batch_size:
        kwargs["batch_size"] = args.batch_size
    if args.base_channels:
        kwargs["base_channels"] = args.base_channels
    if args.depth:
        kwargs["depth"] = args.depth
    g, hist = train_3dgan(train, val, Baseline3DConfig(**kwargs))
    io.save_volumetric(args.out, g, hist)
    print(f"3d-gan: trained {args.epochs} epochs, best epoch {hist.best_epoch}")
    return 0


def cmd_synthesize(args) -> int:
    manifest = io.read_manifest(args.models)
    subjects = io.load_split(args.input)
    if not subjects:
        raise ValueError(f"no subjects in {args.input}")
    order = manifest["stage_order"]
    method = manifest.get("method", "unknown")
    if order == ["volumetric"]:
        if args.upto:
            raise UsageError("--upto applies to slice-wise pipelines only")
        model = io.load_model(Path(args.models) / manifest["files"]["volumetric"])
        synth = lambda s: synthesize_3dgan(model, s)  # noqa: E731
        seed = manifest["config"].get("train", {}).get("rng_seed", model.seed)
    else:
        models = io.load_pipeline(args.models)
        upto = None
        if args.upto:
            if args.upto not in order:
                raise UsageError(f"--upto {args.upto}: stage not present in {args.models}")
            upto = order.index(args.upto) + 1
            if upto < len(order):
                method = f"{method}[{'-'.join(order[:upto])}]"
        synth = lambda s: run_pipeline(models, s, upto)[0]  # noqa: E731
        seed = models.config.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        d = out / s.id
        d.mkdir(exist_ok=True)
        io.write_volume(d / "T1.ovol", synth(s), {"subject": s.id, "contrast": "T1", "scale_max": 1.0, "seed": seed})
    dataset = io.read_dataset_manifest(Path(args.input).parent) or {}
    (out / "synthesis.json").write_text(json.dumps({
        "method": method,
        "seed": seed,
        "stages": order,
        "dataset_id": dataset.get("dataset_id", "unknown"),
    }, indent=2, sort_keys=True) + "\n")
    print(f"synthesized {len(subjects)} volumes with {method} into {out}")
    return 0


def cmd_evaluate(args) -> int:
    start = time.perf_counter()
    refs = io.load_volume_set(args.refs)
    syns = io.load_volume_set(args.syns)
    if sorted(refs) != sorted(syns):
        missing = sorted(set(refs) ^ set(syns))
        raise ValueError(f"reference and synthesis subjects differ: {missing[:5]}")
    meta_path = Path(args.syns) / "synthesis.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    dataset = io.read_dataset_manifest(Path(args.refs).parent) or {}
    ids = sorted(refs)
    report = evaluate_volumes(
        [refs[i] for i in ids],
        [syns[i] for i in ids],
        method=args.method or meta.get("method", "unknown"),
        dataset_id=args.dataset_id or dataset.get("dataset_id") or meta.get("dataset_id", "unknown"),
        seed=args.seed if args.seed is not None else meta.get("seed"),
        subjects=ids,
    )
    report.wall_seconds = time.perf_counter() - start
    io.write_report(args.report, report)
    print(f"{report.method}: PSNR {report.psnr_mean:.2f} +/- {report.psnr_std:.2f} dB, FID {report.fid:.4g}")
    return 0


def cmd_montage(args) -> int:
    if args.label and len(args.label) != len(args.volume):
        raise UsageError("give one --label per --volume")
    labels = args.label or [Path(p).parent.parent.name or Path(p).stem for p in args.volume]
    rows = [("reference", io.read_volume(args.ref))]
    rows += [(label, io.read_volume(p)) for label, p in zip(labels, args.volume)]
    io.write_montage(rows, args.out)
    print(f"wrote {len(rows)}-row montage to {args.out}")
    return 0


def cmd_report_compare(args) -> int:
    print(compare_reports(io.read_report(args.a), io.read_report(args.b)))
    return 0


COMMANDS = {
    "train": cmd_train,
    "train-baseline": cmd_train_baseline,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "montage": cmd_montage,
    "report-compare": cmd_report_compare,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = cmd_phantom_gen if args.command == "phantom" else COMMANDS[args.command]
    try:
        return handler(args)
    except UsageError as exc:
        print(f"progsynth: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"progsynth: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())
