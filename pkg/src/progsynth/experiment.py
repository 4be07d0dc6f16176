"""Desk-scale comparison run: phantoms -> progressive pipeline and baselines -> reports.

Every step goes through :func:`progsynth.cli.run_cli`, so a run exercises the
same surface a user would. Typical use::

    python -m progsynth.experiment --seed 7 --workdir runs/seed7
"""
from __future__ import annotations

import argparse
import contextlib
import io as _io
import json
import time
from pathlib import Path

import numpy as np

from progsynth import io
from progsynth.cli import run_cli
from progsynth.metrics import psnr
from progsynth.volume import Volume

METHODS = ("progressive", "stage-a", "2d-gan", "3d-gan")


class StepFailed(RuntimeError):
    pass


def _cli(*argv) -> str:
    out = _io.StringIO()
    err = _io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = run_cli([str(a) for a in argv])
    if code != 0:
        raise StepFailed(f"progsynth {' '.join(map(str, argv))} exited {code}: {err.getvalue().strip()}")
    return out.getvalue()


def constant_predictor_psnr(test_dir, value: float = 0.5) -> float:
    refs = io.load_volume_set(test_dir)
    return float(np.mean([psnr(v, Volume(np.full(v.dims, value, np.float32))) for v in refs.values()]))


def run_experiment(
    seed: int,
    workdir,
    *,
    n_train: int = 35,
    n_val: int = 5,
    n_test: int = 10,
    size: int = 32,
    noise_std: float = 0.02,
    epochs: int = 8,
    epochs_3d: int = 8,
) -> dict:
    """Run the full comparison for one master seed and return a summary dict."""
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    test = data / "test"
    t0 = time.perf_counter()
    _cli("phantom", "gen", "--n-train", n_train, "--n-val", n_val, "--n-test", n_test, "--size", size,
         "--seed", seed, "--noise-std", noise_std, "--out", data, "--overwrite")
    _cli("train", "--data", data, "--out", work / "models" / "progressive", "--seed", seed,
         "--epochs", epochs, "--stages", "axial,coronal,sagittal")
    _cli("train-baseline", "--kind", "2d", "--data", data, "--out", work / "models" / "2d-gan",
         "--seed", seed, "--epochs", epochs)
    _cli("train-baseline", "--kind", "3d", "--data", data, "--out", work / "models" / "3d-gan",
         "--seed", seed, "--epochs", epochs_3d)

    syn_args = {
        "progressive": ("--models", work / "models" / "progressive"),
        "stage-a": ("--models", work / "models" / "progressive", "--upto", "axial"),
        "2d-gan": ("--models", work / "models" / "2d-gan"),
        "3d-gan": ("--models", work / "models" / "3d-gan"),
    }
    reports = {}
    for method in METHODS:
        out = work / "syn" / method
        _cli("synthesize", *syn_args[method], "--input", test, "--out", out)
        path = work / "reports" / f"{method}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        _cli("evaluate", "--refs", test, "--syns", out, "--report", path, "--method", method)
        reports[method] = io.read_report(path)

    compare = {
        b: _cli("report-compare", "--a", work / "reports" / "progressive.json",
                "--b", work / "reports" / f"{b}.json").strip()
        for b in ("2d-gan", "3d-gan")
    }
    first = sorted(io.load_volume_set(test))[0]
    montage = work / "montage.pgm"
    _cli("montage", "--ref", test / first / "T1.ovol",
         "--volume", work / "syn" / "2d-gan" / first / "T1.ovol", "--label", "2D-GAN",
         "--volume", work / "syn" / "3d-gan" / first / "T1.ovol", "--label", "3D-GAN",
         "--volume", work / "syn" / "progressive" / first / "T1.ovol", "--label", "progressive A-C-S",
         "--out", montage)

    def cs(r):
        return (r.di_delta["coronal"] + r.di_delta["sagittal"]) / 2

    summary = {
        "seed": seed,
        "constant_psnr": constant_predictor_psnr(test),
        "psnr": {m: reports[m].psnr_mean for m in METHODS},
        "fid": {m: reports[m].fid for m in METHODS},
        "di_cs": {m: cs(reports[m]) for m in METHODS},
        "compare": compare,
        "montage": str(montage),
        "reports": {m: str(work / "reports" / f"{m}.json") for m in METHODS},
        "seconds": time.perf_counter() - t0,
    }
    summary["checks"] = {
        "a_stage_a_beats_constant": summary["psnr"]["stage-a"] - summary["constant_psnr"] >= 3.0,
        "b_refinement_non_destructive": summary["psnr"]["progressive"] >= summary["psnr"]["stage-a"] - 0.1,
        "c_discontinuity_not_worse": summary["di_cs"]["progressive"] <= summary["di_cs"]["2d-gan"],
    }
    (work / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def main(argv=None):
    p = argparse.ArgumentParser(description="desk-scale progressive vs baseline comparison")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--workdir", required=True)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--epochs-3d", type=int, default=8)
    args = p.parse_args(argv)
    summary = run_experiment(args.seed, args.workdir, epochs=args.epochs, epochs_3d=args.epochs_3d)
    print(json.dumps({k: summary[k] for k in ("psnr", "fid", "di_cs", "compare", "checks", "seconds")}, indent=2))


if __name__ == "__main__":
    main()
