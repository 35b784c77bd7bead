"""``cwflow`` command line: simulate, deconvolve, train, reconstruct, ood, finetune, metrics, gradcheck.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__, metrics, ood
from .archive import ArchiveError
from .config import RunConfig, validate
from .cwfa import CWFA, CWFAConfig, TrainReport, build_conditions, check_level_gradients, load_model, save_model, train
from .numerics import NumericalError
from .optics import (
    BEAD_DENSITY_PRESETS,
    SequenceDataset,
    adjoint_project,
    deconvolve_dataset,
    forward_project,
    gen_beads,
    gen_sequence,
)

log = logging.getLogger("cwflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _frames(spec: str | None, n: int) -> np.ndarray:
    """``"a:b"``, ``"a:"``, ``":b"`` or a comma list; None selects everything."""
    if spec is None:
        return np.arange(n)
    try:
        if ":" in spec:
            a, b = spec.split(":", 1)
            idx = np.arange(n)[slice(int(a) if a else None, int(b) if b else None)]
        else:
            idx = np.array([int(v) for v in spec.split(",") if v.strip()])
    except ValueError:
        raise UsageError(f"bad frame selection {spec!r}") from None
    if not len(idx):
        raise UsageError(f"frame selection {spec!r} is empty for {n} frames")
    if idx.min() < 0 or idx.max() >= n:
        raise UsageError(f"frame selection {spec!r} out of range for {n} frames")
    return idx


def _load_dataset(path) -> SequenceDataset:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return SequenceDataset.load(path)


def _load_checkpoint(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, meta = load_model(path)
    if "layout" not in meta:
        raise ArchiveError(f"{path}: checkpoint has no lenslet layout")
    return model, meta


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _set_threads(cfg: RunConfig) -> int:
    n = cfg.threads
    if n is None:
        env = os.environ.get("CWFLOW_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise UsageError(f"CWFLOW_THREADS must be an integer, got {env!r}") from None
    n = n or os.cpu_count() or 1
    if n < 1:
        raise UsageError("--threads must be >= 1")
    torch.set_num_threads(n)
    return n


# -- commands -----------------------------------------------------------------------------
def cmd_simulate(args, cfg: RunConfig) -> int:
    if args.frames < 1:
        raise UsageError(f"--frames must be >= 1, got {args.frames}")
    layout = cfg.make_layout()
    psf = cfg.make_psf(layout)
    if args.kind == "beads":
        bead = cfg.bead_config()
        if args.density_preset is not None:
            bead = replace(bead, density=BEAD_DENSITY_PRESETS[args.density_preset])
        ds = gen_beads(bead, psf, layout, args.frames)
    else:
        phantom = cfg.phantom_config()
        if args.background:
            phantom = replace(phantom, background=True)
        ds = gen_sequence(phantom, psf, layout, args.frames)
    ds.save(args.out)
    sparsity = float(np.mean(ds.volumes == 0))
    flux = float(ds.images.sum(axis=(1, 2)).mean())
    print(f"wrote {args.out}: kind={args.kind} frames={len(ds)} sparsity={sparsity:.4f} mean_flux={flux:.4g}")
    return EXIT_OK


def cmd_deconvolve(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.dataset)
    opts = cfg.rl_options()
    iterations = opts["iterations"] if args.iterations is None else args.iterations
    if iterations < 0:
        raise UsageError("--iterations must be >= 0")
    floor = None if args.no_sparsify else (opts["rel_floor"] if args.rel_floor is None else args.rel_floor)
    # in-run sanity checks on the forward model
    rng = np.random.default_rng(cfg.seed)
    v = rng.random((ds.psf.depth, *ds.psf.lateral)).astype(np.float32)
    img = rng.random(ds.psf.sensor_shape).astype(np.float32)
    lhs = float(np.vdot(forward_project(v, ds.psf).astype(np.float64), img))
    rhs = float(np.vdot(v.astype(np.float64), adjoint_project(img, ds.psf)))
    log.info("adjoint check: <Av, I> = %.6g, <v, A^T I> = %.6g, rel diff %.2e", lhs, rhs, abs(lhs - rhs) / abs(lhs))
    out = deconvolve_dataset(ds, iterations, floor)
    if iterations == 0:
        out.meta["flags"] = out.meta.get("flags", []) + ["zero_iterations_initialization_only"]
        log.warning("0 RL iterations: volumes are the uniform initialisation")
    flux_img = float(ds.images.sum())
    flux_est = float(sum(forward_project(vol, ds.psf).sum() for vol in out.volumes))
    log.info("flux check: images %.6g, forward(volumes) %.6g (ratio %.4f)", flux_img, flux_est, flux_est / max(flux_img, 1e-12))
    out.save(args.out)
    print(f"wrote {args.out}: frames={len(out)} rl_iterations={iterations} rel_floor={floor}")
    return EXIT_OK


def _cwfa_config(args, cfg: RunConfig) -> CWFAConfig:
    c = cfg.cwfa_config()
    overrides = {"alpha": args.alpha, "epochs": args.epochs, "epochs_per_level": args.epochs_per_level,
                 "learning_rate": args.lr, "levels": args.levels}
    return replace(c, **{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.dataset)
    idx = _frames(args.frames, len(ds))
    c = _cwfa_config(args, cfg)
    volumes = torch.from_numpy(ds.volumes[idx])
    model = CWFA(c, volumes.shape[1:], len(ds.layout))
    cond = build_conditions(ds.images[idx], ds.layout, volumes.mean(0))
    t0 = time.perf_counter()
    report = train(model, cond, volumes, c, TrainReport())
    seconds = time.perf_counter() - t0
    save_model(model, args.out, ds.layout, {"train_frames": idx.tolist()})
    doc = dict(report.to_dict(), wall_clock_seconds=seconds, n_parameters=model.n_parameters(),
               frames=idx.tolist(), config=c.__dict__)
    if args.report:
        _write_json(args.report, doc)
    for i in sorted(report.nll):
        print(f"level {i + 1}: nll {report.initial_nll[i]:.4f} -> {report.nll[i][-1]:.4f}")
    print(f"wrote {args.out}: {model.n_parameters()} parameters, {seconds:.1f} s")
    return EXIT_OK


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.dataset)
    idx = _frames(args.frames, len(ds))
    cond = build_conditions(ds.images[idx], meta["layout"], model.prior)
    temps = [args.temperature] if args.sweep is None else [float(t) for t in args.sweep.split(",")]
    if any(t < 0 for t in temps):
        raise UsageError("temperatures must be >= 0")
    table = []
    recon = None
    for t in temps:
        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.no_grad():
            vols = model.reconstruct(cond, t, gen).numpy()
        if recon is None:
            recon = vols
        psnr = float(np.mean([metrics.psnr(g, r) for g, r in zip(ds.volumes[idx], vols)]))
        table.append({"temperature": t, "psnr": psnr})
    out = ds.subset(idx)
    out = replace(out, volumes=recon, meta=dict(out.meta, reconstructed=True, temperature=temps[0],
                                                checkpoint=str(args.checkpoint)))
    out.save(args.out)
    if args.sweep is not None:
        print("temperature  psnr_db")
        for row in table:
            print(f"{row['temperature']:<11g}  {row['psnr']:.3f}")
        if args.report:
            _write_json(args.report, {"sweep": table})
    print(f"wrote {args.out}: frames={len(idx)} temperature={temps[0]}")
    return EXIT_OK


def _score_dataset(model, meta, path, label, frames, cfg, tag):
    ds = _load_dataset(path)
    idx = _frames(frames, len(ds))
    vols = ds.volumes[idx] if ds.meta.get("deconvolved") else None
    scores = ood.score_samples(model, ds.images[idx], vols, meta["layout"], psf=ds.psf,
                               rl_iterations=cfg.rl_options()["iterations"], label=label,
                               ids=[f"{tag}:{t}" for t in idx])
    with torch.no_grad():
        rec = model.reconstruct(build_conditions(ds.images[idx], meta["layout"], model.prior)).numpy()
    psnrs = [metrics.psnr(g, r) for g, r in zip(ds.volumes[idx], rec)]
    return scores, psnrs


def cmd_ood(args, cfg: RunConfig) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    sources = [(p, ood.UNKNOWN) for p in args.dataset] + [(p, ood.IN) for p in args.in_dist] + \
              [(p, ood.OUT) for p in args.out_dist]
    if not sources:
        raise UsageError("give at least one --dataset, --in-dist or --out-dist")
    scores, psnrs = [], []
    for k, (path, label) in enumerate(sources):
        s, p = _score_dataset(model, meta, path, label, args.frames, cfg, f"{k}:{Path(path).stem}")
        scores += s
        psnrs += p
    report = None
    if args.threshold_report:
        report = ood.ThresholdReport.from_dict(json.loads(Path(args.threshold_report).read_text()))
    labels = [s.label for s in scores]
    if ood.IN in labels and ood.OUT in labels:
        labelled = [s for s in scores if s.label != ood.UNKNOWN]
        fitted = ood.select_threshold(labelled, [s.label for s in labelled], args.n_thresholds, args.level)
        print(f"level {fitted.level}: AUC {fitted.auc:.4f}  F1 {fitted.f1:.4f}  threshold {fitted.threshold:.6g}")
        if args.save_threshold:
            _write_json(args.save_threshold, fitted.to_dict())
        report = report or fitted
    rows = ood.ood_report(scores, report, args.level)
    doc = {"level": report.level if report else args.level, "threshold": report.threshold if report else None,
           "auc": report.auc if report else None, "f1": report.f1 if report else None, "samples": rows}
    if args.report:
        _write_json(args.report, doc)
    if args.csv:
        ood.write_scatter_csv(args.csv, scores, psnrs, report.level if report else args.level)
    if not args.report:
        print(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    if args.mode == "append_all" and not args.existing:
        raise UsageError("--mode append_all needs --existing DATASET")
    model, meta = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.new_dataset)
    tr = _frames(args.train_frames, len(ds))
    ev = _frames(args.eval_frames, len(ds)) if args.eval_frames else np.setdiff1d(np.arange(len(ds)), tr)
    if not len(ev):
        raise UsageError("no held-out frames left for evaluation; pass --eval-frames")
    existing = None
    if args.existing:
        old = _load_dataset(args.existing)
        old_idx = np.asarray(meta.get("train_frames", range(len(old))))
        existing = (old.images[old_idx], old.volumes[old_idx])
    tuned, rep = ood.finetune(model, ds.images[tr], ds.volumes[tr], meta["layout"], ds.images[ev], ds.volumes[ev],
                              args.mode, existing, args.epochs, args.k, args.lr)
    save_model(tuned, args.out, meta["layout"], {"train_frames": tr.tolist(), "finetuned_from": str(args.checkpoint)})
    doc = rep.to_dict()
    if args.metrics:
        _write_json(args.metrics, doc)
    for key in ("psnr", "mape", "pcc"):
        print(f"{key}: {rep.before[key]:.4f} -> {rep.after[key]:.4f} ({rep.delta_pct[key]:+.2f}%)")
    print(f"wrote {args.out}: fine-tuned in {rep.seconds:.1f} s")
    return EXIT_OK


def cmd_metrics(args, cfg: RunConfig) -> int:
    gt = _load_dataset(args.gt)
    rc = _load_dataset(args.recon)
    if len(gt) != len(rc):
        raise ValueError(f"frame count mismatch: {len(gt)} ground-truth vs {len(rc)} reconstructed")
    res = metrics.evaluate(gt.volumes, rc.volumes, k=args.k)
    doc = {"frames": len(gt), "k": args.k, **{key: res[key] for key in
           ("psnr", "mape", "pcc_mean", "psnr_per_frame", "mape_per_frame", "pcc_per_neuron", "flags")}}
    validate(doc, "metrics")
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(f"psnr {doc['psnr']:.3f} dB  mape {doc['mape']:.4f}  pcc {doc['pcc_mean']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    shape = tuple(int(v) for v in args.shape.split(","))
    if len(shape) != 3:
        raise UsageError("--shape takes D,H,W")
    worst = 0.0
    for block in args.block_type:
        errs = check_level_gradients(shape, args.views, args.levels, args.level - 1, block, args.points, args.eps,
                                     args.max_coords, cfg.seed)
        worst = max(worst, max(errs))
        print(f"{block}: max relative error per point " + " ".join(f"{e:.2e}" for e in errs))
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser -------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, help="torch threads (default: $CWFLOW_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="cwflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cwflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset archive")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["phantom", "beads"], default="phantom")
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--density-preset", type=int, choices=sorted(BEAD_DENSITY_PRESETS))
    s.add_argument("--background", action="store_true", help="phantom with a static non-sparse background")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("deconvolve", parents=[common], help="replace volumes by Richardson-Lucy reconstructions")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, help="RL iterations (default 100)")
    s.add_argument("--rel-floor", type=float, help="sparsification floor (default 0.2)")
    s.add_argument("--no-sparsify", action="store_true")
    s.set_defaults(func=cmd_deconvolve)

    s = sub.add_parser("train", parents=[common], help="train a model on (image, volume) pairs")
    s.add_argument("dataset")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--report", help="training report JSON")
    s.add_argument("--frames", default="0:10", help="training frames, e.g. 0:10 (default)")
    s.add_argument("--alpha", type=float, help="spatial loss weight (default 0.48)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--epochs-per-level", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--levels", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct volumes from sensor images")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--temperature", "-T", type=float, default=0.0)
    s.add_argument("--sweep", help="comma-separated temperatures; prints a PSNR table")
    s.add_argument("--report", help="sweep table JSON")
    s.add_argument("--frames")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("ood", parents=[common], help="per-level NLL scores and OOD decisions")
    s.add_argument("checkpoint")
    s.add_argument("--dataset", action="append", default=[], help="unlabelled dataset (repeatable)")
    s.add_argument("--in-dist", action="append", default=[], help="in-distribution dataset (repeatable)")
    s.add_argument("--out-dist", action="append", default=[], help="out-of-distribution dataset (repeatable)")
    s.add_argument("--threshold-report", help="ThresholdReport JSON to classify with")
    s.add_argument("--save-threshold", help="write the selected ThresholdReport here")
    s.add_argument("--level", type=int, default=1, help="CWF step scored (1 = highest resolution)")
    s.add_argument("--n-thresholds", type=int, default=1000)
    s.add_argument("--frames")
    s.add_argument("--report", help="OOD report JSON (printed when omitted)")
    s.add_argument("--csv", help="score vs PSNR scatter CSV")
    s.set_defaults(func=cmd_ood)

    s = sub.add_parser("finetune", parents=[common], help="adapt a checkpoint to a new sample")
    s.add_argument("checkpoint")
    s.add_argument("new_dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["only_new", "append_all"], default="only_new")
    s.add_argument("--existing", help="original training dataset (append_all)")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float)
    s.add_argument("--train-frames", default="0:10")
    s.add_argument("--eval-frames", help="held-out frames (default: all others)")
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--metrics", help="before/after metrics JSON")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("metrics", parents=[common], help="PSNR / masked MAPE / PCC between two datasets")
    s.add_argument("gt")
    s.add_argument("recon")
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the level loss gradient")
    s.add_argument("--shape", default="4,4,4", help="D,H,W")
    s.add_argument("--views", type=int, default=2)
    s.add_argument("--levels", type=int, default=1)
    s.add_argument("--level", type=int, default=1, help="CWF step checked (1-based)")
    s.add_argument("--block-type", action="append", choices=["affine", "coupling"])
    s.add_argument("--points", type=int, default=5)
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--max-coords", type=int)
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "block_type", None) is None and args.command == "gradcheck":
        args.block_type = ["affine"]
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _run_config(args)
        threads = _set_threads(cfg)
        resolved = dict(cfg.resolved(), threads=threads, command=args.command,
                        args={k: v for k, v in vars(args).items() if k != "func"})
        log.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))
        torch.manual_seed(cfg.seed)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"cwflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"cwflow {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ArchiveError, ValueError, KeyError, OSError) as exc:
        print(f"cwflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
