"""Command-line front end (``ttb``).

Subcommands: ``synth``, ``complete``, ``metrics``, ``augment``, ``deaugment``.
Options may also come from a JSON file given by ``--config``; explicit flags
win over the file, which wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import BASIC, PADDED, AugmentPlan, augment, augment_mask, deaugment, default_plan
from .data import (
    SynthSpec,
    add_noise,
    gen_synthetic,
    metric_report,
    random_mask,
    snr_db,
    to_jsonable,
)
from .formats import FormatError, read_image, read_mask, read_tensor, write_image, write_mask, write_tensor
from .model import load_state, save_state
from .ttsvd import InitConfig
from .vi import FitError, FitOptions, fit, reconstruct

log = logging.getLogger("bayestt")

EXIT_CONVERGED, EXIT_FAILED, EXIT_MAX_ITERS = 0, 1, 2
IMAGE_SUFFIXES = {".pgm", ".ppm", ".pnm"}
# starting point for image fits: pixel data on [0, 1] would otherwise start at
# E[tau] = 1 (about -6 dB) where the all-zero reconstruction is self-consistent
IMAGE_INIT_VARIANCE = 1e-8
IMAGE_INIT_SNR_DB = 20.0


def _int_list(text: str) -> list:
    return [int(x) for x in str(text).replace("x", ",").split(",") if x.strip()]


def _float_or_inf(text) -> float:
    return math.inf if str(text).lower() in ("inf", "+inf", "none") else float(text)


def _is_image(path) -> bool:
    return Path(path).suffix.lower() in IMAGE_SUFFIXES


def _load_array(path) -> np.ndarray:
    return read_image(path) if _is_image(path) else read_tensor(path)


def _resolve_seed(seed):
    """Use the given seed, or draw fresh entropy that the manifest then records."""
    if seed is None:
        return int(np.random.SeedSequence().entropy % (2**63))
    return int(seed)


def _emit(obj: dict, args, path=None) -> None:
    text = json.dumps(to_jsonable(obj), indent=2)
    if path:
        Path(path).write_text(text + "\n")
    if args.stdout:
        sys.stdout.write(text + "\n")


# --- synth --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_seed = _resolve_seed(args.seed)
    dims = _int_list(args.dims)
    ranks = _int_list(args.ranks)
    snr = _float_or_inf(args.snr)
    runs = []
    for i in range(args.repeat):
        seed = base_seed + i
        core_ss, noise_ss, mask_ss = np.random.SeedSequence(seed).spawn(3)
        truth, _ = gen_synthetic(SynthSpec(dims, ranks, core_ss))
        noisy, noise = add_noise(truth, snr, noise_ss)
        mask = random_mask(dims, args.missing, mask_ss)
        tag = f"{args.prefix}_s{seed}"
        files = {
            "truth": str(out / f"{tag}_truth.ttn"),
            "observed": str(out / f"{tag}_observed.ttn"),
            "mask": str(out / f"{tag}_mask.ttm"),
        }
        write_tensor(files["truth"], truth)
        write_tensor(files["observed"], noisy)
        write_mask(files["mask"], mask)
        runs.append(
            {
                "seed": seed,
                "files": files,
                "requested_snr_db": snr,
                "realized_snr_db": snr_db(truth, noise),
                "observed_fraction": float(mask.mean()),
            }
        )
    manifest = {
        "command": "synth",
        "version": __version__,
        "dims": dims,
        "ranks": ranks,
        "snr_db": snr,
        "missing_rate": args.missing,
        "base_seed": base_seed,
        "repeat": args.repeat,
        "seed_derivation": "numpy SeedSequence(seed).spawn(3) -> cores, noise, mask",
        "runs": runs,
    }
    _emit(manifest, args, out / f"{args.prefix}_manifest.json")
    log.info("wrote %d synthetic run(s) to %s", args.repeat, out)
    return 0


# --- complete -----------------------------------------------------------------------


def _load_plan(args, shape) -> AugmentPlan | None:
    if args.plan:
        plan = AugmentPlan.load(args.plan)
    elif args.augment == "none":
        return None
    else:
        plan = default_plan(shape, PADDED if args.augment == PADDED else BASIC)
    return plan


def _fit_options(args) -> FitOptions:
    return FitOptions(
        max_iters=args.max_iters,
        rel_tol=args.rel_tol,
        prune_ratio=args.prune_ratio,
        fast_path_observed_fraction=args.fast_path_fraction,
        seed=args.seed,
        prune=not args.no_prune,
        max_seconds=args.max_seconds,
    )


def _init_config(args, image: bool) -> InitConfig:
    variance, snr = args.init_variance, args.init_snr
    if image:
        variance = IMAGE_INIT_VARIANCE if variance is None else variance
        snr = IMAGE_INIT_SNR_DB if snr is None else snr
    return InitConfig(
        rank_cap_multiplier=args.rank_cap,
        fill_seed=args.seed,
        init_variance=1.0 if variance is None else variance,
        init_snr_db=None if snr is None or str(snr).lower() == "none" else float(snr),
    )


def cmd_complete(args) -> int:
    seed = _resolve_seed(args.seed)
    args.seed = seed
    data = _load_array(args.input)
    image = _is_image(args.input)
    truth = _load_array(args.truth) if args.truth else None

    if truth is None and (args.noise_var > 0 or (args.missing > 0 and not args.mask)):
        # the input is corrupted here, so the clean input is the reference
        truth = data.copy()

    if args.mask:
        mask = read_image(args.mask) > 0.5 if _is_image(args.mask) else read_mask(args.mask)
        if image and mask.ndim == 2 and data.ndim == 3:
            mask = np.repeat(mask[:, :, None], data.shape[2], axis=2)
    elif args.missing > 0:
        mask = random_mask(data.shape, args.missing, np.random.SeedSequence(seed).spawn(2)[0])
    else:
        mask = np.ones(data.shape, dtype=bool)
    if mask.shape != data.shape:
        log.error("mask shape %s does not match data shape %s", mask.shape, data.shape)
        return EXIT_FAILED
    if not mask.any():
        log.error("the mask has no observed entries; nothing to fit")
        return EXIT_FAILED

    if args.noise_var > 0:
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
        data = data + math.sqrt(args.noise_var) * rng.standard_normal(data.shape)

    plan = _load_plan(args, data.shape) if image else None
    a, o = data, mask
    if plan is not None:
        a, o = augment(data, plan), augment_mask(mask, plan)
        if args.plan_out:
            plan.save(args.plan_out)
    a = np.where(o, a, 0.0)

    opts = _fit_options(args)
    init = _init_config(args, image)
    state = load_state(args.resume) if args.resume else None
    fit_truth = None
    if truth is not None:
        fit_truth = augment(truth, plan) if plan is not None else truth
        if plan is not None and plan.mode == PADDED:
            fit_truth = None  # padded copies would double-count pixels
    try:
        state, report = fit(a, o, opts, init, args.hyper, truth=fit_truth, state=state, threads=args.threads)
    except FitError as exc:
        log.error("fit failed: %s", exc)
        if exc.state is not None and args.state:
            save_state(args.state, exc.state)
        if args.report and exc.report is not None:
            _emit(exc.report.to_dict(), args, args.report)
        return EXIT_FAILED
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_FAILED

    est = reconstruct(state)
    if plan is not None:
        est = deaugment(est, plan)
    if args.output:
        if image or _is_image(args.output):
            write_image(args.output, est)
        else:
            write_tensor(args.output, est)
    if args.state:
        save_state(args.state, state)

    result = report.to_dict()
    result["final_ranks"] = state.ranks
    result["seed"] = seed
    if truth is not None:
        result["metrics"] = metric_report(truth, est, image=image).to_dict()
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "ranks", "rse", "e_tau"])
            w.writerows(report.csv_rows())
    _emit(result, args, args.report)
    log.info("%s after %d iterations, ranks %s", report.status, report.iterations, state.ranks)
    # a spent time budget is reported like an exhausted iteration budget
    return EXIT_CONVERGED if report.converged else EXIT_MAX_ITERS


# --- metrics / augmentation ---------------------------------------------------------


def cmd_metrics(args) -> int:
    a, b = _load_array(args.reference), _load_array(args.estimate)
    if a.shape != b.shape:
        log.error("shape mismatch %s vs %s", a.shape, b.shape)
        return EXIT_FAILED
    image = args.image or (_is_image(args.reference) and not args.no_image)
    rep = metric_report(a, b, image=image)
    args.stdout = args.stdout or not args.out
    _emit(rep.to_dict(), args, args.out)
    return 0


def cmd_augment(args) -> int:
    img = read_image(args.image)
    plan = AugmentPlan.load(args.plan) if args.plan else default_plan(img.shape, args.mode)
    write_tensor(args.out, augment(img, plan))
    if args.plan_out:
        plan.save(args.plan_out)
    log.info("augmented %s to shape %s", img.shape, plan.tensor_shape)
    return 0


def cmd_deaugment(args) -> int:
    plan = AugmentPlan.load(args.plan)
    img = deaugment(read_tensor(args.tensor), plan)
    if _is_image(args.out):
        write_image(args.out, img)
    else:
        write_tensor(args.out, img)
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttb", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ttb {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults (flags take precedence)")
    common.add_argument("--stdout", action="store_true", help="print the JSON report on stdout")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument(
        "--threads", type=int, default=None, help="BLAS threads (default: $TTB_THREADS or 1)"
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic TT data")
    s.add_argument("--dims", default="20,20,20")
    s.add_argument("--ranks", default="1,5,5,1")
    s.add_argument("--snr", default="20", help="dB, or 'inf' for no noise")
    s.add_argument("--missing", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--repeat", type=int, default=1, help="runs with seeds seed..seed+repeat-1")
    s.add_argument("--out", default=".")
    s.add_argument("--prefix", default="synth")
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("complete", parents=[common], help="fit and complete a tensor or image")
    c.add_argument("input", help=".ttn tensor or .pgm/.ppm image")
    c.add_argument("--mask", help=".ttm mask (or PGM, nonzero = observed)")
    c.add_argument("--truth", help="ground truth for RSE/PSNR/SSIM")
    c.add_argument("--missing", type=float, default=0.0, help="random missing rate when no mask")
    c.add_argument("--noise-var", type=float, default=0.0, help="add Gaussian noise (images)")
    c.add_argument("--augment", choices=["none", BASIC, PADDED], default=PADDED)
    c.add_argument("--plan", help="augmentation plan JSON (images)")
    c.add_argument("--plan-out", help="write the augmentation plan used")
    c.add_argument("--output", "-o", help="reconstruction (.ttn or image)")
    c.add_argument("--report", help="FitReport JSON path")
    c.add_argument("--csv", help="per-iteration CSV path")
    c.add_argument("--state", help="write the posterior checkpoint here")
    c.add_argument("--resume", help="start from a saved posterior")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--max-iters", type=int, default=100)
    c.add_argument("--rel-tol", type=float, default=1e-6)
    c.add_argument("--prune-ratio", type=float, default=100.0)
    c.add_argument("--no-prune", action="store_true")
    c.add_argument("--fast-path-fraction", type=float, default=0.9)
    c.add_argument("--rank-cap", type=int, default=15)
    c.add_argument("--hyper", type=float, default=1e-6)
    c.add_argument("--max-seconds", type=float, default=None, help="wall-clock budget")
    c.add_argument(
        "--init-variance",
        type=float,
        default=None,
        help=f"initial core variance (default 1, or {IMAGE_INIT_VARIANCE:g} for images)",
    )
    c.add_argument(
        "--init-snr",
        default=None,
        help=f"assumed SNR in dB setting the initial E[tau] (default: E[tau]=1, "
        f"or {IMAGE_INIT_SNR_DB:g} for images; 'none' disables)",
    )
    c.set_defaults(func=cmd_complete)

    m = sub.add_parser("metrics", parents=[common], help="RSE/PSNR/SSIM between two arrays")
    m.add_argument("reference")
    m.add_argument("estimate")
    m.add_argument("--out")
    g = m.add_mutually_exclusive_group()
    g.add_argument("--image", action="store_true", help="force image metrics")
    g.add_argument("--no-image", action="store_true", help="skip SSIM and per-band values")
    m.set_defaults(func=cmd_metrics)

    a = sub.add_parser("augment", parents=[common], help="fold an image into a tensor")
    a.add_argument("image")
    a.add_argument("--out", required=True)
    a.add_argument("--plan")
    a.add_argument("--mode", choices=[BASIC, PADDED], default=PADDED)
    a.add_argument("--plan-out")
    a.set_defaults(func=cmd_augment)

    d = sub.add_parser("deaugment", parents=[common], help="unfold a tensor back to an image")
    d.add_argument("tensor")
    d.add_argument("--plan", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_deaugment)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = {k.replace("-", "_"): v for k, v in json.loads(Path(args.config).read_text()).items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    if args.threads is None:
        env = os.environ.get("TTB_THREADS")
        args.threads = int(env) if env else 1
    return args


def _setup_logging(verbose: int) -> None:
    for h in [h for h in log.handlers if getattr(h, "_ttb", False)]:
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler._ttb = True
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.WARNING - 10 * min(verbose, 2))


def main(argv=None) -> int:
    args = parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (OSError, FormatError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
