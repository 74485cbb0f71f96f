"""Command-line entry points: transfer, metrics, dual-demo, mask-demo, bench."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from otappear import __version__
from otappear.image_io import GeometryMaps, ImageFormatError, load_image, save_image, save_mask
from otappear.metrics import FeatureBank, metric_report
from otappear.mixgame import LossWeights, generate_mix_mask, mix_images
from otappear.neural import TrainConfig, TrainingError, estimate_w1
from otappear.solvers import SolverError, cost_matrix, exact_ot_small, plan_cost, sinkhorn
from otappear.transfer import TransferOptions, transfer_appearance

log = logging.getLogger("otappear")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SOLVER = 4
EXIT_TOLERANCE = 5

THREADS_ENV = "OT_APPEARANCE_THREADS"

TRANSFER_KEYS = {f.name for f in fields(TransferOptions)} - {"train"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
LOSS_KEYS = {f.name for f in fields(LossWeights)}
PATH_KEYS = {
    "source",
    "target",
    "out",
    "report",
    "position_map",
    "normal_map",
    "target_position_map",
    "target_normal_map",
}


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


# -- config -----------------------------------------------------------------


def load_run_config(path) -> dict:
    """Read a JSON run config; unknown keys are rejected."""
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    allowed = TRANSFER_KEYS | PATH_KEYS | {"train", "loss_weights"}
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for section, keys in (("train", TRAIN_KEYS), ("loss_weights", LOSS_KEYS)):
        sub = cfg.get(section, {})
        if not isinstance(sub, dict):
            raise UsageError(f"config section {section!r} must be an object")
        bad = set(sub) - keys
        if bad:
            raise UsageError(f"unknown keys in {section!r}: {sorted(bad)}")
    return cfg


def resolve_transfer_config(args) -> dict:
    """Merge defaults < config file < command-line flags."""
    cfg = load_run_config(args.config) if args.config else {}
    flags = {
        "source": args.source,
        "target": args.target,
        "out": args.out,
        "report": args.report,
        "position_map": args.position_map,
        "normal_map": args.normal_map,
        "target_position_map": args.target_position_map,
        "target_normal_map": args.target_normal_map,
        "method": args.method,
        "seed": args.seed,
        "max_points": args.max_points,
        "epsilon": args.epsilon,
        "position_weight": args.position_weight,
        "normal_weight": args.normal_weight,
        "smoothing_radius": args.smoothing_radius,
        "cost_kind": args.cost_kind,
    }
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.iters is not None:
        cfg.setdefault("train", {})["total_iterations"] = args.iters
    for required in ("source", "target", "out"):
        if not cfg.get(required):
            raise UsageError(f"--{required} is required (flag or config key)")
    return cfg


def build_options(cfg: dict) -> tuple[TransferOptions, LossWeights]:
    seed = cfg.get("seed", 0)
    try:
        train = TrainConfig(**{**cfg.get("train", {}), "seed": seed})
        opts = TransferOptions(train=train, **{k: cfg[k] for k in TRANSFER_KEYS if k in cfg})
        weights = LossWeights(**cfg.get("loss_weights", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return opts, weights


def _check_inputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise IOFailure(f"input file not found: {p}")


def _check_outputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).resolve().parent.is_dir():
            raise IOFailure(f"output directory does not exist: {Path(p).parent}")


def _load(path):
    try:
        return load_image(path)
    except (OSError, ImageFormatError) as exc:
        raise IOFailure(f"cannot load {path}: {exc}") from exc


def _write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# -- commands ---------------------------------------------------------------


def cmd_transfer(args) -> int:
    cfg = resolve_transfer_config(args)
    opts, weights = build_options(cfg)
    src_maps = (cfg.get("position_map"), cfg.get("normal_map"))
    # aligned faces share geometry: target maps default to the source's
    tgt_maps = (cfg.get("target_position_map") or src_maps[0], cfg.get("target_normal_map") or src_maps[1])
    _check_inputs(cfg["source"], cfg["target"], *src_maps, *tgt_maps)
    _check_outputs(cfg["out"], cfg.get("report"))
    source, target = _load(cfg["source"]), _load(cfg["target"])
    src_geom = GeometryMaps(*(_load(p) if p else None for p in src_maps))
    tgt_geom = GeometryMaps(*(_load(p) if p else None for p in tgt_maps))
    try:
        src_geom.check_shape(source.shape)
        tgt_geom.check_shape(target.shape)
    except ImageFormatError as exc:
        raise UsageError(str(exc)) from exc

    out, report = transfer_appearance(source, target, src_geom, tgt_geom, opts)
    try:
        save_image(out, cfg["out"])
    except OSError as exc:
        raise IOFailure(f"cannot write {cfg['out']}: {exc}") from exc
    resolved = {**asdict(opts), "loss_weights": asdict(weights)}
    resolved.update({k: cfg.get(k) for k in sorted(PATH_KEYS)})
    payload = {**report.to_dict(), "version": __version__, "config": resolved}
    if cfg.get("report"):
        _write_json(cfg["report"], payload)
    log.info("transfer %s: cost=%.6g hist %.4g -> %.4g", opts.method, report.cost,
             report.histogram_distance_before, report.histogram_distance_after)
    return EXIT_OK


def cmd_metrics(args) -> int:
    _check_inputs(args.a, args.b, args.source)
    _check_outputs(args.out)
    a, b = _load(args.a), _load(args.b)
    edge_ref = _load(args.source) if args.source else b
    if a.shape != b.shape or a.shape != edge_ref.shape:
        raise UsageError(f"image dimensions differ: {a.shape}, {b.shape}, {edge_ref.shape}")
    report = metric_report(a, b, edge_ref, FeatureBank(seed=args.bank_seed))
    report["version"] = __version__
    report["config"] = {"a": args.a, "b": args.b, "source": args.source, "bank_seed": args.bank_seed,
                        "ssim_edge_against": "source" if args.source else "b"}
    _write_json(args.out, report)
    return EXIT_OK


DUAL_TASKS = ("shift1d", "shift2d", "identity")
DUAL_TOLERANCE = {"shift1d": 0.10, "shift2d": 0.10, "identity": 0.05}


def dual_task(task: str, seed: int, n: int = 512):
    """Benchmark samples and their closed-form W1.

    Targets are exact translates of the source samples, so the empirical W1
    equals the shift length.
    """
    rng = np.random.default_rng(seed)
    if task == "shift1d":
        src = rng.random((n, 1))
        shift = np.array([2.0])
    elif task == "shift2d":
        src = rng.normal(0.0, 0.1, size=(n, 2))
        shift = np.array([1.0, 0.5])
    elif task == "identity":
        src = rng.random((n, 1))
        shift = np.array([0.0])
    else:
        raise UsageError(f"unknown task {task!r}")
    return src, src + shift, float(np.linalg.norm(shift))


def cmd_dual_demo(args) -> int:
    _check_outputs(args.report)
    src, tgt, oracle = dual_task(args.task, args.seed)
    config = TrainConfig(total_iterations=args.iters, clip_bound=args.clip_bound, seed=args.seed)
    start = time.perf_counter()
    _, estimate = estimate_w1(src, tgt, config)
    seconds = time.perf_counter() - start
    if args.task == "identity":
        error = abs(estimate)
        ok = error < DUAL_TOLERANCE["identity"]
    else:
        error = abs(estimate - oracle) / oracle
        ok = error <= DUAL_TOLERANCE[args.task]
    print(f"task={args.task} oracle_w1={oracle:.6f} estimate={estimate:.6f} "
          f"{'abs' if args.task == 'identity' else 'relative'}_error={error:.6f} seconds={seconds:.3f}")
    if args.report:
        _write_json(args.report, {
            "task": args.task, "oracle_w1": oracle, "estimate": estimate, "error": error,
            "tolerance": DUAL_TOLERANCE[args.task], "passed": ok, "seconds": seconds,
            "version": __version__, "config": asdict(config),
        })
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_mask_demo(args) -> int:
    _check_inputs(args.a, args.b)
    _check_outputs(args.out, args.mixed)
    a, b = _load(args.a), _load(args.b)
    if a.shape != b.shape:
        raise UsageError(f"image dimensions differ: {a.shape} vs {b.shape}")
    try:
        mask = generate_mix_mask(a.height, a.width, args.patches, tuple(args.patch_range),
                                 args.soft_edge, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    mixed = mix_images(a, b, mask)
    try:
        save_mask(mask.values, args.out)
        save_image(mixed, args.mixed)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    return EXIT_OK


BENCH_FIELDS = ("method", "n_points", "cost_or_estimate", "marginal_error", "seconds")


def mixture_cloud(rng: np.random.Generator, n: int, dim: int = 3, components: int = 4) -> np.ndarray:
    centers = rng.random((components, dim))
    labels = rng.integers(components, size=n)
    return centers[labels] + rng.normal(0.0, 0.05, size=(n, dim))


def bench_rows(sizes, seed: int, epsilon: float, sinkhorn_iters: int, neural_iters: int):
    """One row per (method, size); exact only up to 64 points.

    Sinkhorn and exact report the squared-Euclidean plan cost; the neural
    row reports the W1 dual estimate (Euclidean ground cost).
    """
    for n in sizes:
        rng = np.random.default_rng([seed, n])
        xs, xt = mixture_cloud(rng, n), mixture_cloud(rng, n)
        w = np.full(n, 1.0 / n)
        C = cost_matrix(xs, xt)

        t0 = time.perf_counter()
        plan = sinkhorn(C, w, w, epsilon=epsilon, max_iter=sinkhorn_iters, tol=1e-9, check_every=10)
        yield ("sinkhorn", n, plan_cost(plan, C), plan.marginal_error, time.perf_counter() - t0)

        if n <= 64:
            t0 = time.perf_counter()
            plan = exact_ot_small(C, w, w)
            yield ("exact", n, plan_cost(plan, C), plan.marginal_error, time.perf_counter() - t0)

        t0 = time.perf_counter()
        _, est = estimate_w1(xs, xt, TrainConfig(total_iterations=neural_iters, clip_bound=None, seed=seed))
        yield ("neural", n, est, float("nan"), time.perf_counter() - t0)


def cmd_bench(args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--sizes must be comma-separated integers: {exc}") from exc
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs positive integers")
    _check_outputs(args.out)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_FIELDS)
        for row in bench_rows(sizes, args.seed, args.epsilon, args.sinkhorn_iters, args.neural_iters):
            method, n, value, err, secs = row
            writer.writerow([method, n, repr(float(value)), repr(float(err)), f"{secs:.6f}"])
            log.info("bench %s n=%d value=%.6g seconds=%.3f", method, n, value, secs)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otappear", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("transfer", help="transfer the target's appearance onto the source")
    t.add_argument("--source")
    t.add_argument("--target")
    t.add_argument("--out")
    t.add_argument("--method", choices=("sinkhorn", "exact", "neural"))
    t.add_argument("--position-map")
    t.add_argument("--normal-map")
    t.add_argument("--target-position-map")
    t.add_argument("--target-normal-map")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--report")
    t.add_argument("--max-points", type=int)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--position-weight", type=float)
    t.add_argument("--normal-weight", type=float)
    t.add_argument("--smoothing-radius", type=int)
    t.add_argument("--cost-kind", choices=("sqeuclidean", "euclidean"))
    t.add_argument("--iters", type=int, help="neural training iterations")
    t.set_defaults(func=cmd_transfer)

    m = sub.add_parser("metrics", help="SSIM-whole/edge, Gram, content and histogram metrics")
    m.add_argument("--a", required=True, help="result image")
    m.add_argument("--b", required=True, help="reference image (SSIM-whole, Gram)")
    m.add_argument("--source", help="edge reference for SSIM-edge (defaults to --b)")
    m.add_argument("--out")
    m.add_argument("--bank-seed", type=int, default=0)
    m.set_defaults(func=cmd_metrics)

    d = sub.add_parser("dual-demo", help="neural W1 estimate against a closed-form oracle")
    d.add_argument("--task", choices=DUAL_TASKS, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--iters", type=int, default=3000)
    d.add_argument("--clip-bound", type=float, default=None,
                   help="defaults to the bound making the potential 1-Lipschitz")
    d.add_argument("--report")
    d.set_defaults(func=cmd_dual_demo)

    k = sub.add_parser("mask-demo", help="random mix mask and mixed image")
    k.add_argument("--a", required=True, help="generated image (mask 0)")
    k.add_argument("--b", required=True, help="target image (mask 1)")
    k.add_argument("--patches", type=int, default=1)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True, help="mask PNG")
    k.add_argument("--mixed", required=True, help="mixed image")
    k.add_argument("--patch-range", type=float, nargs=2, default=(0.1, 0.5), metavar=("LO", "HI"))
    k.add_argument("--soft-edge", type=int, default=0)
    k.set_defaults(func=cmd_mask_demo)

    b = sub.add_parser("bench", help="solver timing/cost table on synthetic clouds")
    b.add_argument("--sizes", default="16,64,256,1024")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--epsilon", type=float, default=0.005)
    b.add_argument("--sinkhorn-iters", type=int, default=2000)
    b.add_argument("--neural-iters", type=int, default=500)
    b.set_defaults(func=cmd_bench)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ValueError) as exc:
        sys.stderr.write(parser.format_usage())
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IOFailure as exc:
        print(f"{parser.prog} {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, TrainingError) as exc:
        print(f"{parser.prog} {args.command}: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
