"""Command-line entry point: generate, calibrate, adapt, grid, bench.

Every command writes ``summary.json`` (deterministic, no timings) and
``run_manifest.json`` (flags, seeds, paths, wall time, version) into ``--out``.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import _accel
from .approx import bench_approx, bench_csv, summarize_bench
from .bundle_io import BundleError, add_to_manifest, generate_synthetic, read_bundle, write_bundle
from .calibration import CalibrationLayer, ContrastiveConfig, train_calibration
from .core import CacheHyper, FactorizationError, build_cache
from .groups import make_partition
from .trainer import TrainConfig, finetune, finetune_nw_baseline, history_csv
from .tuner import SearchSpace, evaluate, grid_search, search_csv

log = logging.getLogger("gpcache")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _floats(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _methods(text: str) -> list[tuple[str, int | None]]:
    out = []
    for item in text.split(","):
        name, _, param = item.strip().partition(":")
        if name not in ("exact", "group", "nystrom", "rff", "mean"):
            raise argparse.ArgumentTypeError(f"unknown method {name!r}")
        out.append((name, int(param) if param else None))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _round(x: float) -> float:
    # summaries should not depend on the last bits of BLAS reductions
    return float(f"{x:.10g}")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> dict:
    for name in ("classes", "shots", "dim"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be positive")
    bundle = generate_synthetic(
        c=args.classes,
        k=args.shots,
        dim=args.dim,
        spread=args.spread,
        text_noise=args.text_noise,
        seed=args.seed,
        n_test_per_class=args.test_per_class,
        n_val_per_class=args.val_per_class,
        n_unlabeled_per_class=args.unlabeled_per_class,
    )
    write_bundle(bundle, args.out)
    print(
        f"wrote {args.out}: c={bundle.num_classes} dim={bundle.dim} train={bundle.train.rows} "
        f"val={bundle.val.rows} test={bundle.test.rows}"
    )
    return {
        "num_classes": bundle.num_classes,
        "dim": bundle.dim,
        "rows": {
            "train": bundle.train.rows,
            "val": bundle.val.rows,
            "test": bundle.test.rows,
            "unlabeled": 0 if bundle.unlabeled is None else int(bundle.unlabeled.shape[0]),
        },
    }


def _margin(X: np.ndarray, y: np.ndarray) -> float:
    S = X @ X.T
    same = y[:, None] == y[None, :]
    np.fill_diagonal(same, False)
    return float(S[same].mean() - S[y[:, None] != y[None, :]].mean())


def cmd_calibrate(args) -> dict:
    bundle = read_bundle(args.bundle)
    if bundle.unlabeled is None or bundle.unlabeled_aug is None:
        raise BundleError(f"{args.bundle} has no unlabeled/unlabeled_aug matrices to calibrate on")
    cfg = ContrastiveConfig(
        batch_size=args.batch_size,
        neighbors=args.neighbors,
        temperature=args.temperature,
        epochs=args.epochs,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        momentum=args.momentum,
        seed=args.seed,
        bias=args.bias,
        mining=args.mining,
    )
    layer = train_calibration(bundle.unlabeled, bundle.unlabeled_aug, cfg)
    add_to_manifest(args.bundle, "calib_proj", layer.proj)
    if layer.bias is not None:
        add_to_manifest(args.bundle, "calib_bias", layer.bias[None, :])
    lines = ["epoch,loss"] + [f"{e},{v:.8f}" for e, v in cfg.history]
    (Path(args.out) / "calib_loss.csv").write_text("\n".join(lines) + "\n")
    test = bundle.test
    raw, cal = _margin(test.x, test.y), _margin(layer.apply(test.x), test.y)
    print(f"calibration: final loss {cfg.history[-1][1] if cfg.history else float('nan'):.4f}")
    print(f"test similarity margin {raw:.4f} -> {cal:.4f}")
    return {
        "final_loss": _round(cfg.history[-1][1]) if cfg.history else None,
        "losses": [_round(v) for _, v in cfg.history],
        "margin_raw": _round(raw),
        "margin_calibrated": _round(cal),
    }


def _load_calib(bundle, use: bool):
    if not use:
        return None
    if "calib_proj" not in bundle.extras:
        raise BundleError("--calib given but the bundle has no calib_proj; run `calibrate` first")
    bias = bundle.extras.get("calib_bias")
    return CalibrationLayer(bundle.extras["calib_proj"], None if bias is None else bias[0])


def _space(args) -> SearchSpace:
    return SearchSpace(args.alpha, args.beta, args.sigma2, args.eta)


def _hyper_summary(h: CacheHyper) -> dict:
    return {"alpha": h.alpha, "beta": h.beta, "sigma2": h.sigma2, "eta": h.eta}


def cmd_adapt(args) -> dict:
    bundle = read_bundle(args.bundle)
    calib = _load_calib(bundle, args.calib)
    c = bundle.num_classes
    partition = make_partition(c, args.groups, args.group_seed) if args.groups else None
    out = {"mode": args.mode, "train": args.train}
    if args.mode == "zs":
        hyper = CacheHyper(alpha=0.0)
        model = build_cache(bundle.train.x, bundle.train.y, hyper, num_classes=c, solve=False)
        res = evaluate(bundle, hyper, "nw", model=model)
    else:
        space = _space(args)
        if space.size == 1:
            hyper = CacheHyper(space.alpha[0], space.beta[0], space.sigma2[0], space.eta[0])
        else:
            result = grid_search(bundle, space, args.mode, calib, partition)
            hyper = result.best
            (Path(args.out) / "grid.csv").write_text(search_csv(result.table))
        model = None
        if args.train != "free":
            cfg = TrainConfig(
                epochs=args.epochs,
                batch_size=args.batch_size,
                learning_rate=args.lr,
                seed=args.seed,
                mode="nograd" if args.train == "finetune-nograd" else "full_grad",
                momentum=args.momentum,
                weight_decay=args.weight_decay,
                renormalize=not args.no_renormalize,
                rebuild_every=args.rebuild_every,
            )
            if args.mode == "gp":
                model = finetune(bundle, hyper, cfg, calib, partition)
            else:
                model = finetune_nw_baseline(bundle, hyper, cfg, calib)
            (Path(args.out) / "train_log.csv").write_text(history_csv(cfg.history))
            out["train_loss"] = [_round(h[1]) for h in cfg.history]
        res = evaluate(bundle, hyper, args.mode, calib, partition, model=model)
    out.update(
        hyper=_hyper_summary(hyper),
        val_acc=res["val_acc"],
        test_acc=res["test_acc"],
        per_class_acc=res["per_class_acc"],
        groups=partition.g if partition else None,
    )
    print(f"{args.mode}/{args.train}: val {res['val_acc']:.4f} test {res['test_acc']:.4f} ({hyper})")
    return out


def cmd_grid(args) -> dict:
    bundle = read_bundle(args.bundle)
    calib = _load_calib(bundle, args.calib)
    partition = make_partition(bundle.num_classes, args.groups, args.group_seed) if args.groups else None
    result = grid_search(bundle, _space(args), args.mode, calib, partition)
    (Path(args.out) / "grid.csv").write_text(search_csv(result.table))
    res = evaluate(bundle, result.best, args.mode, calib, partition)
    print(f"best {result.best}: val {result.best_val_acc:.4f} test {res['test_acc']:.4f}")
    return {
        "mode": args.mode,
        "best": _hyper_summary(result.best),
        "best_val_acc": result.best_val_acc,
        "test_acc": res["test_acc"],
        "rows": len(result.table),
    }


def cmd_bench(args) -> dict:
    bundle = read_bundle(args.bundle)
    space = _space(args)
    if space.size == 1:
        hyper = CacheHyper(space.alpha[0], space.beta[0], space.sigma2[0], space.eta[0])
    else:
        hyper = grid_search(bundle, space, "gp").best
    rows = bench_approx(bundle, hyper, args.methods, repeats=args.repeats, seed=args.seed)
    (Path(args.out) / "bench.csv").write_text(bench_csv(rows))
    summary = summarize_bench(rows)
    for s in summary:
        print(
            f"{s['method']:>8} {str(s['param']):>6}  acc {s['accuracy']:.4f}  "
            f"build {s['build_ms']:.1f} ms  query {s['query_ms']:.1f} ms"
        )
    return {
        "hyper": _hyper_summary(hyper),
        "results": [
            {"method": r["method"], "param": r["param"], "seed": r["seed"], "accuracy": r["accuracy"]} for r in rows
        ],
    }


# ---------------------------------------------------------------------------
# parser


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory (summary.json, run_manifest.json)")
    p.add_argument("--threads", type=int, default=None, help="cap internal parallelism")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_hyper(p: argparse.ArgumentParser) -> None:
    d = SearchSpace()
    p.add_argument("--alpha", type=_floats, default=d.alpha, help="comma-separated grid (one value = fixed)")
    p.add_argument("--beta", type=_floats, default=d.beta)
    p.add_argument("--sigma2", type=_floats, default=d.sigma2)
    p.add_argument("--eta", type=_floats, default=d.eta)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpcache", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic bundle")
    _add_common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--shots", type=int, default=16)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--spread", type=float, default=0.3)
    p.add_argument("--text-noise", type=float, default=0.3)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--val-per-class", type=int, default=None)
    p.add_argument("--unlabeled-per-class", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("calibrate", help="train the similarity calibration layer")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--neighbors", type=int, default=128)
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=5e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--mining", choices=("hard", "random"), default="hard")
    p.add_argument("--bias", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("adapt", help="grid search, optional fine-tuning, evaluation")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--mode", choices=("zs", "nw", "gp"), default="gp")
    p.add_argument("--train", choices=("free", "finetune", "finetune-nograd"), default="free")
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--group-seed", type=int, default=0)
    p.add_argument("--calib", action="store_true", help="use the bundle's calib_proj")
    _add_hyper(p)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--rebuild-every", type=int, default=1)
    p.add_argument("--no-renormalize", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("grid", help="validation grid search only")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--mode", choices=("nw", "gp"), default="gp")
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--group-seed", type=int, default=0)
    p.add_argument("--calib", action="store_true")
    _add_hyper(p)

    p = sub.add_parser("bench", help="approximation benchmark")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument(
        "--methods",
        type=_methods,
        default=_methods("exact,group:2,rff:1024,mean"),
        help="comma-separated name[:param]; nystrom L must be a multiple of the class count",
    )
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    _add_hyper(p)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "calibrate": cmd_calibrate,
    "adapt": cmd_adapt,
    "grid": cmd_grid,
    "bench": cmd_bench,
}

SEED_FLAGS = ("seed", "group_seed")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = os.environ.get("GPCACHE_THREADS") or args.threads
    threads = int(threads) if threads else None
    _accel.set_threads(threads)
    out = Path(args.out)
    if args.command != "generate":
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=threads):
            summary = COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (BundleError, FactorizationError, FloatingPointError, ValueError, OSError) as exc:
        print(f"gpcache {args.command}: error: {exc}", file=sys.stderr)
        return 1
    wall = time.perf_counter() - t0
    flags = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "command"}
    summary = {"command": args.command, **summary}
    _write_json(out / "summary.json", summary)
    _write_json(
        out / "run_manifest.json",
        {
            "command": args.command,
            "flags": flags,
            "seeds": {k: flags[k] for k in SEED_FLAGS if k in flags},
            "artifacts": sorted(str(p) for p in out.iterdir() if p.name != "run_manifest.json"),
            "wall_seconds": wall,
            "threads": threads,
            "backend": _accel.get_backend(),
            "version": _version(),
        },
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
