"""Command-line entry points.

Exit codes: 0 success, 1 user error (bad arguments, config or input files),
2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import DatasetFormatError
from .experiments import iteration_times
from .model import ForwardContext, MethodConfig, TinyConv
from .mult import MultTableError, characterize, resolve_table
from .tensor.autograd import Tensor
from .tensor.serialize import CheckpointFormatError, load_tensors, save_tensors
from .trainer import calibrate_model, evaluate, train

log = logging.getLogger("approxtrain")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, DatasetFormatError, MultTableError, CheckpointFormatError, FileNotFoundError,
               ValueError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def write_manifest(out_dir: Path, command: str, cfg: RunConfig | None = None, seed: int | None = None,
                   extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.config_hash() if cfg else None,
        "seed": cfg.seed if cfg else seed,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **(extra or {}),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_model(path) -> TinyConv:
    return TinyConv.from_state_dict(load_tensors(path))


# ----- subcommands ---------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = load_config(args.config)
    base = Path(args.config).resolve().parent
    out = Path(args.out or cfg.output_dir)
    tr, te = cfg.datasets(base)
    plan = cfg.train_plan()
    if plan.pretrained:
        model = _load_model(base / plan.pretrained)
        model.logit_scale = cfg.model.logit_scale
    else:
        model = cfg.build_model(tr)
    start = time.perf_counter()
    report = train(plan, model, tr, te)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    report.write_summary(out / "summary.json")
    save_tensors(out / "model.axtn", model.state_dict())
    (out / "config.yaml").write_text(cfg.to_yaml())
    write_manifest(out, "train", cfg, extra={"wall_seconds": time.perf_counter() - start})
    status = "aborted: " + report.abort_reason if report.aborted else f"final accuracy {report.final_accuracy:.4f}"
    print(f"{cfg.method}: {report.total_steps} steps, {status}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = _load_model(args.checkpoint)
    _, te = cfg.datasets(Path(args.config).resolve().parent)
    mcfg = cfg.method_config()
    if not model.is_calibrated(cfg.method):
        calibrate_model(model, te, cfg.method, mcfg)
    acc = evaluate(model, te, cfg.method, mcfg)
    print(f"accuracy {acc:.4f} ({cfg.method}, {len(te)} samples)")
    if args.out:
        write_manifest(Path(args.out), "eval", cfg, extra={"accuracy": acc, "checkpoint": str(args.checkpoint)})
    return EXIT_OK


def cmd_characterize(args) -> int:
    stats = characterize(resolve_table(args.table))
    print(json.dumps({"table": args.table, **asdict(stats)}, indent=2))
    if args.out:
        write_manifest(Path(args.out), "characterize-mult", seed=None, extra={"table": args.table, **asdict(stats)})
    return EXIT_OK


def dump_error_curves(model: TinyConv, x: np.ndarray, method: str, mcfg: MethodConfig, points: int = 64,
                      seed: int = 0) -> list[dict]:
    """Calibrate every layer on one batch and sample the fitted error curves."""
    if method not in ("sc", "approx-mult", "analog"):
        raise ValueError(f"calibrate-dump needs an approximate method, got {method!r}")
    table = mcfg.table() if method == "approx-mult" else None
    ctx = ForwardContext(method, "inject", mcfg, table, seed=seed, calibrate_type1=method != "analog",
                         calibrate_type2=method == "analog", refresh_scales=True)
    model.forward(Tensor(x), ctx)
    rows = []
    for layer in model.layers:
        t1, t2 = layer.state.type1, layer.state.type2
        if t1 is not None:
            for y in np.linspace(t1.lo, t1.hi, points):
                rows.append(dict(layer=layer.layer_id, model="type1", output=float(y),
                                 mean=float(t1.mean(y)), std=float(t1.std(y))))
        if t2 is not None:
            rows.append(dict(layer=layer.layer_id, model="type2", output="", mean=t2.mean, std=float(np.sqrt(t2.var))))
    return rows


def cmd_calibrate_dump(args) -> int:
    cfg = load_config(args.config)
    tr, _ = cfg.datasets(Path(args.config).resolve().parent)
    model = _load_model(args.checkpoint) if args.checkpoint else cfg.build_model(tr)
    batch = tr.images[: cfg.plan.batch_size]
    rows = dump_error_curves(model, batch, cfg.method, cfg.method_config(), args.points, cfg.seed)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "error_curves.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "model", "output", "mean", "std"])
        w.writeheader()
        w.writerows(rows)
    write_manifest(out, "calibrate-dump", cfg)
    print(f"wrote {len(rows)} rows to {out / 'error_curves.csv'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = []
    for method in args.methods:
        t = iteration_times(method, batch_size=args.batch_size, epoch_batches=args.epoch_batches,
                            iters=args.iters, channels=tuple(args.channels), image_size=args.image_size,
                            seed=args.seed)
        rows.append(dict(method=method, **{k: v * 1e3 for k, v in t.items()},
                         injection_over_accurate=t["injection"] / t["accurate"]))
    print(f"{'method':<12}{'exact':>10}{'proxy':>10}{'inject':>10}{'accurate':>10}{'inj/acc':>9}   (ms/iter)")
    for r in rows:
        print(f"{r['method']:<12}{r['exact']:>10.1f}{r['proxy']:>10.1f}{r['injection']:>10.1f}"
              f"{r['accurate']:>10.1f}{r['injection_over_accurate']:>9.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        write_manifest(out, "bench", seed=args.seed, extra={"batch_size": args.batch_size})
    return EXIT_OK


# ----- wiring ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="approxtrain", description="Train and benchmark networks for approximate hardware.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="run a training plan from a config file")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint with accurate kernels")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--out", help="directory for the manifest")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("characterize-mult", help="exhaustive error statistics of a multiplier table")
    c.add_argument("table", help="table file, 'default' or 'default:K'")
    c.add_argument("--out", help="directory for the manifest")
    c.set_defaults(func=cmd_characterize)

    d = sub.add_parser("calibrate-dump", help="write per-layer error model curves as CSV")
    d.add_argument("config")
    d.add_argument("--checkpoint")
    d.add_argument("--points", type=int, default=64)
    d.add_argument("--out")
    d.set_defaults(func=cmd_calibrate_dump)

    b = sub.add_parser("bench", help="time exact, injection and accurate iterations")
    b.add_argument("--methods", nargs="+", default=["sc", "approx-mult"],
                   choices=["sc", "approx-mult", "analog"])
    b.add_argument("--batch-size", type=int, default=64)
    b.add_argument("--epoch-batches", type=int, default=31)
    b.add_argument("--iters", type=int, default=8)
    b.add_argument("--channels", type=int, nargs=3, default=[32, 32, 64])
    b.add_argument("--image-size", type=int, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # invariant violations and bugs
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
