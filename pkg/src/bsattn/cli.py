"""Command line interface: ``bsa gen | run | compare | bench | sched``.

Exit codes: 0 success, 1 tolerance failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import subprocess
import sys
from pathlib import Path

from . import __version__
from ._io import atomic_write_text
from .attn import full_attention, read_output, sparse_attention, write_output
from .blocks import BlockSpec
from .errors import BSAError
from .kvsparse import DEFAULT_MODE, DEFAULT_TAU, MODES
from .latents import DISTRIBUTIONS, gen_bundle, read_bundle, write_bundle
from .pipeline import compare_arrays, select, sweep
from .schedule import knobs_for_sparsity, schedule_rows

EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE = 0, 1, 2

RUN_DEFAULTS = {
    "block": "4x4x4",
    "window": "2x2x2",
    "r": 0.5,
    "k": None,
    "sparsity": None,
    "mode": DEFAULT_MODE,
    "tau": DEFAULT_TAU,
    "metric": "cosine",
    "threads": 1,
    "out_dir": "bsa_out",
    "full": True,
    "dump_selection": False,
}


class UsageError(Exception):
    pass


def version_string() -> str:
    """Package version, suffixed with ``git describe`` output when run from a checkout."""
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    tag = desc.stdout.strip()
    return f"{__version__}+{tag}" if desc.returncode == 0 and tag else __version__


def parse_dims(text: str, n: int, name: str) -> tuple[int, ...]:
    parts = str(text).lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--{name} must look like {'x'.join(['N'] * n)}, got {text!r}") from None
    if len(dims) != n or min(dims) < 1:
        raise UsageError(f"--{name} needs {n} positive extents, got {text!r}")
    return dims


def parse_window(text):
    if text is None or str(text).lower() in ("none", "off", ""):
        return None
    return parse_dims(text, 3, "window")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def cmd_gen(args) -> int:
    T, H, W, d = parse_dims(args.shape, 4, "shape")
    bundle = gen_bundle(args.seed, T, H, W, d, args.dist)
    write_bundle(args.out, bundle)
    size = Path(args.out).stat().st_size
    print(f"L={bundle.L} d={d} bytes={size} -> {args.out}")
    return EXIT_OK


def resolve_run_config(args) -> dict:
    """Defaults < JSON config file < explicit flags."""
    config = dict(RUN_DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(RUN_DEFAULTS) - {"bundle"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        config.update(loaded)
    for key in list(RUN_DEFAULTS) + ["bundle"]:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    if not config.get("bundle"):
        raise UsageError("run needs --bundle (or 'bundle' in --config)")
    if config["k"] is not None and config["sparsity"] is not None:
        raise UsageError("give either --k or --sparsity, not both")
    if config["mode"] not in MODES:
        raise UsageError(f"--mode must be one of {MODES}")
    return config


def cmd_run(args) -> int:
    config = resolve_run_config(args)
    bundle = read_bundle(config["bundle"])
    spec = BlockSpec(bundle.grid, parse_dims(config["block"], 3, "block"), parse_window(config["window"]))
    r, kv_keep = float(config["r"]), None
    if config["sparsity"] is not None:
        r, kv_keep = knobs_for_sparsity(float(config["sparsity"]), r)
    sel = select(bundle, spec, r, k=config["k"], kv_keep=kv_keep, mode=config["mode"],
                 tau=float(config["tau"]), use_window=spec.window is not None, metric=config["metric"])
    threads = int(config["threads"])
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    sparse = sparse_attention(bundle, spec, sel.qsel, sel.q2k, workers=threads)
    write_output(out_dir / "sparse.bsao", sparse.O)
    if config["full"]:
        write_output(out_dir / "full.bsao", full_attention(bundle, workers=threads).O)

    # thread count does not affect any output, so it stays out of the provenance record
    provenance = {k: v for k, v in config.items() if k != "threads"}
    provenance.update(r_effective=r, kv_keep_target=kv_keep, version=version_string())
    atomic_write_text(out_dir / "q2k.json", _dump_json(sel.q2k.to_dict()))
    report = sel.report.to_dict()
    report["config"] = provenance
    atomic_write_text(out_dir / "flops.json", _dump_json(report))
    if config["dump_selection"]:
        atomic_write_text(out_dir / "qsel.json", _dump_json(sel.qsel.to_dict()))
    print(f"L={spec.L} N={spec.N} r={r} k={sel.q2k.k:.6g} mode={sel.q2k.mode} "
          f"pair_sparsity={sel.report.pair_sparsity:.6f} flop_ratio={sel.report.flop_ratio:.4f} -> {out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    stats = compare_arrays(read_output(args.a), read_output(args.b))
    print(f"max_abs={stats['max_abs']:.6e} mean_abs={stats['mean_abs']:.6e} rmse={stats['rmse']:.6e}")
    return EXIT_OK if stats["max_abs"] <= args.tol else EXIT_TOLERANCE


BENCH_COLUMNS = ("target_sparsity", "L", "d", "s_q", "s_kv", "pair_sparsity", "flops_full",
                 "flops_sparse", "overhead_fraction", "flop_ratio", "ref_ratio", "r", "k", "mode")


def cmd_bench(args) -> int:
    try:
        sparsities = [float(s) for s in args.sparsities.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sparsities must be comma-separated numbers, got {args.sparsities!r}") from None
    bundle = read_bundle(args.bundle)
    spec = BlockSpec(bundle.grid, parse_dims(args.block, 3, "block"), parse_window(args.window))
    rows = sweep(bundle, spec, sparsities, r_fixed=args.r, mode=args.mode, tau=args.tau,
                 with_rmse=args.rmse, workers=args.threads)
    columns = BENCH_COLUMNS + (("rmse",) if args.rmse else ())
    text = _rows_to_csv(rows, columns)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.plot:
        from .plotting import plot_bench

        plot_bench(rows, args.plot)
    return EXIT_OK


def cmd_sched(args) -> int:
    rows = list(schedule_rows(args.steps, args.every))
    text = _rows_to_csv(
        [dict(zip(("step", "sparsity", "r", "kv_keep", "kv_fraction"), row)) for row in rows],
        ("step", "sparsity", "r", "kv_keep", "kv_fraction"),
    )
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.plot:
        from .plotting import plot_schedule

        plot_schedule(rows, args.plot)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic .bsal bundle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", required=True, help="TxHxWxd, e.g. 8x8x8x16")
    p.add_argument("--dist", choices=DISTRIBUTIONS, default="uniform")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="full and sparse attention on a bundle")
    p.add_argument("--bundle")
    p.add_argument("--config", help="JSON file with run settings; flags take precedence")
    p.add_argument("--block", help="CtxChxCw (default 4x4x4)")
    p.add_argument("--window", help="wtxwhxww or 'none' (default 2x2x2)")
    p.add_argument("--r", type=float)
    p.add_argument("--k", type=float, help="desired KV key samples per query block")
    p.add_argument("--sparsity", type=float, help="target pair sparsity; sets r and calibrates k")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--tau", type=float, help="stage-two mass target (two_stage mode)")
    p.add_argument("--metric", choices=("cosine", "dot"))
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--no-full", dest="full", action="store_const", const=False,
                   help="skip the dense reference output")
    p.add_argument("--dump-selection", dest="dump_selection", action="store_const", const=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare two .bsao outputs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="FLOP report sweep over target sparsities")
    p.add_argument("--bundle", required=True)
    p.add_argument("--sparsities", default="0.5,0.86,0.93,0.95")
    p.add_argument("--block", default="4x4x4")
    p.add_argument("--window", default="2x2x2")
    p.add_argument("--r", type=float, default=0.5, help="query retention held fixed while KV absorbs the rest")
    p.add_argument("--mode", choices=MODES, default=DEFAULT_MODE)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--rmse", action="store_true", help="also run attention and report RMSE vs dense")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.add_argument("--plot", help="write a figure (png/pdf/svg) of the sweep")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sched", help="anneal schedule table")
    p.add_argument("--steps", type=int, default=9000)
    p.add_argument("--every", type=int, default=30)
    p.add_argument("--out")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_sched)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, BSAError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
