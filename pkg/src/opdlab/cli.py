"""Command-line interface: ``opdlab {synth,train,eval,denoise,compare}``.

Exit codes: 0 success, 1 partial failure (compare), 2 usage or format error,
3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .benchmark import METRICS, compare, table_rows
from .evaluation import (MetricsReport, evaluate_aar, evaluate_input, evaluate_model, noisy_input_psnr,
                         denoise_stack)
from .io import (CheckpointError, load_checkpoint, log_to_csv, save_checkpoint, write_report)
from .noise import (FrameStack, NoiseSpec, load_dataset, manifest_checksum, read_frames_bin, synth_dataset,
                    write_frames_bin, write_png)
from .trainer import DivergenceError, StrategyError, TrainConfig, normalize_strategy, split_validation, train_run

logger = logging.getLogger("opdlab")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _strategy(value: str) -> str:
    try:
        return normalize_strategy(value)
    except StrategyError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opdlab", description="Multi-frame denoising with mutual supervision.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a noisy multi-frame dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--noise", choices=["gaussian", "poisson", "speckle"], default="gaussian")
    s.add_argument("--sigma", type=float)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--looks", type=float)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--count", type=int, default=32)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clean-dir")

    t = sub.add_parser("train", help="train a denoiser with one supervision strategy")
    t.add_argument("--data", required=True)
    t.add_argument("--strategy", required=True, type=_strategy)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--val-every", type=int, default=250)
    t.add_argument("--all-pairs", action="store_true", help="use every coupled pair per sample per step")
    t.add_argument("--record-time", action="store_true", help="fill the seconds column (makes logs non-reproducible)")
    t.add_argument("--out", default="model.opd")
    t.add_argument("--log", default=None, help="CSV log path (default: <out>.csv)")

    e = sub.add_parser("eval", help="score a model or frame averaging against clean references")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--method", choices=["aar"])
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--mode", choices=["per-frame", "fused"], default="per-frame")

    d = sub.add_parser("denoise", help="denoise one frame stack")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True, help="sample directory or frames_f32.bin file")
    d.add_argument("--output", required=True)
    d.add_argument("--mode", choices=["per-frame", "fused"], default="per-frame")
    d.add_argument("--figure", action="store_true", help="also render a comparison PNG")

    c = sub.add_parser("compare", help="train and evaluate strategies over several seeds")
    c.add_argument("--data", required=True)
    c.add_argument("--strategies", default="n2n,opd-rc,opd-al")
    c.add_argument("--seeds", type=int, default=3, help="number of seeds (0..k-1)")
    c.add_argument("--steps", type=int, default=2000)
    c.add_argument("--lr", type=float, default=1e-3)
    c.add_argument("--batch", type=int, default=4)
    c.add_argument("--log-every", type=int, default=10)
    c.add_argument("--val-every", type=int, default=250)
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--out", default="compare_out")
    c.add_argument("--no-figures", action="store_true")
    return p


def cmd_synth(args) -> int:
    given = {"gaussian": args.sigma, "poisson": args.lam, "speckle": args.looks}
    extra = [k for k, v in given.items() if v is not None and k != args.noise]
    if extra:
        raise UsageError(f"--noise {args.noise} conflicts with the parameter for {', '.join(extra)}")
    defaults = {"gaussian": 25.0, "poisson": 30.0, "speckle": 4.0}
    value = given[args.noise] if given[args.noise] is not None else defaults[args.noise]
    try:
        spec = {"gaussian": NoiseSpec.gaussian, "poisson": NoiseSpec.poisson, "speckle": NoiseSpec.speckle}[args.noise](value)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.frames < 2:
        raise UsageError("--frames must be at least 2")
    manifest = synth_dataset(args.out, spec, args.frames, args.seed, args.count, args.size, args.clean_dir)
    path = Path(args.out) / "manifest.json"
    print(f"{path}  samples={len(manifest['samples'])} m={manifest['m']} noise={spec.to_dict()} "
          f"sha256={manifest_checksum(args.out)[:16]}")
    return EXIT_OK


def _load(path) -> list[FrameStack]:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read dataset: {exc}")


def cmd_train(args) -> int:
    stacks = _load(args.data)
    config = TrainConfig(strategy=args.strategy, steps=args.steps, batch_samples=args.batch, learning_rate=args.lr,
                         seed=args.seed, log_every=args.log_every, val_every=args.val_every,
                         all_pairs=args.all_pairs, record_time=args.record_time)
    train, val = split_validation(stacks, config.validation_fraction, config.seed)
    net, log = train_run(config, train, val)
    save_checkpoint(args.out, net, config.strategy, config.steps)
    log_path = args.log or str(Path(args.out).with_suffix(".csv"))
    log_to_csv(log, log_path)
    final = log.final_validation
    msg = f"checkpoint {args.out}  log {log_path}"
    if final is not None:
        msg += f"  val psnr {final.psnr:.3f} ssim {final.ssim:.4f} rmse {final.rmse:.4f}"
    print(msg)
    return EXIT_OK


def _report_block(report: MetricsReport) -> dict:
    return {"aggregate": report.aggregate(), "proxy_reference": report.proxy_reference,
            "per_sample": [{"id": i, "psnr": p, "ssim": s, "rmse": r}
                           for i, p, s, r in zip(report.sample_ids, report.psnr, report.ssim, report.rmse)]}


def cmd_eval(args) -> int:
    stacks = _load(args.data)
    t0 = time.perf_counter()
    if args.method == "aar":
        method, result = "aar", evaluate_aar(stacks)
    else:
        net, header = load_checkpoint(args.model)
        method = f"model:{header.get('strategy')}"
        result = evaluate_model(net, stacks, args.mode.replace("-", "_"))
    inp = evaluate_input(stacks)
    report = {"method": method, "mode": args.mode, "data": str(args.data), "samples": len(stacks),
              "input": _report_block(inp), "input_psnr_unclipped": noisy_input_psnr(stacks),
              "result": _report_block(result), "runtime_seconds": time.perf_counter() - t0}
    write_report(args.report, report)
    agg, base = result.aggregate(), inp.aggregate()
    print(f"{method}: psnr {agg['psnr']:.3f} (input {base['psnr']:.3f}) ssim {agg['ssim']:.4f} rmse {agg['rmse']:.4f}")
    return EXIT_OK


def _read_input_stack(path: Path) -> FrameStack:
    if path.is_dir():
        path = path / "frames_f32.bin"
    try:
        frames = read_frames_bin(path)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc))
    return FrameStack(frames, None, path.parent.name)


def cmd_denoise(args) -> int:
    net, _ = load_checkpoint(args.model)
    stack = _read_input_stack(Path(args.input))
    outputs = denoise_stack(net, stack)
    if args.mode == "fused":
        outputs = outputs.mean(axis=0, keepdims=True)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for j, img in enumerate(outputs):
        write_png(out / f"estimate_{j:02d}.png", img)
    write_frames_bin(out / "estimates_f32.bin", outputs)
    if args.figure:
        from .plotting import plot_stack
        plot_stack(stack.frames, outputs[0], out / "comparison.png")
    print(f"wrote {len(outputs)} estimate(s) to {out}")
    return EXIT_OK


def write_table_csv(rows: list[dict], path: Path) -> None:
    cols = ["method"] + [f"{k}_{s}" for k in METRICS for s in ("mean", "std")] + ["fused_psnr_mean", "n_seeds"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in cols})


def write_curves_csv(report: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "seed", "step", "train_loss", "mse_term", "msa_term"])
        for cell in report["cells"]:
            for step, loss, mse_t, msa_t in cell.get("curve", []):
                w.writerow([cell["strategy"], cell["seed"], step, repr(loss),
                            "" if mse_t is None else repr(mse_t), "" if msa_t is None else repr(msa_t)])


def cmd_compare(args) -> int:
    stacks = _load(args.data)
    strategies = [s for s in args.strategies.split(",") if s]
    try:
        strategies = [normalize_strategy(s) for s in strategies]
    except StrategyError as exc:
        raise UsageError(str(exc))
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    base = TrainConfig(strategy=strategies[0], steps=args.steps, batch_samples=args.batch, learning_rate=args.lr,
                       log_every=args.log_every, val_every=args.val_every)
    report = compare(stacks, strategies, list(range(args.seeds)), base, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = table_rows(report)
    report["table"] = rows
    write_curves_csv(report, out / "curves.csv")
    for cell in report["cells"]:
        cell.pop("curve", None)
    write_table_csv(rows, out / "table.csv")
    if not args.no_figures:
        from .plotting import plot_psnr_bars
        plot_psnr_bars(rows, out / "psnr.png")
        _plot_curves_from_csv(out / "curves.csv", strategies, out / "curves.png")
    write_report(out / "report.json", report)
    for r in rows:
        print(f"{r['method']:>8}  psnr {r['psnr_mean']:.3f} ± {r['psnr_std']:.3f}  "
              f"ssim {r['ssim_mean']:.4f}  rmse {r['rmse_mean']:.4f}")
    return EXIT_PARTIAL if report["failed_cells"] else EXIT_OK


def _plot_curves_from_csv(path: Path, strategies, fig_path: Path) -> None:
    from .plotting import plot_curves

    cells: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["strategy"], int(row["seed"]))
            cells.setdefault(key, []).append((int(row["step"]), float(row["train_loss"]),
                                              float(row["mse_term"]) if row["mse_term"] else None,
                                              float(row["msa_term"]) if row["msa_term"] else None))
    report = {"strategies": strategies,
              "cells": [{"strategy": s, "seed": seed, "status": "ok", "curve": c} for (s, seed), c in cells.items()]}
    plot_curves(report, fig_path)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "denoise": cmd_denoise, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"opdlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"opdlab {args.command}: checkpoint error ({exc.code}): {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"opdlab {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
