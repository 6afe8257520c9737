"""Strategy x seed comparison on one dataset, in the shape of a results table."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from typing import Sequence

import numpy as np

from .evaluation import evaluate_input, evaluate_model, noisy_input_psnr
from .trainer import TrainConfig, normalize_strategy, split_validation, train_run

logger = logging.getLogger(__name__)

METRICS = ("psnr", "ssim", "rmse")


def run_cell(stacks: Sequence, config: TrainConfig) -> dict:
    """Train and evaluate one (strategy, seed) cell on the seed's validation split."""
    train, val = split_validation(stacks, config.validation_fraction, config.seed)
    cell = {"strategy": config.strategy, "seed": config.seed, "status": "ok"}
    t0 = time.perf_counter()
    try:
        net, log = train_run(config, train, val)
    except (FloatingPointError, RuntimeError) as exc:
        logger.error("%s seed %d failed: %s", config.strategy, config.seed, exc)
        cell.update(status="failed", error=str(exc))
        return cell
    per_frame = evaluate_model(net, val, "per_frame").aggregate()
    fused = evaluate_model(net, val, "fused").aggregate()
    cell.update({k: per_frame[k] for k in METRICS})
    cell.update({f"fused_{k}": fused[k] for k in METRICS})
    cell["seconds"] = time.perf_counter() - t0
    cell["curve"] = [(r.step, r.train_loss, r.mse_term, r.msa_term) for r in log.steps]
    return cell


def _run_cell_args(args):
    return run_cell(*args)


def summarize(cells: Sequence[dict], strategies: Sequence[str]) -> dict:
    summary = {}
    for s in strategies:
        ok = [c for c in cells if c["strategy"] == s and c["status"] == "ok"]
        entry = {"seeds": [c["seed"] for c in ok], "failed": sum(1 for c in cells if c["strategy"] == s) - len(ok)}
        for key in METRICS + tuple(f"fused_{k}" for k in METRICS):
            vals = [c[key] for c in ok]
            entry[key] = vals
            entry[f"{key}_mean"] = float(np.mean(vals)) if vals else math.nan
            entry[f"{key}_std"] = float(np.std(vals)) if vals else math.nan
        summary[s] = entry
    return summary


def compare(stacks: Sequence, strategies: Sequence[str], seeds: Sequence[int], base: TrainConfig,
            workers: int = 1) -> dict:
    """Train every (strategy, seed) pair and collect a report dictionary.

    Cells are independent and deterministic, so running them in parallel
    processes does not change any number; the report is assembled in
    (strategy, seed) order.
    """
    strategies = [normalize_strategy(s) for s in strategies]
    configs = [replace(base, strategy=s, seed=int(seed)) for s in strategies for seed in seeds]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell_args, [(stacks, c) for c in configs]))
    else:
        cells = [run_cell(stacks, c) for c in configs]

    inputs = []
    for seed in seeds:
        _, val = split_validation(stacks, base.validation_fraction, int(seed))
        agg = evaluate_input(val).aggregate()
        inputs.append({"seed": int(seed), **{k: agg[k] for k in METRICS}, "psnr_unclipped": noisy_input_psnr(val)})

    config = asdict(base)
    config.pop("strategy")
    config.pop("seed")
    return {
        "config": config,
        "strategies": strategies,
        "seeds": [int(s) for s in seeds],
        "input": inputs,
        "cells": cells,
        "summary": summarize(cells, strategies),
        "runtime_seconds": time.perf_counter() - t0,
        "failed_cells": sum(c["status"] != "ok" for c in cells),
    }


def table_rows(report: dict) -> list[dict]:
    """Rows of the results table: noisy input first, then one row per strategy."""
    rows = []
    inp = report["input"]
    rows.append({"method": "input", **{f"{k}_mean": float(np.mean([r[k] for r in inp])) for k in METRICS},
                 **{f"{k}_std": float(np.std([r[k] for r in inp])) for k in METRICS}})
    for s in report["strategies"]:
        e = report["summary"][s]
        row = {"method": s}
        for k in METRICS:
            row[f"{k}_mean"] = e[f"{k}_mean"]
            row[f"{k}_std"] = e[f"{k}_std"]
        row["fused_psnr_mean"] = e["fused_psnr_mean"]
        row["n_seeds"] = len(e["seeds"])
        rows.append(row)
    return rows
