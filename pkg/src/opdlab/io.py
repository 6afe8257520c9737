"""Checkpoints, CSV training logs and JSON run reports.

Checkpoint layout (all integers little-endian)::

    b"OPD1" | u32 header length | UTF-8 JSON header | float32 payload

The header lists the layer plan and every parameter shape in declared order;
the payload concatenates the parameters in that order.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .model import KERNEL, LAYER_PLAN, DenoiserNet
from .numerics import Tensor

CKPT_MAGIC = b"OPD1"
CKPT_VERSION = 1

LOG_COLUMNS = ("step", "epoch", "strategy", "train_loss", "mse_term", "msa_term",
               "val_psnr", "val_ssim", "val_rmse", "seconds")


class CheckpointError(ValueError):
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


class ArchitectureMismatchError(CheckpointError):
    code = "shape_mismatch"


def _header(net: DenoiserNet, strategy: str | None, steps: int) -> bytes:
    header = {
        "version": CKPT_VERSION,
        "plan": [{"name": n, "in": c, "out": o, "stride": s, "kernel": KERNEL} for n, c, o, s in net.plan],
        "params": [{"name": name, "shape": list(p.shape)} for name, p in net.named_parameters()],
        "seed": net.seed,
        "strategy": strategy,
        "steps": steps,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path: str | os.PathLike, net: DenoiserNet, strategy: str | None = None, steps: int = 0) -> None:
    header = _header(net, strategy, steps)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in net.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, list[np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 8:
        raise TruncatedCheckpointError(f"{path}: missing header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise TruncatedCheckpointError(f"{path}: header is truncated")
    header = json.loads(raw[8:8 + hlen])
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    shapes = [tuple(p["shape"]) for p in header["params"]]
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    payload = raw[8 + hlen:]
    if len(payload) != expected:
        raise TruncatedCheckpointError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    arrays, offset = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32))
        offset += n * 4
    return header, arrays


def load_checkpoint(path: str | os.PathLike) -> tuple[DenoiserNet, dict]:
    """Rebuild the denoiser stored at ``path``; returns (net, header)."""
    header, arrays = read_checkpoint(path)
    plan = tuple((p["name"], p["in"], p["out"], p["stride"]) for p in header["plan"])
    if plan != LAYER_PLAN:
        raise ArchitectureMismatchError(f"{path}: layer plan does not match this denoiser")
    expected = []
    for name, cin, cout, _ in LAYER_PLAN:
        expected += [(f"{name}.weight", (cout, cin, KERNEL, KERNEL)), (f"{name}.bias", (cout,))]
    got = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    if got != expected:
        raise ArchitectureMismatchError(f"{path}: parameter shapes do not match this denoiser")
    weights, biases = {}, {}
    for (pname, _), arr in zip(expected, arrays):
        layer, kind = pname.split(".")
        (weights if kind == "weight" else biases)[layer] = Tensor(arr, requires_grad=True)
    return DenoiserNet(weights, biases, seed=header.get("seed")), header


def load_into(path: str | os.PathLike, net: DenoiserNet) -> dict:
    """Copy parameters from ``path`` into an existing ``net``."""
    loaded, header = load_checkpoint(path)
    for (_, dst), src in zip(net.named_parameters(), loaded.parameters()):
        dst.data[...] = src.data
    return header


# --- CSV log ---------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def log_to_csv(log, path: str | os.PathLike | None = None) -> str:
    """Serialise a TrainLog; returns the text and writes it when ``path`` is given."""
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for kind, rec in log.rows():
        row = dict.fromkeys(LOG_COLUMNS)
        row.update(step=rec["step"], epoch=rec["epoch"], strategy=rec["strategy"], seconds=rec.get("seconds"))
        if kind == "t":
            row.update(train_loss=rec["train_loss"], mse_term=rec["mse_term"], msa_term=rec["msa_term"])
        else:
            row.update(val_psnr=rec["psnr"], val_ssim=rec["ssim"], val_rmse=rec["rmse"])
        writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_log_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- reports -------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return None
        return obj
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def write_report(path: str | os.PathLike, report: dict) -> None:
    Path(path).write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")


def read_report(path: str | os.PathLike) -> dict:
    return json.loads(Path(path).read_text())
