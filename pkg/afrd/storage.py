"""Checkpoint files and report artifacts.

Checkpoint layout, all integers little-endian:

    b"AFRD"  u32 version
    u32 header length, UTF-8 JSON header (model config, seed, optimizer step)
    u32 entry count
    per entry: u16 name length, name, u8 dtype code, u8 ndim, ndim x u32 dims
    float32 blobs in entry order

Entries are model parameters, BN running buffers and the AdamW moments
(``optim.exp_avg.<param>``, ``optim.exp_avg_sq.<param>``).
"""

import csv
import json
import logging
import os
import struct

import numpy as np
from pydantic import ValidationError

from afrd.config import ModelConfig
from afrd.errors import CheckpointFormatError
from afrd.models import AnomalyResult, EvalReport, TrainReport
from afrd.services import imageio
from afrd.services.network import AfrdModel
from afrd.services.trainer import AdamWState

logger = logging.getLogger(__name__)

MAGIC = b"AFRD"
VERSION = 1
_DTYPE_FLOAT32 = 1
_EXP_AVG = "optim.exp_avg."
_EXP_AVG_SQ = "optim.exp_avg_sq."


def _entries(model: AfrdModel, state: AdamWState | None) -> list[tuple[str, np.ndarray]]:
    entries = [(name, p.data) for name, p in model.named_parameters()]
    entries += list(model.named_buffers())
    if state is not None:
        for name, _ in model.trainable_parameters():
            if name in state.exp_avg:
                entries.append((_EXP_AVG + name, state.exp_avg[name]))
                entries.append((_EXP_AVG_SQ + name, state.exp_avg_sq[name]))
    return entries


def checkpoint_bytes(model: AfrdModel, state: AdamWState | None = None) -> bytes:
    header = json.dumps(
        {
            "config": model.config.model_dump(mode="json"),
            "seed": model.seed,
            "optimizer_step": state.step if state else 0,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    entries = _entries(model, state)

    parts = [struct.pack("<4sI", MAGIC, VERSION), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", _DTYPE_FLOAT32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in entries:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: AfrdModel, state: AdamWState | None, path: str) -> str:
    data = checkpoint_bytes(model, state)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    logger.info("Saved checkpoint %s (%d bytes)", path, len(data))
    return path


class _Reader:
    def __init__(self, path: str, data: bytes):
        self.path = path
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(self.path, f"truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse the whole file: (header, name -> float32 array). Nothing is built from a bad file."""
    with open(path, "rb") as f:
        reader = _Reader(path, f.read())

    magic, version = reader.unpack("<4sI", "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(path, f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(path, f"unsupported version {version}")
    (header_len,) = reader.unpack("<I", "header length")
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(path, f"corrupt header: {e}") from e

    (count,) = reader.unpack("<I", "entry count")
    manifest = []
    for i in range(count):
        (name_len,) = reader.unpack("<H", f"entry {i} name length")
        name = reader.take(name_len, f"entry {i} name").decode("utf-8", errors="replace")
        dtype, ndim = reader.unpack("<BB", f"entry {name} dtype")
        if dtype != _DTYPE_FLOAT32:
            raise CheckpointFormatError(path, f"entry {name}: unknown dtype code {dtype}")
        shape = reader.unpack(f"<{ndim}I", f"entry {name} shape")
        manifest.append((name, shape))

    arrays = {}
    for name, shape in manifest:
        size = int(np.prod(shape, dtype=np.int64)) * 4
        blob = reader.take(size, f"blob {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(shape)
    if reader.pos != len(reader.data):
        raise CheckpointFormatError(path, f"{len(reader.data) - reader.pos} trailing bytes")
    return header, arrays


def _assign(path: str, target: np.ndarray, name: str, arrays: dict[str, np.ndarray]) -> None:
    if name not in arrays:
        raise CheckpointFormatError(path, f"missing entry {name}")
    arr = arrays[name]
    if arr.shape != target.shape:
        raise CheckpointFormatError(path, f"entry {name}: shape {arr.shape}, model expects {target.shape}")
    target[...] = arr


def load_checkpoint_with_state(path: str) -> tuple[AfrdModel, AdamWState]:
    header, arrays = read_checkpoint(path)
    try:
        config = ModelConfig.model_validate(header["config"])
        seed = int(header["seed"])
        step = int(header["optimizer_step"])
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise CheckpointFormatError(path, f"invalid header: {e}") from e

    model = AfrdModel(config, seed)
    expected = set()
    for name, p in model.named_parameters():
        _assign(path, p.data, name, arrays)
        expected.add(name)
    for name, buf in model.named_buffers():
        _assign(path, buf, name, arrays)
        expected.add(name)

    state = AdamWState(step=step)
    for name, p in model.trainable_parameters():
        for prefix, store in ((_EXP_AVG, state.exp_avg), (_EXP_AVG_SQ, state.exp_avg_sq)):
            key = prefix + name
            if key in arrays:
                store[name] = arrays[key].astype(p.data.dtype)
                expected.add(key)
    unknown = sorted(set(arrays) - expected)
    if unknown:
        raise CheckpointFormatError(path, f"unexpected entries {unknown[:3]}")
    return model.eval(), state


def load_checkpoint(path: str) -> AfrdModel:
    model, _ = load_checkpoint_with_state(path)
    return model


def load_teacher_weights(model: AfrdModel, path: str) -> None:
    """Copy ``teacher.*`` parameters and buffers from a checkpoint into ``model``."""
    _, arrays = read_checkpoint(path)
    for name, p in model.teacher.named_parameters("teacher."):
        _assign(path, p.data, name, arrays)
    for name, buf in model.teacher.named_buffers("teacher."):
        _assign(path, buf, name, arrays)
    logger.info("Loaded teacher weights from %s", path)


# reports


def _fmt(value: float) -> str:
    return repr(float(value))


def write_eval_report(report: EvalReport, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    scores_path = os.path.join(out_dir, "scores.csv")
    with open(scores_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sample_id", "label", "image_score"])
        for sample_id, label, value in report.rows:
            writer.writerow([sample_id, label, _fmt(value)])

    roc_path = os.path.join(out_dir, "roc.csv")
    fpr, tpr, thresholds = report.roc
    with open(roc_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["fpr", "tpr", "threshold"])
        for row in zip(fpr, tpr, thresholds):
            writer.writerow([_fmt(v) for v in row])

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["metric", "value"])
        writer.writerow(["i_auroc", _fmt(report.i_auroc)])
        writer.writerow(["p_auroc", "" if report.p_auroc is None else _fmt(report.p_auroc)])
    return [scores_path, roc_path, metrics_path]


def export_map(result: AnomalyResult, maps_dir: str) -> str:
    """Min-max normalised 8-bit PGM plus a ``.range.txt`` sidecar holding (min, max)."""
    lo, hi = float(result.map.min()), float(result.map.max())
    if hi > lo:
        pixels = np.round((result.map - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(result.map.shape, dtype=np.uint8)
    path = os.path.join(maps_dir, f"{result.sample_id}.pgm")
    imageio.write_pgm(path, pixels)
    with open(os.path.join(maps_dir, f"{result.sample_id}.range.txt"), "w", encoding="utf-8") as f:
        f.write(f"{lo!r} {hi!r}\n")
    return path


def load_map(path: str) -> np.ndarray:
    """Rebuild a float map from its PGM and sidecar (exact up to 8-bit quantisation)."""
    pixels = imageio.read_pgm(path).astype(np.float64)
    with open(os.path.splitext(path)[0] + ".range.txt", encoding="utf-8") as f:
        lo, hi = (float(v) for v in f.read().split())
    return lo + pixels / 255.0 * (hi - lo)


def train_report_paths(checkpoint_path: str) -> tuple[str, str]:
    stem = os.path.splitext(checkpoint_path)[0]
    return stem + ".train.csv", stem + ".train.log"


def write_train_report(report: TrainReport, checkpoint_path: str, n_levels: int) -> tuple[str, str]:
    csv_path, log_path = train_report_paths(checkpoint_path)
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss"] + [f"entropy_l{l}" for l in range(n_levels)])
        for epoch, (loss, entropy) in enumerate(zip(report.losses, report.entropy), start=1):
            writer.writerow([epoch, _fmt(loss)] + [_fmt(h) for h in entropy])

    with open(log_path, "w", encoding="utf-8") as f:
        for epoch, (loss, omega) in enumerate(zip(report.losses, report.omega), start=1):
            weights = " ".join(
                f"omega[l{l}]=" + ",".join(f"{w:.4f}" for w in level) for l, level in enumerate(omega)
            )
            f.write(f"epoch {epoch} loss={loss:.6f} {weights}\n")
        f.write(f"wall_time={report.wall_time:.2f}s checkpoint={report.checkpoint_path}\n")
    return csv_path, log_path
