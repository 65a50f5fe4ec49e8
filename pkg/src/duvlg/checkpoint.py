"""Bit-exact checkpoint serialization.

File layout (all integers little-endian):

    magic   b"DUVLGCKPT"
    version u32 (currently 1)
    hlen    u32, length of the JSON header in bytes
    header  JSON: run config, step, rng state, optimizer scalars, and the
            ordered record manifest [[name, shape], ...]
    data    the records' float64 buffers, little-endian, concatenated in
            manifest order: parameters first, then Adam first/second moments

Loading rebuilds the model from the stored config (the frozen featurizer
and codebook regenerate from their named seeds) and overwrites every
parameter buffer byte-for-byte.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, build_model, config_dict, config_from_dict
from .data import TextVocab
from .model import DuVlgModel
from .optim import OptimState

MAGIC = b"DUVLGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class RecordShapeError(CheckpointError):
    pass


@dataclass
class LoadedCheckpoint:
    model: DuVlgModel
    optim: OptimState
    rng: np.random.Generator
    step: int
    config: RunConfig
    vocab: TextVocab


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_checkpoint(path, model: DuVlgModel, optim: OptimState,
                    rng: np.random.Generator, step: int, cfg: RunConfig):
    """Atomic write (temp file + rename)."""
    records = []
    buffers = []
    for name, p in model.named_parameters():
        records.append([name, list(p.values.shape)])
        buffers.append(p.values)
    for kind, table in (("m", optim.m), ("v", optim.v)):
        for name, p in model.named_parameters():
            buf = table.get(name)
            if buf is None:
                buf = np.zeros_like(p.values)
            records.append([f"adam.{kind}.{name}", list(buf.shape)])
            buffers.append(buf)

    header = {
        "config": config_dict(cfg),
        "step": int(step),
        "rng_state": _rng_state(rng),
        "optim": {"lr": optim.lr, "beta1": optim.beta1, "beta2": optim.beta2,
                  "eps": optim.eps, "clip_norm": optim.clip_norm,
                  "step_count": optim.step_count},
        "records": records,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(np.ascontiguousarray(buf, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        raw = fh.read()

    if len(raw) < len(MAGIC) + 8:
        raise TruncatedCheckpointError(f"{path}: shorter than the fixed header")
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    off = len(MAGIC) + 8
    if len(raw) < off + hlen:
        raise TruncatedCheckpointError(f"{path}: truncated JSON header")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    off += hlen

    cfg = config_from_dict(header["config"])
    model, vocab = build_model(cfg)
    optim = OptimState(lr=header["optim"]["lr"], beta1=header["optim"]["beta1"],
                       beta2=header["optim"]["beta2"], eps=header["optim"]["eps"],
                       clip_norm=header["optim"]["clip_norm"],
                       step_count=header["optim"]["step_count"])

    arrays = {}
    for name, shape in header["records"]:
        shape = tuple(shape)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if shape else 8
        if len(raw) < off + nbytes:
            raise TruncatedCheckpointError(f"{path}: record {name!r} is cut short")
        arrays[name] = np.frombuffer(raw[off:off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")

    for name, p in model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter record {name!r}")
        if arrays[name].shape != p.values.shape:
            raise RecordShapeError(
                f"{path}: {name!r} has shape {arrays[name].shape}, model wants {p.values.shape}")
        p.values[...] = arrays[name]
        m, v = arrays.get(f"adam.m.{name}"), arrays.get(f"adam.v.{name}")
        if m is None or v is None:
            raise CheckpointError(f"{path}: missing optimizer moments for {name!r}")
        optim.m[name] = m
        optim.v[name] = v

    return LoadedCheckpoint(model=model, optim=optim, rng=_restore_rng(header["rng_state"]),
                            step=int(header["step"]), config=cfg, vocab=vocab)
