"""Checkpoint persistence.

File format: magic ``KGMD``, little-endian u32 format version, u32 header
length, canonical JSON header (configs, shapes, digests, optimizer metadata),
then raw little-endian float64 blobs for every parameter table in registry
order followed by the optimizer state arrays.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .optim import AdamOptimizer, SgdOptimizer
from .params import Dims, ModelConfig, Parameters
from .training import TrainConfig

MAGIC = b"KGMD"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    domain: int | None
    model_config: ModelConfig
    train_config: TrainConfig | None
    dims: Dims
    params: Parameters
    optimizer: object | None
    step: int
    seed: int
    vocab_digests: dict


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(params, optimizer, path, vocab_digests, step=0, seed=0, domain=None,
                    train_config=None):
    """Write a checkpoint; byte-identical for identical inputs."""
    opt_meta = None
    state = []
    if optimizer is not None:
        state = optimizer.state_arrays()
        opt_meta = {"kind": optimizer.kind, "t": optimizer.t, "lr": optimizer.lr}
        if optimizer.kind == "adam":
            opt_meta.update(beta1=optimizer.beta1, beta2=optimizer.beta2, eps=optimizer.eps)
        opt_meta["state"] = [name for name, _ in state]
    header = {
        "domain": domain,
        "model_config": params.config.to_json_dict(),
        "train_config": train_config.to_json_dict() if train_config is not None else None,
        "dims": params.dims.to_json_dict(),
        "seed": seed,
        "step": step,
        "vocab_digests": dict(vocab_digests),
        "tables": [{"name": n, "shape": list(params[n].shape)} for n in params.names()],
        "optimizer": opt_meta,
    }
    blob = _canonical(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name in params.names():
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
        for _, arr in state:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path, expected_digests=None):
    """Read a checkpoint; refuses wrong magic/version and digest mismatches."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, header_len = struct.unpack("<II", _read_exact(fh, 8, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header = json.loads(_read_exact(fh, header_len, "header"))

        digests = header["vocab_digests"]
        if expected_digests is not None and dict(expected_digests) != digests:
            raise CheckpointError(
                "vocabulary digest mismatch: checkpoint was trained on a different bundle"
            )

        config = ModelConfig.from_json_dict(header["model_config"])
        dims = Dims(**header["dims"])
        train_config = (
            TrainConfig.from_json_dict(header["train_config"])
            if header.get("train_config") is not None
            else None
        )

        arrays = {}
        for entry in header["tables"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * count, f"table {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        params = Parameters(config, dims, arrays)

        optimizer = None
        meta = header.get("optimizer")
        if meta is not None:
            if meta["kind"] == "adam":
                optimizer = AdamOptimizer(
                    params, lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"]
                )
            else:
                optimizer = SgdOptimizer(params, lr=meta["lr"])
            optimizer.t = meta["t"]
            state = []
            for name in meta["state"]:
                pname = name.split(".", 1)[1]
                shape = params[pname].shape
                raw = _read_exact(fh, 8 * int(np.prod(shape)), f"optimizer state {name}")
                state.append((name, np.frombuffer(raw, dtype="<f8").reshape(shape).copy()))
            optimizer.load_state_arrays(state)
        extra = fh.read(1)
        if extra:
            raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")

    return Checkpoint(
        version=version,
        domain=header.get("domain"),
        model_config=config,
        train_config=train_config,
        dims=dims,
        params=params,
        optimizer=optimizer,
        step=header["step"],
        seed=header["seed"],
        vocab_digests=digests,
    )
