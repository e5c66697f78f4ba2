"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LEBM"  u32 version  u32 record_count
    record*: u16 name_len, name (utf-8), u8 kind, u8 ndim, u32 dim * ndim, payload
    u64 checksum  (BLAKE2b, 8-byte digest, of every preceding byte)

Record kinds: 0 = float64 array, 1 = uint64 array, 2 = utf-8 text (one dim,
the byte length). Records are written in a fixed order, so saving the same
state twice gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import EbmPrior, Generator, ModelParams
from .numerics import AdamState, Layer

MAGIC = b"LEBM"
VERSION = 1
_F64, _U64, _TEXT = 0, 1, 2


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    opt_alpha: AdamState
    opt_beta: AdamState
    iteration: int
    seed: int
    config_text: str = ""
    version: int = VERSION


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _arch(params: ModelParams) -> str:
    def layers(ls):
        return [{"activation": l.activation, "slope": l.slope} for l in ls]

    return json.dumps(
        {"alpha": layers(params.alpha.layers), "beta": layers(params.beta.layers)},
        sort_keys=True,
    )


def _records(ckpt: Checkpoint) -> list[tuple[str, int, np.ndarray | bytes]]:
    recs: list[tuple[str, int, np.ndarray | bytes]] = [
        ("arch", _TEXT, _arch(ckpt.params).encode()),
        ("config", _TEXT, ckpt.config_text.encode()),
        ("state", _U64, np.array([ckpt.iteration, ckpt.seed], dtype=np.uint64)),
        ("beta.sigma", _F64, np.array([ckpt.params.beta.sigma])),
    ]
    for prefix, layers in (("alpha", ckpt.params.alpha.layers), ("beta", ckpt.params.beta.layers)):
        for i, layer in enumerate(layers):
            recs.append((f"{prefix}.{i}.weight", _F64, layer.weight))
            recs.append((f"{prefix}.{i}.bias", _F64, layer.bias))
    for prefix, opt in (("adam_alpha", ckpt.opt_alpha), ("adam_beta", ckpt.opt_beta)):
        recs.append((f"{prefix}.hyper", _F64, np.array([opt.lr, opt.beta1, opt.beta2, opt.eps])))
        recs.append((f"{prefix}.t", _U64, np.array([opt.t], dtype=np.uint64)))
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            recs.append((f"{prefix}.m.{i}", _F64, m))
            recs.append((f"{prefix}.v.{i}", _F64, v))
    return recs


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    recs = _records(ckpt)
    out = bytearray(MAGIC + struct.pack("<II", ckpt.version, len(recs)))
    for name, kind, value in recs:
        raw_name = name.encode()
        if kind == _TEXT:
            shape, payload = (len(value),), value
        else:
            arr = np.ascontiguousarray(value, dtype="<f8" if kind == _F64 else "<u8")
            shape, payload = arr.shape, arr.tobytes()
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack(f"<BB{len(shape)}I", kind, len(shape), *shape)
        out += payload
    out += _digest(bytes(out))
    return bytes(out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a failed write leaves any previous file untouched."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 + 8:
        raise CheckpointError("truncated checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError("not an LEBM checkpoint (bad magic)")
    body, digest = data[:-8], data[-8:]
    if _digest(body) != digest:
        raise CheckpointError("checkpoint digest mismatch (file corrupt or truncated)")
    r = _Reader(body)
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {VERSION})")
    recs: dict[str, object] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        kind, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        if kind == _TEXT:
            recs[name] = r.take(shape[0]).decode()
        elif kind in (_F64, _U64):
            n = int(np.prod(shape))
            dtype = "<f8" if kind == _F64 else "<u8"
            recs[name] = np.frombuffer(r.take(8 * n), dtype=dtype).reshape(shape).astype(
                np.float64 if kind == _F64 else np.uint64
            )
        else:
            raise CheckpointError(f"record {name!r} has unknown kind {kind}")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last record")
    return _assemble(recs)


def _assemble(recs: dict) -> Checkpoint:
    try:
        arch = json.loads(recs["arch"])

        def layers(prefix):
            return [
                Layer(recs[f"{prefix}.{i}.weight"], recs[f"{prefix}.{i}.bias"], spec["activation"], spec["slope"])
                for i, spec in enumerate(arch[prefix])
            ]

        params = ModelParams(
            EbmPrior(layers("alpha")), Generator(layers("beta"), float(recs["beta.sigma"][0]))
        )

        def adam(prefix, n):
            lr, b1, b2, eps = (float(v) for v in recs[f"{prefix}.hyper"])
            return AdamState(
                lr=lr,
                beta1=b1,
                beta2=b2,
                eps=eps,
                t=int(recs[f"{prefix}.t"][0]),
                m=[recs[f"{prefix}.m.{i}"] for i in range(n)],
                v=[recs[f"{prefix}.v.{i}"] for i in range(n)],
            )

        iteration, seed = (int(v) for v in recs["state"])
        return Checkpoint(
            params=params,
            opt_alpha=adam("adam_alpha", 2 * len(arch["alpha"])),
            opt_beta=adam("adam_beta", 2 * len(arch["beta"])),
            iteration=iteration,
            seed=seed,
            config_text=recs["config"],
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing record {exc.args[0]!r}") from None


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def checkpoint_io(mode: str, path, ckpt: Checkpoint | None = None) -> Checkpoint:
    if mode == "save":
        if ckpt is None:
            raise ValueError("save needs a checkpoint")
        save_checkpoint(path, ckpt)
        return ckpt
    if mode == "load":
        return load_checkpoint(path)
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")
