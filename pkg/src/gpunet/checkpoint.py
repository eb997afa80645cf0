"""Checkpoint files.

Layout (little-endian): magic ``GPUC``, u16 version, u32 byte length of a
JSON header followed by the header, then one record per tensor: u16 name
length, name (UTF-8), u8 rank, rank x u32 extents, float32 values in C order.
The header names every tensor the file must contain, so truncation at a
record boundary is detected too.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import FormatError
from .model import GPUNet, NetworkConfig, layer_specs
from .tensor import ConvParams, Tensor
from .training import AdadeltaState

MAGIC = b"GPUC"
VERSION = 1


@dataclass
class Checkpoint:
    model: GPUNet
    optimizer: AdadeltaState | None = None

    @property
    def config(self) -> NetworkConfig:
        return self.model.config


def encode(model: GPUNet, optimizer: AdadeltaState | None = None) -> bytes:
    header = {"format": "gpunet-checkpoint", "network": model.config.to_dict(), "optimizer": None}
    arrays = [(n, t.data) for n, t in model.named_tensors()]
    if optimizer is not None:
        header["optimizer"] = {"rho": optimizer.rho, "eps": optimizer.eps}
        names = [n for n, _ in arrays]
        arrays += [(f"opt.acc_grad.{n}", a) for n, a in zip(names, optimizer.acc_grad)]
        arrays += [(f"opt.acc_delta.{n}", a) for n, a in zip(names, optimizer.acc_delta)]
    text = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(text)), text]
    for name, arr in arrays:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated while reading {what} at offset {self.pos} "
                              f"(need {n} bytes, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))


def decode(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, hlen = r.unpack("HI", "version and header length")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version} at offset 4")
    try:
        header = json.loads(r.take(hlen, "JSON header").decode())
        config = NetworkConfig.from_dict(header["network"])
        opt = header.get("optimizer")
        if opt is not None:
            opt = {"rho": float(opt["rho"]), "eps": float(opt["eps"])}
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, AttributeError,
            ValueError) as e:
        raise FormatError(f"{source}: invalid header at offset 10: {e}") from None

    tensors: dict[str, np.ndarray] = {}
    while r.pos < len(buf):
        start = r.pos
        (nlen,) = r.unpack("H", "tensor name length")
        try:
            name = r.take(nlen, "tensor name").decode()
        except UnicodeDecodeError:
            raise FormatError(f"{source}: undecodable tensor name at offset {start + 2}") from None
        (rank,) = r.unpack("B", f"rank of {name}")
        shape = r.unpack(f"{rank}I", f"extents of {name}")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count, f"values of {name}"), dtype="<f4")
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor {name!r} at offset {start}")
        tensors[name] = data.reshape(shape).astype(np.float32)

    expected = _expected_names(config, opt is not None)
    missing = [n for n in expected if n not in tensors]
    extra = [n for n in tensors if n not in expected]
    if missing:
        raise FormatError(f"{source}: missing tensors {missing[:3]}{'...' if len(missing) > 3 else ''}"
                          " (file truncated?)")
    if extra:
        raise FormatError(f"{source}: unexpected tensors {extra[:3]}")

    params = {}
    for layer in _layer_names(config):
        params[layer] = ConvParams(Tensor(tensors[f"{layer}.kernel"], requires_grad=True),
                                   Tensor(tensors[f"{layer}.bias"], requires_grad=True))
    try:
        model = GPUNet(config, params)
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from None
    state = None
    if opt is not None:
        names = [n for n, _ in model.named_tensors()]
        state = AdadeltaState(opt["rho"], opt["eps"],
                              [tensors[f"opt.acc_grad.{n}"] for n in names],
                              [tensors[f"opt.acc_delta.{n}"] for n in names])
    return Checkpoint(model, state)


def _layer_names(config: NetworkConfig) -> list[str]:
    return [name for name, *_ in layer_specs(config)]


def _expected_names(config: NetworkConfig, with_optimizer: bool) -> list[str]:
    names = [f"{layer}.{kind}" for layer in _layer_names(config) for kind in ("kernel", "bias")]
    if with_optimizer:
        names += [f"opt.acc_grad.{n}" for n in names] + [f"opt.acc_delta.{n}" for n in names]
    return names


def save(path, model: GPUNet, optimizer: AdadeltaState | None = None) -> None:
    Path(path).write_bytes(encode(model, optimizer))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))


def load_model(path) -> GPUNet:
    return load(path).model
