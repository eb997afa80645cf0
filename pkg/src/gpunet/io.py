"""Binary volume files and JSON Lines manifests."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"GPUV"
VOLUME_VERSION = 1
DTYPE_F32 = 0
_VOLUME_HEADER = struct.Struct("<4sH3IB")


class FormatError(ValueError):
    """Malformed or truncated file contents."""


def encode_volume(volume: np.ndarray) -> bytes:
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"volumes are 3D, got shape {vol.shape}")
    header = _VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *vol.shape, DTYPE_F32)
    return header + vol.astype("<f4").tobytes(order="F")


def decode_volume(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _VOLUME_HEADER.size:
        raise FormatError(f"{source}: {len(buf)} bytes is shorter than the "
                          f"{_VOLUME_HEADER.size}-byte volume header")
    magic, version, nx, ny, nz, dtype = _VOLUME_HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0, expected {VOLUME_MAGIC!r}")
    if version != VOLUME_VERSION:
        raise FormatError(f"{source}: unsupported volume version {version} at offset 4")
    if dtype != DTYPE_F32:
        raise FormatError(f"{source}: unsupported dtype code {dtype} at offset 18")
    expected = nx * ny * nz * 4
    got = len(buf) - _VOLUME_HEADER.size
    if got != expected:
        raise FormatError(f"{source}: data section has {got} bytes at offset "
                          f"{_VOLUME_HEADER.size}, expected {expected} for {nx}x{ny}x{nz}")
    data = np.frombuffer(buf, dtype="<f4", offset=_VOLUME_HEADER.size)
    return data.reshape((nx, ny, nz), order="F").astype(np.float32)


def write_volume(path, volume: np.ndarray) -> None:
    Path(path).write_bytes(encode_volume(volume))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes(), str(path))


@dataclass
class Sample:
    """One manifest entry: a volume path, its lesion count and, for
    annotated images, the lesion centers in voxel coordinates."""

    volume: str
    count: int
    centers: list[tuple[int, int, int]] | None = None
    root: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        if self.centers is not None and len(self.centers) != self.count:
            raise ValueError(f"count {self.count} does not match {len(self.centers)} centers")

    @property
    def path(self) -> Path:
        p = Path(self.volume)
        return p if p.is_absolute() else self.root / p

    def load(self) -> np.ndarray:
        return read_volume(self.path)

    def to_json(self) -> dict:
        d = {"volume": self.volume, "count": self.count}
        if self.centers is not None:
            d["centers"] = [list(map(int, c)) for c in self.centers]
        return d


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _parse_entry(obj, where: str, root: Path) -> Sample:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected a JSON object")
    if "volume" not in obj or not isinstance(obj["volume"], str):
        raise FormatError(f"{where}: missing or non-string \"volume\"")
    if "count" not in obj:
        raise FormatError(f"{where}: missing \"count\"")
    count = obj["count"]
    if not _is_int(count) or count < 0:
        raise FormatError(f"{where}: \"count\" must be a non-negative integer, got {count!r}")
    centers = obj.get("centers")
    if centers is not None:
        if not isinstance(centers, list) or not all(
                isinstance(c, list) and len(c) == 3 and all(_is_int(v) for v in c) for c in centers):
            raise FormatError(f"{where}: \"centers\" must be a list of [x, y, z] integer triples")
        if len(centers) != count:
            raise FormatError(f"{where}: \"count\" is {count} but {len(centers)} centers given")
        centers = [tuple(c) for c in centers]
    return Sample(obj["volume"], count, centers, root)


def read_manifest(path) -> list[Sample]:
    path = Path(path)
    samples = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{where}: invalid JSON ({e.msg})") from None
            samples.append(_parse_entry(obj, where, path.parent))
    return samples


def write_manifest(path, samples: list[Sample]) -> None:
    with Path(path).open("w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")
