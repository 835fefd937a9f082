"""Versioned binary checkpoints: model config + vocab, named parameter
blobs, and optimizer state. Byte-identical for identical state."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MagicMismatchError, TruncatedFileError, VersionMismatchError

MAGIC = b"ALIF"
VERSION = 1


def _write_blob(fh, name: str, arr: np.ndarray) -> None:
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<I", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, fh, path):
        self.fh = fh
        self.path = path

    def read(self, n: int) -> bytes:
        out = self.fh.read(n)
        if len(out) != n:
            raise TruncatedFileError(f"{self.path}: unexpected end of file")
        return out

    def read_u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def read_blob(self) -> tuple[str, np.ndarray]:
        name = self.read(self.read_u32()).decode("utf-8")
        ndim = self.read_u32()
        shape = struct.unpack(f"<{ndim}I", self.read(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.read(count * 8), dtype="<f8").reshape(shape)
        return name, data.copy()


def save_checkpoint(path: Path, config_payload: dict,
                    params: dict[str, np.ndarray],
                    optim_state: dict[str, np.ndarray]) -> None:
    """`config_payload` is any JSON-serializable header (model config, vocab,
    step counter); `params` and `optim_state` are name -> float64 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(config_payload, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for section in (params, optim_state):
            fh.write(struct.pack("<I", len(section)))
            for name in section:
                _write_blob(fh, name, np.asarray(section[name], dtype=np.float64))


def load_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        r = _Reader(fh, path)
        if r.read(4) != MAGIC:
            raise MagicMismatchError(f"{path}: not a checkpoint file")
        version = r.read_u32()
        if version != VERSION:
            raise VersionMismatchError(f"{path}: unsupported version {version}")
        config_payload = json.loads(r.read(r.read_u32()).decode("utf-8"))
        sections = []
        for _ in range(2):
            section: dict[str, np.ndarray] = {}
            for _ in range(r.read_u32()):
                name, data = r.read_blob()
                section[name] = data
            sections.append(section)
        if fh.read(1):
            raise TruncatedFileError(f"{path}: trailing bytes after payload")
    return config_payload, sections[0], sections[1]
