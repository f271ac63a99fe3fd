"""Versioned binary container for named float64 parameter blocks.

Layout (little-endian):

    magic "ADPTLAB1" | format version u32 | config digest 32 raw bytes |
    block count u32 | blocks...

    block: name length u16 | name utf-8 | ndim u8 | dims u32 * ndim |
           data raw float64

Blocks are written sorted by name, so a container's bytes are a pure
function of its contents.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ADPTLAB1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_digest(config) -> str:
    """sha256 of the canonical JSON form of a config object."""
    if is_dataclass(config):
        config = asdict(config)
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def blocks_digest(blocks: dict[str, np.ndarray]) -> str:
    """Order-independent digest over (name, shape, bytes) of every block."""
    h = hashlib.sha256()
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype=np.float64)
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path: Path, blocks: dict[str, np.ndarray],
                    cfg_digest: str) -> None:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), bytes.fromhex(cfg_digest)]
    parts.append(struct.pack("<I", len(blocks)))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype=np.float64)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], str]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic bytes; not a parameter container")
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    cfg_digest = blob[off:off + 32].hex()
    off += 32
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).copy()
        off += 8 * size
        blocks[name] = arr.reshape(shape)
    if off != len(blob):
        raise CheckpointError("trailing bytes in container")
    return blocks, cfg_digest


def named_blocks(obj, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten any parameter container exposing named_tensors()."""
    return {f"{prefix}{name}": t.data for name, t in obj.named_tensors()}
