"""Binary parameter checkpoint container.

Layout: magic "SEWCKPT1", then one record per entry (u32 name length,
utf-8 name bytes, u32 rank, u32 extents, little-endian float32 payload),
then a trailing CRC32 (u32 LE) of all preceding bytes. Entries are written
in the order given; loading preserves it.

Arbitrary metadata (e.g. the model config) rides along as a JSON document
encoded byte-per-float32 under the reserved name "__config_json__".
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SEWCKPT1"
CONFIG_KEY = "__config_json__"


class CheckpointCorrupt(Exception):
    """Raised when the container is truncated or fails its CRC."""


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict | None = None) -> None:
    """Write parameters (cast to float32) plus optional JSON metadata."""
    chunks = [MAGIC]
    items = list(params.items())
    if config is not None:
        raw = json.dumps(config, sort_keys=True).encode("utf-8")
        items.append((CONFIG_KEY, np.frombuffer(raw, dtype=np.uint8).astype(np.float32)))
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    body = b"".join(chunks)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Read parameters and metadata back; verifies magic and CRC."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointCorrupt(f"{path}: bad magic or truncated file")
    body, crc_raw = blob[:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_raw)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointCorrupt(f"{path}: CRC mismatch")
    pos = len(MAGIC)
    params: dict[str, np.ndarray] = {}
    config = None

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointCorrupt(f"{path}: truncated record at byte {pos}")
        piece = body[pos: pos + n]
        pos += n
        return piece

    while pos < len(body):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        payload = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        if name == CONFIG_KEY:
            config = json.loads(bytes(payload.astype(np.uint8)).decode("utf-8"))
        else:
            params[name] = payload.astype(np.float32)
    return params, config
