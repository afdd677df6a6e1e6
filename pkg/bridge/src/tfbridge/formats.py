"""Writers for the engine's wire formats, implemented against the documented layout.

The container layout (shared with the consuming engine):

    TFW1\\n  /  version 1\\n  /  mode <m>\\n  /  config <json>\\n
    payload <n>\\n  /  tensors <k>\\n  /  one "<name> <dims> <off> <len>"
    line per tensor  /  end\\n  /  zero pad to 16  /  payload (float32 LE,
    offsets 16-byte aligned)  /  CRC-32 of payload (LE uint32)

Fixture tensors use a smaller header: TFX1, a shape line, end, raw
float32 little-endian data.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

CONTAINER_MAGIC = "TFW1"
FIXTURE_MAGIC = "TFX1"
ALIGN = 16


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_container(path, tensors: dict[str, np.ndarray], config: dict, mode: str):
    entries = []
    offset = 0
    for name, arr in tensors.items():
        nbytes = int(arr.size) * 4
        entries.append((name, tuple(arr.shape), offset, nbytes))
        offset = _align(offset + nbytes)
    payload_size = offset

    lines = [
        CONTAINER_MAGIC,
        "version 1",
        f"mode {mode}",
        f"config {json.dumps(config, sort_keys=True)}",
        f"payload {payload_size}",
        f"tensors {len(entries)}",
    ]
    for name, shape, off, nbytes in entries:
        lines.append(f"{name} {','.join(str(d) for d in shape)} {off} {nbytes}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode()

    payload = bytearray(payload_size)
    for (name, _, off, nbytes), arr in zip(entries, tensors.values()):
        payload[off : off + nbytes] = np.ascontiguousarray(arr, dtype="<f4").tobytes()

    blob = bytearray(header)
    blob.extend(b"\x00" * (_align(len(header)) - len(header)))
    blob.extend(payload)
    blob.extend(struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF))
    Path(path).write_bytes(bytes(blob))


def write_fixture_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = (
        f"{FIXTURE_MAGIC}\nshape {','.join(str(d) for d in arr.shape)}\nend\n"
    ).encode()
    Path(path).write_bytes(header + arr.tobytes())


def read_fixture_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    marker = b"end\n"
    head_end = data.find(marker)
    if head_end < 0 or not data.startswith(FIXTURE_MAGIC.encode()):
        raise ValueError(f"{path}: not a fixture tensor file")
    lines = data[:head_end].decode().splitlines()
    shape = None
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "shape":
            shape = tuple(int(d) for d in rest.split(","))
    if shape is None:
        raise ValueError(f"{path}: missing shape line")
    raw = data[head_end + len(marker) :]
    count = int(np.prod(shape))
    if len(raw) != count * 4:
        raise ValueError(f"{path}: expected {count * 4} data bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
