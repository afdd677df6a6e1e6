"""Binary weight container: human-readable header, aligned float payload, CRC.

Layout:

    TFW1\\n
    version 1\\n
    mode <train_form|fused>\\n
    config <single-line json>\\n
    payload <payload bytes>\\n
    tensors <count>\\n
    <name> <d0,d1,...> <offset> <nbytes>\\n   (one line per tensor)
    end\\n
    <zero padding to a 16-byte boundary>
    <payload: raw little-endian float32, each tensor offset 16-byte aligned>
    <CRC-32 of the padded payload, 4 bytes little-endian>

Round trips are bit-exact; any payload corruption fails the CRC check.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import TFNet, TFNetConfig, build, fuse_model

__all__ = ["MAGIC", "ContainerData", "write_weights", "read_weights", "load_model"]

MAGIC = "TFW1"
VERSION = 1
ALIGN = 16


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


@dataclass(frozen=True)
class ContainerData:
    """Parsed container: config echo, model mode, and named tensors."""

    config: dict
    mode: str
    tensors: dict[str, np.ndarray]


def serialize_state(
    state: dict[str, np.ndarray], config: dict, mode: str
) -> bytes:
    """Encode named float32 tensors into container bytes."""
    entries = []
    offset = 0
    for name, arr in state.items():
        if " " in name:
            raise ValueError(f"tensor name {name!r} must not contain spaces")
        nbytes = arr.size * 4
        entries.append((name, arr.shape, offset, nbytes))
        offset = _align(offset + nbytes)
    payload_size = offset

    header_lines = [
        MAGIC,
        f"version {VERSION}",
        f"mode {mode}",
        f"config {json.dumps(config, sort_keys=True)}",
        f"payload {payload_size}",
        f"tensors {len(entries)}",
    ]
    for name, shape, off, nbytes in entries:
        dims = ",".join(str(d) for d in shape)
        header_lines.append(f"{name} {dims} {off} {nbytes}")
    header_lines.append("end")
    header = ("\n".join(header_lines) + "\n").encode()

    payload = bytearray(payload_size)
    for (name, _, off, nbytes), arr in zip(entries, state.values()):
        payload[off : off + nbytes] = np.ascontiguousarray(
            arr, dtype="<f4"
        ).tobytes()

    out = bytearray(header)
    out.extend(b"\x00" * (_align(len(header)) - len(header)))
    out.extend(payload)
    out.extend(struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF))
    return bytes(out)


def write_weights(model: TFNet, path) -> None:
    """Serialize every model tensor (parameters and BN buffers) to `path`."""
    state = model.state_arrays()
    blob = serialize_state(state, model.config.to_dict(), model.mode)
    Path(path).write_bytes(blob)


def parse_container(data: bytes, source="container") -> ContainerData:
    """Decode container bytes, validating structure and the payload CRC."""
    end_marker = b"\nend\n"
    head_end = data.find(end_marker)
    if head_end < 0:
        raise DataError(f"{source}: no header terminator")
    header_len = head_end + len(end_marker)
    lines = data[:header_len].decode(errors="replace").splitlines()

    if not lines or lines[0] != MAGIC:
        raise DataError(f"{source}: bad magic (expected {MAGIC})")

    fields = {}
    tensor_lines = []
    for line in lines[1:]:
        if line == "end":
            break
        key, _, rest = line.partition(" ")
        if key in ("version", "mode", "config", "payload", "tensors") and key not in fields:
            fields[key] = rest
        else:
            tensor_lines.append(line)

    try:
        version = int(fields["version"])
        mode = fields["mode"]
        config = json.loads(fields["config"])
        payload_size = int(fields["payload"])
        tensor_count = int(fields["tensors"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: malformed header: {exc}") from exc
    if version != VERSION:
        raise DataError(f"{source}: unsupported version {version}")
    if mode not in ("train_form", "fused"):
        raise DataError(f"{source}: unknown mode {mode!r}")
    if len(tensor_lines) != tensor_count:
        raise DataError(
            f"{source}: header lists {tensor_count} tensors, found {len(tensor_lines)}"
        )

    payload_start = _align(header_len)
    expected_size = payload_start + payload_size + 4
    if len(data) != expected_size:
        raise DataError(
            f"{source}: size mismatch (expected {expected_size} bytes, got {len(data)})"
        )
    payload = data[payload_start : payload_start + payload_size]
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise DataError(f"{source}: payload CRC mismatch")

    tensors: dict[str, np.ndarray] = {}
    prev_end = 0
    for line in tensor_lines:
        parts = line.split(" ")
        if len(parts) != 4:
            raise DataError(f"{source}: malformed tensor line {line!r}")
        name, dims, off_s, nbytes_s = parts
        if name in tensors:
            raise DataError(f"{source}: duplicate tensor {name!r}")
        try:
            shape = tuple(int(d) for d in dims.split(","))
            off = int(off_s)
            nbytes = int(nbytes_s)
        except ValueError as exc:
            raise DataError(f"{source}: malformed tensor line {line!r}") from exc
        count = int(np.prod(shape)) if shape else 0
        if nbytes != count * 4:
            raise DataError(f"{source}: tensor {name}: {nbytes} bytes != shape {shape}")
        if off % ALIGN != 0 or off < prev_end or off + nbytes > payload_size:
            raise DataError(f"{source}: tensor {name}: bad offset {off}")
        prev_end = off + nbytes
        tensors[name] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=off
        ).reshape(shape).copy()

    return ContainerData(config=config, mode=mode, tensors=tensors)


def read_weights(path) -> ContainerData:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return parse_container(data, source=str(path))


def load_model(path) -> TFNet:
    """Rebuild a model from a container: config echo plus tensor payload."""
    container = read_weights(path)
    try:
        config = TFNetConfig.from_dict(container.config)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad config echo: {exc}") from exc
    model = build(config, seed=0)
    if container.mode == "fused":
        model = fuse_model(model)
    try:
        model.load_state(container.tensors)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return model
