"""Binary checkpoint container with integrity checking.

Layout: 4-byte magic "ASV1", one version byte, a sequence of sections,
and a trailing CRC32 (little-endian u32) over every preceding byte.
Each section is a tag byte plus a u64 little-endian payload length plus
the payload:

  tag 1  config    utf-8 "key=value" lines
  tag 2  param     u16 name length, name, u8 rank, u64 dims, f64 data
  tag 3  moment    same layout as param (optimizer buffers)
  tag 4  rng       u16 name length, name, u64 seed, u64 counter
  tag 5  counters  utf-8 "key=value" lines

Sections are written in a canonical order (config, params sorted by
name, moments sorted, rng sorted, counters), so saving a loaded
checkpoint reproduces the original bytes exactly. Loads fail with a
distinct error type for a wrong magic, an unsupported version, a short
or overlong file, and a checksum mismatch; no partially parsed state
ever escapes.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ContractError,
    FormatError,
    TruncationError,
    VersionError,
)

MAGIC = b"ASV1"
VERSION = 1

_TAG_CONFIG = 1
_TAG_PARAM = 2
_TAG_MOMENT = 3
_TAG_RNG = 4
_TAG_COUNTERS = 5


@dataclass
class Checkpoint:
    """Everything needed to resume a run bit-exactly."""

    config: dict[str, str] = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict[str, tuple[int, int]] = field(default_factory=dict)
    counters: dict[str, str] = field(default_factory=dict)


def _encode_kv(d: dict[str, str]) -> bytes:
    for k, v in d.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ContractError(f"key/value may not contain '=' in key or newlines: {k!r}")
    return "".join(f"{k}={d[k]}\n" for k in sorted(d)).encode("utf-8")


def _decode_kv(payload: bytes, what: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what} section is not valid utf-8: {exc}") from exc
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed {what} line {line!r}")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    data = np.asarray(arr, dtype=np.float64)
    name_b = name.encode("utf-8")
    if len(name_b) > 0xFFFF:
        raise ContractError(f"name too long: {name!r}")
    if data.ndim > 0xFF:
        raise ContractError(f"rank too large for {name!r}")
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<B", data.ndim)
    dims = b"".join(struct.pack("<Q", d) for d in data.shape)
    return head + dims + data.astype("<f8").tobytes()


class _Reader:
    def __init__(self, payload: bytes, what: str):
        self.buf = payload
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(f"{self.what} section ends mid-record")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def _decode_name(r: _Reader) -> str:
    (name_len,) = struct.unpack("<H", r.take(2))
    try:
        return r.take(name_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{r.what} name is not valid utf-8: {exc}") from exc


def _decode_array(r: _Reader) -> tuple[str, np.ndarray]:
    name = _decode_name(r)
    (rank,) = struct.unpack("<B", r.take(1))
    dims = [struct.unpack("<Q", r.take(8))[0] for _ in range(rank)]
    count = math.prod(dims) if dims else 1
    data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(dims)


def _decode_rng(r: _Reader) -> tuple[str, tuple[int, int]]:
    name = _decode_name(r)
    (seed,) = struct.unpack("<Q", r.take(8))
    (counter,) = struct.unpack("<Q", r.take(8))
    return name, (seed, counter)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize in canonical order; same checkpoint, same bytes."""
    sections: list[tuple[int, bytes]] = [(_TAG_CONFIG, _encode_kv(ckpt.config))]
    for name in sorted(ckpt.params):
        sections.append((_TAG_PARAM, _encode_array(name, ckpt.params[name])))
    for name in sorted(ckpt.moments):
        sections.append((_TAG_MOMENT, _encode_array(name, ckpt.moments[name])))
    rng_payload = b""
    for name in sorted(ckpt.rng):
        seed, counter = ckpt.rng[name]
        name_b = name.encode("utf-8")
        rng_payload += struct.pack("<H", len(name_b)) + name_b
        rng_payload += struct.pack("<QQ", seed, counter)
    sections.append((_TAG_RNG, rng_payload))
    sections.append((_TAG_COUNTERS, _encode_kv(ckpt.counters)))

    body = MAGIC + struct.pack("<B", VERSION)
    for tag, payload in sections:
        body += struct.pack("<B", tag) + struct.pack("<Q", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 1 + 4:
        raise TruncationError(f"file too short to be a checkpoint ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    version = blob[len(MAGIC)]
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    body, crc_bytes = blob[:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError("checkpoint checksum mismatch")

    ckpt = Checkpoint()
    pos = len(MAGIC) + 1
    while pos < len(body):
        if pos + 9 > len(body):
            raise TruncationError("section header runs past end of file")
        tag = body[pos]
        (length,) = struct.unpack("<Q", body[pos + 1 : pos + 9])
        pos += 9
        if pos + length > len(body):
            raise TruncationError("section payload runs past end of file")
        payload = body[pos : pos + length]
        pos += length
        if tag == _TAG_CONFIG:
            ckpt.config = _decode_kv(payload, "config")
        elif tag in (_TAG_PARAM, _TAG_MOMENT):
            r = _Reader(payload, "tensor")
            target = ckpt.params if tag == _TAG_PARAM else ckpt.moments
            while not r.done:
                name, arr = _decode_array(r)
                target[name] = arr
        elif tag == _TAG_RNG:
            r = _Reader(payload, "rng")
            while not r.done:
                name, state = _decode_rng(r)
                ckpt.rng[name] = state
        elif tag == _TAG_COUNTERS:
            ckpt.counters = _decode_kv(payload, "counters")
        else:
            raise FormatError(f"unknown section tag {tag}")
    return ckpt


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
