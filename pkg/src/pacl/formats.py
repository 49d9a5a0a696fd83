"""Netpbm image files and the ``PACL`` tensor checkpoint container.

Checkpoint layout (all integers little-endian)::

    b"PACL"  u32 version  u32 entry_count
    per entry:
        u32 name_len  name (UTF-8)  u8 dtype  u32 rank  u64 extent * rank  raw data
    u32 crc32 of every preceding byte

dtype tags: 0 = float32, 1 = float64, 2 = int64.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"PACL"
VERSION = 1
_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_NP = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TORCH = {v: k for k, v in _TAGS.items()}


class FormatError(ValueError):
    """A file could not be parsed or failed its integrity check."""


# -- netpbm -----------------------------------------------------------------

def _write_pnm(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, found {fields[0]!r}")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    n = w * h * channels
    raw = data[pos:pos + n]
    if len(raw) != n:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def save_ppm(path, image: torch.Tensor) -> None:
    """Write a 3 x H x W image with values in [0, 1] as binary P6."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected 3 x H x W image, got {tuple(image.shape)}")
    arr = torch.round(image.detach().double().clamp(0, 1) * 255).to(torch.uint8)
    _write_pnm(path, b"P6", arr.permute(1, 2, 0).numpy())


def load_ppm(path) -> torch.Tensor:
    arr = _read_pnm(path, b"P6", 3)
    return torch.from_numpy(arr).permute(2, 0, 1).float() / 255


def save_pgm(path, labels) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"expected H x W map, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("PGM values must lie in [0, 255]")
    _write_pnm(path, b"P5", arr.astype(np.uint8))


def load_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1).astype(np.int64)


# -- checkpoint --------------------------------------------------------------

def encode_checkpoint(entries: Mapping[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, t in entries.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TAGS:
            raise FormatError(f"entry {name!r}: unsupported dtype {t.dtype}")
        tag = _TAGS[t.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", tag, t.dim()))
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        parts.append(t.numpy().astype(_NP[tag], copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> dict[str, torch.Tensor]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a PACL checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            if tag not in _NP:
                raise FormatError(f"entry {name!r}: unknown dtype tag {tag}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * _NP[tag].itemsize
            if pos + nbytes > len(body):
                raise FormatError(f"entry {name!r}: truncated payload")
            arr = np.frombuffer(body, dtype=_NP[tag], count=nbytes // _NP[tag].itemsize, offset=pos)
            pos += nbytes
            out[name] = torch.from_numpy(arr.reshape(shape).copy())
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise FormatError("trailing bytes after last checkpoint entry")
    return out


def save_checkpoint(path, entries: Mapping[str, torch.Tensor]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(entries))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    return decode_checkpoint(Path(path).read_bytes())


def json_tensor(obj) -> torch.Tensor:
    """Pack a JSON-serialisable object as an int64 byte tensor (for ``meta/`` entries)."""
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return torch.tensor(list(raw), dtype=torch.int64)


def tensor_json(t: torch.Tensor):
    return json.loads(bytes(t.tolist()).decode("utf-8"))
