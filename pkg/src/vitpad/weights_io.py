"""Bit-exact binary container ("VITW") for named parameter tensors.

Layout, all little-endian: magic "VITW", version u32, entry count u32;
then per entry: name length u16, name UTF-8, dtype u8 (0 = f32), rank u8,
dims u32 each, payload f32 row-major. Payloads are f32 only; higher
precisions are converted on write. The byte layout is normative: it is
the contract external weight converters target.
"""

import struct

import numpy as np

from .errors import CorruptionError, FormatError, VitPadIOError

MAGIC = b"VITW"
VERSION = 1
DTYPE_F32 = 0


def _entry_bytes(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise FormatError(f"entry name too long: {name[:32]!r}...")
    dims = array.shape
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", DTYPE_F32, len(dims))
    head += b"".join(struct.pack("<I", d) for d in dims)
    return head + array.astype("<f4").tobytes(order="C")


def write_container(params, path) -> None:
    """Write a name->tensor map (insertion order preserved)."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    seen = set()
    for name, value in params.items():
        if name in seen:
            raise FormatError(f"duplicate entry name '{name}'")
        seen.add(name)
        if isinstance(value, np.ndarray):
            array = value
        elif isinstance(getattr(value, "data", None), np.ndarray):
            array = value.data
        else:
            array = np.asarray(value)
        chunks.append(_entry_bytes(name, array))
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise VitPadIOError(f"cannot write weight container {path}: {exc}") from exc


def read_container(path) -> dict:
    """Read a container back into an ordered name -> float32 ndarray map.

    Validating the names/shapes against a model configuration is a
    separate step (vit.validate_params).
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise VitPadIOError(f"cannot read weight container {path}: {exc}") from exc

    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")

    entries = {}
    offset = 12
    for _ in range(count):
        if len(blob) < offset + 2:
            raise CorruptionError(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if len(blob) < offset + name_len + 2:
            raise CorruptionError(f"{path}: truncated entry header")
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        dtype_code, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if dtype_code != DTYPE_F32:
            raise FormatError(f"{path}: entry '{name}' has unsupported dtype code {dtype_code}")
        if len(blob) < offset + 4 * rank:
            raise CorruptionError(f"{path}: truncated dims for entry '{name}'")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if dims else 1
        if len(blob) < offset + 4 * n:
            raise CorruptionError(f"{path}: truncated payload for entry '{name}'")
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims)
        offset += 4 * n
        if name in entries:
            raise FormatError(f"{path}: duplicate entry name '{name}'")
        entries[name] = data.astype(np.float32)
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after last entry")
    return entries
