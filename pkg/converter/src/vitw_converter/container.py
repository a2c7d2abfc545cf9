"""VITW container writer/reader.

The byte layout is the normative interchange contract with the consuming
toolkit, implemented here independently: magic "VITW", version u32 LE,
entry count u32 LE; per entry: name length u16 LE, name UTF-8, dtype u8
(0 = f32), rank u8, dims u32 LE each, payload f32 LE row-major.
"""

import struct

import numpy as np

MAGIC = b"VITW"
VERSION = 1
DTYPE_F32 = 0


class ContainerError(Exception):
    pass


def write_container(entries, path) -> None:
    """entries: ordered name -> ndarray map; arrays are converted to f32."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, array in entries.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(array)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_F32, array.ndim))
        for dim in array.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(array.astype("<f4").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_container(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    entries = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        dtype_code, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if dtype_code != DTYPE_F32:
            raise ContainerError(f"{path}: entry '{name}' has dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if dims else 1
        if len(blob) < offset + 4 * n:
            raise ContainerError(f"{path}: truncated payload for '{name}'")
        entries[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims).copy()
        offset += 4 * n
    return entries
