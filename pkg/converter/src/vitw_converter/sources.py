"""Source checkpoint readers: raw-array directories and .npz archives.

The directory form is `index.json` plus one raw little-endian f32 file
per tensor:

    {"format": "raw-f32", "tensors": [{"name": ..., "shape": [...], "file": ...}]}
"""

import json
from pathlib import Path

import numpy as np

from .naming import ConversionError

INDEX_NAME = "index.json"
INDEX_FORMAT = "raw-f32"


def read_source(path) -> dict:
    path = Path(path)
    if path.is_dir():
        return _read_raw_dir(path)
    if path.suffix == ".npz":
        archive = np.load(path)
        return {name: np.asarray(archive[name], dtype=np.float32) for name in archive.files}
    raise ConversionError(f"unsupported source checkpoint: {path} "
                          "(expected a raw-array directory or an .npz archive)")


def _read_raw_dir(path: Path) -> dict:
    index_path = path / INDEX_NAME
    if not index_path.exists():
        raise ConversionError(f"{path}: missing {INDEX_NAME}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    if index.get("format") != INDEX_FORMAT:
        raise ConversionError(f"{index_path}: format must be '{INDEX_FORMAT}'")
    tensors = {}
    for spec in index["tensors"]:
        name, shape, fname = spec["name"], tuple(spec["shape"]), spec["file"]
        blob = (path / fname).read_bytes()
        count = int(np.prod(shape)) if shape else 1
        if len(blob) != 4 * count:
            raise ConversionError(f"{path / fname}: expected {4 * count} bytes for shape {shape}, "
                                  f"found {len(blob)}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count).reshape(shape).copy()
    return tensors


def write_raw_dir(tensors: dict, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {"format": INDEX_FORMAT, "tensors": []}
    for name, array in tensors.items():
        fname = name.replace(".", "_") + ".f32"
        (path / fname).write_bytes(np.ascontiguousarray(array, dtype="<f4").tobytes(order="C"))
        index["tensors"].append({"name": name, "shape": list(array.shape), "file": fname})
    (path / INDEX_NAME).write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
