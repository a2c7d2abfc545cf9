"""Checkpoint conversion and fixture minting.

Converting drops any pretrained classification head and mints a fresh
seeded single-output head, so the emitted container is always ready for
binary fine-tuning. Conversion is idempotent: the same source and seed
produce byte-identical containers.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .container import write_container
from .naming import DROPPED_SOURCE_NAMES, ConversionError, ModelDims, name_map
from .sources import read_source, write_raw_dir

HEAD_INIT_STD = 0.02
HEAD_INIT_TRUNC = 2.0


@dataclass
class ConversionReport:
    mapped: list = field(default_factory=list)  # (source, canonical, transform)
    dropped: list = field(default_factory=list)  # (source, shape)
    initialized: list = field(default_factory=list)  # (canonical, shape)

    def to_json(self) -> str:
        return json.dumps({
            "mapped": [{"source": s, "canonical": c, "transform": t} for s, c, t in self.mapped],
            "dropped": [{"source": s, "shape": list(shape)} for s, shape in self.dropped],
            "initialized": [{"canonical": c, "shape": list(shape)} for c, shape in self.initialized],
        }, indent=2) + "\n"

    def summary(self) -> str:
        lines = [f"mapped {len(self.mapped)} parameters"]
        for source, shape in self.dropped:
            lines.append(f"dropped pretrained '{source}' {tuple(shape)}")
        for canonical, shape in self.initialized:
            lines.append(f"initialized new '{canonical}' {tuple(shape)}")
        return "\n".join(lines)


def _truncated_normal(rng, shape):
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > HEAD_INIT_TRUNC
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > HEAD_INIT_TRUNC
    return (out * HEAD_INIT_STD).astype(np.float32)


def convert(source_path, dims: ModelDims, out_path, head_seed: int = 0) -> ConversionReport:
    """Map a source checkpoint onto the canonical scheme and write VITW."""
    source = read_source(source_path)
    report = ConversionReport()
    entries = {}
    for rule in name_map(dims):
        if rule.source not in source:
            raise ConversionError(f"source checkpoint is missing '{rule.source}'")
        array = np.asarray(source[rule.source], dtype=np.float32)
        if tuple(array.shape) != rule.source_shape:
            raise ConversionError(
                f"'{rule.source}' has shape {tuple(array.shape)}, expected {rule.source_shape}"
            )
        if rule.transform == "reshape":
            array = np.ascontiguousarray(array).reshape(rule.target_shape)
        entries[rule.canonical] = array
        report.mapped.append((rule.source, rule.canonical, rule.transform))

    for name in DROPPED_SOURCE_NAMES:
        if name in source:
            report.dropped.append((name, tuple(source[name].shape)))

    rng = np.random.default_rng(head_seed)
    head_weight = _truncated_normal(rng, (1, dims.dim))
    head_bias = np.zeros((1,), dtype=np.float32)
    entries["head.weight"] = head_weight
    entries["head.bias"] = head_bias
    report.initialized.append(("head.weight", head_weight.shape))
    report.initialized.append(("head.bias", head_bias.shape))

    write_container(entries, out_path)
    return report


def make_fixture(dims: ModelDims, seed: int, out_path, head_classes: int = 1000) -> None:
    """Mint a source-convention checkpoint with seeded random values; used for
    converter tests. Deterministic in seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for rule in name_map(dims):
        tensors[rule.source] = rng.normal(0.0, 0.05, size=rule.source_shape).astype(np.float32)
    tensors["head.weight"] = rng.normal(0.0, 0.05, size=(head_classes, dims.dim)).astype(np.float32)
    tensors["head.bias"] = np.zeros((head_classes,), dtype=np.float32)
    write_raw_dir(tensors, out_path)
