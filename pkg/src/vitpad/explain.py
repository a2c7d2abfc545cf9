"""Per-patch relevancy maps from recorded attention.

Two methods over the same [heads, N+1, N+1] attention stacks:

* attention rollout — gradient-free: each layer's head-mean is mixed
  half-and-half with the identity (residual paths carry signal too),
  row-normalized, and the per-layer matrices are multiplied through; the
  class-token row restricted to patch tokens is the map.
* gradient relevancy — the logit's gradient at each attention entry is
  multiplied elementwise with the attention, clamped non-negative,
  head-averaged, and accumulated as R += A_bar @ R starting from R = I.

Both maps are non-negative and normalized to sum 1 whenever any mass
survives; otherwise the zero map is returned as-is.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import vit
from .errors import DimensionError, VitPadIOError
from .preprocess import EYE_X, EYE_Y, align_crop, normalize, read_ppm
from .tensor import Tape, Tensor, backprop
from .util import parallel_map

ROLLOUT_IDENTITY_MIX = 0.5


@dataclass
class RelevancyMap:
    """Non-negative per-patch importance grid for one decision."""

    grid: np.ndarray  # [g, g]
    sample_id: str
    method: str  # "rollout" | "grad_relevancy"


def _check_attention_stack(attention, grads=None):
    if not attention:
        raise DimensionError("relevancy: empty attention stack")
    first = attention[0].shape
    if len(first) != 3 or first[1] != first[2]:
        raise DimensionError(f"relevancy: expected [heads, T, T] maps, got {first}")
    for layer, a in enumerate(attention):
        if a.shape != first:
            raise DimensionError(f"relevancy: layer {layer} shape {a.shape} != {first}")
    if grads is not None:
        if len(grads) != len(attention):
            raise DimensionError(
                f"relevancy: {len(grads)} gradient layers for {len(attention)} attention layers"
            )
        for layer, (a, g) in enumerate(zip(attention, grads)):
            if g.shape != a.shape:
                raise DimensionError(
                    f"relevancy: layer {layer} gradient shape {g.shape} != attention {a.shape}"
                )
    tokens = first[1]
    side = math.isqrt(tokens - 1)
    if tokens < 2 or side * side != tokens - 1:
        raise DimensionError(f"relevancy: {tokens - 1} patch tokens do not form a square grid")
    return tokens, side


def _finish(patch_row: np.ndarray, side: int, sample_id: str, method: str) -> RelevancyMap:
    grid = np.clip(patch_row, 0.0, None).reshape(side, side)
    mass = float(grid.sum())
    if mass > 0.0:
        grid = grid / mass
    return RelevancyMap(grid=grid.astype(np.float64), sample_id=sample_id, method=method)


def attention_rollout(attention, sample_id: str = "") -> RelevancyMap:
    """Gradient-free rollout over a list of [heads, T, T] attention maps."""
    tokens, side = _check_attention_stack(attention)
    eye = np.eye(tokens, dtype=np.float64)
    rolled = eye.copy()
    for a in attention:
        mixed = ROLLOUT_IDENTITY_MIX * a.astype(np.float64).mean(axis=0) + (1.0 - ROLLOUT_IDENTITY_MIX) * eye
        mixed = mixed / mixed.sum(axis=1, keepdims=True)
        rolled = mixed @ rolled
    return _finish(rolled[0, 1:], side, sample_id, "rollout")


def grad_relevancy(attention, attention_grads, sample_id: str = "") -> RelevancyMap:
    """Gradient-weighted relevancy propagation (R += mean_heads((dA*A)+) @ R)."""
    tokens, side = _check_attention_stack(attention, attention_grads)
    rolled = np.eye(tokens, dtype=np.float64)
    for a, g in zip(attention, attention_grads):
        cam = np.clip(g.astype(np.float64) * a.astype(np.float64), 0.0, None).mean(axis=0)
        rolled = rolled + cam @ rolled
    # the identity start keeps self-mass on the class token; only patch
    # columns enter the map, so it contributes nothing there
    return _finish(rolled[0, 1:], side, sample_id, "grad_relevancy")


def relevancy_for_sample(params, cfg, manifest, sample_id: str,
                         eye_x: float = EYE_X, eye_y: float = EYE_Y):
    """Run one sample through the model and build both maps.

    The relevancy seed is the raw (pre-sigmoid) logit. Returns
    (rollout_map, gradient_map, forward_trace).
    """
    sample = manifest.by_id(sample_id)
    try:
        raw = read_ppm(manifest.resolve_path(sample))
    except VitPadIOError as exc:
        raise VitPadIOError(f"sample '{sample_id}': {exc}") from exc
    pixels = normalize(align_crop(raw, sample.as_landmarks(), out_size=cfg.image_size,
                                  eye_x=eye_x, eye_y=eye_y))

    tape = Tape()
    trace = vit.forward(pixels, params, cfg, tape=tape, watch_attention=True)
    seed = Tensor(np.ones((1, 1), dtype=trace.logit_tensor.data.dtype))
    grads = backprop(tape, seed)
    attn_grads = [
        np.stack([grads[f"attn.{i}.{j}"].data for j in range(cfg.heads)])
        for i in range(cfg.depth)
    ]
    return (
        attention_rollout(trace.attention, sample_id),
        grad_relevancy(trace.attention, attn_grads, sample_id),
        trace,
    )


def export_heatmap(relevancy: RelevancyMap, path) -> None:
    """Write the grid as an 8-bit grayscale PGM (max scaled to 255; the zero
    map stays all zero) plus a CSV of raw values next to it."""
    from pathlib import Path

    path = Path(path)
    grid = relevancy.grid
    peak = float(grid.max())
    if peak > 0.0:
        img = np.rint(grid / peak * 255.0).astype(np.uint8)
    else:
        img = np.zeros(grid.shape, dtype=np.uint8)
    side = grid.shape[0]
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{side} {side}\n255\n".encode("ascii"))
            fh.write(img.tobytes(order="C"))
        with open(path.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for row in grid:
                writer.writerow([f"{v:.9g}" for v in row])
    except OSError as exc:
        raise VitPadIOError(f"cannot write heatmap {path}: {exc}") from exc


def read_heatmap_csv(path) -> np.ndarray:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    except OSError as exc:
        raise VitPadIOError(f"cannot read heatmap CSV {path}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64)


def export_embeddings(params, cfg, manifest, ids, path,
                      eye_x: float = EYE_X, eye_y: float = EYE_Y) -> None:
    """Class-token features as CSV: sample_id,label,attack_type,f0..f{D-1}.

    Suitable input for external projection tooling (t-SNE and friends).
    """
    samples = [manifest.by_id(sid) for sid in ids]

    def one(sample):
        raw = read_ppm(manifest.resolve_path(sample))
        pixels = normalize(align_crop(raw, sample.as_landmarks(), out_size=cfg.image_size,
                                      eye_x=eye_x, eye_y=eye_y))
        trace = vit.forward(pixels, params, cfg)
        return sample, trace.embedding

    results = parallel_map(one, samples)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "label", "attack_type"] + [f"f{i}" for i in range(cfg.dim)])
            for sample, emb in results:
                writer.writerow([sample.sample_id, sample.label, sample.attack_type]
                                + [f"{v:.9g}" for v in emb])
    except OSError as exc:
        raise VitPadIOError(f"cannot write embeddings file {path}: {exc}") from exc
