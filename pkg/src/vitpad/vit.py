"""Vision Transformer for binary PAD scoring.

Patch embedding by linear projection of flattened patches, a learned
class token, a learned 1D positional embedding, pre-norm encoder blocks
(x += Attn(LN(x)); x += MLP(LN(x))), a final norm, and a single-output
linear head. QKV is one fused [3D, D] projection; dropout is omitted.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tape, Tensor

LN_EPS = 1e-6
INIT_STD = 0.02
INIT_TRUNC = 2.0  # in units of std


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_dim: int = 3072
    num_outputs: int = 1

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "dim", "depth", "heads", "mlp_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.num_outputs < 1:
            raise ConfigError("num_outputs must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1  # class token

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


BASE_CONFIG = ViTConfig()
TINY_CONFIG = ViTConfig(image_size=16, patch_size=8, channels=3, dim=16, depth=2, heads=2, mlp_dim=32)


def param_shapes(cfg: ViTConfig) -> dict:
    """Canonical parameter names and shapes, in serialization order."""
    d, c, p = cfg.dim, cfg.channels, cfg.patch_size
    shapes = {
        "patch_proj.weight": (d, c * p * p),
        "patch_proj.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.seq_len, d),
    }
    for i in range(cfg.depth):
        blk = f"blocks.{i}."
        shapes[blk + "norm1.weight"] = (d,)
        shapes[blk + "norm1.bias"] = (d,)
        shapes[blk + "attn.qkv.weight"] = (3 * d, d)
        shapes[blk + "attn.qkv.bias"] = (3 * d,)
        shapes[blk + "attn.proj.weight"] = (d, d)
        shapes[blk + "attn.proj.bias"] = (d,)
        shapes[blk + "norm2.weight"] = (d,)
        shapes[blk + "norm2.bias"] = (d,)
        shapes[blk + "mlp.fc1.weight"] = (cfg.mlp_dim, d)
        shapes[blk + "mlp.fc1.bias"] = (cfg.mlp_dim,)
        shapes[blk + "mlp.fc2.weight"] = (d, cfg.mlp_dim)
        shapes[blk + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (cfg.num_outputs, d)
    shapes["head.bias"] = (cfg.num_outputs,)
    return shapes


def param_count(cfg: ViTConfig) -> int:
    """Exact number of scalar parameters."""
    return sum(int(np.prod(shape)) for shape in param_shapes(cfg).values())


def validate_params(params, cfg: ViTConfig) -> None:
    """Check a name->tensor map against the canonical scheme (exact names, exact shapes)."""
    expected = param_shapes(cfg)
    missing = [name for name in expected if name not in params]
    if missing:
        raise ConfigError(f"missing parameters: {', '.join(missing)}")
    extra = [name for name in params if name not in expected]
    if extra:
        raise ConfigError(f"unexpected parameters: {', '.join(sorted(extra))}")
    for name, shape in expected.items():
        got = tuple(params[name].shape)
        if got != shape:
            raise ConfigError(f"parameter '{name}' has shape {got}, expected {shape}")


def _truncated_normal(rng, shape, dtype):
    """Standard normal redrawn until inside +-INIT_TRUNC, then scaled by INIT_STD."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > INIT_TRUNC
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > INIT_TRUNC
    return (out * INIT_STD).astype(dtype)


def _is_norm_gain(name: str) -> bool:
    return name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight"


def init_params(cfg: ViTConfig, seed: int, precision: str = "single") -> dict:
    """Fresh parameter set: truncated-normal projections/embeddings (std 0.02,
    cut at 2 std), unit norm gains, zero biases. Deterministic in seed."""
    dtype = np.float32 if precision == "single" else np.float64
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias") or name == "norm.bias":
            data = np.zeros(shape, dtype=dtype)
        elif _is_norm_gain(name):
            data = np.ones(shape, dtype=dtype)
        else:
            data = _truncated_normal(rng, shape, dtype)
        params[name] = Tensor(data, name=name)
    return params


def clone_params(params, trainable_names=frozenset()) -> dict:
    """Copy a parameter set; tensors in ``trainable_names`` get fresh storage and
    the trainable flag, the rest share storage read-only."""
    out = {}
    for name, t in params.items():
        if name in trainable_names:
            out[name] = Tensor(t.data.copy(), name=name, trainable=True)
        else:
            out[name] = Tensor(t.data, name=name)
    return out


@dataclass
class ForwardTrace:
    """One classification pass: logit, class-token feature, per-layer attention."""

    logit: float
    embedding: np.ndarray  # [D], after the final norm
    attention: list  # depth entries of [heads, N+1, N+1]
    logit_tensor: Tensor = None  # set when a tape was recording
    tape: Tape = field(default=None, repr=False)


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """[C,H,W] -> [N, C*P*P]; patches row-major over the grid, each flattened
    channel-major then row-major."""
    if image.ndim != 3:
        raise ConfigError(f"patchify: expected [C,H,W], got shape {image.shape}")
    c, h, w = image.shape
    p = int(patch_size)
    if p <= 0 or h % p != 0 or w % p != 0:
        raise ConfigError(f"patchify: image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    tiles = image.data.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return Tensor(tiles.reshape(gh * gw, c * p * p).copy())


def _linear(x, weight, bias, tape):
    # y = x @ W^T + b with W stored [out, in]
    return T.add_rowvec(T.matmul(x, T.transpose(weight, tape), tape), bias, tape)


def forward(image, params, cfg: ViTConfig, tape: Tape = None, watch_attention: bool = False) -> ForwardTrace:
    """Run the network on one image; returns the trace (logit, embedding, attention)."""
    validate_params(params, cfg)
    if cfg.num_outputs != 1:
        raise ConfigError("forward: scoring requires a single-output head")
    if watch_attention and tape is None:
        raise ContractError("watch_attention requires a tape")

    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"image shape {image.shape} does not match config "
            f"({cfg.channels},{cfg.image_size},{cfg.image_size})"
        )
    dtype = params["cls_token"].data.dtype
    if image.data.dtype != dtype:
        image = Tensor(image.data.astype(dtype))

    d, heads, hd = cfg.dim, cfg.heads, cfg.head_dim
    inv_sqrt_hd = 1.0 / np.sqrt(float(hd))

    patches = patchify(image, cfg.patch_size)
    patch_tokens = _linear(patches, params["patch_proj.weight"], params["patch_proj.bias"], tape)
    cls_row = T.reshape(params["cls_token"], (1, d), tape)
    x = T.concat_rows([cls_row, patch_tokens], tape)
    x = T.add(x, params["pos_embed"], tape)

    attention = []
    for i in range(cfg.depth):
        blk = f"blocks.{i}."
        h1 = T.layer_norm(x, params[blk + "norm1.weight"], params[blk + "norm1.bias"], LN_EPS, tape)
        qkv = _linear(h1, params[blk + "attn.qkv.weight"], params[blk + "attn.qkv.bias"], tape)
        q = T.slice_cols(qkv, 0, d, tape)
        k = T.slice_cols(qkv, d, 2 * d, tape)
        v = T.slice_cols(qkv, 2 * d, 3 * d, tape)
        contexts = []
        layer_probs = []
        for j in range(heads):
            qh = T.slice_cols(q, j * hd, (j + 1) * hd, tape)
            kh = T.slice_cols(k, j * hd, (j + 1) * hd, tape)
            vh = T.slice_cols(v, j * hd, (j + 1) * hd, tape)
            scores = T.scale(T.matmul(qh, T.transpose(kh, tape), tape), inv_sqrt_hd, tape)
            probs = T.softmax_rows(scores, tape)
            if watch_attention:
                tape.watch(f"attn.{i}.{j}", probs)
            layer_probs.append(probs)
            contexts.append(T.matmul(probs, vh, tape))
        ctx = T.concat_cols(contexts, tape)
        attn_out = _linear(ctx, params[blk + "attn.proj.weight"], params[blk + "attn.proj.bias"], tape)
        x = T.add(x, attn_out, tape)

        h2 = T.layer_norm(x, params[blk + "norm2.weight"], params[blk + "norm2.bias"], LN_EPS, tape)
        m = _linear(h2, params[blk + "mlp.fc1.weight"], params[blk + "mlp.fc1.bias"], tape)
        m = T.gelu(m, tape)
        m = _linear(m, params[blk + "mlp.fc2.weight"], params[blk + "mlp.fc2.bias"], tape)
        x = T.add(x, m, tape)

        attention.append(np.stack([p.data for p in layer_probs]))

    xn = T.layer_norm(x, params["norm.weight"], params["norm.bias"], LN_EPS, tape)
    emb = T.slice_rows(xn, 0, 1, tape)
    logit_t = _linear(emb, params["head.weight"], params["head.bias"], tape)

    return ForwardTrace(
        logit=float(logit_t.data[0, 0]),
        embedding=xn.data[0].copy(),
        attention=attention,
        logit_tensor=logit_t if tape is not None else None,
        tape=tape,
    )
