"""Source-to-canonical parameter naming for ViT-B/16 family checkpoints.

Source conventions follow the common ecosystem layout: a [1,1,D] class
token, a [1,N+1,D] positional embedding, and a stride-P convolution
kernel [D,C,P,P] for the patch embedding. Canonical targets flatten the
class token to [D], the positional embedding to [N+1,D], and the patch
kernel to [D, C*P*P] with row-major flattening of (C,P,P) — exactly the
channel-major-then-rows order the consumer uses when flattening patches.
"""

from dataclasses import dataclass


class ConversionError(Exception):
    pass


@dataclass(frozen=True)
class ModelDims:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_dim: int = 3072

    @property
    def seq_len(self) -> int:
        side = self.image_size // self.patch_size
        return side * side + 1


@dataclass(frozen=True)
class Rule:
    source: str
    canonical: str
    source_shape: tuple
    target_shape: tuple
    transform: str  # "copy" | "reshape"


def name_map(dims: ModelDims):
    """Ordered conversion rules; every canonical name appears exactly once."""
    d, c, p, mlp = dims.dim, dims.channels, dims.patch_size, dims.mlp_dim
    rules = [
        Rule("patch_embed.proj.weight", "patch_proj.weight",
             (d, c, p, p), (d, c * p * p), "reshape"),
        Rule("patch_embed.proj.bias", "patch_proj.bias", (d,), (d,), "copy"),
        Rule("cls_token", "cls_token", (1, 1, d), (d,), "reshape"),
        Rule("pos_embed", "pos_embed", (1, dims.seq_len, d), (dims.seq_len, d), "reshape"),
    ]
    for i in range(dims.depth):
        blk = f"blocks.{i}."
        for suffix, shape in (
            ("norm1.weight", (d,)), ("norm1.bias", (d,)),
            ("attn.qkv.weight", (3 * d, d)), ("attn.qkv.bias", (3 * d,)),
            ("attn.proj.weight", (d, d)), ("attn.proj.bias", (d,)),
            ("norm2.weight", (d,)), ("norm2.bias", (d,)),
            ("mlp.fc1.weight", (mlp, d)), ("mlp.fc1.bias", (mlp,)),
            ("mlp.fc2.weight", (d, mlp)), ("mlp.fc2.bias", (d,)),
        ):
            rules.append(Rule(blk + suffix, blk + suffix, shape, shape, "copy"))
    rules.append(Rule("norm.weight", "norm.weight", (d,), (d,), "copy"))
    rules.append(Rule("norm.bias", "norm.bias", (d,), (d,), "copy"))
    return rules


DROPPED_SOURCE_NAMES = ("head.weight", "head.bias")
