"""ViT-style frame encoder shared by every information stream, and the
convolutional upsampling decoder that emits the attention map."""

import logging
import math
from typing import Mapping, Optional

from config import EncoderConfig
from error_handler import ShapeError, UsageError
from param_store import ParamStore
from tensor_core import (
    Tensor, batchnorm2d, conv2d, gelu, layer_norm, linear, relu, reshape, sigmoid, softmax,
    transpose, upsample_nearest_2x,
)

logger = logging.getLogger(__name__)

Params = Mapping[str, Tensor]


def init_encoder(store: ParamStore, cfg: EncoderConfig, in_channels: int, prefix: str = "encoder") -> None:
    d = cfg.embed_dim
    hidden = int(round(d * cfg.mlp_ratio))
    store.truncated_normal(f"{prefix}.patch.weight", (in_channels * cfg.patch_size ** 2, d))
    store.zeros(f"{prefix}.patch.bias", (d,))
    store.truncated_normal(f"{prefix}.pos", (cfg.num_tokens, d))
    for i in range(cfg.depth):
        block = f"{prefix}.blocks.{i}"
        for norm in ("ln1", "ln2"):
            store.ones(f"{block}.{norm}.gamma", (d,))
            store.zeros(f"{block}.{norm}.beta", (d,))
        for proj in ("q", "k", "v", "o"):
            store.truncated_normal(f"{block}.attn.w{proj}", (d, d))
            store.zeros(f"{block}.attn.b{proj}", (d,))
        store.truncated_normal(f"{block}.mlp.w1", (d, hidden))
        store.zeros(f"{block}.mlp.b1", (hidden,))
        store.truncated_normal(f"{block}.mlp.w2", (hidden, d))
        store.zeros(f"{block}.mlp.b2", (d,))


def init_decoder(store: ParamStore, in_channels: int, width: int, blocks: int, prefix: str = "decoder") -> None:
    channels = in_channels
    for i in range(blocks):
        store.kaiming_uniform(f"{prefix}.blocks.{i}.conv.weight", (width, channels, 3, 3))
        store.zeros(f"{prefix}.blocks.{i}.conv.bias", (width,))
        store.batchnorm(f"{prefix}.blocks.{i}.bn", width)
        channels = width
    store.kaiming_uniform(f"{prefix}.head.weight", (1, channels, 3, 3))
    store.zeros(f"{prefix}.head.bias", (1,))


def patch_embed(frame: Tensor, params: Params, patch_size: int, prefix: str = "encoder") -> Tensor:
    """Non-overlapping patches → linear projection + positional embedding (N_tok×d)."""
    if frame.ndim != 3:
        raise ShapeError(f"patch_embed expects C×H×W, got {frame.shape}")
    c, height, width = frame.shape
    if height % patch_size or width % patch_size:
        raise ShapeError(f"frame {height}×{width} not divisible by patch size {patch_size}")
    h, w = height // patch_size, width // patch_size
    patches = reshape(frame, (c, h, patch_size, w, patch_size))
    patches = transpose(patches, (1, 3, 0, 2, 4))
    patches = reshape(patches, (h * w, c * patch_size * patch_size))
    tokens = linear(patches, params[f"{prefix}.patch.weight"], params[f"{prefix}.patch.bias"])
    pos = params[f"{prefix}.pos"]
    if pos.shape != tokens.shape:
        raise ShapeError(f"positional embedding {pos.shape} does not match tokens {tokens.shape}")
    return tokens + pos


def multi_head_attention(x: Tensor, params: Params, prefix: str, num_heads: int,
                         trace: Optional[dict] = None) -> Tensor:
    n, d = x.shape
    if d % num_heads:
        raise ShapeError(f"embed dim {d} not divisible by {num_heads} heads")
    head_dim = d // num_heads

    def heads(name: str) -> Tensor:
        projected = linear(x, params[f"{prefix}.w{name}"], params[f"{prefix}.b{name}"])
        return transpose(reshape(projected, (n, num_heads, head_dim)), (1, 0, 2))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    if trace is not None:
        trace.setdefault("attention", []).append(weights.data.copy())
    mixed = reshape(transpose(weights @ v, (1, 0, 2)), (n, d))
    return linear(mixed, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def vit_block(tokens: Tensor, params: Params, prefix: str, num_heads: int, trace: Optional[dict] = None) -> Tensor:
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(·))."""
    x = tokens + multi_head_attention(
        layer_norm(tokens, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"]),
        params, f"{prefix}.attn", num_heads, trace,
    )
    hidden = gelu(linear(layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"]),
                         params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    return x + linear(hidden, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])


def encode_frame(frame: Tensor, cfg: EncoderConfig, params: Params, prefix: str = "encoder",
                 trace: Optional[dict] = None) -> Tensor:
    tokens = patch_embed(frame, params, cfg.patch_size, prefix)
    for i in range(cfg.depth):
        tokens = vit_block(tokens, params, f"{prefix}.blocks.{i}", cfg.num_heads, trace)
    return tokens


def tokens_to_grid(tokens: Tensor) -> Tensor:
    """N_tok×d → d×h×w with token i at row i // w, column i % w."""
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be N×d, got {tokens.shape}")
    n, d = tokens.shape
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"token count {n} is not a square grid")
    return reshape(transpose(tokens, (1, 0)), (d, side, side))


def decode_attention_map(M: Tensor, params: ParamStore, blocks: int, mode: str = "train",
                         prefix: str = "decoder") -> Tensor:
    """[conv3×3 → BN → ReLU → 2× upsample] × blocks, then conv3×3 → sigmoid.

    Returns an H_out×W_out map with H_out = 2**blocks · h.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"decoder mode must be 'train' or 'eval', got '{mode}'")
    x = M
    for i in range(blocks):
        block = f"{prefix}.blocks.{i}"
        x = conv2d(x, params[f"{block}.conv.weight"], params[f"{block}.conv.bias"], padding=1)
        x = batchnorm2d(x, params[f"{block}.bn.gamma"], params[f"{block}.bn.beta"],
                        params.running_stats(f"{block}.bn"), mode=mode)
        x = upsample_nearest_2x(relu(x))
    logits = conv2d(x, params[f"{prefix}.head.weight"], params[f"{prefix}.head.bias"], padding=1)
    out_h, out_w = logits.shape[1:]
    return reshape(sigmoid(logits), (out_h, out_w))
