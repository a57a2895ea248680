"""Vision encoder, text encoder, dual-stream fusion encoder and the task heads.

All forwards are batched: vision tokens are (B, M, N+1, D), text tokens (B, K, D).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import patchify
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, trunc_normal
from .tensor import Tensor


@dataclass
class ModelConfig:
    # full-scale geometry: dim 768, 12 heads, 6 fusion layers, 288px images, patch 16
    dim: int = 64
    heads: int = 4
    vision_layers: int = 2
    text_layers: int = 2
    fusion_layers: int = 2
    mlp_ratio: int = 4
    fusion_hidden: int = 256
    frames: int = 1
    image_size: int = 32
    patch: int = 8
    max_text_len: int = 50
    vocab_size: int = 64
    proj_dim: int = 64
    vision_global_mode: str = "frame_cls"
    visual_block_order: str = "parallel"
    init_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and f.name != "init_seed" and v < 1:
                raise ValueError(f"model.{f.name} must be >= 1, got {v}")
        if self.dim % self.heads:
            raise ValueError(f"model.dim={self.dim} is not divisible by model.heads={self.heads}")
        if self.image_size % self.patch:
            raise ValueError(f"model.image_size={self.image_size} not divisible by model.patch={self.patch}")
        if self.vision_global_mode not in ("frame_cls", "mean_pooling"):
            raise ValueError(f"model.vision_global_mode={self.vision_global_mode!r}")
        if self.visual_block_order not in ("parallel", "sequential"):
            raise ValueError(f"model.visual_block_order={self.visual_block_order!r}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch) ** 2


@dataclass
class EncoderOutput:
    tokens: Tensor

    @property
    def cls(self):
        """Per-frame [CLS] (B, M, D) for vision, [CLS] (B, D) for text."""
        if self.tokens.ndim == 4:
            return self.tokens[:, :, 0]
        return self.tokens[:, 0]


@dataclass
class FusionOutput:
    vision_tokens: Tensor  # (B, M, N+1, D)
    text_tokens: Tensor  # (B, K, D)
    vision_global: Tensor  # (B, D)
    text_global: Tensor  # (B, D)
    # per layer: v2t (B, H, M*(N+1), K) with vision queries, t2v (B, H, K, M*(N+1))
    attention: list = field(default_factory=list)


class TransformerBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng, d, heads, hidden, group):
        self.ln1 = LayerNorm(d, group)
        self.attn = MultiHeadAttention(rng, d, heads, group)
        self.ln2 = LayerNorm(d, group)
        self.ffn = FeedForward(rng, d, hidden, group)

    def __call__(self, x, key_mask=None):
        h = self.ln1(x)
        a, _ = self.attn(h, h, key_mask)
        x = x + a
        return x + self.ffn(self.ln2(x))


class VisualBlock(Module):
    """Temporal attention for the frame [CLS] tokens plus spatial attention within frames.

    One attention module serves both paths, so the block has no extra weights
    for video beyond the temporal embeddings.
    """

    def __init__(self, rng, d, heads, hidden, order="parallel"):
        self.ln1 = LayerNorm(d, "uni_modal")
        self.attn = MultiHeadAttention(rng, d, heads, "uni_modal")
        self.ln2 = LayerNorm(d, "uni_modal")
        self.ffn = FeedForward(rng, d, hidden, "uni_modal")
        self.order = order
        self.bypass_temporal = False

    def _temporal(self, h):
        b, m, n1, d = h.shape
        out, _ = self.attn(h[:, :, 0], h.reshape(b, m * n1, d))
        return out  # (B, M, D)

    def _spatial(self, h):
        b, m, n1, d = h.shape
        flat = h.reshape(b * m, n1, d)
        out, _ = self.attn(flat[:, 1:], flat)
        return out.reshape(b, m, n1 - 1, d)

    def __call__(self, x: Tensor) -> Tensor:
        b, m, n1, d = x.shape
        h = self.ln1(x)
        if self.bypass_temporal:
            cls = x[:, :, 0:1]
        else:
            cls = x[:, :, 0:1] + self._temporal(h).reshape(b, m, 1, d)
        if self.order == "sequential" and not self.bypass_temporal:
            h = self.ln1(T.concat([cls, x[:, :, 1:]], axis=2))
        patches = x[:, :, 1:] + self._spatial(h)
        y = T.concat([cls, patches], axis=2)
        return y + self.ffn(self.ln2(y))


def assemble_input(patch_tokens: Tensor, spatial: Tensor, temporal: Tensor, cls: Tensor) -> Tensor:
    """Prepend [CLS] to every frame and add temporal + spatial positions.

    patch_tokens (B, M, N, D); spatial (N+1, D); temporal (>=M, D); cls (D,).
    """
    b, m, n, d = patch_tokens.shape
    if spatial.shape != (n + 1, d) or temporal.shape[0] < m or temporal.shape[1] != d or cls.shape != (d,):
        raise T.DimensionError(
            f"assemble_input: tokens {patch_tokens.shape}, spatial {spatial.shape}, "
            f"temporal {temporal.shape}, cls {cls.shape}"
        )
    cls_tok = T.reshape(cls, (1, 1, 1, d)) + T.Tensor(np.zeros((b, m, 1, d), dtype=cls.dtype))
    x = T.concat([cls_tok, patch_tokens], axis=2)
    return x + T.reshape(temporal[:m], (1, m, 1, d)) + T.reshape(spatial, (1, 1, n + 1, d))


class VisionEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d, n = cfg.dim, cfg.num_patches
        self.cfg = cfg
        self.patch_embed = Linear(rng, 3 * cfg.patch * cfg.patch, d, "uni_modal")
        self.cls_token = Parameter(trunc_normal(rng, (d,)), "uni_modal")
        self.mask_token = Parameter(trunc_normal(rng, (d,)), "uni_modal")  # [MASK_V]
        self.spatial_pos = Parameter(trunc_normal(rng, (n + 1, d)), "uni_modal")
        self.temporal_pos = Parameter(trunc_normal(rng, (cfg.frames, d)), "uni_modal")
        self.blocks = [
            VisualBlock(rng, d, cfg.heads, cfg.mlp_ratio * d, cfg.visual_block_order)
            for _ in range(cfg.vision_layers)
        ]
        self.ln_f = LayerNorm(d, "uni_modal")

    def embed(self, pixels: np.ndarray, patch_mask=None) -> Tensor:
        """Patch embedding, [MASK_V] substitution and positional assembly."""
        cfg = self.cfg
        if pixels.ndim != 5 or pixels.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"expected (B, M, 3, {cfg.image_size}, {cfg.image_size}) pixels, got {pixels.shape}")
        if pixels.shape[1] > self.temporal_pos.shape[0]:
            raise ValueError(f"{pixels.shape[1]} frames exceed the {self.temporal_pos.shape[0]} temporal slots")
        patches = T.Tensor(patchify(pixels, cfg.patch).astype(self.dtype))
        x = self.patch_embed(patches)
        if patch_mask is not None:
            m = np.asarray(patch_mask, dtype=x.dtype)[..., None]
            x = x * (1.0 - m) + T.reshape(self.mask_token, (1, 1, 1, -1)) * m
        return assemble_input(x, self.spatial_pos, self.temporal_pos, self.cls_token)

    @property
    def dtype(self):
        return self.cls_token.dtype

    def __call__(self, pixels, patch_mask=None) -> EncoderOutput:
        x = self.embed(pixels, patch_mask)
        for blk in self.blocks:
            x = blk(x)
        return EncoderOutput(self.ln_f(x))


class TextEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.dim
        self.token_embed = Parameter(trunc_normal(rng, (cfg.vocab_size, d)), "uni_modal")
        self.pos_embed = Parameter(trunc_normal(rng, (cfg.max_text_len, d)), "uni_modal")
        self.mask_token = Parameter(trunc_normal(rng, (d,)), "uni_modal")  # [MASK_L]
        self.blocks = [TransformerBlock(rng, d, cfg.heads, cfg.mlp_ratio * d, "uni_modal") for _ in range(cfg.text_layers)]
        self.ln_f = LayerNorm(d, "uni_modal")

    def __call__(self, ids, valid, token_mask=None) -> EncoderOutput:
        ids = np.asarray(ids)
        b, k = ids.shape
        if k > self.pos_embed.shape[0]:
            raise ValueError(f"text length {k} exceeds {self.pos_embed.shape[0]} positions")
        x = T.embedding_lookup(self.token_embed, ids)
        if token_mask is not None:
            m = np.asarray(token_mask, dtype=x.dtype)[..., None]
            x = x * (1.0 - m) + T.reshape(self.mask_token, (1, 1, -1)) * m
        x = x + self.pos_embed[:k]
        for blk in self.blocks:
            x = blk(x, valid)
        return EncoderOutput(self.ln_f(x))


class FusionLayer(Module):
    def __init__(self, rng, d, heads, hidden):
        g = "fusion"
        self.v_ln_self, self.v_self = LayerNorm(d, g), MultiHeadAttention(rng, d, heads, g)
        self.t_ln_self, self.t_self = LayerNorm(d, g), MultiHeadAttention(rng, d, heads, g)
        self.v_ln_cross, self.v_cross = LayerNorm(d, g), MultiHeadAttention(rng, d, heads, g)
        self.t_ln_cross, self.t_cross = LayerNorm(d, g), MultiHeadAttention(rng, d, heads, g)
        self.v_ln_ffn, self.v_ffn = LayerNorm(d, g), FeedForward(rng, d, hidden, g)
        self.t_ln_ffn, self.t_ffn = LayerNorm(d, g), FeedForward(rng, d, hidden, g)

    def __call__(self, v: Tensor, t: Tensor, valid):
        """v (B, Lv, D), t (B, K, D); returns new streams and both cross-attention maps."""
        h = self.v_ln_self(v)
        v = v + self.v_self(h, h)[0]
        h = self.t_ln_self(t)
        t = t + self.t_self(h, h, valid)[0]
        hv, ht = self.v_ln_cross(v), self.t_ln_cross(t)
        v_upd, v2t = self.v_cross(hv, ht, valid)
        t_upd, t2v = self.t_cross(ht, hv)
        v, t = v + v_upd, t + t_upd
        v = v + self.v_ffn(self.v_ln_ffn(v))
        t = t + self.t_ffn(self.t_ln_ffn(t))
        return v, t, {"v2t": v2t, "t2v": t2v}


class FusionEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.dim
        self.mode = cfg.vision_global_mode
        self.layers = [FusionLayer(rng, d, cfg.heads, cfg.fusion_hidden) for _ in range(cfg.fusion_layers)]
        self.v_ln_f = LayerNorm(d, "fusion")
        self.t_ln_f = LayerNorm(d, "fusion")

    def __call__(self, vision: EncoderOutput, text: EncoderOutput, valid) -> FusionOutput:
        vt = vision.tokens
        b, m, n1, d = vt.shape
        v = vt.reshape(b, m * n1, d)
        t = text.tokens
        maps = []
        for layer in self.layers:
            v, t, att = layer(v, t, valid)
            maps.append(att)
        v = self.v_ln_f(v).reshape(b, m, n1, d)
        t = self.t_ln_f(t)
        return FusionOutput(v, t, vision_global(v, self.mode), t[:, 0], maps)


def vision_global(tokens: Tensor, mode="frame_cls") -> Tensor:
    """Mean of the frame [CLS] tokens, or of every token in ``mean_pooling`` mode."""
    b, m, n1, d = tokens.shape
    if mode == "mean_pooling":
        return T.mean(tokens.reshape(b, m * n1, d), axis=1)
    return T.mean_pool(tokens[:, :, 0], axis=1)


class VLModel(Module):
    """Vision encoder, text encoder, fusion encoder and every head the objectives need."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.init_seed)
        self.cfg = cfg
        self.vision = VisionEncoder(rng, cfg)
        self.text = TextEncoder(rng, cfg)
        self.fusion = FusionEncoder(rng, cfg)
        self.vision_proj = Linear(rng, cfg.dim, cfg.proj_dim, "head")
        self.text_proj = Linear(rng, cfg.dim, cfg.proj_dim, "head")
        self.vtm_head = Linear(rng, 2 * cfg.dim, 2, "head")
        self.mlm_head = Linear(rng, cfg.dim, cfg.vocab_size, "head")
        self.log_tau = Parameter(np.array(math.log(0.07)), "head")

    def state(self):
        return {name: p for name, p in self.named_parameters()}

    def uni_global(self, out: EncoderOutput) -> Tensor:
        if out.tokens.ndim == 4:
            return vision_global(out.tokens, self.cfg.vision_global_mode)
        return out.tokens[:, 0]

    def cl_temperature(self) -> Tensor:
        return T.exp(T.clip(self.log_tau, math.log(0.01), 0.0))


def project_global(x: Tensor, head: Linear) -> Tensor:
    return head(x)
