"""Mask tokenizer network: patch encoder with causally ordered latent
tokens, vector quantization, and a prefix-conditioned mask decoder.

The encoder runs bidirectional attention between mask patches while each
latent slot k sees all patches but only latent slots <= k; patches never
attend to latents, so patch features stay token-independent and the
causal structure is exact rather than learned. The decoder reconstructs a
full-resolution logit grid from any prefix of quantized tokens alone --
no image input and no padding slots, so prefix independence is structural.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .quantize import QuantizeResult, VectorQuantizer
from .hierarchy import LevelSample


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 256
    patch_side: int = 16
    num_tokens: int = 32
    embed_dim: int = 128
    encoder_layers: int = 4
    decoder_layers: int = 4
    num_heads: int = 4
    codebook_size: int = 1024
    mlp_ratio: int = 4
    precision: str = "single"

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ValueError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}"
            )
        if self.num_tokens < 1:
            raise ValueError("num_tokens must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"num_heads {self.num_heads} must divide embed_dim {self.embed_dim}"
            )
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


MICRO_CONFIG = ModelConfig(
    image_side=32,
    patch_side=16,
    embed_dim=16,
    encoder_layers=1,
    decoder_layers=1,
    num_heads=4,
    codebook_size=64,
    precision="double",
)


class Attention(nn.Module):
    """Multi-head self-attention with an optional boolean allow-mask."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, allow: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=allow)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor, allow: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), allow)
        return x + self.mlp(self.norm2(x))


def encoder_attention_mask(num_patches: int, num_tokens: int) -> torch.Tensor:
    """Allow-mask over [patches; latents]: patches see patches, latent k
    sees all patches plus latents 0..k."""
    total = num_patches + num_tokens
    allow = torch.zeros(total, total, dtype=torch.bool)
    allow[:num_patches, :num_patches] = True
    for k in range(num_tokens):
        allow[num_patches + k, : num_patches + k + 1] = True
    return allow


class MaskEncoder(nn.Module):
    """Patch embedding plus transformer producing K ordered latent rows."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_proj = nn.Conv2d(1, d, kernel_size=config.patch_side, stride=config.patch_side)
        self.patch_pos = nn.Parameter(torch.empty(1, config.num_patches, d))
        # slots need to be mutually distinguishable before any training, so
        # they are initialized at unit scale rather than the positional 0.02
        self.latent_tokens = nn.Parameter(torch.empty(1, config.num_tokens, d))
        nn.init.trunc_normal_(self.patch_pos, std=0.02)
        nn.init.trunc_normal_(self.latent_tokens, std=1.0)
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.encoder_layers)
        )
        self.norm = nn.LayerNorm(d)
        # projection to the quantizer's space, scaled so latent rows carry
        # O(1) norm; keeps the VQ losses commensurate with the mask loss
        self.latent_head = nn.Linear(d, d)
        self.latent_scale = d ** -0.5
        self.register_buffer(
            "allow_mask",
            encoder_attention_mask(config.num_patches, config.num_tokens),
            persistent=False,
        )

    def patch_embed(self, masks: torch.Tensor) -> torch.Tensor:
        """Project non-overlapping patches to embed_dim and add positions."""
        cfg = self.config
        if masks.shape[-2:] != (cfg.image_side, cfg.image_side):
            raise ValueError(
                f"expected {cfg.image_side}x{cfg.image_side} masks, got {tuple(masks.shape[-2:])}"
            )
        x = self.patch_proj(masks.unsqueeze(1))
        return x.flatten(2).transpose(1, 2) + self.patch_pos

    def forward(self, masks: torch.Tensor) -> torch.Tensor:
        patches = self.patch_embed(masks)
        b = patches.shape[0]
        x = torch.cat([patches, self.latent_tokens.expand(b, -1, -1)], dim=1)
        for block in self.blocks:
            x = block(x, self.allow_mask)
        latents = self.norm(x)[:, self.config.num_patches :]
        return self.latent_head(latents) * self.latent_scale


class MaskDecoder(nn.Module):
    """Reconstruct a mask logit grid from a prefix of token embeddings.

    Only the given l token embeddings enter the sequence, alongside the
    learnable pixel-query tokens; attention is fully bidirectional.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.slot_pos = nn.Parameter(torch.empty(1, config.num_tokens, d))
        self.pixel_queries = nn.Parameter(torch.empty(1, config.num_patches, d))
        nn.init.trunc_normal_(self.slot_pos, std=0.02)
        nn.init.trunc_normal_(self.pixel_queries, std=0.02)
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.decoder_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.patch_side ** 2)

    def forward(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        length = token_embeddings.shape[1]
        if not 1 <= length <= cfg.num_tokens:
            raise ValueError(f"prefix length {length} outside [1, {cfg.num_tokens}]")
        b = token_embeddings.shape[0]
        x = torch.cat(
            [token_embeddings + self.slot_pos[:, :length], self.pixel_queries.expand(b, -1, -1)],
            dim=1,
        )
        for block in self.blocks:
            x = block(x)
        patches = self.head(self.norm(x)[:, length:])
        g, p = cfg.grid_side, cfg.patch_side
        return (
            patches.view(b, g, g, p, p)
            .permute(0, 1, 3, 2, 4)
            .reshape(b, cfg.image_side, cfg.image_side)
        )


@dataclass
class ForwardResult:
    """Everything the loss needs from one training forward pass."""

    level_logits: dict[int, torch.Tensor]
    indices: torch.Tensor
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor


class MaskTokenizerModel(nn.Module):
    """Encoder, quantizer, and decoder tied into one trainable module."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = MaskEncoder(config)
        self.quantizer = VectorQuantizer(config.codebook_size, config.embed_dim)
        self.decoder = MaskDecoder(config)
        self.to(config.dtype)

    def _as_batch(self, masks) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(masks), dtype=self.config.dtype)
        return t.unsqueeze(0) if t.ndim == 2 else t

    def encode(self, masks) -> torch.Tensor:
        """Latent token rows (B, K, d) before quantization."""
        return self.encoder(self._as_batch(masks))

    def quantize(self, latents: torch.Tensor) -> QuantizeResult:
        return self.quantizer(latents)

    def tokenize(self, masks) -> torch.Tensor:
        """Discrete token sequence (B, K) for a batch of masks."""
        return self.quantizer(self.encode(masks)).indices

    def detokenize(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        """Logit grid (B, side, side) from l quantized token embeddings."""
        return self.decoder(token_embeddings)

    def decode_tokens(self, indices, length: int | None = None) -> torch.Tensor:
        """Logit grid from a token index sequence, optionally truncated.

        Decoding a shorter prefix never re-runs the encoder: the same
        sequence decodes consistently at any length.
        """
        idx = torch.as_tensor(indices, dtype=torch.long)
        if idx.ndim == 1:
            idx = idx.unsqueeze(0)
        if length is not None:
            if not 1 <= length <= idx.shape[1]:
                raise ValueError(f"length {length} outside [1, {idx.shape[1]}]")
            idx = idx[:, :length]
        return self.decoder(self.quantizer.lookup(idx))

    def forward(self, masks, levels: LevelSample) -> ForwardResult:
        """Encode, quantize, and decode every requested level prefix."""
        if levels.max_level != self.config.num_tokens:
            raise ValueError(
                f"level sample targets K={levels.max_level}, model has K={self.config.num_tokens}"
            )
        latents = self.encode(masks)
        result = self.quantizer(latents)
        level_logits = {
            l: self.decoder(result.straight_through[:, :l]) for l in levels.all_levels
        }
        return ForwardResult(
            level_logits=level_logits,
            indices=result.indices,
            codebook_loss=result.codebook_loss,
            commitment_loss=result.commitment_loss,
        )

    def parameter_groups(self) -> dict[str, list[str]]:
        """Names of decayable vs non-decayable parameters.

        Embedding-like tensors (positions, latent slots, pixel queries,
        codebook), biases, and norm gains are excluded from weight decay.
        """
        no_decay, decay = [], []
        embed_keys = ("patch_pos", "latent_tokens", "slot_pos", "pixel_queries", "codebook")
        for name, param in self.named_parameters():
            if param.ndim <= 1 or any(k in name for k in embed_keys):
                no_decay.append(name)
            else:
                decay.append(name)
        return {"decay": decay, "no_decay": no_decay}
