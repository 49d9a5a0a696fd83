"""Toy ViT image tower and causal text tower.

Both are small pre-LN transformers.  The vision tower's patchifier is a
convolution whose stride can be lowered at inference time (the "stride
trick"); positional embeddings are bilinearly resampled to the denser grid.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import ShapeError, bilinear_resize
from .text import END


@dataclass
class VisionEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    train_stride: int = 8
    width: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    channels: int = 3

    def __post_init__(self):
        if self.patch_size > self.image_size:
            raise ValueError("patch_size must not exceed image_size")
        if self.train_stride < 1 or (self.image_size - self.patch_size) % self.train_stride:
            raise ValueError("image_size - patch_size must be divisible by train_stride")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def train_grid(self) -> tuple[int, int]:
        return patch_grid_dims(self.image_size, self.image_size, self.patch_size, self.train_stride)

    def to_dict(self):
        return asdict(self)


@dataclass
class TextEncoderConfig:
    vocab_size: int
    context_length: int = 16
    width: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.vocab_size <= END:
            raise ValueError("vocab_size must cover the reserved pad/start/end ids")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    def to_dict(self):
        return asdict(self)


def patch_grid_dims(height: int, width: int, patch: int, stride: int) -> tuple[int, int]:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if patch > height or patch > width:
        raise ValueError(f"patch size {patch} exceeds image extent {height}x{width}")
    return (height - patch) // stride + 1, (width - patch) // stride + 1


def interpolate_positions(pos: torch.Tensor, old: tuple[int, int], new: tuple[int, int]) -> torch.Tensor:
    """Resample the grid rows of a (1 + h*w) x D position table to a new grid.

    Row 0 (the CLS position) passes through untouched.
    """
    h, w = old
    if pos.dim() != 2 or pos.shape[0] != 1 + h * w:
        raise ShapeError(f"position table of shape {tuple(pos.shape)} does not match grid {h}x{w}")
    if tuple(new) == (h, w):
        return pos
    d = pos.shape[1]
    grid = pos[1:].reshape(h, w, d).permute(2, 0, 1)
    grid = bilinear_resize(grid, *new).permute(1, 2, 0).reshape(-1, d)
    return torch.cat([pos[:1], grid], 0)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, causal: bool = False):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        if causal:
            mask = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
            att = att.masked_fill(mask, float("-inf"))
        out = att.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x, causal: bool = False):
        x = x + self.attn(self.ln1(x), causal)
        return x + self.mlp(self.ln2(x))


class VisionEncoder(nn.Module):
    def __init__(self, config: VisionEncoderConfig):
        super().__init__()
        self.config = c = config
        h, w = c.train_grid
        self.patch = nn.Conv2d(c.channels, c.width, c.patch_size, stride=c.train_stride)
        self.cls = nn.Parameter(torch.randn(c.width) * 0.02)
        self.pos = nn.Parameter(torch.randn(1 + h * w, c.width) * 0.02)
        self.blocks = nn.ModuleList(Block(c.width, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.ln_final = nn.LayerNorm(c.width)

    def forward(self, images: torch.Tensor, stride: int | None = None):
        """Encode B x C x H x W images.

        Returns (cls [B, D], patches [B, T, D], (h, w)).
        """
        c = self.config
        stride = c.train_stride if stride is None else stride
        if images.dim() != 4 or images.shape[1] != c.channels:
            raise ShapeError(f"expected B x {c.channels} x H x W images, got {tuple(images.shape)}")
        grid = patch_grid_dims(images.shape[2], images.shape[3], c.patch_size, stride)
        x = F.conv2d(images, self.patch.weight, self.patch.bias, stride=stride)
        x = x.flatten(2).transpose(1, 2)
        x = torch.cat([self.cls.expand(x.shape[0], 1, -1), x], 1)
        x = x + interpolate_positions(self.pos, c.train_grid, grid)
        for blk in self.blocks:
            x = blk(x)
        x = self.ln_final(x)
        return x[:, 0], x[:, 1:], grid


class TextEncoder(nn.Module):
    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = c = config
        self.tok = nn.Embedding(c.vocab_size, c.width)
        nn.init.normal_(self.tok.weight, std=0.02)
        self.pos = nn.Parameter(torch.randn(c.context_length, c.width) * 0.01)
        self.blocks = nn.ModuleList(Block(c.width, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.ln_final = nn.LayerNorm(c.width)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Encode B x L token ids; returns the end-token representation [B, D]."""
        c = self.config
        if tokens.dim() != 2 or tokens.shape[1] != c.context_length:
            raise ShapeError(f"expected B x {c.context_length} token ids, got {tuple(tokens.shape)}")
        if bool(((tokens < 0) | (tokens >= c.vocab_size)).any()):
            bad = sorted({int(t) for t in tokens[(tokens < 0) | (tokens >= c.vocab_size)]})
            raise ValueError(f"unknown token ids {bad} (vocab size {c.vocab_size})")
        is_end = tokens == END
        if not bool(is_end.any(1).all()):
            raise ValueError("every token sequence needs an end token")
        x = self.tok(tokens) + self.pos
        for blk in self.blocks:
            x = blk(x, causal=True)
        x = self.ln_final(x)
        end = is_end.int().argmax(1)
        return x[torch.arange(x.shape[0]), end]


def vision_forward(enc: VisionEncoder, image: torch.Tensor, stride: int | None = None):
    """Single-image convenience wrapper: (cls [D], patches [T, D], (h, w))."""
    cls, patches, grid = enc(image[None], stride)
    return cls[0], patches[0], grid


def text_forward(enc: TextEncoder, tokens) -> torch.Tensor:
    t = torch.as_tensor(tokens, dtype=torch.int64)
    return enc(t[None])[0]
