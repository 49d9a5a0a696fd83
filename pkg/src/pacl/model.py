"""The full two-tower model plus its checkpoint (de)serialisation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from . import formats
from .alignment import LinearEmbedder, LogitScale, VisionEmbedder
from .encoders import TextEncoder, TextEncoderConfig, VisionEncoder, VisionEncoderConfig
from .numerics import resolve_dtype
from .text import PROMPTS, Vocab, tokenize


@dataclass
class ModelConfig:
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    context_length: int = 16
    text_width: int = 64
    text_depth: int = 2
    text_heads: int = 4
    embed_dim: int = 64
    embedder_hidden: int | None = None
    # pool unit-normalised patch rows (True) or the raw projections (False)
    pool_normalized: bool = True
    # per-patch similarity feeding the token softmax: "dot" or "cosine"
    similarity: str = "dot"
    logit_scale: str = "learnable"
    precision: str = "float32"
    seed: int = 0

    def text_config(self, vocab_size: int) -> TextEncoderConfig:
        return TextEncoderConfig(vocab_size, self.context_length, self.text_width, self.text_depth, self.text_heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vision"] = VisionEncoderConfig(**d.get("vision", {}))
        return cls(**d)


# modules that stay frozen once phase A (CLIP-style pretraining) is done
TOWER_MODULES = ("vision", "text", "cls_embedder", "text_embedder", "clip_scale")


class PACLModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocab):
        super().__init__()
        self.config = config
        self.vocab = vocab
        torch.manual_seed(config.seed)
        v = config.vision
        self.vision = VisionEncoder(v)
        self.text = TextEncoder(config.text_config(len(vocab)))
        self.cls_embedder = LinearEmbedder(v.width, config.embed_dim)
        self.text_embedder = LinearEmbedder(config.text_width, config.embed_dim)
        self.patch_embedder = VisionEmbedder(v.width, config.embed_dim, config.embedder_hidden)
        self.clip_scale = LogitScale(config.logit_scale)
        self.pacl_scale = LogitScale(config.logit_scale)
        self.to(resolve_dtype(config.precision))

    @property
    def dtype(self) -> torch.dtype:
        # follows the live parameters so .double()/.float() casts are respected
        return self.cls_embedder.proj.weight.dtype

    def towers(self) -> list[nn.Module]:
        return [getattr(self, name) for name in TOWER_MODULES]

    def tower_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if k.split(".")[0] in TOWER_MODULES}

    def tokens(self, texts: Sequence[str]) -> torch.Tensor:
        return torch.tensor([tokenize(t, self.vocab, self.config.context_length) for t in texts], dtype=torch.int64)

    def embed_text(self, texts: Sequence[str] | torch.Tensor) -> torch.Tensor:
        """Projected (unnormalised) text CLS embeddings [n, D]."""
        tok = texts if isinstance(texts, torch.Tensor) else self.tokens(texts)
        return self.text_embedder(self.text(tok))

    def patch_embeddings(self, images: torch.Tensor, stride: int | None = None):
        """(projected patches [B, T, D], grid) for B x C x H x W images."""
        _, patches, grid = self.vision(images.to(self.dtype), stride)
        return self.patch_embedder(patches), grid

    # -- persistence ---------------------------------------------------------

    def checkpoint_entries(self, extra_meta: dict | None = None) -> dict[str, torch.Tensor]:
        entries = dict(self.state_dict())
        meta = {"model": self.config.to_dict(), "vocab": self.vocab.words}
        if extra_meta:
            meta.update(extra_meta)
        entries["meta/config.json"] = formats.json_tensor(meta)
        return entries

    def save(self, path, extra_meta: dict | None = None) -> None:
        formats.save_checkpoint(path, self.checkpoint_entries(extra_meta))

    @classmethod
    def from_entries(cls, entries: dict[str, torch.Tensor]) -> "PACLModel":
        meta = formats.tensor_json(entries["meta/config.json"])
        model = cls(ModelConfig.from_dict(meta["model"]), Vocab(meta["vocab"]))
        state = {k: v for k, v in entries.items() if not k.startswith("meta/")}
        model.load_state_dict(state, strict=True)
        return model

    @classmethod
    def load(cls, path) -> "PACLModel":
        return cls.from_entries(formats.load_checkpoint(path))


def build_vocab(captions: Sequence[str], class_names: Sequence[str] = (), prompts: Sequence[str] = PROMPTS) -> Vocab:
    return Vocab.build([*captions, *prompts, *class_names])
