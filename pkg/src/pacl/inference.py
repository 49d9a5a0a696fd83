"""Zero-shot dense segmentation and image-level classification."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .alignment import pacl_matrix
from .model import PACLModel
from .numerics import bilinear_resize, entropy, l2_normalize, softmax
from .text import PROMPTS, fill_prompt

# id written to masks for pixels flagged as background
BACKGROUND_ID = 255


@dataclass
class ClassEmbeddingBank:
    names: list[str]
    embeddings: torch.Tensor   # [C, D], unit rows
    prompts: list[str]

    def __len__(self):
        return len(self.names)


@dataclass
class SegmentationOutput:
    scores: torch.Tensor       # [C, H, W] class probabilities per pixel
    mask: np.ndarray           # [H, W] argmax class ids
    background: np.ndarray     # [H, W] bool
    stride: int

    def mask_with_background(self, fill: int = BACKGROUND_ID) -> np.ndarray:
        out = self.mask.copy()
        out[self.background] = fill
        return out


def build_class_bank(names: Sequence[str], model: PACLModel, prompts: Sequence[str] = PROMPTS) -> ClassEmbeddingBank:
    """Average each class's prompt-filled text embeddings, then unit-normalise.

    Prompts are treated as a set: duplicates are dropped and the mean is
    accumulated in sorted order, so the bank does not depend on prompt order.
    """
    names = list(names)
    if not names:
        raise ValueError("need at least one class name")
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")
    prompt_set = sorted(set(prompts))
    if not prompt_set:
        raise ValueError("need at least one prompt template")
    for p in prompt_set:
        fill_prompt(p, "x")  # validates the placeholder
    rows = []
    with torch.no_grad():
        for name in names:
            missing = model.vocab.missing(name) + [w for p in prompt_set for w in model.vocab.missing(p)]
            if missing:
                raise ValueError(f"class {name!r} cannot be tokenized; unknown words: {sorted(set(missing))}")
            emb = model.embed_text([fill_prompt(p, name) for p in prompt_set])
            rows.append(l2_normalize(emb.mean(0)))
    return ClassEmbeddingBank(names, torch.stack(rows), list(prompts))


def dense_scores(model: PACLModel, image: torch.Tensor, bank: ClassEmbeddingBank, stride: int | None = None) -> torch.Tensor:
    """Per-class cosine maps [C, h, w] between the patch grid and the bank rows."""
    with torch.no_grad():
        pe, (h, w) = model.patch_embeddings(image[None], stride)
        s = l2_normalize(pe[0]) @ bank.embeddings.to(pe.dtype).T
    return s.T.reshape(len(bank), h, w)


def segment(
    model: PACLModel,
    image: torch.Tensor,
    bank: ClassEmbeddingBank,
    stride: int | None = None,
    background_entropy: float | None = None,
    softmax_first: bool = False,
    method: str = "interpolate",
) -> SegmentationOutput:
    """Upsample class score maps to image size, softmax over classes, take argmax.

    ``method="interpolate"`` lowers the patchifier stride and resamples the
    positional table; ``method="upscale"`` instead enlarges the image by
    train_stride / stride and encodes it at the training stride.
    With ``background_entropy`` set, pixels whose class distribution has
    entropy (nats) above the threshold are flagged as background.
    """
    stride = model.config.vision.train_stride if stride is None else stride
    height, width = image.shape[-2:]
    if method == "interpolate":
        raw = dense_scores(model, image, bank, stride)
    elif method == "upscale":
        factor = model.config.vision.train_stride / stride
        big = bilinear_resize(image.to(model.dtype), round(height * factor), round(width * factor))
        raw = dense_scores(model, big, bank, None)
    else:
        raise ValueError(f"method must be 'interpolate' or 'upscale', got {method!r}")
    if softmax_first:
        scores = bilinear_resize(softmax(raw, 0), height, width)
    else:
        scores = softmax(bilinear_resize(raw, height, width), 0)
    mask = scores.argmax(0).numpy()
    if background_entropy is None:
        background = np.zeros(mask.shape, dtype=bool)
    else:
        background = background_mask(scores, background_entropy)
    return SegmentationOutput(scores, mask, background, stride)


def background_mask(scores: torch.Tensor, threshold: float) -> np.ndarray:
    """True where the per-pixel class distribution [C, H, W] has entropy (nats) above ``threshold``."""
    return (entropy(scores, 0) > threshold).numpy()


def classify_batch(model: PACLModel, images: torch.Tensor, bank: ClassEmbeddingBank, mode: str = "pacl"):
    """Class probabilities [B, C] for B images, via the PACL or the CLS compatibility."""
    with torch.no_grad():
        emb = bank.embeddings.to(model.dtype)
        images = images.to(model.dtype)
        if mode == "pacl":
            pe, _ = model.patch_embeddings(images)
            phi = pacl_matrix(pe, emb, model.config.pool_normalized, model.config.similarity)
        elif mode == "clip":
            cls_v, _, _ = model.vision(images)
            phi = l2_normalize(model.cls_embedder(cls_v)) @ emb.T
        else:
            raise ValueError(f"mode must be 'pacl' or 'clip', got {mode!r}")
    return softmax(phi, -1)


def zeroshot_classify(model: PACLModel, image: torch.Tensor, bank: ClassEmbeddingBank, mode: str = "pacl"):
    probs = classify_batch(model, image[None], bank, mode)[0]
    return int(probs.argmax()), probs
