"""Patch-aligned compatibility, the vanilla CLS compatibility and InfoNCE.

For an image with projected patch embeddings ``pe`` (T x D) and a text
embedding ``te`` (D):

    s_t   = <pe_t, te>                         per-patch similarity
    a     = softmax_t(s)                       token attention
    v     = sum_t a_t * pe_t / |pe_t|          attention-pooled image vector
    phi   = cos(v, te)                         compatibility

``similarity="cosine"`` replaces the raw product in s_t with a cosine.  That
keeps s_t in [-1, 1], but the token softmax then stays close to uniform and
patch-level alignment barely trains, so the raw product is the default.
The batched routines compute the full matrix of these for every
image/text pairing in a batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import ShapeError, cosine, l2_normalize, softmax

DEFAULT_LOGIT_SCALE = 1 / 0.07
MAX_LOGIT_SCALE = 100.0


class VisionEmbedder(nn.Module):
    """Residual MLP projecting patch tokens into the joint space.

    Main branch: linear -> ReLU -> linear; residual branch: one linear.
    """

    def __init__(self, in_width: int, out_width: int, hidden: int | None = None):
        super().__init__()
        hidden = in_width if hidden is None else hidden
        self.in_width, self.out_width = in_width, out_width
        self.fc1 = nn.Linear(in_width, hidden)
        self.fc2 = nn.Linear(hidden, out_width)
        self.res = nn.Linear(in_width, out_width)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x))) + self.res(x)


class LinearEmbedder(nn.Module):
    """Single linear projection; used for both the text and the CLS-vision embedders."""

    def __init__(self, in_width: int, out_width: int):
        super().__init__()
        self.in_width, self.out_width = in_width, out_width
        self.proj = nn.Linear(in_width, out_width)

    def forward(self, x):
        return self.proj(x)


TextEmbedder = ClsVisionEmbedder = LinearEmbedder


class LogitScale(nn.Module):
    """Positive multiplier on compatibilities inside the loss.

    ``spec`` is ``"learnable"`` (log-parametrised, starts at 1/0.07, capped at
    100) or ``"fixed:<value>"``.
    """

    def __init__(self, spec: str = "learnable", init: float = DEFAULT_LOGIT_SCALE):
        super().__init__()
        self.spec = spec
        if spec == "learnable":
            value, trainable = init, True
        elif spec.startswith("fixed:"):
            value, trainable = float(spec.split(":", 1)[1]), False
        else:
            raise ValueError(f"logit scale must be 'learnable' or 'fixed:<value>', got {spec!r}")
        if value <= 0:
            raise ValueError("logit scale must be positive")
        self.log_scale = nn.Parameter(torch.tensor(math.log(value)), requires_grad=trainable)

    def forward(self):
        return self.log_scale.exp().clamp(max=MAX_LOGIT_SCALE)


def embed_patches(emb: VisionEmbedder, patches: torch.Tensor) -> torch.Tensor:
    if patches.shape[-1] != emb.in_width:
        raise ShapeError(f"patch width {patches.shape[-1]} does not match embedder input {emb.in_width}")
    return emb(patches)


SIMILARITIES = ("dot", "cosine")


def _check_similarity(similarity: str):
    if similarity not in SIMILARITIES:
        raise ValueError(f"similarity must be one of {SIMILARITIES}, got {similarity!r}")


def patch_similarity(pe: torch.Tensor, te: torch.Tensor, similarity: str = "cosine") -> torch.Tensor:
    """Similarity of every patch row of ``pe`` [..., T, D] with ``te`` [..., D]."""
    _check_similarity(similarity)
    if pe.shape[-1] != te.shape[-1]:
        raise ShapeError(f"embedding widths differ: {pe.shape[-1]} vs {te.shape[-1]}")
    if similarity == "dot":
        return (pe * te.unsqueeze(-2)).sum(-1)
    return (l2_normalize(pe) * l2_normalize(te).unsqueeze(-2)).sum(-1)


def token_attention(s: torch.Tensor) -> torch.Tensor:
    return softmax(s, -1)


def pooled_vision(pe: torch.Tensor, a: torch.Tensor, normalize_rows: bool = True) -> torch.Tensor:
    rows = l2_normalize(pe) if normalize_rows else pe
    return (a.unsqueeze(-1) * rows).sum(-2)


def pacl_compatibility(pe: torch.Tensor, te: torch.Tensor, normalize_rows: bool = True,
                       similarity: str = "dot") -> torch.Tensor:
    a = token_attention(patch_similarity(pe, te, similarity))
    return cosine(pooled_vision(pe, a, normalize_rows), te)


def pacl_matrix(pe: torch.Tensor, te: torch.Tensor, normalize_rows: bool = True,
                similarity: str = "dot") -> torch.Tensor:
    """Matrix of patch-aligned compatibilities.

    ``pe`` is [n, T, D] (one patch set per image), ``te`` is [m, D]; entry
    (i, j) scores image i against text j.  In training n = m = k.
    """
    if pe.dim() != 3 or te.dim() != 2 or pe.shape[-1] != te.shape[-1]:
        raise ShapeError(f"expected [n, T, D] and [m, D], got {tuple(pe.shape)} and {tuple(te.shape)}")
    _check_similarity(similarity)
    pn, tn = l2_normalize(pe), l2_normalize(te)
    if similarity == "dot":
        s = torch.einsum("itd,jd->ijt", pe, te)
    else:
        s = torch.einsum("itd,jd->ijt", pn, tn)
    a = softmax(s, -1)
    v = torch.einsum("ijt,itd->ijd", a, pn if normalize_rows else pe)
    return (l2_normalize(v) * tn[None]).sum(-1)


def clip_compatibility(cls_v, cls_t, ev: LinearEmbedder, et: LinearEmbedder) -> torch.Tensor:
    return cosine(ev(cls_v), et(cls_t))


def clip_matrix(cls_v, cls_t, ev: LinearEmbedder, et: LinearEmbedder) -> torch.Tensor:
    return l2_normalize(ev(cls_v)) @ l2_normalize(et(cls_t)).T


@dataclass
class CompatibilityMatrix:
    values: torch.Tensor          # [k, k]; rows are images, columns texts
    logit_scale: torch.Tensor | float = 1.0


def info_nce(cm: CompatibilityMatrix) -> torch.Tensor:
    """Symmetric InfoNCE: mean of image->text and text->image cross-entropies."""
    phi = cm.values
    if phi.dim() != 2 or phi.shape[0] != phi.shape[1]:
        raise ShapeError(f"compatibility matrix must be square, got {tuple(phi.shape)}")
    k = phi.shape[0]
    if k < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 pairs")
    scale = cm.logit_scale
    if float(torch.as_tensor(scale).detach()) <= 0:
        raise ValueError("logit scale must be positive")
    logits = scale * phi
    target = torch.arange(k, device=phi.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def mi_lower_bound(loss: float, k: int) -> float:
    if k < 2:
        raise ValueError("batch size must be at least 2")
    return math.log(k) - float(loss)
