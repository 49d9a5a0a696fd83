"""Measurement procedures: patch-alignment probe, semantic coherence ROC, mIoU."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .alignment import clip_matrix, pacl_matrix
from .data import IGNORE, ImageTextPair
from .encoders import patch_grid_dims
from .inference import ClassEmbeddingBank, classify_batch, segment
from .model import PACLModel
from .numerics import l2_normalize, softmax


def majority_vote_labels(labelmap: np.ndarray, patch: int, stride: int, ignore: int = IGNORE) -> np.ndarray:
    """Label each patch by the modal pixel label inside its square.

    Patches that are at least half ignore pixels are labelled ``ignore``;
    otherwise ignore pixels are left out of the vote.  Ties go to the lowest id.
    """
    labelmap = np.asarray(labelmap)
    h, w = patch_grid_dims(labelmap.shape[0], labelmap.shape[1], patch, stride)
    out = np.full((h, w), ignore, dtype=np.int64)
    for i in range(h):
        for j in range(w):
            win = labelmap[i * stride:i * stride + patch, j * stride:j * stride + patch].ravel()
            valid = win[win != ignore]
            if 2 * valid.size <= win.size:
                continue
            out[i, j] = np.bincount(valid).argmax()
    return out


def patch_scores(model: PACLModel, images: torch.Tensor, bank: ClassEmbeddingBank, mode: str) -> torch.Tensor:
    """Per-patch class scores [B, T, C] at the training stride.

    ``pre`` pushes each patch token through the CLS-vision embedder and takes
    class probabilities; ``post`` uses the PACL patch similarities.
    """
    emb = bank.embeddings.to(model.dtype)
    with torch.no_grad():
        images = images.to(model.dtype)
        if mode == "pre":
            _, tokens, _ = model.vision(images)
            return softmax(l2_normalize(model.cls_embedder(tokens)) @ emb.T, -1)
        if mode == "post":
            pe, _ = model.patch_embeddings(images)
            return l2_normalize(pe) @ emb.T
    raise ValueError(f"mode must be 'pre' or 'post', got {mode!r}")


def patch_label_arrays(pairs: Sequence[ImageTextPair], patch: int, stride: int) -> np.ndarray:
    return np.stack([majority_vote_labels(p.labels, patch, stride).ravel() for p in pairs])


def accuracy_from_scores(scores, labels, ignore: int = IGNORE) -> float:
    scores = np.asarray(scores).reshape(-1, np.asarray(scores).shape[-1])
    labels = np.asarray(labels).ravel()
    keep = labels != ignore
    if not keep.any():
        raise ValueError("no non-ignore patches to score")
    return float((scores[keep].argmax(-1) == labels[keep]).mean())


def patch_alignment_accuracy(
    model: PACLModel, pairs: Sequence[ImageTextPair], bank: ClassEmbeddingBank, mode: str, chunk: int = 256
) -> float:
    v = model.config.vision
    labels = patch_label_arrays(pairs, v.patch_size, v.train_stride)
    scores = torch.cat([
        patch_scores(model, torch.stack([p.image for p in pairs[i:i + chunk]]), bank, mode)
        for i in range(0, len(pairs), chunk)
    ])
    return accuracy_from_scores(scores.numpy(), labels)


# -- ROC / AUROC ---------------------------------------------------------------

@dataclass
class ROCResult:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float
    n_pairs: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def roc_curve(scores, targets) -> ROCResult:
    """Threshold sweep over the distinct scores, highest first.

    The first point (threshold +inf) is (0, 0); the area uses the trapezoid
    rule, which counts tied positive/negative pairs as one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    targets = np.asarray(targets).astype(bool).ravel()
    n_pos, n_neg = int(targets.sum()), int((~targets).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative targets")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], targets[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(t)[last]
    fps = (last + 1) - tps
    tps, fps = np.r_[0, tps], np.r_[0, fps]
    tpr, fpr = tps / n_pos, fps / n_neg
    thresholds = np.r_[np.inf, s[last]]
    # trapezoid area in integer counts, so the result is one correctly rounded division
    twice_area = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])))
    area = twice_area / (2 * n_pos * n_neg)
    return ROCResult(thresholds, tpr, fpr, area, scores.size)


def patch_tokens_and_labels(model: PACLModel, pairs: Sequence[ImageTextPair], chunk: int = 256):
    """Raw encoder patch tokens [N, D_v] and their majority labels [N], ignore patches dropped."""
    v = model.config.vision
    labels = patch_label_arrays(pairs, v.patch_size, v.train_stride).ravel()
    toks = []
    with torch.no_grad():
        for i in range(0, len(pairs), chunk):
            _, pt, _ = model.vision(torch.stack([p.image for p in pairs[i:i + chunk]]).to(model.dtype))
            toks.append(pt.reshape(-1, pt.shape[-1]))
    toks = torch.cat(toks)
    keep = labels != IGNORE
    return toks[torch.from_numpy(keep)], labels[keep]


def coherence_from_features(features: torch.Tensor, labels: np.ndarray, n_pairs: int | None, seed: int = 0) -> ROCResult:
    """Cosine of patch pairs as a same-label classifier.

    ``n_pairs=None`` scores every unordered pair; otherwise distinct pairs
    are drawn uniformly with replacement.
    """
    n = features.shape[0]
    if n < 2:
        raise ValueError("need at least two patches")
    if n_pairs is None:
        i, j = np.triu_indices(n, 1)
    else:
        if n_pairs < 100:
            raise ValueError("n_pairs must be at least 100")
        rng = np.random.default_rng(seed)
        i = rng.integers(n, size=n_pairs)
        j = (i + rng.integers(1, n, size=n_pairs)) % n
    feats = l2_normalize(features.double())
    score = (feats[torch.from_numpy(i)] * feats[torch.from_numpy(j)]).sum(-1).numpy()
    target = labels[i] == labels[j]
    if target.all() or not target.any():
        raise ValueError("sampled pairs need both same-label and different-label examples")
    return roc_curve(score, target)


def coherence_auroc(model: PACLModel, pairs: Sequence[ImageTextPair], n_pairs: int | None = 10000, seed: int = 0) -> ROCResult:
    feats, labels = patch_tokens_and_labels(model, pairs)
    if len(np.unique(labels)) < 2:
        raise ValueError("fewer than 2 distinct patch labels in the dataset")
    return coherence_from_features(feats, labels, n_pairs, seed)


# -- segmentation metric -------------------------------------------------------

@dataclass
class ConfusionAccumulator:
    num_classes: int
    ignore: int = IGNORE
    intersection: np.ndarray = field(init=False)
    union: np.ndarray = field(init=False)
    pixels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.intersection = np.zeros(self.num_classes, dtype=np.int64)
        self.union = np.zeros(self.num_classes, dtype=np.int64)
        self.pixels = np.zeros(self.num_classes, dtype=np.int64)

    def update(self, pred, gt, name: str = "image") -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"{name}: prediction shape {pred.shape} != ground truth shape {gt.shape}")
        valid = gt != self.ignore
        p, g = pred[valid], gt[valid]
        for c in range(self.num_classes):
            pc, gc = p == c, g == c
            self.intersection[c] += np.count_nonzero(pc & gc)
            self.union[c] += np.count_nonzero(pc | gc)
            self.pixels[c] += np.count_nonzero(gc)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator(self.num_classes, self.ignore)
        out.intersection = self.intersection + other.intersection
        out.union = self.union + other.union
        out.pixels = self.pixels + other.pixels
        return out

    def result(self) -> tuple[list[float | None], float]:
        ious: list[float | None] = [
            float(i / u) if u else None for i, u in zip(self.intersection, self.union)
        ]
        present = [x for x in ious if x is not None]
        return ious, float(np.mean(present)) if present else float("nan")


def miou(preds: Iterable, gts: Iterable, num_classes: int, ignore: int = IGNORE):
    """(per-class IoU, mean IoU); classes absent from both prediction and truth are None and skipped."""
    acc = ConfusionAccumulator(num_classes, ignore)
    for k, (p, g) in enumerate(zip(preds, gts)):
        acc.update(p, g, name=f"image {k}")
    return acc.result()


def evaluate_segmentation(model: PACLModel, pairs: Sequence[ImageTextPair], bank: ClassEmbeddingBank,
                          stride: int | None = None, background_entropy: float | None = None,
                          softmax_first: bool = False, method: str = "interpolate"):
    preds = [
        segment(model, p.image, bank, stride, background_entropy, softmax_first, method).mask_with_background()
        for p in pairs
    ]
    return miou(preds, [p.labels for p in pairs], len(bank))


# -- image-level ----------------------------------------------------------------

def classification_accuracy(model: PACLModel, pairs: Sequence[ImageTextPair], bank: ClassEmbeddingBank,
                            mode: str = "pacl", chunk: int = 256) -> float:
    """Top-1 accuracy against each pair's first object class."""
    targets = np.array([p.classes[0] for p in pairs])
    preds = np.concatenate([
        classify_batch(model, torch.stack([p.image for p in pairs[i:i + chunk]]), bank, mode).argmax(-1).numpy()
        for i in range(0, len(pairs), chunk)
    ])
    return float((preds == targets).mean())


def retrieval_accuracy(model: PACLModel, pairs: Sequence[ImageTextPair], mode: str = "clip") -> float:
    """Fraction of images whose best-scoring caption in the batch is their own."""
    with torch.no_grad():
        images = torch.stack([p.image for p in pairs]).to(model.dtype)
        tokens = model.tokens([p.caption for p in pairs])
        if mode == "clip":
            cls_v, _, _ = model.vision(images)
            phi = clip_matrix(cls_v, model.text(tokens), model.cls_embedder, model.text_embedder)
        else:
            pe, _ = model.patch_embeddings(images)
            phi = pacl_matrix(pe, model.embed_text(tokens), model.config.pool_normalized, model.config.similarity)
    return float((phi.argmax(1) == torch.arange(len(pairs))).double().mean())


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
