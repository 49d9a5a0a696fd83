"""Phase A (CLS-level contrastive pretraining) and phase B (PACL) optimisation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn

from .alignment import CompatibilityMatrix, clip_matrix, info_nce, pacl_matrix
from .data import ImageTextPair
from .model import PACLModel
from .numerics import backward, freeze, state_hashes

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64          # 4096 at full scale
    epochs: int = 10
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.2
    seed: int = 0
    phase: str = "pacl"           # "clip_pretrain" or "pacl"
    log_every: int = 100

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive loss needs negatives)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.phase not in ("clip_pretrain", "pacl"):
            raise ValueError(f"unknown phase {self.phase!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class History:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def append(self, step, loss, lr):
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)

    def __len__(self):
        return len(self.steps)

    def rows(self):
        return list(zip(self.steps, self.losses, self.lrs))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            for s, loss, lr in self.rows():
                w.writerow([s, repr(loss), repr(lr)])


def cosine_lr(step: int, total: int, lr_init: float) -> float:
    if total < 1:
        raise ValueError("total steps must be >= 1")
    step = min(max(step, 0), total)
    return lr_init * 0.5 * (1 + math.cos(math.pi * step / total))


class AdamW:
    """Decoupled-weight-decay Adam over the trainable subset of ``params``.

    Thin wrapper around ``torch.optim.AdamW`` that skips frozen parameters,
    exempts 0-d/1-d tensors (biases, norms, logit scales) from decay and
    refuses to step on non-finite gradients.
    """

    def __init__(self, params: Iterable[torch.Tensor], cfg: TrainConfig):
        self.params = [p for p in params if p.requires_grad]
        decay = [p for p in self.params if p.dim() >= 2]
        no_decay = [p for p in self.params if p.dim() < 2]
        groups = [g for g in ({"params": decay, "weight_decay": cfg.weight_decay},
                              {"params": no_decay, "weight_decay": 0.0}) if g["params"]]
        self.opt = None
        if groups:
            self.opt = torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, foreach=False)
        self.steps = 0

    @property
    def state(self):
        return self.opt.state if self.opt else {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise TrainingError(f"non-finite gradient for parameter of shape {tuple(p.shape)}; step aborted")
        if self.opt is None:
            return
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.step()
        self.steps += 1


def adamw_step(opt: AdamW, lr: float) -> None:
    opt.step(lr)


def _batches(n: int, k: int, epochs: int, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for b in range(n // k):
            yield perm[b * k:(b + 1) * k]


def _steps_total(n: int, cfg: TrainConfig) -> int:
    return (n // cfg.batch_size) * cfg.epochs


def _check_data(pairs: Sequence, cfg: TrainConfig):
    if not pairs:
        raise TrainingError("training set is empty")
    if len(pairs) < cfg.batch_size:
        raise TrainingError(f"training set ({len(pairs)} pairs) smaller than one batch ({cfg.batch_size})")


def _run(params, cfg: TrainConfig, n: int, loss_fn) -> History:
    history = History()
    total = _steps_total(n, cfg)
    opt = AdamW(params, cfg)
    for step, idx in enumerate(_batches(n, cfg.batch_size, cfg.epochs, cfg.seed)):
        lr = cosine_lr(step, total, cfg.lr)
        opt.zero_grad()
        loss = loss_fn(idx)
        if not bool(torch.isfinite(loss)):
            raise TrainingError(f"non-finite loss at step {step}")
        backward(loss)
        adamw_step(opt, lr)
        history.append(step, loss.item(), lr)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d/%d loss %.4f lr %.2e", cfg.phase, step, total, history.losses[-1], lr)
    return history


def pretrain_clip(pairs: Sequence[ImageTextPair], model: PACLModel, cfg: TrainConfig) -> History:
    """Train both towers, the CLS embedders and the CLIP logit scale with the CLS compatibility."""
    _check_data(pairs, cfg)
    images = torch.stack([p.image for p in pairs]).to(model.dtype)
    tokens = model.tokens([p.caption for p in pairs])
    trainable: list[nn.Module] = [model.vision, model.text, model.cls_embedder, model.text_embedder, model.clip_scale]
    freeze(model.patch_embedder)
    freeze(model.pacl_scale)

    def loss_fn(idx):
        cls_v, _, _ = model.vision(images[idx])
        cls_t = model.text(tokens[idx])
        phi = clip_matrix(cls_v, cls_t, model.cls_embedder, model.text_embedder)
        return info_nce(CompatibilityMatrix(phi, model.clip_scale()))

    params = [p for m in trainable for p in m.parameters()]
    model.train()
    history = _run(params, cfg, len(pairs), loss_fn)
    for m in model.towers():
        freeze(m)
    return history


def tower_features(model: PACLModel, pairs: Sequence[ImageTextPair], stride: int | None = None, chunk: int = 256):
    """Frozen-tower patch tokens [N, T, D_v] and text embeddings [N, D] for ``pairs``.

    Pairs that share an image object are encoded once.
    """
    uniq: dict[int, int] = {}
    order = []
    for p in pairs:
        key = id(p.image)
        if key not in uniq:
            uniq[key] = len(order)
            order.append(p.image)
    img_index = torch.tensor([uniq[id(p.image)] for p in pairs])
    with torch.no_grad():
        patches = []
        for i in range(0, len(order), chunk):
            _, pt, _ = model.vision(torch.stack(order[i:i + chunk]).to(model.dtype), stride)
            patches.append(pt)
        patches = torch.cat(patches)
        captions = sorted({p.caption for p in pairs})
        cap_index = {c: i for i, c in enumerate(captions)}
        te = torch.cat([model.embed_text(captions[i:i + chunk]) for i in range(0, len(captions), chunk)])
        txt_index = torch.tensor([cap_index[p.caption] for p in pairs])
    return patches, img_index, te, txt_index


def train_pacl(pairs: Sequence[ImageTextPair], model: PACLModel, cfg: TrainConfig) -> History:
    """Train only the patch embedder (and PACL logit scale) with everything else frozen."""
    if cfg.epochs == 0:
        return History()
    _check_data(pairs, cfg)
    for m in model.towers():
        freeze(m)
    model.patch_embedder.requires_grad_(True)
    model.pacl_scale.requires_grad_(model.pacl_scale.spec == "learnable")
    before = state_hashes(nn.ModuleList(model.towers()))
    model.eval()
    patches, img_index, te, txt_index = tower_features(model, pairs)
    normalized, similarity = model.config.pool_normalized, model.config.similarity

    def loss_fn(idx):
        pe = model.patch_embedder(patches[img_index[idx]])
        phi = pacl_matrix(pe, te[txt_index[idx]], normalized, similarity)
        return info_nce(CompatibilityMatrix(phi, model.pacl_scale()))

    params = list(model.patch_embedder.parameters()) + list(model.pacl_scale.parameters())
    history = _run(params, cfg, len(pairs), loss_fn)
    if state_hashes(nn.ModuleList(model.towers())) != before:
        raise TrainingError("frozen tower weights changed during PACL training")
    return history
