"""The canonical seeded run: generate scenes, pretrain towers, train PACL, evaluate."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

from . import diagnostics as dg
from .config import RunConfig
from .data import ImageTextPair, SceneSpec, augment_dataset, generate_dataset
from .inference import build_class_bank
from .model import PACLModel, build_vocab
from .numerics import state_hashes
from .training import History, pretrain_clip, train_pacl

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 10_000


def held_out_spec(scene: SceneSpec, **changes) -> SceneSpec:
    return dataclasses.replace(scene, seed=scene.seed + TEST_SEED_OFFSET, **changes)


def training_corpus(cfg: RunConfig) -> list[ImageTextPair]:
    scene = cfg.data.scene
    pairs = generate_dataset(scene, cfg.data.n)
    if cfg.data.augment_prompts:
        pairs = augment_dataset(pairs, scene.lexicon(), seed=scene.seed)
    return pairs


def pretrain(cfg: RunConfig, pairs: list[ImageTextPair], class_names=None) -> tuple[PACLModel, History]:
    names = cfg.data.scene.class_names if class_names is None else class_names
    vocab = build_vocab([p.caption for p in pairs], names, cfg.infer.prompts)
    model = PACLModel(cfg.model, vocab)
    history = pretrain_clip(pairs, model, cfg.train.for_phase("clip_pretrain"))
    return model, history


@dataclass
class PipelineResult:
    model: PACLModel
    pretrain_history: History
    pacl_history: History
    metrics: dict = field(default_factory=dict)
    tower_hashes_before: dict = field(default_factory=dict)
    tower_hashes_after: dict = field(default_factory=dict)


def evaluate(model: PACLModel, cfg: RunConfig, test: list[ImageTextPair], n_classify: int = 300) -> dict:
    scene = cfg.data.scene
    bank = build_class_bank(scene.class_names, model, cfg.infer.prompts)
    patch = model.config.vision.patch_size
    single = generate_dataset(held_out_spec(scene, min_objects=1, max_objects=1), n_classify)
    _, miou_dense = dg.evaluate_segmentation(model, test, bank, cfg.infer.stride, cfg.infer.background_entropy)
    _, miou_coarse = dg.evaluate_segmentation(model, test, bank, patch, cfg.infer.background_entropy)
    return {
        "align_pre": dg.patch_alignment_accuracy(model, test, bank, "pre"),
        "align_post": dg.patch_alignment_accuracy(model, test, bank, "post"),
        f"miou_stride{cfg.infer.stride}": miou_dense,
        f"miou_stride{patch}": miou_coarse,
        "classify_pacl": dg.classification_accuracy(model, single, bank, "pacl"),
        "classify_clip": dg.classification_accuracy(model, single, bank, "clip"),
        "coherence_auroc": dg.coherence_auroc(model, test, 10000, seed=scene.seed).auroc,
    }


def run_pipeline(cfg: RunConfig, n_test: int = 300) -> PipelineResult:
    t0 = time.perf_counter()
    pairs = training_corpus(cfg)
    model, hist_a = pretrain(cfg, pairs)
    log.info("pretraining: %d steps in %.1fs", len(hist_a), time.perf_counter() - t0)
    before = state_hashes(model)
    t1 = time.perf_counter()
    hist_b = train_pacl(pairs, model, cfg.train.for_phase("pacl"))
    log.info("PACL training: %d steps in %.1fs", len(hist_b), time.perf_counter() - t1)
    after = state_hashes(model)
    tower_keys = set(model.tower_state())
    test = generate_dataset(held_out_spec(cfg.data.scene), n_test)
    metrics = evaluate(model, cfg, test)
    metrics["seconds"] = time.perf_counter() - t0
    return PipelineResult(
        model, hist_a, hist_b, metrics,
        {k: v for k, v in before.items() if k in tower_keys},
        {k: v for k, v in after.items() if k in tower_keys},
    )
