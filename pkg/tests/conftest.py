import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from pacl.data import SceneSpec, augment_dataset, generate_dataset  # noqa: E402
from pacl.encoders import VisionEncoderConfig  # noqa: E402
from pacl.model import ModelConfig, PACLModel, build_vocab  # noqa: E402
from pacl.training import TrainConfig, pretrain_clip  # noqa: E402


def tiny_config(**changes) -> ModelConfig:
    base = dict(
        vision=VisionEncoderConfig(width=16, depth=1, heads=2),
        text_width=16, text_depth=1, text_heads=2, embed_dim=16,
    )
    base.update(changes)
    return ModelConfig(**base)


def tiny_corpus(n=96, seed=0):
    spec = SceneSpec(seed=seed)
    pairs = generate_dataset(spec, n)
    return spec, augment_dataset(pairs, spec.lexicon(), seed=seed)


def tiny_model(pairs, spec, **changes) -> PACLModel:
    vocab = build_vocab([p.caption for p in pairs], spec.class_names)
    return PACLModel(tiny_config(**changes), vocab)


@pytest.fixture(scope="session")
def tiny():
    """A tiny model after a short CLS-level pretraining run, plus its corpus."""
    spec, pairs = tiny_corpus()
    model = tiny_model(pairs, spec)
    pretrain_clip(pairs, model, TrainConfig(batch_size=32, epochs=2, phase="clip_pretrain", log_every=0))
    return model, spec, pairs


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
