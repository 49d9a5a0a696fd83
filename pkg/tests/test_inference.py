import copy
import math

import numpy as np
import pytest
import torch

from conftest import tiny_model
from pacl.inference import (
    BACKGROUND_ID,
    ClassEmbeddingBank,
    build_class_bank,
    classify_batch,
    dense_scores,
    segment,
    zeroshot_classify,
)
from pacl.numerics import entropy
from pacl.text import PROMPTS


@pytest.fixture(scope="module")
def model64(tiny):
    model, spec, pairs = tiny
    return copy.deepcopy(model).double(), spec, pairs


def constant_embedder(model, vector):
    """Make every patch embed to ``vector`` regardless of its token."""
    model = copy.deepcopy(model)
    with torch.no_grad():
        for p in model.patch_embedder.parameters():
            p.zero_()
        model.patch_embedder.res.bias.copy_(vector)
    return model


def bank_from(rows):
    rows = torch.as_tensor(rows, dtype=torch.float64)
    return ClassEmbeddingBank([f"c{i}" for i in range(len(rows))], rows / rows.norm(dim=1, keepdim=True), ["()"])


class TestBank:
    def test_rows_unit_norm(self, model64):
        model, spec, _ = model64
        bank = build_class_bank(spec.class_names, model)
        assert bank.embeddings.shape == (4, model.config.embed_dim)
        assert (bank.embeddings.norm(dim=1) - 1).abs().max() <= 1e-9

    def test_prompt_order_invariance(self, model64):
        model, spec, _ = model64
        a = build_class_bank(spec.class_names, model, PROMPTS)
        b = build_class_bank(spec.class_names, model, PROMPTS[::-1])
        c = build_class_bank(spec.class_names, model, PROMPTS + PROMPTS[:2])
        assert torch.equal(a.embeddings, b.embeddings) and torch.equal(a.embeddings, c.embeddings)

    def test_unknown_class_word(self, model64):
        model, _, _ = model64
        with pytest.raises(ValueError, match="magenta"):
            build_class_bank(["red", "magenta"], model)

    def test_duplicate_names(self, model64):
        with pytest.raises(ValueError):
            build_class_bank(["red", "red"], model64[0])


class TestDenseScores:
    def test_grid_shapes(self, model64):
        model, spec, pairs = model64
        bank = build_class_bank(spec.class_names, model)
        assert dense_scores(model, pairs[0].image, bank, 8).shape == (4, 4, 4)
        assert dense_scores(model, pairs[0].image, bank, 4).shape == (4, 7, 7)

    def test_identical_rows_give_identical_planes(self, model64):
        model, _, pairs = model64
        s = dense_scores(model, pairs[0].image, bank_from([[1.0] * 16] * 3), 4)
        assert torch.equal(s[0], s[1]) and torch.equal(s[1], s[2])


class TestSegment:
    def test_constructed_two_class_case(self, model64):
        model, _, pairs = model64
        e0, e1 = torch.zeros(16, dtype=torch.float64), torch.zeros(16, dtype=torch.float64)
        e0[0], e1[1] = 1.0, 1.0
        out = segment(constant_embedder(model, e0), pairs[0].image, bank_from(torch.stack([e0, e1])), stride=4)
        assert (out.mask == 0).all() and not out.background.any()

    @pytest.mark.parametrize("stride", [1, 2, 3, 4, 8])
    def test_mask_matches_image(self, model64, stride):
        model, spec, pairs = model64
        out = segment(model, pairs[1].image, build_class_bank(spec.class_names, model), stride=stride)
        assert out.mask.shape == (32, 32) and out.scores.shape == (4, 32, 32)
        assert (out.scores.sum(0) - 1).abs().max() <= 1e-6
        assert np.array_equal(out.mask, out.scores.argmax(0).numpy())

    def test_uniform_over_21_classes_is_background(self, model64):
        model, _, pairs = model64
        bank = bank_from([[1.0] + [0.0] * 15] * 21)
        out = segment(model, pairs[0].image, bank, stride=4, background_entropy=1.5)
        assert torch.allclose(entropy(out.scores, 0), torch.full((32, 32), math.log(21), dtype=torch.float64))
        assert math.log(21) == pytest.approx(3.04, abs=5e-3)
        assert out.background.all()
        assert (out.mask_with_background() == BACKGROUND_ID).all()

    def test_background_rule_is_exact(self, model64):
        model, spec, pairs = model64
        bank = build_class_bank(spec.class_names, model)
        for thr in (0.5, 1.0, 1.3):
            out = segment(model, pairs[2].image, bank, stride=4, background_entropy=thr)
            assert np.array_equal(out.background, (entropy(out.scores, 0) > thr).numpy())

    def test_no_threshold_means_no_background(self, model64):
        model, spec, pairs = model64
        out = segment(model, pairs[0].image, bank_from([[1.0] * 16] * 21), stride=8)
        assert not out.background.any()

    def test_softmax_order_option(self, model64):
        model, spec, pairs = model64
        bank = build_class_bank(spec.class_names, model)
        a = segment(model, pairs[0].image, bank, 4)
        b = segment(model, pairs[0].image, bank, 4, softmax_first=True)
        assert (b.scores.sum(0) - 1).abs().max() <= 1e-6
        assert not torch.equal(a.scores, b.scores)


class TestClassify:
    def test_single_class(self, model64):
        model, _, pairs = model64
        cid, probs = zeroshot_classify(model, pairs[0].image, bank_from([[1.0] * 16]))
        assert cid == 0 and probs.tolist() == [1.0]

    @pytest.mark.parametrize("mode", ["pacl", "clip"])
    def test_probabilities(self, model64, mode):
        model, spec, pairs = model64
        bank = build_class_bank(spec.class_names, model)
        probs = classify_batch(model, torch.stack([p.image for p in pairs[:5]]), bank, mode)
        assert probs.shape == (5, 4) and torch.allclose(probs.sum(1), torch.ones(5, dtype=torch.float64))

    def test_argmax_invariant_to_positive_scaling(self, model64):
        model, spec, pairs = model64
        bank = build_class_bank(spec.class_names, model)
        scaled = ClassEmbeddingBank(bank.names, bank.embeddings * 7.5, bank.prompts)
        images = torch.stack([p.image for p in pairs[:20]])
        assert torch.equal(classify_batch(model, images, bank, "clip").argmax(1),
                           classify_batch(model, images, scaled, "clip").argmax(1))

    def test_bad_mode(self, model64):
        model, spec, pairs = model64
        with pytest.raises(ValueError):
            classify_batch(model, pairs[0].image[None], bank_from([[1.0] * 16]), "dense")


def test_untrained_model_cannot_tokenize_foreign_vocab(tiny):
    _, spec, pairs = tiny
    model = tiny_model(pairs, spec)
    with pytest.raises(ValueError, match="unknown words"):
        build_class_bank(["hexagon"], model)


def test_upscale_alternative(model64):
    model, spec, pairs = model64
    bank = build_class_bank(spec.class_names, model)
    a = segment(model, pairs[0].image, bank, 4)
    b = segment(model, pairs[0].image, bank, 4, method="upscale")
    assert b.mask.shape == (32, 32) and (b.scores.sum(0) - 1).abs().max() <= 1e-6
    assert not torch.equal(a.scores, b.scores)
    with pytest.raises(ValueError):
        segment(model, pairs[0].image, bank, 4, method="crop")
