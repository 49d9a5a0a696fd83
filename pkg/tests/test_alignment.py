import math

import numpy as np
import pytest
import torch

import oracles
from pacl.alignment import (
    CompatibilityMatrix,
    LinearEmbedder,
    LogitScale,
    VisionEmbedder,
    clip_compatibility,
    clip_matrix,
    embed_patches,
    info_nce,
    mi_lower_bound,
    pacl_compatibility,
    pacl_matrix,
    patch_similarity,
    pooled_vision,
    token_attention,
)
from pacl.numerics import ShapeError, finite_diff_grad, max_relative_error

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


class TestEmbedPatches:
    def test_zero_weights(self):
        emb = VisionEmbedder(4, 3).double()
        for p in emb.parameters():
            torch.nn.init.zeros_(p)
        assert torch.equal(embed_patches(emb, torch.randn(5, 4, dtype=D)), torch.zeros(5, 3, dtype=D))

    def test_residual_identity(self):
        emb = VisionEmbedder(4, 4).double()
        with torch.no_grad():
            for p in emb.parameters():
                p.zero_()
            emb.res.weight.copy_(torch.eye(4))
        x = torch.randn(3, 4, dtype=D)
        assert torch.equal(embed_patches(emb, x), x)

    def test_against_hand_composition(self):
        torch.manual_seed(3)
        emb = VisionEmbedder(4, 2, hidden=5).double()
        x = torch.randn(3, 4, dtype=D)
        W1, b1 = emb.fc1.weight.detach().numpy(), emb.fc1.bias.detach().numpy()
        W2, b2 = emb.fc2.weight.detach().numpy(), emb.fc2.bias.detach().numpy()
        Wr, br = emb.res.weight.detach().numpy(), emb.res.bias.detach().numpy()
        xn = x.numpy()
        expected = np.maximum(xn @ W1.T + b1, 0) @ W2.T + b2 + xn @ Wr.T + br
        np.testing.assert_allclose(embed_patches(emb, x).detach().numpy(), expected, atol=1e-12, rtol=0)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            embed_patches(VisionEmbedder(4, 2), torch.randn(3, 5))

    def test_only_embedder_params_are_trainable_by_default(self):
        emb = VisionEmbedder(4, 2)
        assert all(p.requires_grad for p in emb.parameters())
        assert emb.fc1.weight.shape == (4, 4)  # hidden width defaults to input width


class TestPatchSimilarity:
    @pytest.mark.parametrize("sim", ["dot", "cosine"])
    def test_self_similarity(self, sim):
        te = t([0.6, 0.8])
        assert torch.allclose(patch_similarity(te.expand(3, 2), te, sim), torch.ones(3, dtype=D))

    @pytest.mark.parametrize("sim", ["dot", "cosine"])
    def test_orthogonal(self, sim):
        pe = t([[0.0, 2.0], [0.0, -1.0]])
        assert patch_similarity(pe, t([3.0, 0.0]), sim).tolist() == [0.0, 0.0]

    def test_hand_dot_products(self):
        assert patch_similarity(t([[1.0, 0.0], [0.0, 1.0]]), t([1.0, 0.0])).tolist() == [1.0, 0.0]

    def test_cosine_is_bounded(self):
        g = torch.Generator().manual_seed(0)
        s = patch_similarity(torch.randn(50, 7, dtype=D, generator=g) * 9, torch.randn(7, dtype=D, generator=g))
        assert s.abs().max() <= 1

    def test_dot_ignores_normalisation(self):
        assert patch_similarity(t([[2.0, 0.0]]), t([3.0, 0.0]), "dot").item() == 6.0

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            patch_similarity(t([[1.0]]), t([1.0]), "l1")


class TestTokenAttention:
    def test_single_token(self):
        assert token_attention(t([0.3])).tolist() == [1.0]

    def test_closed_form(self):
        a = token_attention(t([1.0, 0.0]))
        assert a.tolist() == pytest.approx([math.e / (math.e + 1), 1 / (math.e + 1)], abs=1e-12)
        assert a[0].item() == pytest.approx(0.7311, abs=1e-4)

    def test_constant_is_uniform(self):
        assert torch.allclose(token_attention(torch.full((5,), 0.4, dtype=D)), torch.full((5,), 0.2, dtype=D))


class TestPooledVision:
    def test_one_hot_selects_normalised_row(self):
        pe = t([[3.0, 4.0], [1.0, 0.0]])
        torch.testing.assert_close(pooled_vision(pe, t([1.0, 0.0])), t([0.6, 0.8]))

    def test_identical_rows(self):
        pe = t([[0.0, 2.0]] * 3)
        torch.testing.assert_close(pooled_vision(pe, t([0.2, 0.5, 0.3])), t([0.0, 1.0]))

    def test_hand_weighted_sum(self):
        a = t([0.7311, 0.2689])
        torch.testing.assert_close(pooled_vision(t([[1.0, 0.0], [0.0, 1.0]]), a), a)

    def test_norm_at_most_one(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(100):
            pe = torch.randn(6, 4, dtype=D, generator=g)
            a = torch.softmax(torch.randn(6, dtype=D, generator=g), 0)
            assert pooled_vision(pe, a).norm() <= 1 + 1e-12


class TestPaclCompatibility:
    def test_worked_example(self):
        pe, te = t([[1.0, 0.0], [0.0, 1.0]]), t([1.0, 0.0])
        phi = pacl_compatibility(pe, te).item()
        e = math.e
        v = (e / (e + 1), 1 / (e + 1))
        assert math.hypot(*v) == pytest.approx(0.7790, abs=1e-4)
        assert phi == pytest.approx(v[0] / math.hypot(*v), abs=1e-12)
        assert phi == pytest.approx(0.9385, abs=1e-4)
        assert phi == pytest.approx(oracles.pacl_phi(pe.tolist(), te.tolist()), abs=1e-12)

    @pytest.mark.parametrize("sim", ["dot", "cosine"])
    def test_single_token_reduces_to_cosine(self, sim):
        rng = np.random.default_rng(0)
        for _ in range(100):
            d = int(rng.integers(1, 17))
            pe, te = torch.from_numpy(rng.standard_normal((1, d))), torch.from_numpy(rng.standard_normal(d))
            assert abs(pacl_compatibility(pe, te, similarity=sim).item() - oracles.cosine(pe[0].tolist(), te.tolist())) <= 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n, d = int(rng.integers(1, 17)), int(rng.integers(1, 17))
            pe, te = torch.from_numpy(rng.standard_normal((n, d))), torch.from_numpy(rng.standard_normal(d))
            perm = torch.from_numpy(rng.permutation(n))
            assert abs(pacl_compatibility(pe, te) - pacl_compatibility(pe[perm], te)).item() <= 1e-12

    @pytest.mark.parametrize("normalize_rows", [True, False])
    def test_bounded(self, normalize_rows):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n, d = int(rng.integers(1, 10)), int(rng.integers(1, 10))
            scale = 10 ** rng.uniform(-3, 3)
            pe = torch.from_numpy(rng.standard_normal((n, d)) * scale)
            te = torch.from_numpy(rng.standard_normal(d))
            phi = pacl_compatibility(pe, te, normalize_rows).item()
            assert -1 - 1e-12 <= phi <= 1 + 1e-12

    @pytest.mark.parametrize("sim", ["dot", "cosine"])
    @pytest.mark.parametrize("normalize_rows", [True, False])
    def test_matches_straight_line_oracle(self, sim, normalize_rows):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n, d = int(rng.integers(1, 17)), int(rng.integers(1, 17))
            pe, te = rng.standard_normal((n, d)), rng.standard_normal(d)
            got = pacl_compatibility(torch.from_numpy(pe), torch.from_numpy(te), normalize_rows, sim).item()
            assert abs(got - oracles.pacl_phi(pe.tolist(), te.tolist(), sim, normalize_rows)) <= 1e-9

    @pytest.mark.parametrize("sim", ["dot", "cosine"])
    def test_matrix_matches_pairwise(self, sim):
        g = torch.Generator().manual_seed(4)
        pe, te = torch.randn(5, 9, 8, dtype=D, generator=g), torch.randn(3, 8, dtype=D, generator=g)
        phi = pacl_matrix(pe, te, similarity=sim)
        assert phi.shape == (5, 3)
        for i in range(5):
            for j in range(3):
                assert abs(phi[i, j] - pacl_compatibility(pe[i], te[j], similarity=sim)).item() <= 1e-12


class TestClipCompatibility:
    def setup_method(self):
        torch.manual_seed(0)
        self.ev, self.et = LinearEmbedder(5, 4).double(), LinearEmbedder(6, 4).double()

    def test_identical_projection(self):
        ev = LinearEmbedder(3, 3).double()
        x = torch.randn(3, dtype=D)
        assert clip_compatibility(x, x, ev, ev).item() == pytest.approx(1.0, abs=1e-12)

    def test_negated(self):
        et = LinearEmbedder(3, 3).double()
        with torch.no_grad():
            et.proj.bias.zero_()
        ev = LinearEmbedder(3, 3).double()
        with torch.no_grad():
            ev.proj.weight.copy_(-et.proj.weight)
            ev.proj.bias.zero_()
        x = torch.randn(3, dtype=D)
        assert clip_compatibility(x, x, ev, et).item() == pytest.approx(-1.0, abs=1e-12)

    def test_against_formula(self):
        cv, ct = torch.randn(5, dtype=D), torch.randn(6, dtype=D)
        u, w = self.ev(cv).tolist(), self.et(ct).tolist()
        assert clip_compatibility(cv, ct, self.ev, self.et).item() == pytest.approx(oracles.cosine(u, w), abs=1e-12)

    def test_matrix(self):
        cv, ct = torch.randn(4, 5, dtype=D), torch.randn(4, 6, dtype=D)
        m = clip_matrix(cv, ct, self.ev, self.et)
        for i in range(4):
            for j in range(4):
                assert m[i, j].item() == pytest.approx(clip_compatibility(cv[i], ct[j], self.ev, self.et).item(), abs=1e-12)


class TestInfoNCE:
    @pytest.mark.parametrize("k", [2, 4, 16])
    def test_chance_level(self, k):
        loss = info_nce(CompatibilityMatrix(torch.full((k, k), 0.3, dtype=D), 1.0)).item()
        assert abs(loss - math.log(k)) <= 1e-9

    def test_uniform_k4(self):
        assert info_nce(CompatibilityMatrix(torch.zeros(4, 4, dtype=D))).item() == pytest.approx(1.3863, abs=1e-4)

    def test_perfect_alignment_limit(self):
        assert info_nce(CompatibilityMatrix(torch.eye(4, dtype=D) * 50)).item() < 1e-20

    def test_two_by_two(self):
        phi = [[0.9, 0.1], [0.2, 0.8]]
        loss = info_nce(CompatibilityMatrix(t(phi), 1.0)).item()
        # brute-force softmax/log value, computed independently
        assert loss == pytest.approx(0.403740, abs=1e-6)
        assert loss == pytest.approx(oracles.info_nce(phi), abs=1e-12)

    def test_against_oracle_with_scale(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            k = int(rng.integers(2, 9))
            phi = rng.uniform(-1, 1, (k, k))
            s = float(rng.uniform(0.5, 30))
            got = info_nce(CompatibilityMatrix(torch.from_numpy(phi), s)).item()
            assert got == pytest.approx(oracles.info_nce(phi.tolist(), s), abs=1e-10)
            assert got >= 0

    def test_batch_of_one(self):
        with pytest.raises(ValueError):
            info_nce(CompatibilityMatrix(torch.ones(1, 1)))

    def test_non_positive_scale(self):
        with pytest.raises(ValueError):
            info_nce(CompatibilityMatrix(torch.zeros(2, 2), 0.0))


class TestMIBound:
    def test_chance(self):
        assert mi_lower_bound(math.log(8), 8) == pytest.approx(0.0, abs=1e-15)

    def test_perfect(self):
        assert mi_lower_bound(0.0, 4) == pytest.approx(math.log(4))

    def test_two_by_two(self):
        loss = info_nce(CompatibilityMatrix(t([[0.9, 0.1], [0.2, 0.8]]))).item()
        assert mi_lower_bound(loss, 2) == pytest.approx(0.289407, abs=1e-6)

    def test_may_be_negative(self):
        assert mi_lower_bound(5.0, 2) < 0


class TestLogitScale:
    def test_learnable_default(self):
        s = LogitScale()
        assert s().item() == pytest.approx(1 / 0.07, rel=1e-6)
        assert s.log_scale.requires_grad

    def test_clamped(self):
        s = LogitScale(init=500.0)
        assert s().item() == pytest.approx(100.0)

    def test_fixed_literal_form(self):
        s = LogitScale("fixed:1")
        assert s().item() == 1.0 and not s.log_scale.requires_grad

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            LogitScale("warm")


def pacl_loss_problem(seed, k=4, tokens=9, width=8, in_width=6, similarity="dot"):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    emb = VisionEmbedder(in_width, width).double()
    scale = LogitScale().double()
    patches = torch.randn(k, tokens, in_width, dtype=D, generator=g)
    te = torch.randn(k, width, dtype=D, generator=g)
    params = list(emb.parameters()) + [scale.log_scale]

    def loss():
        return info_nce(CompatibilityMatrix(pacl_matrix(emb(patches), te, similarity=similarity), scale()))

    return params, loss


@pytest.mark.parametrize("similarity", ["dot", "cosine"])
def test_pacl_loss_gradient_matches_finite_differences(similarity):
    for seed in range(5):
        params, loss = pacl_loss_problem(seed, similarity=similarity)
        loss().backward()
        analytic = [p.grad.clone() for p in params]
        numeric = finite_diff_grad(loss, params)
        assert max_relative_error(analytic, numeric) <= 1e-5
