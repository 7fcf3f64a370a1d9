import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from croplandws.fusion import IGNORE
from croplandws.weak_supervision import (
    EPS,
    AnchorSet,
    LossWeights,
    dice_similarity,
    feature_space,
    find_matches,
    kl_divergence,
    sample_anchor_pool,
    supervised_loss,
    total_loss,
    unsupervised_loss,
)


def random_distributions(shape, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    logits = torch.as_tensor(rng.normal(size=shape))
    return torch.softmax(logits, dim=-1).to(dtype)


def dice_oracle(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return 2.0 * float(a @ b) / (float(a @ a) + float(b @ b))


def kl_oracle(p, q):
    p = np.maximum(np.asarray(p, dtype=np.float64), EPS)
    q = np.maximum(np.asarray(q, dtype=np.float64), EPS)
    return float(np.sum(p * (np.log(p) - np.log(q))))


class TestSupervisedLoss:
    def test_fully_masked_is_zero(self):
        probs = torch.rand(2, 4, 4).softmax(dim=0)
        labels = np.ones((4, 4), dtype=np.uint8)
        mask = np.zeros((4, 4), dtype=np.uint8)
        assert float(supervised_loss(probs, labels, mask)) == 0.0

    def test_perfect_prediction_is_zero(self):
        labels = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        probs = torch.zeros(2, 2, 2)
        for i in range(2):
            for j in range(2):
                probs[labels[i, j], i, j] = 1.0
        loss = supervised_loss(probs, labels, np.ones((2, 2), dtype=np.uint8))
        assert float(loss) == pytest.approx(0.0, abs=1e-7)

    def test_toy_example_value(self):
        # labels [1,0;ignore,1], probs for crop 0.8/0.3/0.5/0.6
        # expected mean of {-ln 0.8, -ln 0.7, -ln 0.6}
        labels = np.array([[1, 0], [IGNORE, 1]], dtype=np.uint8)
        mask = np.ones((2, 2), dtype=np.uint8)
        p_crop = torch.tensor([[0.8, 0.3], [0.5, 0.6]], dtype=torch.float64)
        probs = torch.stack([1.0 - p_crop, p_crop])
        expected = -(math.log(0.8) + math.log(0.7) + math.log(0.6)) / 3.0
        assert float(supervised_loss(probs, labels, mask)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.3635, abs=5e-5)

    def test_bit_invariant_to_masked_pixels(self):
        rng = np.random.default_rng(1)
        labels = rng.choice([0, 1, IGNORE], size=(8, 8)).astype(np.uint8)
        mask = (rng.random((8, 8)) < 0.5).astype(np.uint8)
        probs = torch.softmax(torch.as_tensor(rng.normal(size=(2, 8, 8))), dim=0)
        base = float(supervised_loss(probs, labels, mask))
        perturbed = probs.clone()
        untouched = (mask == 0) | (labels == IGNORE)
        perturbed[:, torch.as_tensor(untouched)] = 0.123
        assert float(supervised_loss(perturbed, labels, mask)) == base

    def test_no_contributing_pixels_flagged_in_diagnostics(self):
        probs = torch.rand(2, 4, 4).softmax(dim=0)
        labels = np.full((4, 4), IGNORE, dtype=np.uint8)
        mask = np.ones((4, 4), dtype=np.uint8)
        maps = [torch.randn(4, 4, 4)]
        _, diag = total_loss(probs, maps, labels, mask, LossWeights(), np.random.default_rng(0))
        assert diag["n_supervised_pixels"] == 0


class TestDiceSimilarity:
    def test_self_similarity_is_one(self):
        z = random_distributions((16,))
        assert float(dice_similarity(z, z)) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_supports_are_zero(self):
        a = torch.zeros(8)
        b = torch.zeros(8)
        a[0] = 1.0
        b[3] = 1.0
        assert float(dice_similarity(a, b)) == 0.0

    def test_matches_direct_formula_on_random_pairs(self):
        for seed in range(20):
            a = random_distributions((12,), seed=seed)
            b = random_distributions((12,), seed=seed + 100)
            assert float(dice_similarity(a, b)) == pytest.approx(
                dice_oracle(a.numpy(), b.numpy()), abs=1e-7
            )

    @given(st.integers(0, 10_000), st.integers(2, 24))
    @settings(max_examples=50, deadline=None)
    def test_symmetric_and_bounded(self, seed, dim):
        a = random_distributions((dim,), seed=seed)
        b = random_distributions((dim,), seed=seed + 1)
        sab = float(dice_similarity(a, b))
        sba = float(dice_similarity(b, a))
        assert sab == pytest.approx(sba, abs=1e-12)
        assert 0.0 <= sab <= 1.0

    def test_equals_one_iff_equal(self):
        a = random_distributions((10,), seed=3)
        b = random_distributions((10,), seed=4)
        assert float(dice_similarity(a, b)) < 1.0
        assert float(dice_similarity(a, a.clone())) == pytest.approx(1.0, abs=1e-12)


class TestFindMatches:
    def test_identical_and_orthogonal_pool(self):
        # 2x2 image, 4 channels: anchor 0; pixel 1 identical, pixel 2 orthogonal
        z = torch.zeros(4, 2, 2, dtype=torch.float64)
        z[:, 0, 0] = torch.tensor([1.0, 0, 0, 0])
        z[:, 0, 1] = torch.tensor([1.0, 0, 0, 0])
        z[:, 1, 0] = torch.tensor([0, 1.0, 0, 0])
        z[:, 1, 1] = torch.tensor([0.5, 0.5, 0, 0])
        m = find_matches(z, np.array([0]), np.array([1, 2]))
        assert m.similar[0] == 1
        assert m.dissimilar[0] == 2

    def test_constant_features_tie_to_lowest_index(self):
        z = torch.full((4, 4, 4), 0.25, dtype=torch.float64)
        m = find_matches(z, np.array([5]), np.array([9, 3, 7]))
        assert m.similar[0] == 3
        assert m.dissimilar[0] == 3
        assert m.neighbor[0] == 0  # lowest-linear-index 8-neighbor of pixel (1,1)

    def test_anchor_never_matches_itself(self):
        z = random_distributions((6, 3, 3), seed=2).permute(2, 0, 1)
        z = torch.softmax(torch.randn(6, 3, 3, dtype=torch.float64), dim=0)
        m = find_matches(z, np.array([4]), np.array([4, 0, 8]))
        assert m.similar[0] != 4
        assert m.dissimilar[0] != 4

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(12)
        z = torch.softmax(torch.as_tensor(rng.normal(size=(8, 16, 16))), dim=0)
        anchors, pool = sample_anchor_pool(256, 8, 32, rng)
        m = find_matches(z, anchors, pool)

        flat = z.reshape(8, -1).T.numpy()
        pool_sorted = np.sort(pool)
        for k, n in enumerate(anchors):
            best_s, best_d = None, None
            for cand in pool_sorted:
                if cand == n:
                    continue
                s = dice_oracle(flat[n], flat[cand])
                if best_s is None or s > best_s[1]:
                    best_s = (cand, s)
                if best_d is None or s < best_d[1]:
                    best_d = (cand, s)
            assert m.similar[k] == best_s[0]
            assert m.dissimilar[k] == best_d[0]
            i, j = divmod(int(n), 16)
            best_n = None
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == dj == 0:
                        continue
                    ii, jj = i + di, j + dj
                    if 0 <= ii < 16 and 0 <= jj < 16:
                        s = dice_oracle(flat[n], flat[ii * 16 + jj])
                        if best_n is None or s > best_n[1]:
                            best_n = (ii * 16 + jj, s)
            assert m.neighbor[k] == best_n[0]

    def test_neighbors_stay_inside_image(self):
        z = torch.softmax(torch.randn(4, 5, 7, dtype=torch.float64), dim=0)
        corners = np.array([0, 6, 28, 34])  # corners of a 5x7 image
        m = find_matches(z, corners, np.array([10, 20]))
        for n, sn in zip(m.anchors, m.neighbor):
            i, j = divmod(int(n), 7)
            si, sj = divmod(int(sn), 7)
            assert abs(si - i) <= 1 and abs(sj - j) <= 1 and sn != n


class TestUnsupervisedLoss:
    def _matched_set(self, n=6):
        return AnchorSet(
            anchors=np.arange(n),
            pool=np.arange(n),
            similar=np.roll(np.arange(n), 1),
            dissimilar=np.roll(np.arange(n), 2),
            neighbor=np.roll(np.arange(n), 3),
        )

    def test_identical_distributions_leave_only_hinge(self):
        z = torch.full((4, 2, 3), 0.25, dtype=torch.float64)
        w = LossWeights(alpha=2.0, beta=3.0, gamma=4.0, margin=1.5)
        loss = unsupervised_loss(z, self._matched_set(), w)
        assert float(loss) == pytest.approx(3.0 * 1.5, abs=1e-10)

    def test_zero_weights_give_zero(self):
        z = torch.softmax(torch.randn(4, 2, 3, dtype=torch.float64), dim=0)
        w = LossWeights(alpha=0.0, beta=0.0, gamma=0.0)
        assert float(unsupervised_loss(z, self._matched_set(), w)) == 0.0

    def test_matches_direct_formula(self):
        for seed in range(10):
            z = torch.softmax(torch.as_tensor(np.random.default_rng(seed).normal(size=(5, 3, 4))), dim=0)
            m = self._matched_set(n=8)
            w = LossWeights(alpha=0.7, beta=1.3, gamma=0.4, margin=0.9)
            flat = z.reshape(5, -1).T.numpy()
            sim = np.mean([kl_oracle(flat[a], flat[s]) for a, s in zip(m.anchors, m.similar)])
            dis = np.mean(
                [max(0.0, 0.9 - kl_oracle(flat[a], flat[d])) for a, d in zip(m.anchors, m.dissimilar)]
            )
            nbr = np.mean([kl_oracle(flat[a], flat[s]) for a, s in zip(m.anchors, m.neighbor)])
            expected = 0.7 * sim + 1.3 * dis + 0.4 * nbr
            assert float(unsupervised_loss(z, m, w)) == pytest.approx(expected, abs=1e-6)

    def test_moving_anchor_toward_similar_decreases_alpha_term(self):
        p = torch.tensor([0.7, 0.2, 0.1], dtype=torch.float64)
        q = torch.tensor([0.2, 0.5, 0.3], dtype=torch.float64)
        base = float(kl_divergence(p, q))
        stepped = float(kl_divergence(p + 0.01 * (q - p), q))
        assert stepped < base

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-1.0)


class TestFeatureSpace:
    def test_distributions_sum_to_one(self):
        maps = [torch.randn(1, 8, 4, 4), torch.randn(1, 4, 8, 8)]
        z = feature_space(maps)
        assert z.shape == (1, 12, 8, 8)
        assert torch.allclose(z.sum(dim=1), torch.ones(1, 8, 8), atol=1e-6)
        assert (z >= 0).all()


class TestTotalLoss:
    def _make(self, seed=0, h=8, w=8):
        rng = np.random.default_rng(seed)
        probs = torch.softmax(torch.as_tensor(rng.normal(size=(2, h, w))), dim=0)
        maps = [
            torch.as_tensor(rng.normal(size=(8, h // 2, w // 2))),
            torch.as_tensor(rng.normal(size=(4, h, w))),
        ]
        labels = rng.choice([0, 1, IGNORE], size=(h, w)).astype(np.uint8)
        mask = (rng.random((h, w)) < 0.6).astype(np.uint8)
        return probs, maps, labels, mask

    def test_zero_usl_weights_reduce_to_supervised(self):
        probs, maps, labels, mask = self._make()
        w = LossWeights(alpha=0.0, beta=0.0, gamma=0.0)
        loss, diag = total_loss(probs, maps, labels, mask, w, np.random.default_rng(0))
        assert float(loss) == pytest.approx(float(supervised_loss(probs, labels, mask)), abs=1e-10)
        assert diag["loss_usl"] == pytest.approx(0.0, abs=1e-12)

    def test_fully_masked_patch_gets_only_usl(self):
        probs, maps, labels, mask = self._make()
        mask = np.zeros_like(mask)
        loss, diag = total_loss(probs, maps, labels, mask, LossWeights(), np.random.default_rng(0))
        assert diag["loss_sl"] == 0.0
        assert float(loss) == pytest.approx(diag["loss_usl"], abs=1e-9)

    def test_total_is_sum_of_terms(self):
        probs, maps, labels, mask = self._make(seed=5)
        w = LossWeights(alpha=0.5, beta=0.8, gamma=1.1, supervised_weight=2.0)
        seed_rng = np.random.default_rng(42)
        loss, diag = total_loss(probs, maps, labels, mask, w, seed_rng)

        # independent recomputation of both terms with the same anchor draw
        z = feature_space([m[None] for m in maps])[0]
        anchors, pool = sample_anchor_pool(64, 256, 2048, np.random.default_rng(42))
        matches = find_matches(z, anchors, pool)
        expected = 2.0 * supervised_loss(probs, labels, mask) + unsupervised_loss(z, matches, w)
        assert float(loss) == pytest.approx(float(expected), abs=1e-9)
        assert diag["loss_total"] == pytest.approx(
            2.0 * diag["loss_sl"] + diag["loss_usl"], abs=1e-9
        )

    def test_gradient_flows_only_through_kl_not_matching(self):
        # matching is done on detached features: gradients exist and are finite
        torch.manual_seed(0)
        maps = [torch.randn(6, 8, 8, dtype=torch.float64, requires_grad=True)]
        probs = torch.softmax(torch.randn(2, 8, 8, dtype=torch.float64), dim=0)
        labels = np.zeros((8, 8), dtype=np.uint8)
        mask = np.zeros((8, 8), dtype=np.uint8)
        loss, _ = total_loss(probs, maps, labels, mask, LossWeights(), np.random.default_rng(1))
        loss.backward()
        assert maps[0].grad is not None
        assert torch.isfinite(maps[0].grad).all()
