import math

import numpy as np
import pytest
import torch

from tpa.losses import (
    LossConfig,
    arcface_loss,
    batch_all_triplet,
    combined_loss,
    sequence_dist,
    triplet_loss,
)


def brute_force_batch_all(embeddings, labels, margin):
    """Independent oracle: enumerate every valid triple with plain loops."""
    emb = np.asarray(embeddings, dtype=np.float64)
    batch, parts, _ = emb.shape
    total, count = 0.0, 0
    for a in range(batch):
        for p in range(batch):
            if p == a or labels[p] != labels[a]:
                continue
            for n in range(batch):
                if labels[n] == labels[a]:
                    continue
                for part in range(parts):
                    d_ap = np.linalg.norm(emb[a, part] - emb[p, part])
                    d_an = np.linalg.norm(emb[a, part] - emb[n, part])
                    total += max(0.0, d_ap - d_an + margin)
                count += 1
    if count == 0:
        return 0.0, 0
    return total / (count * parts), count


class TestSequenceDist:
    def test_identical_sequences(self):
        x = torch.randn(4, 3, dtype=torch.float64)
        assert sequence_dist(x, x).item() == 0.0

    def test_single_row_345(self):
        x = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
        y = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
        assert sequence_dist(x, y).item() == pytest.approx(5.0, abs=1e-12)

    def test_two_rows_mean(self):
        x = torch.zeros(2, 2, dtype=torch.float64)
        y = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
        assert sequence_dist(x, y).item() == pytest.approx(1.5, abs=1e-12)

    def test_symmetry_and_shape_check(self):
        x = torch.randn(3, 4, dtype=torch.float64)
        y = torch.randn(3, 4, dtype=torch.float64)
        assert sequence_dist(x, y).item() == pytest.approx(sequence_dist(y, x).item(), abs=0)
        with pytest.raises(ValueError):
            sequence_dist(x, torch.randn(4, 4, dtype=torch.float64))

    def test_triangle_inequality(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b, c = (torch.tensor(rng.normal(size=(5, 3))) for _ in range(3))
            d_ac = sequence_dist(a, c).item()
            d_ab = sequence_dist(a, b).item()
            d_bc = sequence_dist(b, c).item()
            assert d_ac <= d_ab + d_bc + 1e-12


class TestTripletLoss:
    def _with_distances(self, d_ap, d_an):
        anchor = torch.zeros(1, 1, dtype=torch.float64)
        positive = torch.tensor([[d_ap]], dtype=torch.float64)
        negative = torch.tensor([[d_an]], dtype=torch.float64)
        return anchor, positive, negative

    def test_inactive_hinge(self):
        a, p, n = self._with_distances(0.1, 0.5)
        assert triplet_loss(a, p, n, margin=0.2).item() == 0.0

    def test_active_hinge(self):
        a, p, n = self._with_distances(0.4, 0.3)
        assert triplet_loss(a, p, n, margin=0.2).item() == pytest.approx(0.3, abs=1e-12)

    def test_degenerate_triple_gives_margin(self):
        x = torch.randn(3, 2, dtype=torch.float64)
        assert triplet_loss(x, x, x, margin=0.2).item() == pytest.approx(0.2, abs=1e-12)

    def test_rigid_transform_invariance(self):
        rng = np.random.default_rng(1)
        a = torch.tensor(rng.normal(size=(4, 3)))
        p = torch.tensor(rng.normal(size=(4, 3)))
        n = torch.tensor(rng.normal(size=(4, 3)))
        base = triplet_loss(a, p, n, margin=0.2).item()
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        rot = torch.tensor(q)
        shift = torch.tensor(rng.normal(size=3))
        moved = [x @ rot.T + shift for x in (a, p, n)]
        assert triplet_loss(*moved, margin=0.2).item() == pytest.approx(base, abs=1e-9)


class TestBatchAllTriplet:
    def test_hand_placed_one_dimensional_batch(self):
        # ids [0,0,1,1] at x = 0, 1, 1.5, 3; margin 0.2; 8 valid triples of
        # which (1,0,2)=0.7, (2,3,0)=0.2, (2,3,1)=1.2 are active -> mean 0.2625
        emb = torch.tensor([[[0.0]], [[1.0]], [[1.5]], [[3.0]]], dtype=torch.float64)
        labels = [0, 0, 1, 1]
        result = batch_all_triplet(emb, labels, margin=0.2)
        assert result.valid_triples == 8
        assert result.active_triples == 3
        assert result.loss.item() == pytest.approx(0.2625, abs=1e-12)

    def test_matches_brute_force_on_random_batches(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            batch = int(rng.integers(4, 9))
            parts = int(rng.integers(1, 4))
            labels = rng.integers(0, 3, size=batch).tolist()
            emb = rng.normal(size=(batch, parts, 3))
            expected, count = brute_force_batch_all(emb, labels, margin=0.2)
            result = batch_all_triplet(torch.tensor(emb), labels, margin=0.2)
            assert result.valid_triples == count
            assert result.loss.item() == pytest.approx(expected, abs=1e-12)

    def test_well_separated_batch_has_zero_loss(self):
        emb = torch.tensor(
            [[[0.0]], [[0.01]], [[10.0]], [[10.01]]], dtype=torch.float64
        )
        result = batch_all_triplet(emb, [0, 0, 1, 1], margin=0.2)
        assert result.loss.item() == 0.0
        assert result.valid_triples == 8

    def test_single_sample_classes_are_vacuous(self):
        emb = torch.randn(2, 1, 3, dtype=torch.float64)
        result = batch_all_triplet(emb, [0, 1], margin=0.2)
        assert result.loss.item() == 0.0
        assert result.valid_triples == 0

    def test_single_class_batch_is_vacuous(self):
        emb = torch.randn(4, 1, 3, dtype=torch.float64)
        result = batch_all_triplet(emb, [5, 5, 5, 5], margin=0.2)
        assert result.loss.item() == 0.0
        assert result.valid_triples == 0


class TestArcfaceLoss:
    def test_zero_margin_unit_scale_is_softmax_ce(self):
        rng = np.random.default_rng(3)
        cfg = LossConfig(arc_scale=1.0, arc_margin=0.0, label_smoothing=0.0)
        for _ in range(20):
            feats = rng.normal(size=(5, 4))
            weights = rng.normal(size=(3, 4))
            labels = rng.integers(0, 3, size=5)
            loss = arcface_loss(torch.tensor(feats), torch.tensor(weights), labels, cfg)
            # independent: cosine logits straight into softmax cross entropy
            f = feats / np.linalg.norm(feats, axis=1, keepdims=True)
            w = weights / np.linalg.norm(weights, axis=1, keepdims=True)
            logits = f @ w.T
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            expected = -log_probs[np.arange(5), labels].mean()
            assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_aligned_feature_closed_form(self):
        cfg = LossConfig(arc_scale=32.0, arc_margin=0.3, label_smoothing=0.0)
        feats = torch.tensor([[2.0, 0.0]], dtype=torch.float64)  # scale must not matter
        weights = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        loss = arcface_loss(feats, weights, [0], cfg)
        expected = -math.log(
            math.exp(32 * math.cos(0.3)) / (math.exp(32 * math.cos(0.3)) + math.exp(0.0))
        )
        assert loss.item() == pytest.approx(expected, rel=1e-9, abs=1e-15)

    def test_vanishing_scale_approaches_log_n(self):
        rng = np.random.default_rng(4)
        cfg = LossConfig(arc_scale=1e-9, arc_margin=0.0, label_smoothing=0.1)
        feats = torch.tensor(rng.normal(size=(6, 5)))
        weights = torch.tensor(rng.normal(size=(4, 5)))
        loss = arcface_loss(feats, weights, rng.integers(0, 4, size=6), cfg)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_row_rescaling_invariance(self):
        rng = np.random.default_rng(5)
        cfg = LossConfig()
        feats = rng.normal(size=(5, 4))
        weights = rng.normal(size=(3, 4))
        labels = rng.integers(0, 3, size=5)
        base = arcface_loss(torch.tensor(feats), torch.tensor(weights), labels, cfg).item()
        f_scale = rng.uniform(0.1, 10.0, size=(5, 1))
        w_scale = rng.uniform(0.1, 10.0, size=(3, 1))
        scaled = arcface_loss(
            torch.tensor(feats * f_scale), torch.tensor(weights * w_scale), labels, cfg
        ).item()
        assert scaled == pytest.approx(base, rel=1e-11)

    def test_monotone_in_target_cosine(self):
        # a third embedding dimension lets cos(theta_y) vary while the other
        # class cosine stays pinned at 0.3
        cfg = LossConfig(arc_scale=4.0, arc_margin=0.0, label_smoothing=0.0)
        weights = torch.tensor(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64
        )
        previous = None
        for cos_y in np.linspace(-0.9, 0.9, 15):
            rest = math.sqrt(1.0 - cos_y**2 - 0.09)
            feats = torch.tensor([[cos_y, 0.3, rest]], dtype=torch.float64)
            loss = arcface_loss(feats, weights, [0], cfg).item()
            if previous is not None:
                assert loss < previous
            previous = loss

    def test_boundary_fallback_matches_linear_form(self):
        cfg = LossConfig(arc_scale=2.0, arc_margin=0.3, label_smoothing=0.0)
        feats = torch.tensor([[-1.0, 0.0]], dtype=torch.float64)  # opposite the class weight
        weights = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        loss = arcface_loss(feats, weights, [0], cfg).item()
        target_logit = 2.0 * (-1.0 - 0.3 * math.sin(0.3))
        other_logit = 0.0
        expected = -target_logit + math.log(math.exp(target_logit) + math.exp(other_logit))
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_zero_norm_rows_rejected(self):
        cfg = LossConfig()
        with pytest.raises(ValueError):
            arcface_loss(
                torch.zeros(1, 3, dtype=torch.float64),
                torch.ones(2, 3, dtype=torch.float64),
                [0],
                cfg,
            )
        with pytest.raises(ValueError):
            arcface_loss(
                torch.ones(1, 3, dtype=torch.float64),
                torch.tensor([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], dtype=torch.float64),
                [0],
                cfg,
            )


class TestCombinedLoss:
    def test_default_weights(self):
        cfg = LossConfig()  # p = 0.1, q = 1.0
        assert combined_loss(1.0, 1.0, cfg) == pytest.approx(1.1, abs=1e-15)

    def test_zero_operands(self):
        assert combined_loss(0.0, 0.0, LossConfig()) == 0.0

    def test_custom_weights(self):
        cfg = LossConfig(weight_cls=0.5, weight_tri=0.5)
        assert combined_loss(2.0, 3.0, cfg) == pytest.approx(2.5, abs=1e-15)


class TestLossConfigValidation:
    def test_defaults_are_valid(self):
        LossConfig().validate()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"arc_scale": 0.0},
            {"arc_scale": -1.0},
            {"arc_margin": -0.1},
            {"arc_margin": math.pi / 2},
            {"label_smoothing": 1.0},
            {"triplet_margin": float("inf")},
        ],
    )
    def test_bad_values_rejected(self, kwargs):
        with pytest.raises(ValueError):
            LossConfig(**kwargs).validate()
