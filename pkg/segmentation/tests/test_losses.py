from collections import deque

import numpy as np
from django.test import SimpleTestCase

from segmentation.data import UNLABELED, DenseMask, ScribbleLabel, SoftTarget
from segmentation.exceptions import ConfigError, DegenerateInputError, ShapeError
from segmentation.losses import (
    LossWeights,
    dice_score,
    global_consistency,
    largest_cc_target,
    largest_component,
    local_consistency,
    loss_mix,
    loss_unmix,
    ncs,
    partial_ce,
    total_loss,
)
from segmentation.mix_engine import MixPlan, OcclusionMask, SaliencyMap, optimize_mix_plan, sample_occlusion
from segmentation.tensor_core import RngStream, Tensor, channel_softmax


def _flood_fill_largest(region):
    """Reference: BFS labelling in scan order, first-found wins ties."""
    h, w = region.shape
    seen = np.zeros_like(region, dtype=bool)
    best = None
    for y in range(h):
        for x in range(w):
            if not region[y, x] or seen[y, x]:
                continue
            component = []
            queue = deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                component.append((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and region[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            if best is None or len(component) > len(best):
                best = component
    out = np.zeros_like(region, dtype=bool)
    for y, x in best or ():
        out[y, x] = True
    return out


def _reference_cc_mask(classes, num_classes):
    result = classes.copy()
    for k in range(1, num_classes):
        region = classes == k
        if region.any():
            result[region & ~_flood_fill_largest(region)] = 0
    return result


def _two_class_probs(p_first):
    probs = np.zeros((2, 2, 2))
    probs[0] = p_first
    probs[1] = 1 - p_first
    return Tensor(probs)


class PartialCrossEntropyTests(SimpleTestCase):
    def test_half_probability(self):
        classes = np.full((2, 2), UNLABELED, dtype=np.uint8)
        classes[0, 0] = 1
        loss = partial_ce(_two_class_probs(0.5), ScribbleLabel(classes, num_classes=2))
        self.assertAlmostEqual(loss.item(), 0.693147, delta=1e-5)

    def test_no_labels(self):
        empty = ScribbleLabel(np.full((2, 2), UNLABELED, dtype=np.uint8), num_classes=2)
        self.assertEqual(partial_ce(_two_class_probs(0.3), empty).item(), 0.0)
        self.assertEqual(partial_ce(_two_class_probs(0.3), empty, reduction='mean').item(), 0.0)

    def test_certain_prediction(self):
        classes = np.full((2, 2), UNLABELED, dtype=np.uint8)
        classes[1, 1] = 0
        loss = partial_ce(_two_class_probs(1.0), ScribbleLabel(classes, num_classes=2))
        self.assertAlmostEqual(loss.item(), 0.0, places=6)

    def test_mean_reduction(self):
        classes = np.zeros((2, 2), dtype=np.uint8)
        labels = ScribbleLabel(classes, num_classes=2)
        summed = partial_ce(_two_class_probs(0.5), labels).item()
        mean = partial_ce(_two_class_probs(0.5), labels, reduction='mean').item()
        self.assertAlmostEqual(mean, summed / 4, places=6)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            probs = channel_softmax(Tensor(rng.normal(size=(4, 8, 8))))
            classes = rng.integers(0, 4, size=(8, 8)).astype(np.uint8)
            classes[rng.random((8, 8)) < 0.5] = UNLABELED
            self.assertGreaterEqual(partial_ce(probs, ScribbleLabel(classes)).item(), 0.0)

    def test_soft_target(self):
        weights = np.zeros((2, 2, 2))
        weights[1, 0, 0] = 0.5
        target = SoftTarget(weights, np.eye(2, dtype=bool))
        loss = partial_ce(_two_class_probs(0.5), target)
        self.assertAlmostEqual(loss.item(), 0.5 * 0.693147, delta=1e-5)

    def test_class_count_mismatch(self):
        with self.assertRaises(ShapeError):
            partial_ce(_two_class_probs(0.5), ScribbleLabel(np.zeros((2, 2), dtype=np.uint8)))


class SupervisionTermTests(SimpleTestCase):
    def setUp(self):
        classes = np.full((2, 2), UNLABELED, dtype=np.uint8)
        classes[0, 0] = 1
        self.half = (_two_class_probs(0.5), ScribbleLabel(classes, num_classes=2))
        certain = np.full((2, 2), UNLABELED, dtype=np.uint8)
        certain[0, 0] = 0
        self.certain = (_two_class_probs(1.0), ScribbleLabel(certain, num_classes=2))

    def test_unmix_hand_case(self):
        self.assertAlmostEqual(loss_unmix(*self.half, *self.certain).item(), 0.34657, delta=1e-5)

    def test_unmix_symmetric(self):
        self.assertEqual(loss_unmix(*self.half, *self.certain).item(), loss_unmix(*self.certain, *self.half).item())

    def test_mix_identical_directions(self):
        single = partial_ce(*self.half).item()
        self.assertAlmostEqual(loss_mix(*self.half, *self.half).item(), single, places=6)

    def test_mix_average(self):
        a = partial_ce(*self.half).item()
        b = partial_ce(*self.certain).item()
        self.assertAlmostEqual(loss_mix(*self.half, *self.certain).item(), (a + b) / 2, places=6)


class NegativeCosineTests(SimpleTestCase):
    def test_closed_form(self):
        self.assertAlmostEqual(ncs(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item(), -0.707107, delta=1e-5)

    def test_self_similarity(self):
        p = Tensor(np.random.default_rng(0).uniform(size=(3, 4, 4)))
        self.assertAlmostEqual(ncs(p, p).item(), -1.0, places=5)

    def test_orthogonal(self):
        self.assertAlmostEqual(ncs(Tensor([1.0, 0.0]), Tensor([0.0, 2.0])).item(), 0.0, places=7)

    def test_zero_norm(self):
        with self.assertRaises(DegenerateInputError):
            ncs(Tensor([0.0, 0.0]), Tensor([1.0, 1.0]))

    def test_probability_range(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            p = channel_softmax(Tensor(rng.normal(size=(4, 4, 4))))
            q = channel_softmax(Tensor(rng.normal(size=(4, 4, 4))))
            value = ncs(p, q).item()
            self.assertTrue(-1.0 - 1e-6 <= value <= 0.0)

    def test_per_class_skips_empty_channels(self):
        p = np.zeros((2, 2, 2))
        p[0] = 1
        self.assertAlmostEqual(ncs(Tensor(p), Tensor(p), per_class=True).item(), -1.0, places=6)


class GlobalConsistencyTests(SimpleTestCase):
    def _pixelwise(self, x):
        """A per-pixel map with f(0) = 0, standing in for the segmentor."""
        v = x[0]
        return Tensor(np.stack([v * v, np.abs(v), np.log1p(v * v), np.abs(v) ** 3]))

    def test_pixelwise_segmentor_is_consistent(self):
        rng = np.random.default_rng(0)
        for seed in range(50):
            x1 = rng.normal(size=(1, 16, 16))
            x2 = rng.normal(size=(1, 16, 16))
            s1, s2 = SaliencyMap(rng.uniform(size=(16, 16))), SaliencyMap(rng.uniform(size=(16, 16)))
            plans = (optimize_mix_plan(s1, s2), optimize_mix_plan(s2, s1))
            occlusions = (
                sample_occlusion(RngStream(seed).derive('a'), 16, 16, 0.3),
                sample_occlusion(RngStream(seed).derive('b'), 16, 16, 0.3),
            )
            q12, q21 = (
                self._pixelwise(plan.mix_array(a, b) * occ.keep[None])
                for plan, occ, (a, b) in zip(plans, occlusions, ((x1, x2), (x2, x1)))
            )
            pred1, pred2 = self._pixelwise(x1), self._pixelwise(x2)
            value = global_consistency(plans, occlusions, pred1, pred2, q12, q21).item()
            self.assertAlmostEqual(value, -1.0, delta=1e-6)

    def test_identity_plan_same_image(self):
        x = np.random.default_rng(2).normal(size=(1, 8, 8))
        pred = self._pixelwise(x)
        plan = MixPlan.identity((8, 8), 4)
        empty = (OcclusionMask.empty(8, 8), OcclusionMask.empty(8, 8))
        value = global_consistency((plan, plan), empty, pred, pred, pred, pred).item()
        self.assertAlmostEqual(value, -1.0, places=6)

    def test_full_occlusion_is_degenerate(self):
        pred = self._pixelwise(np.ones((1, 4, 4)))
        plan = MixPlan.identity((4, 4), 4)
        full = OcclusionMask(np.ones((4, 4), dtype=np.uint8))
        with self.assertRaises(DegenerateInputError):
            global_consistency((plan, plan), (full, full), pred, pred, pred, pred)

    def test_stopgrad_blocks_mixed_branch(self):
        x = np.random.default_rng(3).normal(size=(4, 8, 8))
        p1 = Tensor(x, requires_grad=True)
        p2 = Tensor(x[::-1].copy(), requires_grad=True)
        q = Tensor(np.abs(x) + 0.1, requires_grad=True)
        plan = MixPlan.identity((8, 8), 4, z=[0, 1, 1, 0])
        global_consistency((plan, plan), None, p1, p2, q, q, stopgrad=True).backward()
        self.assertIsNone(p1.grad)
        self.assertIsNone(p2.grad)
        self.assertIsNotNone(q.grad)


class LargestComponentTests(SimpleTestCase):
    def test_smaller_component_removed(self):
        classes = np.zeros((6, 6), dtype=np.uint8)
        classes[0, 0:5] = 1
        classes[4, 0:3] = 1
        probs = DenseMask(classes, 2).one_hot()
        mask, one_hot = largest_cc_target(Tensor(probs))
        self.assertEqual(int((mask.classes == 1).sum()), 5)
        np.testing.assert_array_equal(mask.classes[4], 0)
        np.testing.assert_array_equal(one_hot, mask.one_hot())

    def test_equal_sizes_keep_scan_order_first(self):
        region = np.zeros((5, 5), dtype=bool)
        region[3, 0:3] = True
        region[0, 2:5] = True
        kept = largest_component(region)
        np.testing.assert_array_equal(kept, _flood_fill_largest(region))
        self.assertTrue(kept[0, 2:5].all())
        self.assertFalse(kept[3].any())

    def test_absent_class_unchanged(self):
        probs = DenseMask(np.zeros((4, 4), dtype=np.uint8), 4).one_hot()
        mask, _ = largest_cc_target(Tensor(probs))
        np.testing.assert_array_equal(mask.classes, 0)

    def test_matches_flood_fill_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            probs = Tensor(rng.uniform(size=(4, 16, 16)))
            classes = np.argmax(probs.data, axis=0).astype(np.uint8)
            mask, _ = largest_cc_target(probs)
            np.testing.assert_array_equal(mask.classes, _reference_cc_mask(classes, 4))


class LocalConsistencyTests(SimpleTestCase):
    def test_uniform_prediction(self):
        uniform = Tensor(np.full((4, 8, 8), 0.25))
        self.assertAlmostEqual(local_consistency(uniform, uniform).item(), -0.5, places=6)

    def test_near_one_hot_single_component(self):
        classes = np.zeros((8, 8), dtype=np.uint8)
        classes[2:6, 2:6] = 2
        probs = 0.97 * DenseMask(classes, 4).one_hot() + 0.01
        value = local_consistency(Tensor(probs), Tensor(probs)).item()
        self.assertLess(value, -0.99)

    def test_target_is_constant(self):
        p = Tensor(np.random.default_rng(4).uniform(0.1, 1, size=(4, 8, 8)), requires_grad=True)
        local_consistency(p, p).backward()
        self.assertEqual(p.grad.shape, (4, 8, 8))


class TotalLossTests(SimpleTestCase):
    def test_default_weights(self):
        breakdown = total_loss(0.5, 0.3, -1.0, -0.9)
        self.assertAlmostEqual(breakdown.total, -0.15, delta=1e-6)
        self.assertAlmostEqual(breakdown.recompose(LossWeights()), breakdown.total, delta=1e-12)

    def test_zero_weights(self):
        breakdown = total_loss(0.5, 0.3, -1.0, -0.9, LossWeights(0, 0, 0, 0))
        self.assertEqual(breakdown.total, 0.0)
        self.assertIsNone(breakdown.objective)

    def test_supervision_only(self):
        breakdown = total_loss(0.5, 0.3, -1.0, -0.9, LossWeights(1, 1, 0, 0))
        self.assertAlmostEqual(breakdown.total, 0.8, places=12)

    def test_objective_skips_zero_weighted_tensors(self):
        unmix = Tensor(np.array(2.0), requires_grad=True)
        con_l = Tensor(np.array(5.0), requires_grad=True)
        breakdown = total_loss(unmix, con_l=con_l, weights=LossWeights(1, 1, 0.05, 0))
        self.assertEqual(breakdown.con_l, 5.0)
        breakdown.objective.backward()
        self.assertEqual(float(unmix.grad), 1.0)
        self.assertIsNone(con_l.grad)

    def test_negative_weight_rejected(self):
        with self.assertRaises(ConfigError) as cm:
            LossWeights(lambda3=-0.1)
        self.assertEqual(list(cm.exception.errors), ['lambda3'])


class DiceTests(SimpleTestCase):
    def test_identical(self):
        classes = np.random.default_rng(0).integers(0, 4, size=(8, 8)).astype(np.uint8)
        scores = dice_score(DenseMask(classes), DenseMask(classes))
        self.assertEqual(scores.per_class, (1.0, 1.0, 1.0))
        self.assertEqual(scores.mean, 1.0)

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0] = 1
        a[1] = 2
        a[2] = 3
        b[1] = 1
        b[2] = 2
        b[3] = 3
        self.assertEqual(dice_score(DenseMask(a), DenseMask(b)).mean, 0.0)

    def test_half_overlap(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0:4] = 1
        b[0, 2:4] = 1
        b[1, 0:2] = 1
        self.assertEqual(dice_score(DenseMask(a), DenseMask(b), 2).per_class, (0.5,))

    def test_both_empty_scores_one(self):
        empty = DenseMask(np.zeros((4, 4), dtype=np.uint8))
        self.assertEqual(dice_score(empty, empty).mean, 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            dice_score(DenseMask(np.zeros((4, 4), dtype=np.uint8)), DenseMask(np.zeros((4, 5), dtype=np.uint8)))
