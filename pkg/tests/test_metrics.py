"""Fréchet feature distance and single-class mean average precision."""

import numpy as np
import pytest

from aeroadapt.annotations import REAL, SYNTHETIC, AnnotatedImage, BBox, DatasetManifest
from aeroadapt.metrics import (
    MAP_THRESHOLDS,
    Detection,
    GaussianStats,
    box_iou,
    frechet_distance,
    gaussian_stats,
    ground_truth_from_manifest,
    image_fid,
    map_eval,
    patch_fid,
)
from aeroadapt.toydata import PooledFeatureExtractor


class TestGaussianStats:
    def test_hand_case(self):
        stats = gaussian_stats(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(stats.mu, [1.0])
        np.testing.assert_allclose(stats.sigma, [[2.0]])  # unbiased: /(n-1)

    def test_symmetric_output(self, rng):
        stats = gaussian_stats(rng.standard_normal((20, 5)))
        np.testing.assert_array_equal(stats.sigma, stats.sigma.T)
        stats.validate()

    def test_single_sample_rejected(self):
        with pytest.raises(ValueError):
            gaussian_stats(np.zeros((1, 3)))

    def test_validate_rejects_asymmetry(self):
        bad = GaussianStats(mu=np.zeros(2), sigma=np.array([[1.0, 0.5], [0.2, 1.0]]))
        with pytest.raises(ValueError):
            bad.validate()


class TestFrechetDistance:
    def test_identical_stats_zero(self, rng):
        stats = gaussian_stats(rng.standard_normal((30, 4)))
        assert frechet_distance(stats, stats) == 0.0

    def test_one_dimensional_closed_form(self):
        # FD = (mean diff)^2 + (std diff)^2 in one dimension.
        a = GaussianStats(mu=np.array([1.0]), sigma=np.array([[4.0]]))
        b = GaussianStats(mu=np.array([3.0]), sigma=np.array([[9.0]]))
        expected = (1.0 - 3.0) ** 2 + (2.0 - 3.0) ** 2
        assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-8)

    def test_diagonal_closed_form(self):
        # Commuting (diagonal) covariances: sum of per-axis 1-D distances.
        a = GaussianStats(mu=np.array([0.0, 1.0]), sigma=np.diag([1.0, 4.0]))
        b = GaussianStats(mu=np.array([2.0, -1.0]), sigma=np.diag([9.0, 1.0]))
        expected = (2.0 ** 2 + (1.0 - 3.0) ** 2) + (2.0 ** 2 + (2.0 - 1.0) ** 2)
        assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-8)

    def test_symmetric_in_arguments(self, rng):
        sa = gaussian_stats(rng.standard_normal((25, 6)))
        sb = gaussian_stats(rng.standard_normal((25, 6)) * 2 + 1)
        assert frechet_distance(sa, sb) == frechet_distance(sb, sa)

    def test_nonnegative_under_noise(self, rng):
        # Nearly identical sets can go fractionally negative before the
        # final floor; the result must never be negative.
        base = rng.standard_normal((40, 8))
        sa = gaussian_stats(base)
        sb = gaussian_stats(base + rng.standard_normal((40, 8)) * 1e-9)
        assert frechet_distance(sa, sb) >= 0.0

    def test_dim_mismatch_rejected(self):
        a = GaussianStats(mu=np.zeros(2), sigma=np.eye(2))
        b = GaussianStats(mu=np.zeros(3), sigma=np.eye(3))
        with pytest.raises(ValueError):
            frechet_distance(a, b)


def frame_manifest(name, images, domain_tag=SYNTHETIC, boxes=None):
    recs = [
        AnnotatedImage(f"{name}_{i:03d}", px, list(boxes or []), None, domain_tag)
        for i, px in enumerate(images)
    ]
    return DatasetManifest(name=name, records=recs, domain_tag=domain_tag)


class TestImageFid:
    def test_same_set_is_zero(self, rng):
        images = [rng.random((16, 16, 3)) for _ in range(6)]
        man = frame_manifest("a", images)
        result = image_fid(man, man, PooledFeatureExtractor())
        assert result.value == 0.0
        assert result.count_a == result.count_b == 6

    def test_record_order_irrelevant(self, rng):
        # Features are gathered in sorted image-id order, so shuffling the
        # manifest list cannot change the distance.
        images = [rng.random((16, 16, 3)) for _ in range(6)]
        man1 = frame_manifest("a", images)
        man2 = DatasetManifest(name="a", records=man1.records[::-1], domain_tag=SYNTHETIC)
        other = frame_manifest("b", [rng.random((16, 16, 3)) for _ in range(6)])
        ext = PooledFeatureExtractor()
        assert image_fid(man1, other, ext).value == image_fid(man2, other, ext).value

    def test_gaussian_shift_analytic(self, rng):
        # Pixels iid N(mu, 0.01^2) with mu 0.4 vs 0.6: every pooled feature
        # shifts by 0.2, so FD is approximately 192 * 0.04 = 7.68; sampling
        # error at n = 100 sits well inside 2 percent.
        n = 100
        set_a = [np.clip(rng.normal(0.4, 0.01, (32, 32, 3)), 0, 1) for _ in range(n)]
        set_b = [np.clip(rng.normal(0.6, 0.01, (32, 32, 3)), 0, 1) for _ in range(n)]
        result = image_fid(frame_manifest("a", set_a), frame_manifest("b", set_b),
                           PooledFeatureExtractor())
        assert result.value == pytest.approx(7.68, rel=0.02)


class TestPatchFid:
    def centered_box_manifest(self, name, rng, backgrounds, patch_rng_seed):
        # Identical instance patches pasted on different backgrounds.
        patch_rng = np.random.default_rng(patch_rng_seed)
        patches = [patch_rng.random((20, 20, 3)) for _ in range(len(backgrounds))]
        box = BBox(class_id=0, cx=0.5, cy=0.5, w=0.25, h=0.25)
        recs = []
        for i, bg in enumerate(backgrounds):
            px = bg.copy()
            px[22:42, 22:42] = patches[i]
            recs.append(AnnotatedImage(f"{name}_{i:03d}", px, [box], None, SYNTHETIC))
        return DatasetManifest(name=name, records=recs, domain_tag=SYNTHETIC)

    def test_background_invariance(self, rng):
        # Same crops, different backgrounds: crop side for a 16 px box with
        # pad 0.2 is 19 px, inside the shared 20 px patch region.
        bgs_a = [np.zeros((64, 64, 3)) for _ in range(5)]
        bgs_b = [rng.random((64, 64, 3)) for _ in range(5)]
        man_a = self.centered_box_manifest("a", rng, bgs_a, patch_rng_seed=7)
        man_b = self.centered_box_manifest("b", rng, bgs_b, patch_rng_seed=7)
        result = patch_fid(man_a, man_b, PooledFeatureExtractor())
        assert result.value <= 1e-10
        assert result.count_a == 5

    def test_counts_are_instances_not_images(self, rng):
        box1 = BBox(class_id=0, cx=0.3, cy=0.3, w=0.2, h=0.2)
        box2 = BBox(class_id=0, cx=0.7, cy=0.7, w=0.2, h=0.2)
        recs = [
            AnnotatedImage(f"m_{i}", rng.random((64, 64, 3)), [box1, box2], None, SYNTHETIC)
            for i in range(3)
        ]
        man = DatasetManifest(name="m", records=recs, domain_tag=SYNTHETIC)
        result = patch_fid(man, man, PooledFeatureExtractor())
        assert result.count_a == 6
        assert result.value == 0.0

    def test_no_instances_rejected(self, rng):
        man = frame_manifest("a", [rng.random((64, 64, 3))])
        with pytest.raises(ValueError):
            patch_fid(man, man, PooledFeatureExtractor())


class TestBoxIou:
    def test_identical(self):
        box = BBox(class_id=0, cx=0.5, cy=0.5, w=0.2, h=0.4)
        assert box_iou(box, box) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        a = BBox(class_id=0, cx=0.2, cy=0.2, w=0.2, h=0.2)
        b = BBox(class_id=0, cx=0.8, cy=0.8, w=0.2, h=0.2)
        assert box_iou(a, b) == 0.0

    def test_touching_edges_zero(self):
        a = BBox(class_id=0, cx=0.25, cy=0.5, w=0.5, h=0.5)
        b = BBox(class_id=0, cx=0.75, cy=0.5, w=0.5, h=0.5)
        assert box_iou(a, b) == 0.0

    def test_half_shift(self):
        # Shift by half a width: I = 1/2 area, U = 3/2 area, IoU = 1/3.
        a = BBox(class_id=0, cx=0.4, cy=0.5, w=0.4, h=0.4)
        b = BBox(class_id=0, cx=0.6, cy=0.5, w=0.4, h=0.4)
        assert box_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_symmetric(self, rng):
        for _ in range(20):
            vals = rng.uniform(0.2, 0.8, size=4)
            a = BBox(class_id=0, cx=vals[0], cy=vals[1], w=0.3, h=0.3)
            b = BBox(class_id=0, cx=vals[2], cy=vals[3], w=0.25, h=0.35)
            assert box_iou(a, b) == box_iou(b, a)


class TestMapEval:
    def test_perfect_predictions(self):
        gt = {"img_0": [BBox(0, 0.3, 0.3, 0.2, 0.2), BBox(0, 0.7, 0.7, 0.2, 0.2)]}
        dets = [
            Detection("img_0", gt["img_0"][0], 0.9),
            Detection("img_0", gt["img_0"][1], 0.8),
        ]
        result = map_eval(dets, gt)
        assert result.map50 == 1.0
        assert result.map50_95 == 1.0

    def test_partial_overlap_hand_case(self):
        # IoU = 2/3: matched at thresholds 0.50-0.65 (4 of 10), so
        # mAP@50 = 1.0 and mAP@50-95 = 0.4 exactly.
        gt = {"img_0": [BBox(0, 0.5, 0.5, 0.5, 0.5)]}
        dets = [Detection("img_0", BBox(0, 0.6, 0.5, 0.5, 0.5), 0.9)]
        result = map_eval(dets, gt)
        assert result.map50 == 1.0
        assert result.map50_95 == 0.4
        assert result.per_threshold == [1.0] * 4 + [0.0] * 6

    def test_missed_gt_caps_recall(self):
        gt = {"img_0": [BBox(0, 0.3, 0.3, 0.2, 0.2), BBox(0, 0.7, 0.7, 0.2, 0.2)]}
        dets = [Detection("img_0", gt["img_0"][0], 0.9)]
        result = map_eval(dets, gt)
        # One of two boxes found at full precision: AP = 0.5 everywhere.
        assert result.map50 == pytest.approx(0.5, abs=1e-12)

    def test_duplicate_detections_penalized(self):
        gt = {"img_0": [BBox(0, 0.5, 0.5, 0.3, 0.3)]}
        dets = [
            Detection("img_0", gt["img_0"][0], 0.9),
            Detection("img_0", gt["img_0"][0], 0.8),  # second hit is a FP
        ]
        result = map_eval(dets, gt)
        assert result.map50 == 1.0  # envelope: the TP comes first

    def test_score_rescale_invariance(self, rng):
        gt = {
            "img_0": [BBox(0, 0.3, 0.3, 0.2, 0.2), BBox(0, 0.7, 0.7, 0.2, 0.2)],
            "img_1": [BBox(0, 0.5, 0.5, 0.3, 0.3)],
        }
        dets = [
            Detection("img_0", BBox(0, 0.31, 0.3, 0.2, 0.2), 0.9),
            Detection("img_0", BBox(0, 0.1, 0.1, 0.1, 0.1), 0.6),
            Detection("img_1", BBox(0, 0.52, 0.5, 0.3, 0.3), 0.8),
        ]
        halved = [Detection(d.image_id, d.box, d.score * 0.5) for d in dets]
        full = map_eval(dets, gt)
        scaled = map_eval(halved, gt)
        assert full.per_threshold == scaled.per_threshold

    def test_empty_gt_images_excluded(self, caplog):
        gt = {
            "img_0": [BBox(0, 0.5, 0.5, 0.3, 0.3)],
            "img_1": [],
        }
        dets = [
            Detection("img_0", gt["img_0"][0], 0.9),
            Detection("img_1", BBox(0, 0.5, 0.5, 0.3, 0.3), 0.99),  # discarded
        ]
        with caplog.at_level("INFO"):
            result = map_eval(dets, gt)
        assert result.map50 == 1.0
        assert result.evaluated_images == 1
        assert result.excluded_empty_gt == 1

    def test_all_empty_gt_rejected(self):
        with pytest.raises(ValueError):
            map_eval([], {"img_0": [], "img_1": []})

    def test_unknown_image_rejected(self):
        gt = {"img_0": [BBox(0, 0.5, 0.5, 0.3, 0.3)]}
        dets = [Detection("img_9", BBox(0, 0.5, 0.5, 0.3, 0.3), 0.9)]
        with pytest.raises(ValueError):
            map_eval(dets, gt)

    def test_score_range_enforced(self):
        gt = {"img_0": [BBox(0, 0.5, 0.5, 0.3, 0.3)]}
        with pytest.raises(ValueError):
            map_eval([Detection("img_0", gt["img_0"][0], 1.5)], gt)

    def test_no_detections_zero_ap(self):
        gt = {"img_0": [BBox(0, 0.5, 0.5, 0.3, 0.3)]}
        result = map_eval([], gt)
        assert result.map50 == 0.0
        assert result.map50_95 == 0.0

    def test_threshold_grid(self):
        assert len(MAP_THRESHOLDS) == 10
        assert MAP_THRESHOLDS[0] == 0.5
        assert MAP_THRESHOLDS[-1] == pytest.approx(0.95, abs=1e-12)

    def test_ground_truth_from_manifest(self, rng):
        boxes = [BBox(0, 0.5, 0.5, 0.3, 0.3)]
        man = DatasetManifest(
            name="m",
            records=[AnnotatedImage("img_0", rng.random((16, 16, 3)), boxes, None, REAL)],
            domain_tag=REAL,
        )
        gt = ground_truth_from_manifest(man)
        assert gt == {"img_0": boxes}
