import numpy as np
import pytest

from palletrack import cnn
from palletrack.datasets import SyntheticScene, synthesize
from palletrack.detector import (
    Detection,
    DetectorConfig,
    acquire,
    classify_roi,
    downscale_crop,
    extract_patches,
    extract_patches_planned,
    mask_roi,
    propose,
    proposal_network,
    roi_classifier_network,
    score_patches,
)
from palletrack.geometry import BoundingBox
from palletrack.scan import BitmapImage, polar_to_cartesian, rasterize


@pytest.fixture(scope="module")
def nets():
    return (proposal_network().init_parameters(0),
            roi_classifier_network().init_parameters(1))


@pytest.fixture(scope="module")
def pallet_image():
    scene = SyntheticScene(pallets=((0.8, 2.6, 0.0),), noise_sigma=0.0)
    scan, truths = synthesize(scene)[0]
    return rasterize(polar_to_cartesian(scan)), truths[0]


def small_cfg(**kw):
    defaults = dict(stride=16)
    defaults.update(kw)
    return DetectorConfig(**defaults)


class TestDownscale:
    def test_preserves_any_occupied(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            h, w = rng.integers(5, 90, 2)
            occ = rng.random((h, w)) < 0.02
            down = downscale_crop(occ)
            assert down.shape == (32, 32)
            assert down.any() == occ.any()

    def test_partition_covers_every_pixel(self):
        # every occupied pixel must land in at least one cell
        occ = np.zeros((57, 57), dtype=bool)
        occ[13, 41] = True
        down = downscale_crop(occ)
        assert down.sum() >= 1

    def test_upscale_replicates(self):
        occ = np.ones((4, 4), dtype=bool)
        down = downscale_crop(occ)
        assert down.all()


class TestExtraction:
    def test_planned_matches_reference(self, pallet_image):
        image, _ = pallet_image
        cfg = DetectorConfig()
        plan = cfg.plan()
        ref_patches, ref_kept = extract_patches(image, plan.anchors)
        fast_patches, fast_kept = extract_patches_planned(image, plan)
        assert list(fast_kept) == ref_kept
        assert np.array_equal(fast_patches, ref_patches)

    def test_empty_image_skips_everything(self, nets):
        image = BitmapImage()
        cfg = small_cfg()
        patches, kept = extract_patches_planned(image, cfg.plan())
        assert kept.size == 0
        assert propose(image, nets[0], cfg) == []

    def test_identical_crops_score_identically(self, nets):
        rng = np.random.default_rng(3)
        patch = rng.random((32, 32)) < 0.05
        stack = np.stack([patch, patch, patch])
        scores = score_patches(nets[0], stack)
        assert scores[0] == scores[1] == scores[2]


class TestPropose:
    def test_returns_anchor_boxes_only(self, nets, pallet_image):
        image, _ = pallet_image
        cfg = small_cfg()
        anchor_boxes = {(a.box.x_min, a.box.y_min, a.box.x_len, a.box.y_len)
                        for a in cfg.anchors()}
        for box, score in propose(image, nets[0], cfg):
            assert (box.x_min, box.y_min, box.x_len, box.y_len) in anchor_boxes
            assert 0.0 <= score <= 1.0

    def test_nms_bounds_pairwise_overlap(self, nets, pallet_image):
        from palletrack.geometry import iou

        image, _ = pallet_image
        cfg = small_cfg()
        props = propose(image, nets[0], cfg)
        for i, (a, _) in enumerate(props):
            for b, _ in props[i + 1:]:
                assert iou(a, b) <= cfg.nms_threshold

    def test_deterministic(self, nets, pallet_image):
        image, _ = pallet_image
        cfg = small_cfg()
        assert propose(image, nets[0], cfg) == propose(image, nets[0], cfg)

    def test_uninitialized_network_rejected(self, pallet_image):
        image, _ = pallet_image
        with pytest.raises(RuntimeError, match="uninitialized"):
            propose(image, proposal_network(), small_cfg())


class TestClassifyRoi:
    def test_deterministic(self, nets, pallet_image):
        image, truth = pallet_image
        a = classify_roi(image, truth, nets[1])
        b = classify_roi(image, truth, nets[1])
        assert a == b

    def test_degenerate_roi_rejected(self, nets, pallet_image):
        image, _ = pallet_image
        outside = BoundingBox(250.0, 10.0, 5.0, 10.0)
        with pytest.raises(ValueError, match="degenerate"):
            classify_roi(image, outside, nets[1])

    def test_empty_content_is_constant(self, nets):
        image = BitmapImage()
        a = classify_roi(image, BoundingBox(10, 10, 40, 30), nets[1])
        b = classify_roi(image, BoundingBox(150, 90, 60, 20), nets[1])
        assert a == pytest.approx(b, abs=1e-9)

    def test_mask_zeroes_outside(self, pallet_image):
        image, truth = pallet_image
        masked = mask_roi(image, truth)
        c0, c1, r0, r1 = truth.pixel_bounds(image.width)
        inside = masked[r0:r1, c0:c1].sum()
        assert inside == masked.sum()
        assert inside > 0

    def test_matches_plain_forward(self, nets, pallet_image):
        image, truth = pallet_image
        fast = classify_roi(image, truth, nets[1])
        dense = float(cnn.forward(nets[1], mask_roi(image, truth)[..., None])[1])
        assert fast == pytest.approx(dense, abs=1e-5)


class TestAcquire:
    def test_unreachable_candidate_threshold_empties_set(self, nets,
                                                         pallet_image):
        image, _ = pallet_image
        cfg = small_cfg(candidate_threshold=1.0)
        assert acquire(image, *nets, cfg) == []

    def test_zero_thresholds_keep_all_survivors(self, nets, pallet_image):
        image, _ = pallet_image
        cfg = small_cfg(objectness_threshold=0.0, candidate_threshold=0.0)
        props = propose(image, nets[0], cfg)
        dets = acquire(image, *nets, cfg)
        assert len(dets) == len(props)

    def test_monotone_in_thresholds(self, nets, pallet_image):
        image, _ = pallet_image
        keys = lambda dets: {(d.roi.x_min, d.roi.y_min) for d in dets}
        loose = keys(acquire(image, *nets, small_cfg(
            objectness_threshold=0.1, candidate_threshold=0.1)))
        tight = keys(acquire(image, *nets, small_cfg(
            objectness_threshold=0.4, candidate_threshold=0.4)))
        assert tight <= loose

    def test_pure_function(self, nets, pallet_image):
        image, _ = pallet_image
        cfg = small_cfg(objectness_threshold=0.2, candidate_threshold=0.0)
        assert acquire(image, *nets, cfg, 3) == acquire(image, *nets, cfg, 3)

    def test_detection_fields(self, nets, pallet_image):
        image, _ = pallet_image
        cfg = small_cfg(objectness_threshold=0.0, candidate_threshold=0.0)
        for det in acquire(image, *nets, cfg, frame=7):
            assert det.frame == 7
            assert det.objectness > 0.0
            assert det.confidence > 0.0
