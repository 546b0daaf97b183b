import numpy as np
import pytest

from smallaug import augment, coco, masks
from smallaug.augment import (
    AllObjects,
    AugmentationConfig,
    GaussianEdge,
    HardBlend,
    MultipleObjects,
    OverlapPolicy,
    SingleObject,
)
from smallaug.coco import AnnotationRecord, ImageRecord, PolygonSet, SizeBasis

CFG = AugmentationConfig()


def _square_poly(x, y, s):
    return PolygonSet(((x, y, x + s, y, x + s, y + s, x, y + s),))


def _scene(n_small=3, size=200):
    img = ImageRecord(1, size, size, "a.png")
    anns = [
        AnnotationRecord(i + 1, 1, 1, (10.0 + 30 * i, 10.0, 12.0, 12.0), 144.0, _square_poly(10 + 30 * i, 10, 12))
        for i in range(n_small)
    ]
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    return pixels, img, anns


class TestStrategies:
    def test_copy_limits(self):
        SingleObject(5)
        with pytest.raises(ValueError):
            SingleObject(6)
        with pytest.raises(ValueError):
            AllObjects(4)
        with pytest.raises(ValueError):
            MultipleObjects(0.0)

    def test_blend_kernel(self):
        with pytest.raises(ValueError):
            GaussianEdge(4)
        assert GaussianEdge(5).pad == 2 and HardBlend().pad == 0


class TestCandidates:
    def test_filters(self):
        small = AnnotationRecord(1, 1, 1, (0, 0, 10, 10), 100, _square_poly(0, 0, 10))
        medium = AnnotationRecord(2, 1, 1, (0, 0, 40, 40), 1600, _square_poly(0, 0, 40))
        crowd = AnnotationRecord(3, 1, 1, (0, 0, 10, 10), 100, _square_poly(0, 0, 10), True)
        multi = AnnotationRecord(
            4, 1, 1, (0, 0, 10, 10), 50,
            PolygonSet(((0, 0, 4, 0, 4, 4), (6, 6, 10, 6, 10, 10))),
        )
        m = masks.empty_mask(20, 20)
        m[:5, :5] = 1
        rle = AnnotationRecord(5, 1, 1, (0, 0, 5, 5), 25, coco.CompressedRLE(masks.rle_encode(m)))
        got = augment.select_candidates([small, medium, crowd, multi, rle])
        assert [a.id for a in got] == [1]

    def test_basis(self):
        a = AnnotationRecord(1, 1, 1, (0, 0, 40, 40), 500, _square_poly(0, 0, 40))
        assert augment.is_candidate(a, SizeBasis.MASK)
        assert not augment.is_candidate(a, SizeBasis.BBOX)


class TestSampleTransform:
    def test_distribution(self):
        rng = augment.make_rng(123)
        draws = np.array([augment.sample_transform(rng, CFG) for _ in range(10000)])
        assert abs(draws[:, 0].mean() - 1.0) < 0.01
        assert abs(draws[:, 1].mean()) < 0.5
        assert draws[:, 0].min() >= 0.8 and draws[:, 0].max() <= 1.2
        assert draws[:, 1].min() >= -15 and draws[:, 1].max() <= 15

    def test_seeded(self):
        a = augment.sample_transform(augment.make_rng(9), CFG)
        b = augment.sample_transform(augment.make_rng(9), CFG)
        assert a == b

    def test_derive_seed_distinct(self):
        seeds = {augment.derive_seed(1, i, k) for i in range(50) for k in range(4)}
        assert len(seeds) == 200


class TestPlacement:
    def test_no_room(self):
        with pytest.raises(augment.PlacementNotFound):
            augment.find_placement(np.ones((10, 10), np.uint8), masks.empty_mask(12, 12), (12, 12), CFG,
                                   augment.make_rng(0))

    def test_range_on_empty_image(self):
        rng = augment.make_rng(1)
        xs, ys = [], []
        for _ in range(3000):
            occ = masks.empty_mask(100, 100)
            x, y = augment.find_placement(np.ones((10, 10), np.uint8), occ, (100, 100), CFG, rng)
            xs.append(x)
            ys.append(y)
            assert occ[y:y + 10, x:x + 10].all() and occ.sum() == 100
        # the feasible set is exactly [5, 85] on both axes
        assert min(xs) == min(ys) == 5 and max(xs) == max(ys) == 85

    def test_fully_occupied(self):
        with pytest.raises(augment.PlacementNotFound):
            augment.find_placement(np.ones((3, 3), np.uint8), np.ones((50, 50), np.uint8), (50, 50), CFG,
                                   augment.make_rng(0))

    def test_allow_policy_ignores_occupancy(self):
        cfg = AugmentationConfig(overlap_policy=OverlapPolicy.ALLOW)
        augment.find_placement(np.ones((3, 3), np.uint8), np.ones((50, 50), np.uint8), (50, 50), cfg,
                               augment.make_rng(0))

    def test_mask_granularity(self):
        # the only free cells are a 10x10 window minus its first column
        occ = np.ones((30, 30), np.uint8)
        occ[5:15, 6:15] = 0
        obj = np.zeros((10, 10), np.uint8)
        obj[:, 1:] = 1
        cfg = AugmentationConfig(max_placement_attempts=5000)
        assert augment.find_placement(obj, occ.copy(), (30, 30), cfg, augment.make_rng(0)) == (5, 5)
        cfg = AugmentationConfig(max_placement_attempts=5000, overlap_granularity="bbox")
        with pytest.raises(augment.PlacementNotFound):
            augment.find_placement(obj, occ.copy(), (30, 30), cfg, augment.make_rng(0))


class TestComposite:
    def test_hard_copies_only_mask(self):
        canvas = np.zeros((20, 20, 3), np.uint8)
        mask = np.zeros((4, 4), np.uint8)
        mask[1:3, 1:3] = 1
        patch = np.full((4, 4, 3), 200, np.uint8)
        out = augment.composite_paste(canvas, patch, mask, (5, 6))
        assert (out[7:9, 6:8] == 200).all()
        assert out.sum() == 4 * 3 * 200
        assert canvas.sum() == 0

    def test_gaussian_interior_exact_and_halo(self):
        canvas = np.zeros((30, 30, 3), np.uint8)
        mask = np.ones((8, 8), np.uint8)
        blend = GaussianEdge(5)
        patch = np.full((12, 12, 3), 100, np.uint8)
        out = augment.composite_paste(canvas, patch, mask, (10, 10), blend)
        # interior more than the blur radius from the edge is copied exactly
        assert (out[12:16, 12:16] == 100).all()
        # the halo is a partial blend
        assert 0 < out[10, 9, 0] < 100
        # nothing further than the radius is touched
        assert out[:7].sum() == 0 and out[:, :7].sum() == 0

    def test_out_of_bounds(self):
        with pytest.raises(augment.OutOfBounds):
            augment.composite_paste(np.zeros((10, 10), np.uint8), np.ones((4, 4), np.uint8),
                                    np.ones((4, 4), np.uint8), (8, 8))

    def test_gaussian_near_border_clips(self):
        canvas = np.zeros((20, 20), np.uint8)
        out = augment.composite_paste(canvas, np.full((10, 10), 50, np.uint8), np.ones((6, 6), np.uint8),
                                      (0, 0), GaussianEdge(5))
        # pixels at least the blur radius inside the mask stay exact
        assert (out[2:4, 2:4] == 50).all()
        assert 0 < out[0, 0] < 50 and 0 < out[6, 2] < 50


class TestExtract:
    def test_identity_transform(self):
        img = np.arange(20 * 20 * 3, dtype=np.uint8).reshape(20, 20, 3)
        m = masks.empty_mask(20, 20)
        m[4:9, 6:12] = 1
        mask, pix = augment.extract_patch(img, m, 1.0, 0.0)
        assert mask.shape == (5, 6) and mask.all()
        assert np.array_equal(pix, img[4:9, 6:12])

    def test_padding(self):
        img = np.zeros((20, 20, 3), np.uint8)
        m = masks.empty_mask(20, 20)
        m[0:3, 0:3] = 1
        mask, pix = augment.extract_patch(img, m, 1.0, 0.0, pad=2)
        assert pix.shape[:2] == (mask.shape[0] + 4, mask.shape[1] + 4)

    def test_empty(self):
        assert augment.extract_patch(np.zeros((5, 5, 3), np.uint8), masks.empty_mask(5, 5), 1.0, 0.0) is None


class TestAugmentImage:
    def test_all_objects_three_pastes(self):
        pixels, img, anns = _scene(3)
        out = augment.augment_image(pixels, img, anns, AugmentationConfig(strategy=AllObjects(1)), 7, 100)
        assert len(out.provenance) == 3 and out.failures == []
        assert [p.new_annotation_id for p in out.provenance] == [100, 101, 102]
        assert sorted(p.source_annotation_id for p in out.provenance) == [1, 2, 3]
        assert len(out.annotations) == 6

    def test_single_and_multiple(self):
        pixels, img, anns = _scene(4)
        out = augment.augment_image(pixels, img, anns, AugmentationConfig(strategy=SingleObject(3)), 7, 100)
        assert len({p.source_annotation_id for p in out.provenance}) == 1 and out.attempts == 3
        out = augment.augment_image(pixels, img, anns,
                                    AugmentationConfig(strategy=MultipleObjects(0.5, 2)), 7, 100)
        assert len({p.source_annotation_id for p in out.provenance}) == 2 and out.attempts == 4

    def test_new_annotations_consistent(self):
        pixels, img, anns = _scene(3)
        cfg = AugmentationConfig(strategy=AllObjects(3), blend=GaussianEdge(3))
        out = augment.augment_image(pixels, img, anns, cfg, 3, 50)
        occupied = [coco.annotation_mask(a, img) for a in anns]
        for ann, full in zip(out.annotations[3:], out.pasted_masks):
            m = coco.annotation_mask(ann, img)
            assert np.array_equal(m, full)
            assert masks.mask_bbox(m) == tuple(ann.bbox)
            assert masks.mask_area(m) == ann.area
            x, y, w, h = ann.bbox
            assert x >= 5 and y >= 5 and x + w <= img.width - 5 and y + h <= img.height - 5
            for other in occupied:
                assert not np.logical_and(other, m).any()
            occupied.append(m)

    def test_deterministic(self):
        pixels, img, anns = _scene(3)
        a = augment.augment_image(pixels, img, anns, CFG, 42, 10)
        b = augment.augment_image(pixels, img, anns, CFG, 42, 10)
        assert np.array_equal(a.pixels, b.pixels) and a.provenance == b.provenance
        c = augment.augment_image(pixels, img, anns, CFG, 43, 10)
        assert c.provenance != a.provenance

    def test_no_candidates(self):
        pixels, img, _ = _scene(0)
        big = AnnotationRecord(1, 1, 1, (0, 0, 50, 50), 2500, _square_poly(0, 0, 50))
        out = augment.augment_image(pixels, img, [big], CFG, 1, 10)
        assert out.provenance == [] and np.array_equal(out.pixels, pixels)

    def test_crowded_image_records_failures(self):
        img = ImageRecord(1, 40, 40, "a.png")
        anns = [AnnotationRecord(1, 1, 1, (10, 10, 20, 20), 400, _square_poly(10, 10, 20))]
        cfg = AugmentationConfig(strategy=AllObjects(3), max_placement_attempts=10)
        out = augment.augment_image(np.zeros((40, 40, 3), np.uint8), img, anns, cfg, 1, 10)
        assert out.attempts == 3
        assert all(f.reason == "no_placement" for f in out.failures)

    def test_size_mismatch(self):
        pixels, img, anns = _scene(1)
        with pytest.raises(ValueError):
            augment.augment_image(pixels[:10], img, anns, CFG, 1, 10)

    def test_source_pixels_unchanged(self):
        pixels, img, anns = _scene(2)
        before = pixels.copy()
        augment.augment_image(pixels, img, anns, CFG, 1, 10)
        assert np.array_equal(pixels, before)

    def test_max_pastes(self):
        _, _, anns = _scene(5)
        assert augment.max_pastes(anns, AugmentationConfig(strategy=AllObjects(2))) == 10
        assert augment.max_pastes(anns, AugmentationConfig(strategy=MultipleObjects(0.5, 2))) == 6
        assert augment.max_pastes(anns, AugmentationConfig(strategy=SingleObject(4))) == 4
