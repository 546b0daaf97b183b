import json
import logging
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smallaug import coco, masks
from smallaug.coco import (
    AnnotationRecord,
    Category,
    CompressedRLE,
    Dataset,
    ImageRecord,
    PolygonSet,
    SizeBasis,
    SizeClass,
)


def _doc(**over):
    doc = {
        "info": {"year": 2017},
        "images": [{"id": 1, "width": 20, "height": 10, "file_name": "a.jpg"}],
        "annotations": [],
        "categories": [{"id": 7, "name": "thing", "supercategory": "stuff"}],
    }
    doc.update(over)
    return doc


def _ann(**over):
    a = {
        "id": 3,
        "image_id": 1,
        "category_id": 7,
        "bbox": [1, 1, 4, 4],
        "area": 16,
        "segmentation": [[1, 1, 5, 1, 5, 5, 1, 5]],
        "iscrowd": 0,
    }
    a.update(over)
    return a


def _write(tmp_path, doc, name="ann.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc), encoding="utf-8")
    return p


class TestLoad:
    def test_minimal_one_image(self, tmp_path):
        d = coco.load_dataset(_write(tmp_path, _doc()))
        assert len(d.images) == 1 and d.annotations == ()
        assert d.annotations_for(1) == ()

    def test_dangling_image(self, tmp_path):
        with pytest.raises(coco.DanglingReference) as exc:
            coco.load_dataset(_write(tmp_path, _doc(annotations=[_ann(image_id=99)])))
        assert exc.value.annotation_id == 3

    def test_dangling_category(self, tmp_path):
        with pytest.raises(coco.DanglingReference):
            coco.load_dataset(_write(tmp_path, _doc(annotations=[_ann(category_id=1)])))

    def test_missing_field(self, tmp_path):
        a = _ann()
        del a["bbox"]
        with pytest.raises(coco.MissingField) as exc:
            coco.load_dataset(_write(tmp_path, _doc(annotations=[a])))
        assert exc.value.name == "bbox"

    def test_missing_top_level(self, tmp_path):
        doc = _doc()
        del doc["categories"]
        with pytest.raises(coco.MissingField):
            coco.load_dataset(_write(tmp_path, doc))

    def test_malformed_json_byte_offset(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_bytes('{"é": [1, 2,, 3]}'.encode("utf-8"))
        with pytest.raises(coco.MalformedJson) as exc:
            coco.load_dataset(p)
        # 'é' is two bytes; the stray comma is at byte 13
        assert exc.value.pos == 13

    def test_not_utf8(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_bytes(b'{"a": "\xff"}')
        with pytest.raises(coco.MalformedJson):
            coco.load_dataset(p)

    def test_duplicate_ids(self, tmp_path):
        with pytest.raises(coco.DuplicateId):
            coco.load_dataset(_write(tmp_path, _doc(annotations=[_ann(), _ann()])))
        img = {"id": 1, "width": 5, "height": 5, "file_name": "x"}
        with pytest.raises(coco.DuplicateId):
            coco.load_dataset(_write(tmp_path, _doc(images=[img, img])))

    def test_bbox_clamped_with_warning(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            d = coco.load_dataset(_write(tmp_path, _doc(annotations=[_ann(bbox=[18.5, -0.5, 2, 3])])))
        assert d.annotations[0].bbox == (18.5, 0.0, 1.5, 2.5)
        assert "clamped" in caplog.text

    def test_bbox_empty_after_clamp(self, tmp_path):
        with pytest.raises(coco.InvalidRecord):
            coco.load_dataset(_write(tmp_path, _doc(annotations=[_ann(bbox=[25, 1, 2, 2])])))

    def test_drop_invalid(self, tmp_path):
        doc = _doc(annotations=[_ann(), _ann(id=4, area=0)])
        with pytest.raises(coco.InvalidRecord):
            coco.load_dataset(_write(tmp_path, doc))
        d = coco.load_dataset(_write(tmp_path, doc), drop_invalid=True)
        assert [a.id for a in d.annotations] == [3]

    @pytest.mark.parametrize("seg", [[[1, 1, 2, 2]], [[1, 1, 2, 2, 3]], "nope"])
    def test_bad_segmentation(self, tmp_path, seg):
        with pytest.raises(coco.InvalidRecord):
            coco.load_dataset(_write(tmp_path, _doc(annotations=[_ann(segmentation=seg)])))

    def test_rle_count_mismatch(self, tmp_path):
        seg = {"size": [10, 20], "counts": [5, 5]}
        with pytest.raises(coco.InvalidRecord):
            coco.load_dataset(_write(tmp_path, _doc(annotations=[_ann(segmentation=seg)])))

    def test_dataset_error_is_value_error(self):
        assert issubclass(coco.DatasetError, ValueError)


class TestSave:
    def test_roundtrip_two_images(self, tmp_path):
        d = Dataset(
            (ImageRecord(1, 30, 20, "a.png"), ImageRecord(2, 40, 10, "b.png", {"license": 3})),
            (
                AnnotationRecord(5, 1, 1, (1.0, 2.0, 3.0, 4.0), 12.0, PolygonSet(((1.0, 2.0, 4.0, 2.0, 4.0, 6.0),))),
                AnnotationRecord(6, 2, 1, (0.0, 0.0, 2.0, 2.0), 4, None, True, {"score": 0.5}),
            ),
            (Category(1, "box"),),
            {"info": {"v": 1}},
        )
        p = tmp_path / "out.json"
        coco.save_dataset(d, p)
        assert coco.load_dataset(p) == d

    def test_unknown_keys_preserved(self, tmp_path):
        src = _write(tmp_path, _doc(annotations=[_ann(extra_key=[1, 2])]), "in.json")
        out = tmp_path / "out.json"
        coco.save_dataset(coco.load_dataset(src), out)
        assert json.loads(out.read_text()) == json.loads(src.read_text())

    def test_rle_string_verbatim(self, tmp_path):
        m = masks.empty_mask(20, 10)
        m[2:7, 3:9] = 1
        seg = {"size": [10, 20], "counts": masks.rle_encode(m).to_string()}
        src = _write(tmp_path, _doc(annotations=[_ann(segmentation=seg, area=30)]), "in.json")
        out = tmp_path / "out.json"
        d = coco.load_dataset(src)
        assert isinstance(d.annotations[0].segmentation, CompressedRLE)
        coco.save_dataset(d, out)
        assert json.loads(out.read_text())["annotations"][0]["segmentation"] == seg

    def test_rle_list_verbatim(self, tmp_path):
        seg = {"size": [10, 20], "counts": [15, 5, 180]}
        src = _write(tmp_path, _doc(annotations=[_ann(segmentation=seg, area=5, iscrowd=1)]), "in.json")
        out = tmp_path / "out.json"
        coco.save_dataset(coco.load_dataset(src), out)
        assert json.loads(out.read_text())["annotations"][0]["segmentation"] == seg

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_unwritable_permissions(self, tmp_path):
        ro = tmp_path / "ro"
        ro.mkdir()
        ro.chmod(0o500)
        with pytest.raises(OSError):
            coco.save_dataset(coco.dataset_from_json(_doc()), ro / "x.json")

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            coco.save_dataset(coco.dataset_from_json(_doc()), blocker / "x.json")

    def test_readable_by_pycocotools(self, tmp_path, corpus):
        pc = pytest.importorskip("pycocotools.coco")
        d, out = corpus
        api = pc.COCO(str(out / "annotations.json"))
        assert len(api.getImgIds()) == len(d.images)
        # edge pixels may differ between rasterization rules, interiors must not
        for ann in d.annotations:
            ref = api.annToMask(api.loadAnns([ann.id])[0]).astype(bool)
            ours = coco.annotation_mask(ann, d.image(ann.image_id)).astype(bool)
            iou = (ref & ours).sum() / (ref | ours).sum()
            assert iou > 0.85


def _ann_with(area, bbox=(0.0, 0.0, 1.0, 1.0)):
    return AnnotationRecord(1, 1, 1, bbox, area, None)


class TestClassify:
    def test_examples(self):
        assert coco.classify_size(_ann_with(961)) is SizeClass.SMALL
        assert coco.classify_size(_ann_with(1024)) is SizeClass.MEDIUM
        assert coco.classify_size(_ann_with(9216)) is SizeClass.LARGE
        assert coco.classify_size(_ann_with(9215.9)) is SizeClass.MEDIUM

    def test_bbox_basis(self):
        a = _ann_with(100, (0, 0, 32, 32))
        assert coco.classify_size(a, SizeBasis.MASK) is SizeClass.SMALL
        assert coco.classify_size(a, SizeBasis.BBOX) is SizeClass.MEDIUM

    @given(st.floats(0.001, 1e6))
    def test_exactly_one_class(self, area):
        cls = coco.classify_area(area)
        hits = [area < 1024, 1024 <= area < 9216, area >= 9216]
        assert sum(hits) == 1
        assert cls is coco.SIZE_CLASSES[hits.index(True)]

    def test_counts_sum(self, corpus):
        d, _ = corpus
        for basis in SizeBasis:
            assert sum(coco.size_class_counts(d.annotations, basis).values()) == len(d.annotations)


class TestValidate:
    def test_clean(self, corpus):
        d, _ = corpus
        assert coco.validate_dataset(d, recompute_area=True) == []

    def test_area_mismatch_warns(self):
        doc = _doc(annotations=[_ann(area=30)])
        issues = coco.validate_dataset(coco.dataset_from_json(doc), recompute_area=True)
        assert [i.level for i in issues] == ["warning"]

    def test_bbox_fallback_mask(self):
        d = coco.dataset_from_json(_doc(annotations=[_ann(segmentation=None, bbox=[1.5, 1, 2, 3])]))
        m = coco.annotation_mask(d.annotations[0], d.images[0])
        assert m.sum() == 9


@st.composite
def datasets(draw):
    n_img = draw(st.integers(0, 4))
    images = []
    for i in range(n_img):
        images.append(ImageRecord(i + 1, draw(st.integers(8, 60)), draw(st.integers(8, 60)), f"{i}.png"))
    cats = (Category(1, draw(st.text(max_size=8))), Category(2, "b"))
    anns = []
    for img in images:
        for _ in range(draw(st.integers(0, 3))):
            w = draw(st.integers(1, img.width))
            h = draw(st.integers(1, img.height))
            x = draw(st.integers(0, img.width - w))
            y = draw(st.integers(0, img.height - h))
            if draw(st.booleans()):
                seg = PolygonSet(((float(x), float(y), float(x + w), float(y), float(x + w), float(y + h)),))
            else:
                m = masks.empty_mask(img.width, img.height)
                m[y:y + h, x:x + w] = 1
                seg = CompressedRLE(masks.rle_encode(m), draw(st.booleans()))
            area = draw(st.one_of(st.integers(1, 5000), st.floats(0.5, 5000)))
            anns.append(
                AnnotationRecord(len(anns) + 1, img.id, draw(st.sampled_from([1, 2])),
                                 (float(x), float(y), float(w), float(h)), area, seg, draw(st.booleans()))
            )
    return Dataset(tuple(images), tuple(anns), cats, {})


@settings(max_examples=100, deadline=None)
@given(datasets())
def test_roundtrip_property(tmp_path_factory, d):
    p = tmp_path_factory.mktemp("rt") / "d.json"
    coco.save_dataset(d, p)
    assert coco.load_dataset(p) == d


def test_annotation_mask_rle_matches_decode():
    m = np.zeros((6, 9), np.uint8)
    m[1:4, 2:7] = 1
    img = ImageRecord(1, 9, 6, "x")
    ann = AnnotationRecord(1, 1, 1, (2, 1, 5, 3), 15, CompressedRLE(masks.rle_encode(m)))
    assert np.array_equal(coco.annotation_mask(ann, img), m)
