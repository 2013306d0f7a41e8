import json

import numpy as np
import pytest
from PIL import Image

from irfsod.data import (ShapesSpec, SplitSpec, coco_voc_split,
                         generate_shapes_dataset, instances_of, load_coco_annotations,
                         load_image, sample_support_sets)
from irfsod.errors import DataError


def write_coco(tmp_path, images, annotations, categories, splits=None):
    payload = {"images": images, "annotations": annotations, "categories": categories}
    if splits is not None:
        payload["splits"] = splits
    path = tmp_path / "annotations.json"
    path.write_text(json.dumps(payload))
    return path


def basic_file(tmp_path, extra_annotations=()):
    images = [{"id": 1, "file_name": "a.png", "width": 64, "height": 64}]
    annotations = [{"id": 1, "image_id": 1, "category_id": 1,
                    "bbox": [10, 20, 30, 40], "iscrowd": 0}]
    annotations += list(extra_annotations)
    categories = [{"id": 1, "name": "base_thing"}, {"id": 2, "name": "novel_thing"}]
    return write_coco(tmp_path, images, annotations, categories)


class TestLoadCoco:
    def test_single_record_single_box(self, tmp_path):
        path = basic_file(tmp_path)
        split = load_coco_annotations(path, SplitSpec(base=(1,), novel=(2,)), visible="base")
        assert len(split.records) == 1
        rec = split.records[0]
        assert len(rec.annotations) == 1
        # COCO (x, y, w, h) -> corner convention.
        box = rec.annotations[0].box
        assert (box.x1, box.y1, box.x2, box.y2) == (10, 20, 40, 60)

    def test_novel_annotation_dropped_in_training_view(self, tmp_path):
        extra = [{"id": 2, "image_id": 1, "category_id": 2,
                  "bbox": [0, 0, 5, 5], "iscrowd": 0}]
        path = basic_file(tmp_path, extra)
        split = load_coco_annotations(path, SplitSpec(base=(1,), novel=(2,)), visible="base")
        categories = {a.category for r in split.records for a in r.annotations}
        assert categories == {1}

    def test_crowd_annotations_excluded(self, tmp_path):
        extra = [{"id": 2, "image_id": 1, "category_id": 1,
                  "bbox": [0, 0, 5, 5], "iscrowd": 1}]
        path = basic_file(tmp_path, extra)
        split = load_coco_annotations(path, SplitSpec(base=(1,), novel=(2,)), visible="base")
        assert len(split.records[0].annotations) == 1

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_coco_annotations(tmp_path / "missing.json",
                                  SplitSpec(base=(1,), novel=()))

    def test_malformed_json_is_data_error(self, tmp_path):
        path = tmp_path / "annotations.json"
        path.write_text("{not json")
        with pytest.raises(DataError, match="malformed"):
            load_coco_annotations(path, SplitSpec(base=(1,), novel=()))

    def test_unknown_category_is_data_error(self, tmp_path):
        images = [{"id": 1, "file_name": "a.png", "width": 8, "height": 8}]
        annotations = [{"id": 1, "image_id": 1, "category_id": 99,
                        "bbox": [0, 0, 2, 2], "iscrowd": 0}]
        path = write_coco(tmp_path, images, annotations, [{"id": 1, "name": "x"}])
        with pytest.raises(DataError, match="unknown category"):
            load_coco_annotations(path, SplitSpec(base=(1,), novel=()))

    def test_split_overlap_rejected(self):
        with pytest.raises(DataError, match="overlap"):
            SplitSpec(base=(1, 2), novel=(2, 3))

    def test_boxes_valid_after_conversion(self, shapes_dir):
        split = load_coco_annotations(shapes_dir / "annotations.json", visible="all")
        for rec in split.records:
            for ann in rec.annotations:
                assert ann.box.x2 > ann.box.x1
                assert ann.box.y2 > ann.box.y1

    def test_coco_voc_preset_sizes(self):
        split = coco_voc_split(range(1, 91))
        assert len(split.novel) == 20
        assert set(split.novel) & set(split.base) == set()


class TestSupportSampling:
    def test_k1_one_instance_each(self, shapes_base_split, rng):
        cats = sorted(shapes_base_split.base_categories)
        sets = sample_support_sets(shapes_base_split, cats, k=1, rng=rng)
        assert all(s.shots == 1 for s in sets)

    def test_fixed_seed_identical(self, shapes_base_split):
        cats = sorted(shapes_base_split.base_categories)[:2]
        a = sample_support_sets(shapes_base_split, cats, 3, np.random.default_rng(5))
        b = sample_support_sets(shapes_base_split, cats, 3, np.random.default_rng(5))
        for sa, sb in zip(a, b):
            assert [(i.record.image_id, i.box) for i in sa.items] == \
                   [(i.record.image_id, i.box) for i in sb.items]

    def test_counts_and_distinctness(self, shapes_base_split, rng):
        cats = sorted(shapes_base_split.base_categories)
        k = 5
        sets = sample_support_sets(shapes_base_split, cats, k, rng)
        total = sum(s.shots for s in sets)
        assert total == len(cats) * k
        for s in sets:
            seen = {(i.record.image_id, i.box.x1, i.box.y1, i.box.x2, i.box.y2)
                    for i in s.items}
            assert len(seen) == k

    def test_insufficient_instances_error(self, shapes_base_split, rng):
        cat = sorted(shapes_base_split.base_categories)[0]
        with pytest.raises(DataError, match="instances"):
            sample_support_sets(shapes_base_split, [cat], k=10 ** 6, rng=rng)


class TestShapesGenerator:
    def test_counts_and_bounds(self, tmp_path):
        spec = ShapesSpec(images=20, image_size=64, max_instances=3,
                          min_size=10, max_size=24)
        split = generate_shapes_dataset(spec, tmp_path / "ds", seed=3)
        assert len(split.records) == 20
        n_annotations = sum(len(r.annotations) for r in split.records)
        assert 0 < n_annotations <= 60
        for rec in split.records:
            for ann in rec.annotations:
                assert 0 <= ann.box.x1 < ann.box.x2 <= 64
                assert 0 <= ann.box.y1 < ann.box.y2 <= 64

    def test_same_seed_byte_identical_annotations(self, tmp_path):
        spec = ShapesSpec(images=8, image_size=48, min_size=10, max_size=20)
        generate_shapes_dataset(spec, tmp_path / "a", seed=11)
        generate_shapes_dataset(spec, tmp_path / "b", seed=11)
        assert (tmp_path / "a" / "annotations.json").read_bytes() == \
               (tmp_path / "b" / "annotations.json").read_bytes()

    def test_rendered_tight_bbox_matches_gt_within_1px(self, tmp_path):
        spec = ShapesSpec(images=12, image_size=64, min_instances=1, max_instances=1,
                          min_size=14, max_size=30, background_noise=0)
        split = generate_shapes_dataset(spec, tmp_path / "ds", seed=5)
        background = 46
        checked = 0
        for rec in split.records:
            if not rec.annotations:
                continue
            image = np.asarray(Image.open(rec.path).convert("RGB")).astype(int)
            mask = np.abs(image - background).max(axis=2) > 12
            ys, xs = np.nonzero(mask)
            if len(xs) == 0:
                continue
            tight = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
            box = rec.annotations[0].box
            for got, want in zip(tight, (box.x1, box.y1, box.x2, box.y2)):
                assert abs(got - want) <= 1
            checked += 1
        assert checked >= 10

    def test_split_metadata_round_trips(self, tmp_path):
        spec = ShapesSpec(classes=("circle", "square", "triangle", "star", "cross"),
                          novel_classes=("star", "cross"), images=5,
                          min_size=10, max_size=20, image_size=48)
        out = tmp_path / "ds"
        generate_shapes_dataset(spec, out, seed=1)
        raw = json.loads((out / "annotations.json").read_text())
        assert raw["splits"]["novel"] == [4, 5]
        assert raw["splits"]["base"] == [1, 2, 3]
        split = load_coco_annotations(out / "annotations.json", visible="base")
        assert split.novel_categories == frozenset({4, 5})

    def test_training_view_never_exposes_novel(self, shapes_base_split):
        for rec in shapes_base_split.records:
            for ann in rec.annotations:
                assert ann.category in shapes_base_split.base_categories

    def test_invalid_spec_rejected(self, tmp_path):
        with pytest.raises(DataError):
            ShapesSpec(classes=("circle", "hexagon")).validate()
        with pytest.raises(DataError):
            ShapesSpec(novel_classes=("circle", "missing")).validate()
        with pytest.raises(DataError):
            ShapesSpec(min_size=50, max_size=20).validate()

    def test_images_loadable_and_instances_indexable(self, shapes_dir, shapes_base_split):
        rec = shapes_base_split.records[0]
        image = load_image(rec.path)
        assert image.shape == (64, 64, 3)
        for cat in shapes_base_split.base_categories:
            for inst in instances_of(shapes_base_split, cat):
                assert inst.box.x2 <= inst.record.width
