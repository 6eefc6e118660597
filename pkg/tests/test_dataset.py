import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssiod.dataset import (
    DEFAULT_CATALOG,
    SceneConfig,
    TaskSpec,
    build_phase_dataset,
    generate_synthetic_dataset,
    load_coco_annotations,
    phase_pool,
    save_coco_annotations,
    split_tasks,
)


@pytest.fixture(scope="module")
def scenes():
    return generate_synthetic_dataset(SceneConfig(seed=3), 120)


class TestTaskSpec:
    def test_split_40_40_shape(self):
        spec = split_tasks(list(range(80)), [40, 40])
        assert [len(p) for p in spec.phase_classes] == [40, 40]
        assert spec.seen_classes(1) == tuple(range(80))

    def test_five_phases_of_16(self):
        spec = split_tasks(list(range(80)), [16] * 5)
        assert spec.num_phases == 5 and spec.seen_classes(0) == tuple(range(16))

    def test_sizes_must_cover_classes(self):
        with pytest.raises(ValueError):
            split_tasks(list(range(8)), [4, 3])
        with pytest.raises(ValueError):
            split_tasks(list(range(8)), [8, 0])

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            TaskSpec(((0, 1), (1, 2)))


class TestPhaseDataset:
    def test_label_count_rounds_half_up(self, scenes):
        spec = split_tasks(list(range(8)), [4, 4])
        # 0.05 * 50 = 2.5 -> 3
        ph = build_phase_dataset(scenes[:50], spec, 0, 0.05, seed=0)
        assert len(ph.labelled) == 3 and len(ph.unlabelled) == 47

    def test_annotations_limited_to_phase_classes(self, scenes):
        spec = split_tasks(list(range(8)), [4, 4])
        ph = build_phase_dataset(scenes, spec, 1, 0.5, seed=1)
        assert all(a.class_id in (4, 5, 6, 7) for s in ph.labelled for a in s.annotations)
        assert ph.classes == (4, 5, 6, 7)

    def test_zero_labelled_rejected(self, scenes):
        spec = split_tasks(list(range(8)), [4, 4])
        with pytest.raises(ValueError):
            build_phase_dataset(scenes[:5], spec, 0, 0.01, seed=0)

    def test_deterministic(self, scenes):
        spec = split_tasks(list(range(8)), [4, 4])
        a = build_phase_dataset(scenes, spec, 0, 0.1, seed=4)
        b = build_phase_dataset(scenes, spec, 0, 0.1, seed=4)
        assert [s.image.id for s in a.labelled] == [s.image.id for s in b.labelled]

    def test_stratified_hits_every_group(self, scenes):
        spec = split_tasks(list(range(8)), [4, 4])
        pool = phase_pool(scenes, spec, 0)
        ph = build_phase_dataset(pool, spec, 0, 0.2, seed=0, stratified=True)
        firsts = {next(a.class_id for a in s.annotations if a.class_id < 4) for s in ph.labelled}
        assert firsts == {0, 1, 2, 3}

    def test_pool_contains_phase_classes(self, scenes):
        spec = split_tasks(list(range(8)), [4, 4])
        pool = phase_pool(scenes, spec, 1)
        assert pool and all(any(a.class_id >= 4 for a in s.annotations) for s in pool)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.0), st.integers(0, 10_000))
def test_labelled_and_unlabelled_partition_the_pool(ratio, seed):
    samples = generate_synthetic_dataset(SceneConfig(seed=1, image_size=32, object_size=(8, 14)), 40)
    spec = split_tasks(list(range(8)), [4, 4])
    ph = build_phase_dataset(samples, spec, 0, ratio, seed)
    ids = [s.image.id for s in ph.labelled] + [im.id for im in ph.unlabelled]
    assert sorted(ids) == [s.image.id for s in samples]
    assert len(ph.labelled) == int(np.floor(ratio * 40 + 0.5))


class TestSynthetic:
    def test_reproducible(self):
        a = generate_synthetic_dataset(SceneConfig(seed=7), 5)
        b = generate_synthetic_dataset(SceneConfig(seed=7), 5)
        for x, y in zip(a, b):
            assert np.array_equal(x.image.pixels, y.image.pixels) and x.annotations == y.annotations

    def test_boxes_inside_image_and_disjoint(self, scenes):
        for s in scenes:
            assert s.image.pixels.shape == (64, 64, 3) and s.image.pixels.dtype == np.float32
            boxes = [a.box for a in s.annotations]
            for b in boxes:
                assert 0 <= b.x1 < b.x2 <= 64 and 0 <= b.y1 < b.y2 <= 64
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    a, b = boxes[i], boxes[j]
                    assert a.x2 <= b.x1 or b.x2 <= a.x1 or a.y2 <= b.y1 or b.y2 <= a.y1

    def test_box_is_tight_around_object_colour(self):
        cfg = SceneConfig(seed=11, objects_per_image=(1, 1), noise=0.0)
        s = generate_synthetic_dataset(cfg, 1)[0]
        a = s.annotations[0]
        colour = np.asarray(DEFAULT_CATALOG[a.class_id].color)
        dist = np.abs(s.image.pixels - colour[None, None] * 0.925).max(axis=2)
        ys, xs = np.nonzero(dist < 0.1)
        assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == tuple(int(v) for v in a.box.as_tuple())

    def test_all_classes_appear(self, scenes):
        assert {a.class_id for s in scenes for a in s.annotations} == set(range(8))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            SceneConfig(object_size=(10, 100))
        with pytest.raises(ValueError):
            SceneConfig(classes=DEFAULT_CATALOG[:1])


class TestCoco:
    def test_round_trip_with_pixels(self, tmp_path, scenes):
        save_coco_annotations(scenes[:10], tmp_path / "a.json", tmp_path / "img")
        first = load_coco_annotations(tmp_path / "a.json", tmp_path / "img")
        save_coco_annotations(first, tmp_path / "b.json", tmp_path / "img2")
        second = load_coco_annotations(tmp_path / "b.json", tmp_path / "img2")
        for x, y in zip(first, second):
            assert x.image.id == y.image.id and x.annotations == y.annotations
            assert np.array_equal(x.image.pixels, y.image.pixels)
        assert np.abs(first[0].image.pixels - scenes[0].image.pixels).max() <= 0.5 / 255 + 1e-6

    def _write(self, path, doc):
        path.write_text(json.dumps(doc))
        return path

    def test_missing_key(self, tmp_path):
        with pytest.raises(ValueError, match="missing keys"):
            load_coco_annotations(self._write(tmp_path / "x.json", {"images": [], "annotations": []}))

    def test_dangling_image_id(self, tmp_path):
        doc = {"images": [{"id": 1}], "categories": [{"id": 0}],
               "annotations": [{"id": 1, "image_id": 9, "category_id": 0, "bbox": [0, 0, 2, 2]}]}
        with pytest.raises(ValueError, match="image_id 9"):
            load_coco_annotations(self._write(tmp_path / "x.json", doc))

    def test_unknown_category(self, tmp_path):
        doc = {"images": [{"id": 1}], "categories": [{"id": 0}],
               "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [0, 0, 2, 2]}]}
        with pytest.raises(ValueError, match="category_id 3"):
            load_coco_annotations(self._write(tmp_path / "x.json", doc))

    def test_degenerate_bbox(self, tmp_path):
        doc = {"images": [{"id": 1}], "categories": [{"id": 0}],
               "annotations": [{"id": 1, "image_id": 1, "category_id": 0, "bbox": [0, 0, 0, 2]}]}
        with pytest.raises(ValueError, match="non-positive"):
            load_coco_annotations(self._write(tmp_path / "x.json", doc))

    def test_duplicate_image(self, tmp_path):
        doc = {"images": [{"id": 1}, {"id": 1}], "categories": [], "annotations": []}
        with pytest.raises(ValueError, match="duplicate"):
            load_coco_annotations(self._write(tmp_path / "x.json", doc))
