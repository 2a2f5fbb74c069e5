import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unicd.config import ConfigError
from unicd.data import (BUILDING, apply_transform, augment, collate, damage_targets, dataset_hash, generate_dataset,
                        render_labels, transform_map)
from unicd.losses import IGNORE_INDEX


@pytest.fixture(scope="module")
def datasets():
    return {t: generate_dataset(t, 6, 32, 32, seed=3) for t in ("bcd", "scd", "bda")}


class TestGenerate:
    def test_empty(self):
        assert generate_dataset("bcd", 0) == []

    @pytest.mark.parametrize("h,w", [(30, 32), (32, 0), (48, 64)])
    def test_bad_dims(self, h, w):
        with pytest.raises(ConfigError):
            generate_dataset("bcd", 1, h, w)

    def test_negative_count(self):
        with pytest.raises(ConfigError):
            generate_dataset("bcd", -1)

    def test_labels_rerender_from_geometry(self, datasets, task):
        for s in datasets[task]:
            again = render_labels(task, s.objects, *s.shape)
            assert again.keys() == s.labels.keys()
            for k in again:
                np.testing.assert_array_equal(again[k], s.labels[k])

    def test_deterministic(self, task):
        a, b = generate_dataset(task, 3, seed=9), generate_dataset(task, 3, seed=9)
        assert dataset_hash(a) == dataset_hash(b)
        assert dataset_hash(a) != dataset_hash(generate_dataset(task, 3, seed=10))

    def test_scene_depends_only_on_index(self):
        short, long = generate_dataset("scd", 2, seed=4), generate_dataset("scd", 5, seed=4)
        assert dataset_hash(short) == dataset_hash(long[:2])

    def test_image_range(self, datasets, task):
        for s in datasets[task]:
            assert s.pre.shape == s.post.shape == (3, 32, 32)
            assert s.pre.min() >= 0 and s.post.max() <= 1

    def test_scd_change_is_semantic_difference(self, datasets):
        for s in datasets["scd"]:
            lab = s.labels
            assert set(np.unique(lab["t1"])) <= set(range(4))
            np.testing.assert_array_equal(lab["change"], lab["t1"] != lab["t2"])
            assert not lab["t1"][lab["change"] == 0].any()

    def test_bda_damage_only_on_buildings(self, datasets):
        for s in datasets["bda"]:
            loc, dmg = s.labels["loc"], s.labels["dmg"]
            assert not dmg[loc == 0].any()
            assert set(np.unique(dmg[loc == 1])) <= {1, 2, 3, 4}
            assert all(ob.cls_pre == BUILDING for ob in s.objects)
            targets = damage_targets(loc, dmg)
            assert (targets[loc == 0] == IGNORE_INDEX).all()

    def test_distractors_leave_labels(self):
        a = generate_dataset("bcd", 4, seed=1, distractors=True)
        b = generate_dataset("bcd", 4, seed=1, distractors=False)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.labels["change"], y.labels["change"])
            assert not y.distractor.any()
            assert x.distractor.any()


class TestAugment:
    def test_flip_involution(self, datasets):
        s = datasets["scd"][0]
        for lr, ud in ((True, False), (False, True), (True, True)):
            twice = apply_transform(apply_transform(s, 0, lr, ud), 0, lr, ud)
            np.testing.assert_array_equal(twice.pre, s.pre)
            for k in s.labels:
                np.testing.assert_array_equal(twice.labels[k], s.labels[k])

    def test_four_rotations(self, datasets):
        s = datasets["bda"][1]
        out = s
        for _ in range(4):
            out = apply_transform(out, 1)
        np.testing.assert_array_equal(out.post, s.post)
        np.testing.assert_array_equal(out.labels["dmg"], s.labels["dmg"])

    def test_transform_map_matches_numpy(self, rng):
        a = rng.random((3, 4, 4))
        np.testing.assert_array_equal(transform_map(a, 1, True, False), np.rot90(a, 1, axes=(1, 2))[..., ::-1])

    @given(st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_centroid_moves_with_image(self, seed):
        s = generate_dataset("bcd", 1, seed=seed % 7, distractors=False)[0]
        out = augment(s, seed)
        k, lr, ud = out.transform
        mask = s.labels["change"] == 1
        if not mask.any():
            return
        ys, xs = np.nonzero(mask)
        cy, cx = ys.mean(), xs.mean()
        ys2, xs2 = np.nonzero(out.labels["change"] == 1)
        # image content under the moved mask is the content that was under the original mask
        img_marker = transform_map(np.where(mask, s.pre[0], 0), k, lr, ud)
        np.testing.assert_array_equal(img_marker[out.labels["change"] == 1], out.pre[0][out.labels["change"] == 1])
        # and the centroid moves by the closed-form quarter-turn / mirror map about the image centre
        c = 15.5
        y, x = cy - c, cx - c
        for _ in range(k):
            y, x = -x, y
        if lr:
            x = -x
        if ud:
            y = -y
        assert (ys2.mean() - c, xs2.mean() - c) == pytest.approx((y, x), abs=1e-9)

    def test_augment_reproducible(self, datasets):
        s = datasets["bcd"][2]
        assert augment(s, 5).transform == augment(s, 5).transform
        np.testing.assert_array_equal(augment(s, 5).post, augment(s, 5).post)


class TestCollate:
    def test_stack(self, datasets):
        b = collate(datasets["scd"][:3], np.float32)
        assert b.pre.shape == (3, 3, 32, 32) and b.pre.dtype == np.float32
        assert b.labels["t2"].shape == (3, 32, 32)
        assert b.distractor.shape == (3, 32, 32)

    def test_empty(self):
        with pytest.raises(ConfigError):
            collate([])
