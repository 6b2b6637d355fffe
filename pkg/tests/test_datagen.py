import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pert.datagen import (
    PairedSample,
    SyntheticSampleSpec,
    TextInstance,
    apply_augmentation,
    augment,
    build_dataset,
    load_dataset,
    manifest_hash,
    random_spec,
    render_sample,
    sample_augmentation,
)


def assert_paired(sample: PairedSample):
    outside = sample.mask_gt[..., 0] == 0
    assert np.array_equal(sample.original[outside], sample.gt[outside])


def test_zero_instances():
    s = render_sample(SyntheticSampleSpec((32, 48), "gradient", [], seed=3))
    assert s.original.shape == (32, 48, 3) and s.mask_gt.shape == (32, 48, 1)
    assert np.array_equal(s.original, s.gt)
    assert s.mask_gt.sum() == 0


def test_single_box_area():
    inst = TextInstance("Hi", 9, (255, 255, 255), 0.0, box=(5, 7, 20, 10))
    s = render_sample(SyntheticSampleSpec((32, 32), "noise", [inst], seed=1))
    assert s.mask_gt.sum() == 200
    assert set(np.unique(s.mask_gt)) == {0.0, 1.0}
    assert not np.array_equal(s.original, s.gt)
    assert_paired(s)


def test_render_is_deterministic():
    spec = random_spec(42)
    a, b = render_sample(spec), render_sample(spec)
    for k in ("original", "gt", "mask_gt"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


@pytest.mark.parametrize(
    "box",
    [(-1, 0, 10, 10), (30, 0, 10, 10), (0, 0, 0, 5)],
)
def test_box_out_of_bounds(box):
    inst = TextInstance("ab", 9, (0, 0, 0), box=box)
    with pytest.raises(ValueError):
        render_sample(SyntheticSampleSpec((32, 32), "gradient", [inst]))


def test_overlapping_boxes_rejected():
    a = TextInstance("ab", 9, (0, 0, 0), box=(0, 0, 10, 10))
    b = TextInstance("cd", 9, (0, 0, 0), box=(5, 5, 10, 10))
    with pytest.raises(ValueError):
        render_sample(SyntheticSampleSpec((32, 32), "gradient", [a, b]))


def test_unrenderable_text():
    with pytest.raises(ValueError):
        render_sample(SyntheticSampleSpec((32, 32), "gradient", [TextInstance("   ", 9, (0, 0, 0), box=(0, 0, 10, 10))]))


def test_image_background(tmp_path):
    from PIL import Image

    Image.fromarray(np.random.default_rng(0).integers(0, 255, (40, 50, 3), dtype=np.uint8)).save(tmp_path / "bg.png")
    spec = random_spec(5, (32, 32), background="image", background_dir=str(tmp_path))
    s = render_sample(spec)
    assert_paired(s)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_generated_pairs_differ_only_inside_mask(seed):
    spec = random_spec(seed)
    s = render_sample(spec)
    assert_paired(s)
    assert 1 <= len(spec.text_instances) <= 3
    assert s.mask_gt.sum() == sum(w * h for _, _, w, h in (i.box for i in spec.text_instances))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10), st.booleans())
def test_augmentation_preserves_pairing(seed, angle, flip):
    s = apply_augmentation(render_sample(random_spec(seed)), angle, flip)
    assert set(np.unique(s.mask_gt)) <= {0.0, 1.0}
    assert_paired(s)


def test_flip_is_involution():
    s = render_sample(random_spec(7))
    twice = apply_augmentation(apply_augmentation(s, 0.0, True), 0.0, True)
    for k in ("original", "gt", "mask_gt"):
        assert np.array_equal(getattr(twice, k), getattr(s, k))


def test_augmentation_draws():
    rng = np.random.default_rng(0)
    draws = [sample_augmentation(rng) for _ in range(10_000)]
    angles = np.array([a for a, _ in draws])
    flips = np.array([f for _, f in draws])
    assert angles.min() >= -10 and angles.max() <= 10
    assert abs(flips.mean() - 0.3) <= 0.02


def test_augment_applies_same_transform():
    s = render_sample(random_spec(11))
    out = augment(s, np.random.default_rng(3))
    assert out.original.shape == s.original.shape
    assert_paired(out)


def test_build_dataset_empty(tmp_path):
    m = build_dataset(0, tmp_path / "d")
    assert m["samples"] == []
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["manifest.json"]


def test_build_dataset_layout_and_reproducibility(tmp_path):
    m = build_dataset(6, tmp_path / "a", seed=9)
    build_dataset(6, tmp_path / "b", seed=9)
    build_dataset(6, tmp_path / "c", seed=10)
    assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")
    assert manifest_hash(tmp_path / "a") != manifest_hash(tmp_path / "c")
    for sub in ("original", "gt", "mask"):
        assert len(list((tmp_path / "a" / sub).glob("*.png"))) == 6
        for f in (tmp_path / "a" / sub).glob("*.png"):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    on_disk = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert on_disk == m
    assert all({"id", "seed", "boxes"} <= set(s) for s in m["samples"])
    loaded = load_dataset(tmp_path / "a")
    assert [s.id for s in loaded] == [s["id"] for s in m["samples"]]
    for sample, meta in zip(loaded, m["samples"]):
        assert_paired(sample)
        assert sample.mask_gt.sum() == sum(w * h for _, _, w, h in meta["boxes"])


def test_build_dataset_200_under_a_minute(tmp_path):
    t = time.perf_counter()
    build_dataset(200, tmp_path / "d", seed=0)
    assert time.perf_counter() - t < 60
