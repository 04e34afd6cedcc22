from __future__ import annotations

import numpy as np
import pytest

from provgrad.datasets import (
    DatasetError,
    ImageDataset,
    ToyImageSpec,
    ToySkeletonSpec,
    generate_image_dataset,
    generate_image_split,
    generate_skeleton_dataset,
    read_dataset,
    write_dataset,
)


def small_spec(**kw) -> ToyImageSpec:
    base = dict(image_size=12, patch_size=4, num_train=64, num_test=64)
    base.update(kw)
    return ToyImageSpec(**base)


def test_generation_is_seed_deterministic():
    spec = small_spec()
    a = generate_image_dataset(spec, "train", np.random.default_rng(5))
    b = generate_image_dataset(spec, "train", np.random.default_rng(5))
    c = generate_image_dataset(spec, "train", np.random.default_rng(6))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.masks, b.masks)
    np.testing.assert_array_equal(a.groups, b.groups)
    assert not np.array_equal(a.images, c.images)


def test_shapes_dtypes_and_balance():
    ds = generate_image_dataset(small_spec(), "train", np.random.default_rng(0))
    assert ds.images.shape == (64, 12, 12, 1)
    assert ds.images.dtype == np.float64
    assert ds.labels.dtype == np.uint16 and ds.masks.dtype == np.uint8
    counts = np.bincount(ds.labels, minlength=2)
    assert counts[0] == counts[1] == 32


def test_background_correlation_extremes():
    spec = small_spec(rho_train=1.0, rho_test=0.0, num_test=128)
    train = generate_image_dataset(spec, "train", np.random.default_rng(1))
    # rho = 1: background class always equals the label
    np.testing.assert_array_equal(train.groups, train.labels * 2 + train.labels)
    test = generate_image_dataset(spec, "test", np.random.default_rng(2))
    bg = test.groups - test.labels * 2
    match = (bg == test.labels).mean()
    assert 0.3 < match < 0.7  # uniform background agrees about half the time


def test_noiseless_pixel_values_are_exact():
    spec = small_spec(noise_sigma=0.0, num_train=8)
    ds = generate_image_dataset(spec, "train", np.random.default_rng(3))
    patch = spec.resolved_patch_levels()
    background = spec.resolved_background_levels()
    for i in range(len(ds)):
        cls = ds.label(i)
        bg = int(ds.groups[i]) - cls * 2
        inside = ds.masks[i].astype(bool)
        assert inside.sum() == 16
        img = ds.images[i, :, :, 0]
        assert (img[inside] == patch[cls]).all()
        assert (img[~inside] == background[bg]).all()
        rows, cols = np.nonzero(inside)
        assert rows.max() - rows.min() + 1 == 4
        assert cols.max() - cols.min() + 1 == 4


def _lstsq_accuracy(feature: np.ndarray, labels: np.ndarray) -> float:
    x = np.stack([feature, np.ones_like(feature)], axis=1)
    target = 2.0 * labels - 1.0
    w, *_ = np.linalg.lstsq(x, target, rcond=None)
    return float(((x @ w > 0).astype(int) == labels).mean())


def test_both_cues_are_individually_sufficient_at_full_correlation():
    ds = generate_image_dataset(
        small_spec(num_train=256), "train", np.random.default_rng(4)
    )
    inside = ds.masks.astype(bool)
    img = ds.images[:, :, :, 0]
    patch_mean = np.array([img[i][inside[i]].mean() for i in range(len(ds))])
    bg_mean = np.array([img[i][~inside[i]].mean() for i in range(len(ds))])
    labels = ds.labels.astype(int)
    assert _lstsq_accuracy(patch_mean, labels) >= 0.95
    assert _lstsq_accuracy(bg_mean, labels) >= 0.95


def test_background_cue_fails_on_uncorrelated_split():
    spec = small_spec(num_test=256, rho_test=0.0)
    ds = generate_image_dataset(spec, "test", np.random.default_rng(7))
    inside = ds.masks.astype(bool)
    img = ds.images[:, :, :, 0]
    bg_mean = np.array([img[i][~inside[i]].mean() for i in range(len(ds))])
    assert _lstsq_accuracy(bg_mean, ds.labels.astype(int)) < 0.7


def test_target_mask_is_binary_with_edit_role():
    ds = generate_image_dataset(small_spec(num_train=4), "train", np.random.default_rng(8))
    m = ds.target_mask(0)
    assert m.role == "edit_target"
    assert set(np.unique(m.values)) == {0.0, 1.0}
    assert m.area() == 16


def test_round_trip_is_bit_exact(tmp_path):
    path = str(tmp_path / "toy.bin")
    ds = generate_image_dataset(
        small_spec(channels=2, num_train=16), "train", np.random.default_rng(9)
    )
    write_dataset(path, ds)
    back = read_dataset(path)
    assert back.num_classes == ds.num_classes
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.masks, ds.masks)
    np.testing.assert_array_equal(back.groups, ds.groups)


def test_file_format_errors(tmp_path):
    path = str(tmp_path / "junk.bin")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\x00" * 24)
    with pytest.raises(DatasetError, match="magic"):
        read_dataset(path)
    with open(path, "wb") as fh:
        fh.write(b"\x01")
    with pytest.raises(DatasetError, match="short"):
        read_dataset(path)
    good = str(tmp_path / "good.bin")
    ds = generate_image_dataset(small_spec(num_train=2), "train", np.random.default_rng(10))
    write_dataset(good, ds)
    with open(good, "ab") as fh:
        fh.write(b"\x00")
    with pytest.raises(DatasetError, match="bytes"):
        read_dataset(good)


def test_spec_validation():
    with pytest.raises(DatasetError, match="patch_size"):
        ToyImageSpec(image_size=8, patch_size=9)
    with pytest.raises(DatasetError, match="rho_train"):
        ToyImageSpec(rho_train=1.5)
    with pytest.raises(DatasetError, match="patch_levels"):
        ToyImageSpec(num_classes=3, patch_levels=(0.1, 0.9))
    with pytest.raises(DatasetError, match="split"):
        generate_image_dataset(small_spec(), "val", np.random.default_rng(0))


def test_dataset_container_validation():
    ds = generate_image_dataset(small_spec(num_train=4), "train", np.random.default_rng(11))
    with pytest.raises(DatasetError, match="group ids"):
        ImageDataset(ds.images, ds.labels, ds.masks, np.zeros(4, dtype=np.uint8) + 3, 2)


def test_skeleton_generation_deterministic_with_recorded_actor():
    spec = ToySkeletonSpec(num_train=32)
    a = generate_skeleton_dataset(spec, "train", np.random.default_rng(12))
    b = generate_skeleton_dataset(spec, "train", np.random.default_rng(12))
    np.testing.assert_array_equal(a.feats, b.feats)
    np.testing.assert_array_equal(a.actors, b.actors)
    assert a.feats.shape == (32, 6, 8, 2)
    assert a.actors.max() < 6
    counts = np.bincount(a.labels, minlength=2)
    assert counts[0] == counts[1] == 16
    assert np.isfinite(a.feats).all()


def test_skeleton_actor_carries_the_class_signal():
    # with no observation noise the actor track is a pure unit sinusoid
    spec = ToySkeletonSpec(num_train=16, noise_sigma=0.0)
    ds = generate_skeleton_dataset(spec, "train", np.random.default_rng(13))
    for i in range(len(ds)):
        track = ds.feats[i, ds.actors[i]]
        assert np.abs(track).max() <= 1.0 + 1e-12
