from __future__ import annotations

import numpy as np
import pytest

from provgrad.autodiff import Tensor, mul, stack
from provgrad.datasets import ToyImageSpec, generate_image_dataset
from provgrad.evaluation import (
    EvaluationError,
    accuracy,
    best_box_iou,
    box_from_mask,
    box_iou,
    box_localization_accuracy,
    evaluate_model,
    gradient_mass_in_target,
    group_accuracies,
    mean_gradient_mass,
    saliency_map,
    worst_group_accuracy,
)


def noiseless_ds(n=8, rho=1.0):
    spec = ToyImageSpec(
        image_size=12, patch_size=4, num_train=n, rho_train=rho, noise_sigma=0.0
    )
    return spec, generate_image_dataset(spec, "train", np.random.default_rng(0))


class LevelMatchModel:
    """Logit c sums the pixels sitting exactly at patch level c.

    On a noiseless dataset its gradient for the true class is exactly the
    patch indicator, making every localization quantity predictable.
    """

    def __init__(self, levels, invert=False):
        self.levels = tuple(levels)
        self.invert = invert

    def forward(self, x):
        arr = x.numpy() if isinstance(x, Tensor) else np.asarray(x)
        logits = []
        for level in self.levels:
            sel = (np.abs(arr - level) < 1e-9).astype(float)
            if self.invert:
                sel = 1.0 - sel
            logits.append(mul(x, Tensor(sel)).sum())
        return stack(logits)


class ConstantModel:
    def forward(self, x):
        return Tensor([1.0, 0.0])


def test_box_iou_hand_example():
    assert box_iou((0, 0, 3, 3), (1, 1, 4, 4)) == pytest.approx(9 / 23)
    assert box_iou((0, 0, 3, 3), (0, 0, 3, 3)) == 1.0
    assert box_iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
    with pytest.raises(EvaluationError, match="degenerate"):
        box_iou((2, 2, 1, 1), (0, 0, 1, 1))


def test_box_from_mask():
    m = np.zeros((6, 6))
    m[2:5, 1:3] = 1
    assert box_from_mask(m) == (2, 1, 4, 2)
    with pytest.raises(EvaluationError, match="empty"):
        box_from_mask(np.zeros((3, 3)))


def test_gradient_mass_cases():
    sal = np.zeros((4, 4))
    mask = np.zeros((4, 4))
    mask[0, 0] = 1
    assert gradient_mass_in_target(sal, mask) == 0.0
    sal[0, 0] = 2.0
    assert gradient_mass_in_target(sal, mask) == 1.0
    sal[3, 3] = 2.0
    assert gradient_mass_in_target(sal, mask) == 0.5
    with pytest.raises(EvaluationError, match="align"):
        gradient_mass_in_target(np.zeros((2, 2)), np.zeros((3, 3)))


def test_uniform_saliency_boxes_the_whole_image():
    sal = np.ones((12, 12))
    truth = (4, 4, 7, 7)  # 4x4 patch
    assert best_box_iou(sal, truth) == pytest.approx(16 / 144)


def test_clean_blob_is_recovered_exactly():
    sal = np.zeros((10, 10))
    sal[2:6, 3:7] = 5.0
    assert best_box_iou(sal, (2, 3, 5, 6)) == 1.0


def test_saliency_of_level_match_model_is_patch_indicator():
    spec, ds = noiseless_ds()
    model = LevelMatchModel(spec.resolved_patch_levels())
    sal = saliency_map(model, ds.image(0), ds.label(0))
    np.testing.assert_array_equal(sal, ds.masks[0].astype(float))


def test_perfect_localization_and_mass_for_patch_model():
    spec, ds = noiseless_ds()
    model = LevelMatchModel(spec.resolved_patch_levels())
    out = box_localization_accuracy(model, ds)
    assert out["box_loc_30"] == out["box_loc_50"] == out["box_loc_70"] == 1.0
    assert out["box_loc_mean"] == 1.0
    assert mean_gradient_mass(model, ds) == 1.0


def test_background_model_localizes_nothing():
    spec, ds = noiseless_ds()
    model = LevelMatchModel(spec.resolved_patch_levels(), invert=True)
    out = box_localization_accuracy(model, ds)
    # the complement's box is the whole image: IoU 16/144, under every delta
    assert out["box_loc_30"] == out["box_loc_50"] == out["box_loc_70"] == 0.0
    assert mean_gradient_mass(model, ds) == 0.0


def test_accuracy_and_groups_for_patch_model():
    spec, ds = noiseless_ds()
    model = LevelMatchModel(spec.resolved_patch_levels())
    assert accuracy(model, ds) == 1.0
    assert worst_group_accuracy(model, ds) == 1.0
    # rho = 1 leaves only the two aligned (class, background) groups
    assert sorted(group_accuracies(model, ds)) == [0, 3]


def test_constant_model_has_zero_worst_group():
    spec, ds = noiseless_ds()
    model = ConstantModel()
    assert accuracy(model, ds) == 0.5
    assert worst_group_accuracy(model, ds) == 0.0


def test_limit_keeps_a_prefix():
    spec, ds = noiseless_ds(n=8)
    model = ConstantModel()
    # classes alternate, so any even prefix is balanced
    assert accuracy(model, ds, limit=4) == 0.5
    with pytest.raises(EvaluationError, match="empty"):
        accuracy(model, ds, limit=0)


def test_evaluate_model_bundle_keys():
    spec, ds = noiseless_ds(n=4)
    model = LevelMatchModel(spec.resolved_patch_levels())
    basic = evaluate_model(model, ds)
    assert set(basic) == {"accuracy", "worst_group_accuracy"}
    full = evaluate_model(model, ds, include_box=True)
    assert {"box_loc_30", "box_loc_50", "box_loc_70", "box_loc_mean", "gradient_mass"} <= set(full)


def test_grad_mass_model_wrapper():
    from provgrad.evaluation import grad_mass_in_target

    spec, ds = noiseless_ds(n=2)
    model = LevelMatchModel(spec.resolved_patch_levels())
    # gradient supported entirely inside the target
    assert grad_mass_in_target(model, ds.image(0), ds.label(0), ds.masks[0]) == 1.0
    # uniform gradient over a target covering a quarter of the pixels
    class UniformModel:
        def forward(self, x):
            return stack([x.sum(), mul(x, Tensor(np.zeros(x.shape))).sum()])

    quarter = np.zeros((12, 12))
    quarter[:6, :6] = 1
    assert grad_mass_in_target(UniformModel(), ds.image(0), 0, quarter) == pytest.approx(0.25)
    with pytest.raises(EvaluationError, match="empty"):
        grad_mass_in_target(model, ds.image(0), 0, np.zeros((12, 12)))


def test_grad_mass_invariant_to_output_rescaling():
    from provgrad.evaluation import grad_mass_in_target

    spec, ds = noiseless_ds(n=2)

    class Scaled:
        def __init__(self, c):
            self.c = c
            self.inner = LevelMatchModel(spec.resolved_patch_levels())

        def forward(self, x):
            return mul(self.inner.forward(x), Tensor(self.c))

    m = np.zeros((12, 12))
    m[0:3, 0:3] = 1
    a = grad_mass_in_target(Scaled(1.0), ds.image(0), ds.label(0), ds.masks[0])
    b = grad_mass_in_target(Scaled(37.5), ds.image(0), ds.label(0), ds.masks[0])
    assert a == pytest.approx(b, rel=1e-12)


def test_saliency_class_out_of_range():
    spec, ds = noiseless_ds(n=2)
    model = LevelMatchModel(spec.resolved_patch_levels())
    with pytest.raises(EvaluationError, match="out of range"):
        saliency_map(model, ds.image(0), 7)
