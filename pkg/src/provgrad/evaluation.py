"""Evaluation protocols: accuracy, robustness and saliency localization.

Saliency here is the channel-summed absolute input gradient of one logit.
Localization follows a threshold sweep: binarize the saliency map at twenty
evenly spaced quantiles, take the tightest box around each superlevel set,
and score the best box against the ground-truth patch box by IoU.
"""

from __future__ import annotations

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import Tape, Tensor, grad
from .datasets import ImageDataset


class EvaluationError(ValueError):
    pass


NUM_THRESHOLDS = 20
DEFAULT_DELTAS = (0.3, 0.5, 0.7)


def predict(model, image) -> int:
    logits = model.forward(image).numpy()
    return int(np.argmax(logits))


def accuracy(model, ds: ImageDataset, limit: Optional[int] = None) -> float:
    n = len(ds) if limit is None else min(limit, len(ds))
    if n == 0:
        raise EvaluationError("cannot score an empty dataset")
    hits = sum(predict(model, ds.image(i)) == ds.label(i) for i in range(n))
    return hits / n


def group_accuracies(model, ds: ImageDataset, limit: Optional[int] = None) -> Dict[int, float]:
    n = len(ds) if limit is None else min(limit, len(ds))
    if n == 0:
        raise EvaluationError("cannot score an empty dataset")
    hits: Dict[int, int] = {}
    totals: Dict[int, int] = {}
    for i in range(n):
        g = int(ds.groups[i])
        totals[g] = totals.get(g, 0) + 1
        if predict(model, ds.image(i)) == ds.label(i):
            hits[g] = hits.get(g, 0) + 1
    return {g: hits.get(g, 0) / totals[g] for g in sorted(totals)}


def worst_group_accuracy(model, ds: ImageDataset, limit: Optional[int] = None) -> float:
    """Minimum per-group accuracy over the (class, background) groups present."""
    return min(group_accuracies(model, ds, limit=limit).values())


def saliency_map(model, image, class_index: int) -> np.ndarray:
    """Channel-summed absolute gradient of one logit, shape (H, W)."""
    with Tape():
        x = Tensor(image, requires_grad=True)
        logits = model.forward(x)
        k = logits.shape[0]
        if not 0 <= class_index < k:
            raise EvaluationError(f"class index {class_index} out of range for {k} logits")
        (g,) = grad(logits[class_index], [x])
    sal = np.abs(g.numpy())
    if sal.ndim == 3:
        sal = sal.sum(axis=2)
    return sal


def gradient_mass_in_target(saliency: np.ndarray, mask) -> float:
    """Fraction of total saliency that falls inside the target region.

    A model with zero gradient everywhere has no mass to place; that counts
    as 0 (with a logged warning), not as an error.
    """
    values = getattr(mask, "values", mask)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != saliency.shape:
        raise EvaluationError(
            f"mask shape {values.shape} does not align with saliency {saliency.shape}"
        )
    total = float(saliency.sum())
    if total == 0.0:
        logging.getLogger(__name__).warning("saliency is zero everywhere; mass ratio set to 0")
        return 0.0
    return float((saliency * values).sum()) / total


def grad_mass_in_target(model, x, class_index: int, target_mask) -> float:
    """Saliency fraction inside a nonempty target region, in [0, 1].

    The ratio of absolute gradient masses is invariant to positive rescaling
    of the model's output layer.
    """
    values = np.asarray(getattr(target_mask, "values", target_mask), dtype=np.float64)
    if not values.any():
        raise EvaluationError("target mask is empty")
    return gradient_mass_in_target(saliency_map(model, x, class_index), values)


# -------------------------------------------------------------------- boxes


def box_from_mask(mask) -> Tuple[int, int, int, int]:
    """Tightest (r0, c0, r1, c1) box with inclusive corners."""
    values = np.asarray(getattr(mask, "values", mask))
    rows, cols = np.nonzero(values)
    if rows.size == 0:
        raise EvaluationError("cannot box an empty mask")
    return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())


def box_iou(a: Tuple[int, int, int, int], b: Tuple[int, int, int, int]) -> float:
    """IoU of two inclusive-coordinate boxes."""

    def area(box):
        r0, c0, r1, c1 = box
        if r1 < r0 or c1 < c0:
            raise EvaluationError(f"degenerate box {box}")
        return (r1 - r0 + 1) * (c1 - c0 + 1)

    ir0, ic0 = max(a[0], b[0]), max(a[1], b[1])
    ir1, ic1 = min(a[2], b[2]), min(a[3], b[3])
    inter = 0
    if ir0 <= ir1 and ic0 <= ic1:
        inter = (ir1 - ir0 + 1) * (ic1 - ic0 + 1)
    union = area(a) + area(b) - inter
    return inter / union


def best_box_iou(saliency: np.ndarray, truth_box: Tuple[int, int, int, int]) -> float:
    """Best IoU over the quantile threshold sweep of one saliency map."""
    if saliency.ndim != 2:
        raise EvaluationError(f"saliency must be 2-d, got shape {saliency.shape}")
    best = 0.0
    for k in range(1, NUM_THRESHOLDS + 1):
        t = np.quantile(saliency, k / (NUM_THRESHOLDS + 1))
        region = saliency >= t
        if not region.any():
            continue
        best = max(best, box_iou(box_from_mask(region), truth_box))
    return best


def box_localization_accuracy(
    model,
    ds: ImageDataset,
    deltas: Tuple[float, ...] = DEFAULT_DELTAS,
    limit: Optional[int] = None,
) -> Dict[str, float]:
    """Fraction of samples whose best saliency box reaches IoU >= delta.

    Saliency is taken for the true class.  ``limit`` keeps the first n
    samples, which the generators interleave by class, so a truncated sweep
    stays balanced and deterministic.
    """
    n = len(ds) if limit is None else min(limit, len(ds))
    if n == 0:
        raise EvaluationError("cannot score an empty dataset")
    ious = np.empty(n)
    for i in range(n):
        sal = saliency_map(model, ds.image(i), ds.label(i))
        ious[i] = best_box_iou(sal, box_from_mask(ds.masks[i]))
    out = {}
    for d in deltas:
        out[f"box_loc_{int(round(d * 100))}"] = float((ious >= d).mean())
    out["box_loc_mean"] = float(np.mean([out[f"box_loc_{int(round(d * 100))}"] for d in deltas]))
    return out


def mean_gradient_mass(model, ds: ImageDataset, limit: Optional[int] = None) -> float:
    """Average over samples of the saliency fraction inside the true patch."""
    n = len(ds) if limit is None else min(limit, len(ds))
    if n == 0:
        raise EvaluationError("cannot score an empty dataset")
    vals = [
        gradient_mass_in_target(
            saliency_map(model, ds.image(i), ds.label(i)), ds.masks[i].astype(np.float64)
        )
        for i in range(n)
    ]
    return float(np.mean(vals))


def evaluate_model(
    model,
    ds: ImageDataset,
    include_box: bool = False,
    limit: Optional[int] = None,
) -> Dict[str, float]:
    out = {
        "accuracy": accuracy(model, ds, limit=limit),
        "worst_group_accuracy": worst_group_accuracy(model, ds, limit=limit),
    }
    if include_box:
        out.update(box_localization_accuracy(model, ds, limit=limit))
        out["gradient_mass"] = mean_gradient_mass(model, ds, limit=limit)
    return out
