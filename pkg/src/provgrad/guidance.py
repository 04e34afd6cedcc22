"""Input-gradient penalties steered by provenance masks.

The training loss is  L = L_cls + alpha * L_penalty,  where the penalty
pushes the model's input gradients toward zero on regions a mask says the
relevant source did not contribute.  For mixed samples with two soft-labeled
sources the penalty is a single squared norm of the two masked gradients
added together; for edited samples with a hard label it is the squared norm
of the true-class gradient outside the untouched region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, as_tensor, grad, mul, square
from .synthesis import ProvenanceMask, SynthesisError

__all__ = [
    "GuidanceConfig",
    "GuidanceError",
    "LABEL_MODES",
    "MASK_MODES",
    "input_gradient",
    "provenance_loss_soft",
    "provenance_loss_hard",
    "unmasked_soft_loss",
    "total_loss",
    "control_mask",
]

LABEL_MODES = ("soft_pair", "hard")
MASK_MODES = ("provenance", "random", "unmasked")


class GuidanceError(ValueError):
    """Invalid guidance configuration or inputs."""


@dataclass(frozen=True)
class GuidanceConfig:
    """How the penalty is assembled during training.

    alpha scales the penalty against the classification loss.  label_mode
    picks the penalty form (soft_pair for mixing, hard for edits).
    mask_mode substitutes control masks for the true provenance: "random"
    swaps in a fair coin-flip mask, "unmasked" penalizes everywhere.
    """

    alpha: float
    label_mode: str = "soft_pair"
    mask_mode: str = "provenance"

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise GuidanceError(f"alpha must be a finite non-negative number, got {self.alpha}")
        if self.label_mode not in LABEL_MODES:
            raise GuidanceError(f"label_mode {self.label_mode!r} not in {LABEL_MODES}")
        if self.mask_mode not in MASK_MODES:
            raise GuidanceError(f"mask_mode {self.mask_mode!r} not in {MASK_MODES}")


def input_gradient(model, x_tilde: Tensor, class_index: int, create_graph: bool = False) -> Tensor:
    """Gradient of one logit w.r.t. the model input.

    Runs the model forward and differentiates the selected pre-softmax
    logit.  Must be called inside an active Tape with ``x_tilde`` requiring
    grad; with ``create_graph=True`` the result can appear inside a loss and
    be differentiated again.
    """
    logits = model.forward(x_tilde)
    n = logits.shape[0]
    idx = int(class_index)
    if not 0 <= idx < n:
        raise GuidanceError(f"class index {class_index} out of range for {n} logits")
    (g,) = grad(logits[idx], [x_tilde], create_graph=create_graph)
    return g


def _mask_planes(mask, grad_shape) -> np.ndarray:
    values = mask.values if isinstance(mask, ProvenanceMask) else np.asarray(mask, dtype=np.float64)
    if values.shape == grad_shape:
        return values
    if values.shape == grad_shape[:-1]:  # broadcast across the channel axis
        return np.ascontiguousarray(np.broadcast_to(values[..., None], grad_shape))
    raise GuidanceError(f"mask shape {values.shape} does not align with gradient shape {grad_shape}")


def provenance_loss_soft(grad_a: Tensor, grad_b: Tensor, mask) -> Tensor:
    """Squared norm of (1 - M) * grad_a + M * grad_b.

    M marks elements that came from source A, so grad_a is penalized exactly
    where A contributed nothing, and vice versa.  One norm over the sum: the
    two terms live on disjoint supports, so nothing cancels.
    """
    ga, gb = as_tensor(grad_a), as_tensor(grad_b)
    if ga.shape != gb.shape:
        raise GuidanceError(f"gradient shapes differ: {ga.shape} vs {gb.shape}")
    m = _mask_planes(mask, ga.shape)
    combined = add(mul(Tensor(1.0 - m), ga), mul(Tensor(m), gb))
    return square(combined).sum()


def provenance_loss_hard(grad_y: Tensor, mask) -> Tensor:
    """Squared norm of (1 - M) * grad_y: penalize the true-class gradient
    wherever the mask says the pixel was rewritten."""
    gy = as_tensor(grad_y)
    m = _mask_planes(mask, gy.shape)
    return square(mul(Tensor(1.0 - m), gy)).sum()


def unmasked_soft_loss(grad_a: Tensor, grad_b: Tensor) -> Tensor:
    """The "no mask" control for mixed samples: both class gradients are
    penalized over the whole input."""
    ga, gb = as_tensor(grad_a), as_tensor(grad_b)
    if ga.shape != gb.shape:
        raise GuidanceError(f"gradient shapes differ: {ga.shape} vs {gb.shape}")
    return add(square(ga).sum(), square(gb).sum())


def total_loss(cls_loss: Tensor, penalty: Tensor, alpha: float) -> Tensor:
    """cls_loss + alpha * penalty, both scalars."""
    cls_loss, penalty = as_tensor(cls_loss), as_tensor(penalty)
    if cls_loss.shape != () or penalty.shape != ():
        raise GuidanceError(
            f"loss terms must be scalars, got shapes {cls_loss.shape} and {penalty.shape}"
        )
    a = float(alpha)
    if not np.isfinite(a) or a < 0:
        raise GuidanceError(f"alpha must be a finite non-negative number, got {alpha}")
    if a == 0.0:
        return cls_loss
    return add(cls_loss, mul(a, penalty))


def control_mask(shape, mode: str, rng: np.random.Generator | None = None, role: str = "mix_origin") -> ProvenanceMask:
    """Substitute mask for ablations.

    "random" flips a fair coin per element; "unmasked" returns all zeros,
    which routes the full input through the penalty (for the soft path the
    caller should use :func:`unmasked_soft_loss` instead, since a single
    all-zeros mask would penalize only one of the two gradients).
    """
    if mode == "random":
        if rng is None:
            raise GuidanceError("random control mask needs an rng")
        values = (rng.random(shape) < 0.5).astype(np.float64)
        return ProvenanceMask(values, role)
    if mode == "unmasked":
        return ProvenanceMask(np.zeros(shape), role)
    raise GuidanceError(f"control_mask mode must be 'random' or 'unmasked', got {mode!r}")
