"""Provenance-guided input-gradient training on synthetic toy data.

The package splits into six pieces: a reverse-mode tape (`autodiff`) strong
enough for double backprop, synthesis operators that carry exact provenance
masks (`synthesis`), the gradient penalties built on those masks
(`guidance`), synthetic image and skeleton generators (`datasets`), small
models plus checkpointing (`models`), attribution and group metrics
(`evaluation`), the training loop (`training`), the sweep runner
(`ablation`), and the command-line front end (`cli`).

The names most scripts want are re-exported here; anything deeper lives in
its module.
"""

from .autodiff import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    cross_entropy_hard,
    cross_entropy_soft,
    finite_difference,
    grad,
    no_grad,
)
from .datasets import (
    DatasetError,
    ImageDataset,
    SkeletonDataset,
    ToyImageSpec,
    ToySkeletonSpec,
    generate_image_dataset,
    generate_skeleton_dataset,
    read_dataset,
    write_dataset,
)
from .evaluation import (
    EvaluationError,
    box_localization_accuracy,
    evaluate_model,
    grad_mass_in_target,
    group_accuracies,
    mean_gradient_mass,
    saliency_map,
    worst_group_accuracy,
)
from .guidance import (
    GuidanceConfig,
    GuidanceError,
    control_mask,
    input_gradient,
    provenance_loss_hard,
    provenance_loss_soft,
    total_loss,
    unmasked_soft_loss,
)
from .models import (
    ModelError,
    SkeletonModel,
    ToyModel,
    checkpoint_exists,
    load_checkpoint,
    save_checkpoint,
)
from .synthesis import (
    ProvenanceMask,
    SyntheticSample,
    SynthesisError,
    cutmix,
    diff_mask,
    otsu_threshold,
    perturb_mask,
    simulated_edit,
    skeleton_feature_mix,
)
from .training import TrainConfig, TrainResult, TrainingError, substream, train
from .ablation import AblationError, AblationReport, build_plan, config_hash, run_ablation_suite

__version__ = "0.1.0"

__all__ = [
    "AblationError",
    "AblationReport",
    "DatasetError",
    "EvaluationError",
    "GuidanceConfig",
    "GuidanceError",
    "ImageDataset",
    "ModelError",
    "NonFiniteError",
    "ProvenanceMask",
    "ShapeError",
    "SkeletonDataset",
    "SkeletonModel",
    "SyntheticSample",
    "SynthesisError",
    "Tape",
    "TapeError",
    "Tensor",
    "ToyImageSpec",
    "ToyModel",
    "ToySkeletonSpec",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "box_localization_accuracy",
    "build_plan",
    "checkpoint_exists",
    "config_hash",
    "control_mask",
    "cross_entropy_hard",
    "cross_entropy_soft",
    "cutmix",
    "diff_mask",
    "evaluate_model",
    "finite_difference",
    "generate_image_dataset",
    "generate_skeleton_dataset",
    "grad",
    "grad_mass_in_target",
    "group_accuracies",
    "input_gradient",
    "load_checkpoint",
    "mean_gradient_mass",
    "no_grad",
    "otsu_threshold",
    "perturb_mask",
    "provenance_loss_hard",
    "provenance_loss_soft",
    "read_dataset",
    "run_ablation_suite",
    "saliency_map",
    "save_checkpoint",
    "simulated_edit",
    "skeleton_feature_mix",
    "substream",
    "total_loss",
    "train",
    "unmasked_soft_loss",
    "worst_group_accuracy",
    "write_dataset",
    "__version__",
]
