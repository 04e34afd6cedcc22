"""Training loop: per-batch synthesis, penalty terms via double backprop, SGD.

Every source of randomness derives from one root seed through named
sub-streams, so the pieces can vary independently: changing how masks are
drawn cannot move the dataset, and a run with mixing probability 0 consumes
its mixing stream without disturbing the shuffle stream, which is what makes
it coincide with plain empirical-risk training bit for bit.  The dataset and
edit streams key off ``data_seed`` when it is set (falling back to the run
seed), so one sampled world can host many runs that differ only in training
stochasticity.

Wall-clock timings are kept beside the metrics rows, never inside them; the
rows must be bit-identical across repeated runs of one (seed, config) pair.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, cross_entropy_hard, cross_entropy_soft, grad, stack
from .datasets import (
    ImageDataset,
    SkeletonDataset,
    ToyImageSpec,
    ToySkeletonSpec,
    generate_image_dataset,
    generate_skeleton_dataset,
)
from .evaluation import (
    accuracy,
    box_localization_accuracy,
    mean_gradient_mass,
    worst_group_accuracy,
)
from .guidance import (
    MASK_MODES,
    control_mask,
    provenance_loss_hard,
    provenance_loss_soft,
    total_loss,
    unmasked_soft_loss,
)
from .models import SkeletonModel, ToyModel, load_checkpoint
from .synthesis import cutmix, diff_mask, perturb_mask, simulated_edit, skeleton_feature_mix


class TrainingError(RuntimeError):
    pass


SYNTHESIS_MODES = ("cutmix", "skeleton_mix", "simulated_edit")
PERTURB_MODES = ("none", "dilate", "erode")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named role under a single root seed."""
    key = zlib.crc32(name.encode("ascii"))
    return np.random.default_rng(np.random.SeedSequence(root_seed, spawn_key=(key,)))


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "mlp"
    epochs: int = 5
    batch_size: int = 16
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    alpha: float = 0.0
    penalty_warmup_epochs: int = 0
    synthesis: str = "cutmix"
    mix_probability: float = 0.5
    mask_mode: str = "provenance"
    mask_perturb: str = "none"
    mask_perturb_delta: float = 0.0
    edit_amplitude: float = 0.8
    skeleton_mix_parts: int = 3
    hidden: int = 24
    conv_filters: int = 4
    init_scale: float = 1.0
    init_from: Optional[str] = None
    seed: int = 0
    data_seed: Optional[int] = None
    eval_limit: Optional[int] = None
    box_eval_limit: int = 64
    track_box_metrics: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise TrainingError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be at least 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainingError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise TrainingError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise TrainingError(f"alpha must be finite and nonnegative, got {self.alpha}")
        if not 0 <= self.penalty_warmup_epochs < self.epochs:
            raise TrainingError(
                f"penalty_warmup_epochs must lie in [0, epochs), got "
                f"{self.penalty_warmup_epochs} with {self.epochs} epochs"
            )
        if self.synthesis not in SYNTHESIS_MODES:
            raise TrainingError(f"synthesis must be one of {SYNTHESIS_MODES}, got {self.synthesis!r}")
        if not 0.0 <= self.mix_probability <= 1.0:
            raise TrainingError(f"mix_probability must be in [0, 1], got {self.mix_probability}")
        if self.mask_mode not in MASK_MODES:
            raise TrainingError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.mask_perturb not in PERTURB_MODES:
            raise TrainingError(f"mask_perturb must be one of {PERTURB_MODES}, got {self.mask_perturb!r}")
        if self.mask_perturb != "none":
            if self.synthesis != "simulated_edit":
                raise TrainingError("mask_perturb applies only to the simulated_edit path")
            if not 0.0 < self.mask_perturb_delta < 1.0:
                raise TrainingError(
                    f"mask_perturb_delta must be in (0, 1), got {self.mask_perturb_delta}"
                )
        elif self.mask_perturb_delta != 0.0:
            raise TrainingError("mask_perturb_delta requires mask_perturb to be set")
        if not 0.0 < self.edit_amplitude <= 1.0:
            raise TrainingError(f"edit_amplitude must be in (0, 1], got {self.edit_amplitude}")
        if self.skeleton_mix_parts < 1:
            raise TrainingError(f"skeleton_mix_parts must be positive, got {self.skeleton_mix_parts}")
        if not (np.isfinite(self.init_scale) and self.init_scale > 0):
            raise TrainingError(f"init_scale must be positive and finite, got {self.init_scale}")
        if self.init_from is not None and not str(self.init_from).strip():
            raise TrainingError("init_from must name a checkpoint prefix when set")

    @property
    def resolved_data_seed(self) -> int:
        """Seed for the dataset and edit streams.

        Defaults to the run seed; set ``data_seed`` to hold the sampled world
        fixed while the run seed varies init, shuffling, pairing and control
        masks (one benchmark, many training runs).
        """
        return self.seed if self.data_seed is None else self.data_seed


@dataclass
class TrainResult:
    model: object
    metrics: List[Dict[str, float]]
    timings: List[float]
    best_epoch: int
    config: TrainConfig

    def summary(self) -> dict:
        return {
            "epochs": len(self.metrics),
            "best_epoch": self.best_epoch,
            "best": dict(self.metrics[self.best_epoch]),
            "final": dict(self.metrics[-1]),
            "wall_clock_s": float(sum(self.timings)),
            "per_epoch_wall_clock_s": [float(t) for t in self.timings],
            "peak_tape_bytes": max(int(m["peak_tape_bytes"]) for m in self.metrics),
        }


def _onehot(label: int, k: int) -> np.ndarray:
    v = np.zeros(k)
    v[label] = 1.0
    return v


def _sgd_arrays(params, grads, velocity, lr, momentum, weight_decay):
    out = {}
    for name, p in params.items():
        g = grads[name].numpy() + weight_decay * p.numpy()
        v = momentum * velocity[name] + g
        velocity[name] = v
        arr = p.numpy() - lr * v
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"updated parameter {name!r} is non-finite")
        out[name] = arr
    return out


def _best_epoch(metrics: List[Dict[str, float]]) -> int:
    best, best_acc = 0, -1.0
    for i, row in enumerate(metrics):
        if row["test_accuracy"] > best_acc:
            best, best_acc = i, row["test_accuracy"]
    return best


def _soft_penalty(logits, xt, class_a, class_b, prov_mask, mask_mode, mask_rng, spatial_shape):
    (ga,) = grad(logits[class_a], [xt], create_graph=True)
    (gb,) = grad(logits[class_b], [xt], create_graph=True)
    if mask_mode == "unmasked":
        return unmasked_soft_loss(ga, gb)
    if mask_mode == "random":
        mask = control_mask(spatial_shape, "random", mask_rng)
    else:
        mask = prov_mask
    return provenance_loss_soft(ga, gb, mask)


def _hard_penalty(logits, xt, label, prov_mask, mask_mode, mask_rng, spatial_shape):
    (g,) = grad(logits[label], [xt], create_graph=True)
    if mask_mode == "unmasked":
        mask = control_mask(spatial_shape, "unmasked")
    elif mask_mode == "random":
        mask = control_mask(spatial_shape, "random", mask_rng)
    else:
        mask = prov_mask
    return provenance_loss_hard(g, mask)


def train(config: TrainConfig, data_spec) -> TrainResult:
    """Run the full loop and return the trained model plus per-epoch metrics.

    Bit-determinism contract: the metrics rows depend only on (config,
    data_spec); timings are reported separately because they never can.
    """
    if config.synthesis == "skeleton_mix":
        if not isinstance(data_spec, ToySkeletonSpec):
            raise TrainingError("skeleton_mix training needs a skeleton data spec")
        return _train_skeletons(config, data_spec)
    if not isinstance(data_spec, ToyImageSpec):
        raise TrainingError(f"{config.synthesis} training needs an image data spec")
    return _train_images(config, data_spec)


def _resume_image_model(config: TrainConfig, image_shape, num_classes: int) -> ToyModel:
    """Load the checkpoint ``config.init_from`` points at for fine-tuning.

    The checkpoint decides the weights; the config must agree with it on the
    architecture so the run's config echo stays truthful.
    """
    try:
        model = load_checkpoint(config.init_from)
    except FileNotFoundError as exc:
        raise TrainingError(f"init_from checkpoint not found: {config.init_from}") from exc
    if not isinstance(model, ToyModel):
        raise TrainingError("init_from must point at an image model checkpoint")
    if model.arch != config.arch:
        raise TrainingError(
            f"init_from checkpoint has arch {model.arch!r} but the config says {config.arch!r}"
        )
    if model.image_shape != image_shape or model.num_classes != num_classes:
        raise TrainingError(
            f"init_from checkpoint was trained for shape {model.image_shape} with "
            f"{model.num_classes} classes; this run needs {image_shape} with {num_classes}"
        )
    return model


def _train_images(config: TrainConfig, spec: ToyImageSpec) -> TrainResult:
    world_seed = config.resolved_data_seed
    train_ds = generate_image_dataset(spec, "train", substream(world_seed, "dataset_train"))
    test_ds = generate_image_dataset(spec, "test", substream(world_seed, "dataset_test"))
    k = spec.num_classes
    h = w = spec.image_size
    if config.init_from is not None:
        model = _resume_image_model(config, (h, w, spec.channels), k)
    else:
        model = ToyModel(
            config.arch,
            (h, w, spec.channels),
            k,
            hidden=config.hidden,
            conv_filters=config.conv_filters,
            init_scale=config.init_scale,
            rng=substream(config.seed, "init"),
        )
    shuffle_rng = substream(config.seed, "shuffle")
    mix_rng = substream(config.seed, "mix")
    mask_rng = substream(config.seed, "masks")

    edited = None
    recovered = None
    if config.synthesis == "simulated_edit":
        edited, recovered = _precompute_edits(config, train_ds)

    velocity = {name: np.zeros(t.shape) for name, t in model.params.items()}
    metrics: List[Dict[str, float]] = []
    timings: List[float] = []
    n = len(train_ds)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        # the penalty is tracked from the start but only optimized once the
        # warmup epochs are over
        penalized = config.alpha > 0 and epoch >= config.penalty_warmup_epochs
        order = shuffle_rng.permutation(n).tolist()
        cls_sum = 0.0
        pg_sum = 0.0
        pg_count = 0
        num_synth = 0
        num_skipped = 0
        peak_bytes = 0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            stage = "L_cls"
            try:
                with Tape() as tape:
                    cls_terms = []
                    pg_terms = []
                    for j, idx in enumerate(batch):
                        coin = float(mix_rng.random())
                        synthesize = len(batch) > 1 and coin < config.mix_probability
                        label = train_ds.label(idx)
                        if config.synthesis == "cutmix" and synthesize:
                            partner = batch[(j + 1) % len(batch)]
                            sample = cutmix(
                                train_ds.image(idx),
                                _onehot(label, k),
                                train_ds.image(partner),
                                _onehot(train_ds.label(partner), k),
                                mix_rng,
                            )
                            xt = Tensor(sample.x_tilde.numpy(), requires_grad=True)
                            logits = model.forward(xt)
                            cls_terms.append(cross_entropy_soft(logits, sample.y_tilde))
                            num_synth += 1
                            if config.alpha > 0:
                                class_a = sample.masks[0][0]
                                class_b = sample.masks[1][0]
                                if class_a == class_b:
                                    num_skipped += 1
                                else:
                                    stage = "L_PG"
                                    pg_terms.append(
                                        _soft_penalty(
                                            logits,
                                            xt,
                                            class_a,
                                            class_b,
                                            sample.masks[0][1],
                                            config.mask_mode,
                                            mask_rng,
                                            (h, w),
                                        )
                                    )
                                    stage = "L_cls"
                        elif config.synthesis == "simulated_edit" and synthesize:
                            xt = Tensor(edited[idx], requires_grad=True)
                            logits = model.forward(xt)
                            cls_terms.append(cross_entropy_hard(logits, label))
                            num_synth += 1
                            if config.alpha > 0:
                                stage = "L_PG"
                                pg_terms.append(
                                    _hard_penalty(
                                        logits,
                                        xt,
                                        label,
                                        recovered[idx],
                                        config.mask_mode,
                                        mask_rng,
                                        (h, w),
                                    )
                                )
                                stage = "L_cls"
                        else:
                            logits = model.forward(Tensor(train_ds.image(idx)))
                            cls_terms.append(cross_entropy_hard(logits, label))

                    stage = "L_total"
                    l_cls = stack(cls_terms).mean()
                    if pg_terms and penalized:
                        l_pg = stack(pg_terms).mean()
                        batch_total = total_loss(l_cls, l_pg, config.alpha)
                    else:
                        batch_total = l_cls
                    names = sorted(model.params)
                    gs = grad(batch_total, [model.params[name] for name in names])
                cls_sum += sum(float(t.item()) for t in cls_terms)
                pg_sum += sum(float(t.item()) for t in pg_terms)
                pg_count += len(pg_terms)
                peak_bytes = max(peak_bytes, tape.bytes_recorded)
                stage = "parameter update"
                new = _sgd_arrays(
                    model.params,
                    dict(zip(names, gs)),
                    velocity,
                    config.lr,
                    config.momentum,
                    config.weight_decay,
                )
                model.load_state(new)
            except NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite value in {stage} at epoch {epoch}, "
                    f"batch {start // config.batch_size}: {exc}"
                ) from exc

        row: Dict[str, float] = {
            "epoch": float(epoch),
            "l_cls": cls_sum / n,
            "l_pg": pg_sum / pg_count if pg_count else 0.0,
            "num_synthetic": float(num_synth),
            "num_penalized": float(pg_count),
            "num_skipped_same_class": float(num_skipped),
            "peak_tape_bytes": float(peak_bytes),
        }
        # l_total reflects the loss actually descended this epoch: during the
        # penalty warmup the tracked penalty has zero weight
        row["l_total"] = row["l_cls"] + (config.alpha * row["l_pg"] if penalized else 0.0)
        try:
            row["test_accuracy"] = accuracy(model, test_ds, limit=config.eval_limit)
            row["worst_group_accuracy"] = worst_group_accuracy(
                model, test_ds, limit=config.eval_limit
            )
            if config.track_box_metrics:
                row.update(
                    box_localization_accuracy(model, test_ds, limit=config.box_eval_limit)
                )
                row["gradient_mass"] = mean_gradient_mass(
                    model, test_ds, limit=config.box_eval_limit
                )
        except NonFiniteError as exc:
            raise TrainingError(
                f"non-finite value in evaluation at epoch {epoch}: {exc}"
            ) from exc
        metrics.append(row)
        timings.append(time.perf_counter() - t0)

    return TrainResult(model, metrics, timings, _best_epoch(metrics), config)


def _precompute_edits(config: TrainConfig, train_ds: ImageDataset):
    """Edit every training image once up front and recover each edit mask
    from the image difference, optionally perturbing the recovered masks."""
    rng = substream(config.resolved_data_seed, "edits")
    edited = np.empty_like(train_ds.images)
    recovered = []
    for i in range(len(train_ds)):
        xt, _region = simulated_edit(
            train_ds.image(i), train_ds.target_mask(i), rng, amplitude=config.edit_amplitude
        )
        arr = xt.numpy()
        edited[i] = arr
        mask = diff_mask(train_ds.image(i), arr)
        if config.mask_perturb != "none":
            mask, _realized = perturb_mask(mask, config.mask_perturb, config.mask_perturb_delta)
        recovered.append(mask)
    return edited, recovered


def _skeleton_accuracy(model, ds: SkeletonDataset, limit: Optional[int]) -> float:
    n = len(ds) if limit is None else min(limit, len(ds))
    hits = 0
    for i in range(n):
        logits = model.forward(Tensor(ds.feats[i])).numpy()
        hits += int(np.argmax(logits)) == int(ds.labels[i])
    return hits / n


def _train_skeletons(config: TrainConfig, spec: ToySkeletonSpec) -> TrainResult:
    if config.init_from is not None:
        raise TrainingError("init_from resumption is only supported for image models")
    world_seed = config.resolved_data_seed
    train_ds = generate_skeleton_dataset(spec, "train", substream(world_seed, "dataset_train"))
    test_ds = generate_skeleton_dataset(spec, "test", substream(world_seed, "dataset_test"))
    k = spec.num_classes
    model = SkeletonModel(
        spec.num_skeletons,
        spec.num_frames,
        spec.in_features,
        k,
        hidden=config.hidden,
        rng=substream(config.seed, "init"),
    )
    if spec.num_skeletons % config.skeleton_mix_parts:
        raise TrainingError(
            f"skeleton_mix_parts {config.skeleton_mix_parts} must divide "
            f"the skeleton count {spec.num_skeletons}"
        )
    shuffle_rng = substream(config.seed, "shuffle")
    mix_rng = substream(config.seed, "mix")
    mask_rng = substream(config.seed, "masks")
    velocity = {name: np.zeros(t.shape) for name, t in model.all_params().items()}
    metrics: List[Dict[str, float]] = []
    timings: List[float] = []
    n = len(train_ds)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        penalized = config.alpha > 0 and epoch >= config.penalty_warmup_epochs
        order = shuffle_rng.permutation(n).tolist()
        cls_sum = 0.0
        pg_sum = 0.0
        pg_count = 0
        num_synth = 0
        num_skipped = 0
        peak_bytes = 0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            stage = "L_cls"
            try:
                with Tape() as tape:
                    cls_terms = []
                    pg_terms = []
                    for j, idx in enumerate(batch):
                        coin = float(mix_rng.random())
                        synthesize = len(batch) > 1 and coin < config.mix_probability
                        label = int(train_ds.labels[idx])
                        if synthesize:
                            partner = batch[(j + 1) % len(batch)]
                            enc_a = model.encode(Tensor(train_ds.feats[idx]))
                            enc_b = model.encode(Tensor(train_ds.feats[partner]))
                            sample = skeleton_feature_mix(
                                enc_a,
                                _onehot(label, k),
                                enc_b,
                                _onehot(int(train_ds.labels[partner]), k),
                                config.skeleton_mix_parts,
                            )
                            logits = model.head(sample.x_tilde)
                            cls_terms.append(cross_entropy_soft(logits, sample.y_tilde))
                            num_synth += 1
                            if config.alpha > 0:
                                class_a = sample.masks[0][0]
                                class_b = sample.masks[1][0]
                                if class_a == class_b:
                                    num_skipped += 1
                                else:
                                    stage = "L_PG"
                                    pg_terms.append(
                                        _soft_penalty(
                                            logits,
                                            sample.x_tilde,
                                            class_a,
                                            class_b,
                                            sample.masks[0][1],
                                            config.mask_mode,
                                            mask_rng,
                                            sample.x_tilde.shape,
                                        )
                                    )
                                    stage = "L_cls"
                        else:
                            logits = model.forward(Tensor(train_ds.feats[idx]))
                            cls_terms.append(cross_entropy_hard(logits, label))

                    stage = "L_total"
                    l_cls = stack(cls_terms).mean()
                    if pg_terms and penalized:
                        l_pg = stack(pg_terms).mean()
                        batch_total = total_loss(l_cls, l_pg, config.alpha)
                    else:
                        batch_total = l_cls
                    params = model.all_params()
                    names = sorted(params)
                    gs = grad(batch_total, [params[name] for name in names])
                cls_sum += sum(float(t.item()) for t in cls_terms)
                pg_sum += sum(float(t.item()) for t in pg_terms)
                pg_count += len(pg_terms)
                peak_bytes = max(peak_bytes, tape.bytes_recorded)
                stage = "parameter update"
                new = _sgd_arrays(
                    params,
                    dict(zip(names, gs)),
                    velocity,
                    config.lr,
                    config.momentum,
                    config.weight_decay,
                )
                model.load_state(new)
            except NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite value in {stage} at epoch {epoch}, "
                    f"batch {start // config.batch_size}: {exc}"
                ) from exc

        row = {
            "epoch": float(epoch),
            "l_cls": cls_sum / n,
            "l_pg": pg_sum / pg_count if pg_count else 0.0,
            "num_synthetic": float(num_synth),
            "num_penalized": float(pg_count),
            "num_skipped_same_class": float(num_skipped),
            "peak_tape_bytes": float(peak_bytes),
        }
        row["l_total"] = row["l_cls"] + (config.alpha * row["l_pg"] if penalized else 0.0)
        try:
            row["test_accuracy"] = _skeleton_accuracy(model, test_ds, config.eval_limit)
        except NonFiniteError as exc:
            raise TrainingError(
                f"non-finite value in evaluation at epoch {epoch}: {exc}"
            ) from exc
        metrics.append(row)
        timings.append(time.perf_counter() - t0)

    return TrainResult(model, metrics, timings, _best_epoch(metrics), config)
