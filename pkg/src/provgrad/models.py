"""Small differentiable models and their checkpoint format.

Every model keeps its parameters in a plain ``dict[str, Tensor]`` and builds
its forward pass from the recorded primitives in :mod:`provgrad.autodiff`, so
input gradients of the logits (and gradients of those gradients) are available
to the penalty machinery without anything special here.
"""

from __future__ import annotations

import json
import os
from typing import Dict

import numpy as np

from .autodiff import (
    Tensor,
    add,
    broadcast_along,
    conv2d,
    flatten,
    matmul,
    matvec,
    max_pool2d,
    relu,
    reshape,
    softplus,
    transpose,
)


class ModelError(ValueError):
    pass


ARCHITECTURES = ("linear", "mlp", "tiny_conv", "conv_gap")

CHECKPOINT_VERSION = 1


def _he(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    return scale * rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _normalize_image_shape(image_shape):
    shape = tuple(int(s) for s in image_shape)
    if len(shape) == 2:
        shape = shape + (1,)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ModelError(f"image_shape must be (H, W) or (H, W, C), got {tuple(image_shape)}")
    return shape


class ToyModel:
    """Image classifier in one of four sizes.

    ``linear`` maps the flattened image straight to logits, ``mlp`` inserts
    one relu layer, ``tiny_conv`` runs a single 3x3 convolution, relu and
    2x2 max pool before a position-wise linear head, and ``conv_gap``
    replaces the pool and flatten with a global average over positions, so
    its logits cannot prefer one image location over another.  ``conv_gap``
    activates with softplus rather than relu: its input gradients stay
    nonzero everywhere, which keeps gradient penalties from silencing the
    model outright.  ``forward`` takes one image of ``image_shape`` (a
    trailing channel axis of size 1 may be omitted) and returns the
    pre-softmax logits vector.

    ``init_scale`` multiplies every weight draw.  Values above 1 start the
    model with large, spatially indiscriminate input gradients, standing in
    for a network pretrained without any attribution constraint; gradient
    penalties then have something to shrink from the first epoch on.
    """

    def __init__(
        self,
        arch: str,
        image_shape,
        num_classes: int,
        hidden: int = 24,
        conv_filters: int = 4,
        init_scale: float = 1.0,
        rng: np.random.Generator | None = None,
    ):
        if arch not in ARCHITECTURES:
            raise ModelError(f"arch must be one of {ARCHITECTURES}, got {arch!r}")
        if num_classes < 2:
            raise ModelError(f"num_classes must be at least 2, got {num_classes}")
        if not (np.isfinite(init_scale) and init_scale > 0):
            raise ModelError(f"init_scale must be a positive finite value, got {init_scale}")
        if rng is None:
            raise ModelError("an explicitly seeded rng is required for init")
        self.arch = arch
        self.image_shape = _normalize_image_shape(image_shape)
        self.num_classes = int(num_classes)
        self.hidden = int(hidden)
        self.conv_filters = int(conv_filters)
        self.init_scale = float(init_scale)
        s = self.init_scale
        h, w, c = self.image_shape
        d = h * w * c
        params: Dict[str, np.ndarray] = {}
        if arch == "linear":
            params["w"] = _he(rng, (num_classes, d), d, s)
            params["b"] = np.zeros(num_classes)
        elif arch == "mlp":
            if self.hidden < 1:
                raise ModelError(f"hidden must be positive, got {hidden}")
            params["w1"] = _he(rng, (self.hidden, d), d, s)
            params["b1"] = np.zeros(self.hidden)
            params["w2"] = _he(rng, (num_classes, self.hidden), self.hidden, s)
            params["b2"] = np.zeros(num_classes)
        else:  # both conv variants run a valid 3x3 convolution first
            if self.conv_filters < 1:
                raise ModelError(f"conv_filters must be positive, got {conv_filters}")
            f = self.conv_filters
            if arch == "tiny_conv":
                # the 2x2 pool after the conv needs even sides of at least 4
                if h < 4 or w < 4 or h % 2 or w % 2:
                    raise ModelError(
                        f"tiny_conv needs even image sides of at least 4, got {h}x{w}"
                    )
                d_head = ((h - 2) // 2) * ((w - 2) // 2) * f
            else:  # conv_gap: averaged over positions, head sees one value per filter
                if h < 3 or w < 3:
                    raise ModelError(f"conv_gap needs image sides of at least 3, got {h}x{w}")
                d_head = f
            params["k"] = _he(rng, (3, 3, c, f), 9 * c, s)
            params["kb"] = np.zeros(f)
            params["w"] = _he(rng, (num_classes, d_head), d_head, s)
            params["b"] = np.zeros(num_classes)
        self.params: Dict[str, Tensor] = {
            name: Tensor(arr, requires_grad=True) for name, arr in params.items()
        }

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        h, w, c = self.image_shape
        if x.shape == (h, w) and c == 1:
            pass  # flatten below treats (H, W) and (H, W, 1) identically
        elif x.shape != self.image_shape:
            raise ModelError(f"forward expects shape {self.image_shape}, got {x.shape}")
        p = self.params
        if self.arch == "linear":
            return add(matvec(p["w"], flatten(x)), p["b"])
        if self.arch == "mlp":
            hid = relu(add(matvec(p["w1"], flatten(x)), p["b1"]))
            return add(matvec(p["w2"], hid), p["b2"])
        if x.ndim == 2:
            x = reshape(x, (h, w, 1))
        pre = conv2d(x, p["k"], bias=p["kb"])
        if self.arch == "tiny_conv":
            pooled = max_pool2d(relu(pre), 2)
            return add(matvec(p["w"], flatten(pooled)), p["b"])
        ho, wo = h - 2, w - 2
        per_filter = reshape(softplus(pre), (ho * wo, self.conv_filters))
        averaged = reshape(
            matmul(Tensor(np.full((1, ho * wo), 1.0 / (ho * wo))), per_filter),
            (self.conv_filters,),
        )
        return add(matvec(p["w"], averaged), p["b"])

    def meta(self) -> dict:
        return {
            "kind": "toy",
            "arch": self.arch,
            "image_shape": list(self.image_shape),
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "conv_filters": self.conv_filters,
            "init_scale": self.init_scale,
        }

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.params.items()}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        _load_params(self.params, arrays)


class SkeletonEncoder:
    """Two-layer map shared across every (skeleton, frame) coordinate vector.

    The softplus output keeps encoded features strictly positive, which the
    elementwise-max feature mixing relies on: a zeroed source skeleton can
    never win the max against a live one.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        hidden: int = 8,
        rng: np.random.Generator | None = None,
    ):
        if in_features < 1 or out_features < 1 or hidden < 1:
            raise ModelError(
                f"encoder sizes must be positive, got {in_features}, {out_features}, {hidden}"
            )
        if rng is None:
            raise ModelError("an explicitly seeded rng is required for init")
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.hidden = int(hidden)
        self.params: Dict[str, Tensor] = {
            "w1": Tensor(_he(rng, (hidden, in_features), in_features), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(_he(rng, (out_features, hidden), hidden), requires_grad=True),
            "b2": Tensor(np.zeros(out_features), requires_grad=True),
        }

    def encode(self, feats) -> Tensor:
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        if feats.ndim != 3 or feats.shape[2] != self.in_features:
            raise ModelError(
                f"encode expects (P, F, {self.in_features}) features, got {feats.shape}"
            )
        p, f = feats.shape[0], feats.shape[1]
        n = p * f
        flat = reshape(feats, (n, self.in_features))
        pr = self.params
        hid = relu(add(matmul(flat, transpose(pr["w1"])), broadcast_along(pr["b1"], 0, n)))
        out = add(matmul(hid, transpose(pr["w2"])), broadcast_along(pr["b2"], 0, n))
        return reshape(softplus(out), (p, f, self.out_features))


class SkeletonModel:
    """Skeleton encoder plus a linear head over the flattened encoding.

    ``encode`` is exposed separately so training can mix the encoded features
    of two clips on tape and push the mixed tensor through ``head`` alone.
    """

    def __init__(
        self,
        num_skeletons: int,
        num_frames: int,
        in_features: int,
        num_classes: int,
        encoded_features: int = 6,
        hidden: int = 8,
        rng: np.random.Generator | None = None,
    ):
        if num_skeletons < 1 or num_frames < 1:
            raise ModelError(
                f"need positive skeleton and frame counts, got {num_skeletons}, {num_frames}"
            )
        if num_classes < 2:
            raise ModelError(f"num_classes must be at least 2, got {num_classes}")
        if rng is None:
            raise ModelError("an explicitly seeded rng is required for init")
        self.num_skeletons = int(num_skeletons)
        self.num_frames = int(num_frames)
        self.in_features = int(in_features)
        self.num_classes = int(num_classes)
        self.encoded_features = int(encoded_features)
        self.hidden = int(hidden)
        self.encoder = SkeletonEncoder(in_features, encoded_features, hidden=hidden, rng=rng)
        d = num_skeletons * num_frames * encoded_features
        self.params: Dict[str, Tensor] = {
            "head_w": Tensor(_he(rng, (num_classes, d), d), requires_grad=True),
            "head_b": Tensor(np.zeros(num_classes), requires_grad=True),
        }

    def encode(self, feats) -> Tensor:
        return self.encoder.encode(feats)

    def head(self, encoded) -> Tensor:
        encoded = encoded if isinstance(encoded, Tensor) else Tensor(encoded)
        want = (self.num_skeletons, self.num_frames, self.encoded_features)
        if encoded.shape != want:
            raise ModelError(f"head expects encoded shape {want}, got {encoded.shape}")
        return add(matvec(self.params["head_w"], flatten(encoded)), self.params["head_b"])

    def forward(self, feats) -> Tensor:
        return self.head(self.encode(feats))

    def all_params(self) -> Dict[str, Tensor]:
        merged = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        merged.update(self.params)
        return merged

    def meta(self) -> dict:
        return {
            "kind": "skeleton",
            "num_skeletons": self.num_skeletons,
            "num_frames": self.num_frames,
            "in_features": self.in_features,
            "num_classes": self.num_classes,
            "encoded_features": self.encoded_features,
            "hidden": self.hidden,
        }

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.all_params().items()}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        enc = {k[len("enc.") :]: v for k, v in arrays.items() if k.startswith("enc.")}
        head = {k: v for k, v in arrays.items() if not k.startswith("enc.")}
        _load_params(self.encoder.params, enc)
        _load_params(self.params, head)


def _load_params(target: Dict[str, Tensor], arrays: Dict[str, np.ndarray]) -> None:
    if set(arrays) != set(target):
        raise ModelError(
            f"parameter names differ: have {sorted(target)}, loading {sorted(arrays)}"
        )
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != target[name].shape:
            raise ModelError(
                f"parameter {name!r}: shape {arr.shape} does not match {target[name].shape}"
            )
    for name, arr in arrays.items():
        target[name] = Tensor(arr, requires_grad=True)


# --------------------------------------------------------------- checkpoints
#
# A checkpoint is two files sharing a prefix: <prefix>.params holds every
# parameter array concatenated as little-endian float64 in sorted name order,
# and <prefix>.json holds the model meta plus an offset/shape index into the
# flat buffer.  Round trips are bit exact.


def save_checkpoint(prefix: str, model) -> None:
    arrays = model.state_arrays()
    index = {}
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        offset += arr.size
        chunks.append(arr.tobytes())
    doc = {"version": CHECKPOINT_VERSION, "meta": model.meta(), "params": index}
    with open(prefix + ".params", "wb") as fh:
        fh.write(b"".join(chunks))
    with open(prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(prefix: str, rng: np.random.Generator | None = None):
    """Rebuild the model a checkpoint describes and restore its parameters.

    The throwaway init draws come from ``rng`` (default: a fixed seed); every
    value is overwritten by the stored arrays, so the choice cannot matter.
    """
    with open(prefix + ".json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {doc.get('version')!r}")
    raw = np.fromfile(prefix + ".params", dtype="<f8")
    arrays = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > raw.size:
            raise ModelError(f"checkpoint parameter {name!r} overruns the data file")
        arrays[name] = raw[start : start + size].reshape(shape).astype(np.float64)
    meta = dict(doc["meta"])
    kind = meta.pop("kind", None)
    if rng is None:
        rng = np.random.default_rng(0)
    if kind == "toy":
        model = ToyModel(
            meta["arch"],
            tuple(meta["image_shape"]),
            meta["num_classes"],
            hidden=meta["hidden"],
            conv_filters=meta["conv_filters"],
            init_scale=meta.get("init_scale", 1.0),
            rng=rng,
        )
    elif kind == "skeleton":
        model = SkeletonModel(
            meta["num_skeletons"],
            meta["num_frames"],
            meta["in_features"],
            meta["num_classes"],
            encoded_features=meta["encoded_features"],
            hidden=meta["hidden"],
            rng=rng,
        )
    else:
        raise ModelError(f"unknown checkpoint kind {kind!r}")
    model.load_state(arrays)
    return model


def checkpoint_exists(prefix: str) -> bool:
    return os.path.exists(prefix + ".params") and os.path.exists(prefix + ".json")
