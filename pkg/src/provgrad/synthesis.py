"""Synthetic-sample construction with exact per-element provenance masks.

Every generator here returns, alongside the synthesized input, binary masks
that say which source each element came from (for mixing) or which elements
an edit touched.  The masks are byproducts of the construction itself, never
recovered heuristically, except for :func:`diff_mask` which recovers an edit
region from an image pair on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, maximum, mul

__all__ = [
    "ProvenanceMask",
    "SyntheticSample",
    "SynthesisError",
    "MASK_ROLES",
    "cutmix",
    "mix_with_rectangle",
    "skeleton_feature_mix",
    "simulated_edit",
    "diff_mask",
    "otsu_threshold",
    "perturb_mask",
    "write_pgm",
    "read_pgm",
    "mask_to_pgm",
    "heatmap_to_pgm",
]

MASK_ROLES = ("mix_origin", "edit_target")


class SynthesisError(ValueError):
    """Invalid input to a synthesis op."""


@dataclass(frozen=True)
class ProvenanceMask:
    """Strictly binary float64 mask over the spatial (or feature) grid.

    role "mix_origin": 1 marks elements taken from the first source of a mix.
    role "edit_target": 1 marks elements an edit left untouched.
    ``degenerate`` flags masks produced from inputs where recovery could not
    separate anything (constant difference image).
    """

    values: np.ndarray
    role: str
    degenerate: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.size == 0:
            raise SynthesisError("mask must be non-empty")
        if not np.all((v == 0.0) | (v == 1.0)):
            raise SynthesisError("mask values must be exactly 0 or 1")
        if self.role not in MASK_ROLES:
            raise SynthesisError(f"unknown mask role {self.role!r}, expected one of {MASK_ROLES}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def area(self) -> int:
        """Number of 1 elements."""
        return int(self.values.sum())

    def fraction(self) -> float:
        return float(self.values.mean())

    def complement(self) -> "ProvenanceMask":
        return ProvenanceMask(1.0 - self.values, self.role, self.degenerate)


@dataclass(frozen=True)
class SyntheticSample:
    """One synthesized training input.

    ``y_tilde`` is a soft probability vector for mixed samples (with
    ``mix_ratio`` the realized share of the first source) or a plain class
    index for edited samples (``mix_ratio`` None).  ``masks`` holds one
    (class_index, mask) pair per contributing source, first source first.
    """

    x_tilde: Tensor
    y_tilde: np.ndarray | int
    masks: tuple[tuple[int, ProvenanceMask], ...]
    mix_ratio: float | None

    def __post_init__(self):
        if self.mix_ratio is None:
            if not isinstance(self.y_tilde, (int, np.integer)):
                raise SynthesisError("hard-label samples need an integer y_tilde")
            return
        y = np.asarray(self.y_tilde, dtype=np.float64)
        if y.ndim != 1 or abs(float(y.sum()) - 1.0) > 1e-9:
            raise SynthesisError("soft labels must be a probability vector summing to 1")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise SynthesisError(f"mix_ratio {self.mix_ratio} outside [0, 1]")
        first = self.masks[0][1]
        if abs(first.fraction() - self.mix_ratio) > 1.0 / first.values.size:
            raise SynthesisError(
                f"mix_ratio {self.mix_ratio} inconsistent with mask fraction {first.fraction()}"
            )


def _image_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise SynthesisError(f"expected an (H, W) or (H, W, C) image, got shape {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def _label_index(y, what: str) -> int:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or int((y == 1.0).sum()) != 1 or int((y == 0.0).sum()) != y.size - 1:
        raise SynthesisError(f"{what} must be a one-hot vector, got {y!r}")
    return int(np.argmax(y))


def _spatial(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    # broadcast an (H, W) mask across the channel axis when needed
    if like.ndim == 3:
        return mask[:, :, None]
    return mask


def mix_with_rectangle(x_a, y_a, x_b, y_b, rect) -> SyntheticSample:
    """Deterministic core of cutmix: paste the given rectangle of x_b into
    x_a.  ``rect`` is (r0, c0, r1, c1), half-open, already inside the image.
    The soft label weights each source by its realized pixel share."""
    a = _image_array(x_a)
    b = _image_array(x_b)
    if a.shape != b.shape:
        raise SynthesisError(f"cutmix inputs must share a shape, got {a.shape} and {b.shape}")
    ya = np.asarray(y_a, dtype=np.float64)
    yb = np.asarray(y_b, dtype=np.float64)
    if ya.shape != yb.shape:
        raise SynthesisError(f"cutmix labels must share a shape, got {ya.shape} and {yb.shape}")
    class_a = _label_index(ya, "y_a")
    class_b = _label_index(yb, "y_b")

    h, w = a.shape[0], a.shape[1]
    r0, c0, r1, c1 = (int(v) for v in rect)
    if not (0 <= r0 <= r1 <= h and 0 <= c0 <= c1 <= w):
        raise SynthesisError(f"rectangle {rect} outside image bounds {(h, w)}")

    keep = np.ones((h, w))
    keep[r0:r1, c0:c1] = 0.0
    lam = float(keep.mean())

    keep_c = _spatial(keep, a)
    mixed = keep_c * a + (1.0 - keep_c) * b
    y_mixed = lam * ya + (1.0 - lam) * yb

    mask_a = ProvenanceMask(keep, "mix_origin")
    mask_b = mask_a.complement()
    assert np.array_equal(mask_a.values + mask_b.values, np.ones((h, w)))
    return SyntheticSample(
        x_tilde=Tensor(mixed),
        y_tilde=y_mixed,
        masks=((class_a, mask_a), (class_b, mask_b)),
        mix_ratio=lam,
    )


def cutmix(x_a, y_a, x_b, y_b, rng: np.random.Generator) -> SyntheticSample:
    """Rectangle mixing of two labeled images with exact provenance.

    Draws the area share uniformly, cuts a square of side
    round(sqrt((1 - lam) * H * W)) at a uniformly random center, clips it to
    the image, and recomputes lam as the realized kept fraction.  Draw order
    is fixed (area, row, column) so runs reproduce bit for bit.
    """
    a = _image_array(x_a)
    h, w = a.shape[0], a.shape[1]
    lam_drawn = float(rng.uniform())
    side = int(round(np.sqrt((1.0 - lam_drawn) * h * w)))
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    r0 = max(0, cy - side // 2)
    c0 = max(0, cx - side // 2)
    r1 = min(h, r0 + side)
    c1 = min(w, c0 + side)
    return mix_with_rectangle(x_a, y_a, x_b, y_b, (r0, c0, r1, c1))


def skeleton_feature_mix(feats_a, y_a, feats_b, y_b, num_parts: int) -> SyntheticSample:
    """Mix two (P, F, E) feature tensors by zeroing whole skeletons.

    The first P / num_parts skeletons of the first source are zeroed, the
    complementary ones of the second source likewise, and the two masked
    tensors combine by elementwise max.  Works on tape-tracked tensors, so a
    training step can differentiate straight through the mix.
    """
    a = as_tensor(feats_a)
    b = as_tensor(feats_b)
    if a.ndim != 3 or a.shape != b.shape:
        raise SynthesisError(
            f"skeleton features must be matching (P, F, E) tensors, got {a.shape} and {b.shape}"
        )
    p = a.shape[0]
    t = int(num_parts)
    if t < 1 or p % t:
        raise SynthesisError(f"num_parts {num_parts} must divide the skeleton count {p}")
    class_a = _label_index(np.asarray(y_a), "y_a")
    class_b = _label_index(np.asarray(y_b), "y_b")

    keep = np.ones(a.shape)
    keep[0 : p // t] = 0.0
    lam = float(keep.mean())  # = 1 - 1/num_parts

    mixed = maximum(mul(Tensor(keep), a), mul(Tensor(1.0 - keep), b))
    ya = np.asarray(y_a, dtype=np.float64)
    yb = np.asarray(y_b, dtype=np.float64)
    y_mixed = lam * ya + (1.0 - lam) * yb

    mask_a = ProvenanceMask(keep, "mix_origin")
    mask_b = mask_a.complement()
    return SyntheticSample(
        x_tilde=mixed,
        y_tilde=y_mixed,
        masks=((class_a, mask_a), (class_b, mask_b)),
        mix_ratio=lam,
    )


def simulated_edit(x, target_mask, rng: np.random.Generator, amplitude: float = 0.8):
    """Rewrite every non-target pixel with signed noise, leaving the target
    region bit-identical.

    Per channel the perturbation magnitude is drawn from
    [amplitude / 2, amplitude] with a random sign, so every edited pixel
    moves by at least amplitude / 2 and the edit region stays recoverable
    from the difference image.  Returns (x_edited, true_edit_region).
    """
    a = _image_array(x)
    if amplitude < 0:
        raise SynthesisError(f"amplitude must be non-negative, got {amplitude}")
    m = np.asarray(getattr(target_mask, "values", target_mask), dtype=np.float64)
    if m.shape != a.shape[:2]:
        raise SynthesisError(f"target mask shape {m.shape} does not match image {a.shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise SynthesisError("target mask must be binary")

    edited_region = 1.0 - m
    signs = rng.integers(0, 2, size=a.shape) * 2.0 - 1.0
    magnitudes = amplitude * (0.5 + 0.5 * rng.random(size=a.shape))
    delta = signs * magnitudes
    inside = _spatial(edited_region, a).astype(bool)
    inside = np.broadcast_to(inside, a.shape)
    x_edited = np.where(inside, a + delta, a)
    if amplitude == 0.0:
        x_edited = a.copy()
    return Tensor(x_edited), edited_region


def diff_mask(x, x_tilde) -> ProvenanceMask:
    """Recover the untouched region of an edited image pair.

    The per-pixel difference is the channel mean of |x_tilde - x|; Otsu's
    threshold splits it and pixels at or below the threshold count as
    untouched (value 1).  A constant difference image cannot be split, so it
    yields an all-ones mask flagged degenerate.
    """
    a = _image_array(x)
    b = _image_array(x_tilde)
    if a.shape != b.shape:
        raise SynthesisError(f"diff_mask inputs must share a shape, got {a.shape} and {b.shape}")
    d = np.abs(b - a)
    if d.ndim == 3:
        d = d.mean(axis=2)
    if float(d.max()) == float(d.min()):
        return ProvenanceMask(np.ones(d.shape), "edit_target", degenerate=True)
    tau = otsu_threshold(d, bins=256)
    return ProvenanceMask((d <= tau).astype(np.float64), "edit_target")


def otsu_threshold(values, bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance.

    Equal-width bins over the observed range; candidate thresholds are the
    interior bin edges; class statistics use bin centers.  Ties break toward
    the lower threshold.  Raises on constant input, where no threshold
    separates anything.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise SynthesisError("otsu_threshold: empty input")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        raise SynthesisError("otsu_threshold: all values identical, no threshold exists")
    if bins < 2:
        raise SynthesisError(f"otsu_threshold: need at least 2 bins, got {bins}")

    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    counts = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    total = counts.sum()

    w0 = np.cumsum(counts)[:-1]  # weight of bins below each interior edge
    w1 = total - w0
    mass = np.cumsum(counts * centers)[:-1]
    full_mass = float((counts * centers).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = np.where(w0 > 0, mass / w0, 0.0)
        m1 = np.where(w1 > 0, (full_mass - mass) / w1, 0.0)
    bcv = (w0 / total) * (w1 / total) * (m0 - m1) ** 2
    best = int(np.argmax(bcv))  # first maximum = lowest threshold on ties
    return float(edges[best + 1])


_CROSS_OFFSETS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


def _shifted(padded: np.ndarray, dr: int, dc: int) -> np.ndarray:
    h, w = padded.shape[0] - 2, padded.shape[1] - 2
    return padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]


def _cross_dilate(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1, constant_values=0.0)
    return np.maximum.reduce([_shifted(p, dr, dc) for dr, dc in _CROSS_OFFSETS])


def _cross_erode(m: np.ndarray) -> np.ndarray:
    # outside the image counts as background, so border pixels erode
    p = np.pad(m, 1, constant_values=0.0)
    return np.minimum.reduce([_shifted(p, dr, dc) for dr, dc in _CROSS_OFFSETS])


def perturb_mask(mask: ProvenanceMask, mode: str, target_area_delta: float):
    """Grow or shrink the 1-region by repeated 3x3 cross morphology.

    Applies dilation ("dilate") or erosion ("erode") until the area has
    changed by at least ``target_area_delta`` (a fraction of the original
    area).  Single steps usually overshoot on small masks; the signed
    realized delta is returned alongside the new mask so callers can see by
    how much.  Raises if the morphology stops changing the mask before the
    target is reached.  A delta of 0 returns the mask unchanged.
    """
    if mode not in ("dilate", "erode"):
        raise SynthesisError(f"unknown perturbation mode {mode!r}")
    if target_area_delta < 0.0:
        raise SynthesisError(f"target_area_delta must be non-negative, got {target_area_delta}")
    if mask.values.ndim != 2:
        raise SynthesisError(f"perturb_mask needs a 2-d mask, got shape {mask.shape}")
    if target_area_delta == 0.0:
        return mask, 0.0
    area0 = mask.area()
    if area0 == 0 or area0 == mask.values.size:
        raise SynthesisError("perturb_mask needs a mask with at least one 1 and one 0")

    step = _cross_dilate if mode == "dilate" else _cross_erode
    v = np.asarray(mask.values)
    while True:
        v_next = step(v)
        if np.array_equal(v_next, v):
            realized = (float(v.sum()) - area0) / area0
            raise SynthesisError(
                f"perturb_mask saturated at area delta {realized:+.3f}"
                f" before reaching {target_area_delta:.3f}"
            )
        v = v_next
        realized = (float(v.sum()) - area0) / area0
        if abs(realized) >= target_area_delta:
            return ProvenanceMask(v, mask.role), realized


# ------------------------------------------------------------------ PGM I/O


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a uint8 grayscale array."""
    g = np.asarray(gray)
    if g.ndim != 2:
        raise SynthesisError(f"PGM wants a 2-d array, got shape {g.shape}")
    if g.dtype != np.uint8:
        raise SynthesisError(f"PGM wants uint8 values, got {g.dtype}")
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(g.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise SynthesisError("not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise SynthesisError(f"unsupported PGM maxval {maxval}")
    pixels = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise SynthesisError("truncated PGM pixel data")
    return pixels.reshape(h, w).copy()


def mask_to_pgm(mask: ProvenanceMask, path) -> None:
    """Masks export as 0 / 255 so any image viewer shows them directly."""
    write_pgm(path, (mask.values * 255).astype(np.uint8))


def heatmap_to_pgm(heat: np.ndarray, path) -> None:
    """Scale a non-negative map to the full 0..255 range and export."""
    h = np.asarray(heat, dtype=np.float64)
    top = float(h.max())
    scaled = np.zeros(h.shape) if top == 0.0 else h / top
    write_pgm(path, np.round(scaled * 255).astype(np.uint8))
