"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive op records itself on the innermost active ``Tape`` together
with a backward rule.  The backward rules are themselves written in terms of
the same primitives, so calling :func:`grad` with ``create_graph=True``
appends the backward computation to the tape and a second :func:`grad` call
differentiates through the first.  That is what lets a training loss contain
an input-gradient term.

Conventions, fixed on purpose:

* everything is float64; inputs are coerced on construction
* shapes must match exactly, except that a scalar (shape ``()``) may pair
  with any tensor in the elementwise binary ops
* relu and abs use subgradient 0 at 0
* max picks the lowest index on ties
* any op that produces a NaN or Inf raises immediately
"""

from __future__ import annotations

import threading
from contextlib import nullcontext

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "grad",
    "finite_difference",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "relu",
    "square",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "matmul",
    "matvec",
    "transpose",
    "getitem",
    "scatter_into",
    "reshape",
    "flatten",
    "stack",
    "max_over_axis",
    "maximum",
    "sum_over_axis",
    "broadcast_along",
    "detach",
    "log_softmax",
    "softmax",
    "cross_entropy_soft",
    "cross_entropy_hard",
    "conv2d",
    "max_pool2d",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Gradient bookkeeping misuse: no active tape, off-tape input, ..."""


_STATE = threading.local()


def _tapes() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = _STATE.tapes = []
    return stack


class no_grad:
    """Context manager under which ops compute values but record nothing."""

    def __enter__(self):
        _STATE.pause = getattr(_STATE, "pause", 0) + 1
        return self

    def __exit__(self, *exc):
        _STATE.pause -= 1
        return False


def _recording() -> bool:
    return bool(_tapes()) and not getattr(_STATE, "pause", 0)


class Tensor:
    """Immutable dense float64 array, optionally tracked on the active tape.

    The constructor copies its input and freezes the copy; op results share
    their (frozen) output buffers instead.  ``node_id`` is assigned by the
    tape the first time the tensor takes part in a recorded op.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("Tensor constructed from non-finite values")
        self._bind(arr, requires_grad)

    def _bind(self, arr: np.ndarray, requires_grad: bool) -> None:
        if arr.size == 0:
            raise ShapeError(f"tensors must be non-empty, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Trusted path for freshly computed arrays: no copy, no finite check.
        t = cls.__new__(cls)
        t._bind(np.asarray(arr, dtype=np.float64), requires_grad)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """The underlying (read-only) array."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis: int | None = None):
        if axis is None:
            return _sum_all(self)
        return sum_over_axis(self, axis)

    def mean(self):
        return mul(_sum_all(self), 1.0 / self.size)

    def reshape(self, shape):
        return reshape(self, shape)

    def flatten(self):
        return flatten(self)

    def transpose(self):
        return transpose(self)


class _TapeEntry:
    __slots__ = ("op", "inputs", "output", "forward_fn", "backward_fn")

    def __init__(self, op, inputs, output, forward_fn, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the primitive ops of one differentiation scope.

    Use as a context manager around a training step.  Ops record onto the
    innermost active tape whenever one of their inputs requires grad.  The
    tape is meant to be discarded after the step's parameter update.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self.bytes_recorded = 0
        self._next_id = 0

    def _register(self, t: Tensor) -> None:
        if t._tape is not self:
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes().pop()
        if popped is not self:
            raise TapeError("tape stack corrupted: exited a tape that was not innermost")
        return False

    def replay(self) -> int:
        """Recompute every recorded op from its inputs and demand bit-equal
        outputs.  Returns the number of entries checked."""
        for e in self.entries:
            redone = e.forward_fn([t.data for t in e.inputs])
            if not np.array_equal(np.asarray(redone), e.output.data):
                raise TapeError(f"replay mismatch in op '{e.op}'")
        return len(self.entries)


# Ops whose backward rules are themselves expressed through recorded
# primitives, i.e. safe under create_graph.  grad() refuses anything else.
_DIFFERENTIABLE_BACKWARD = frozenset(
    {
        "add",
        "sub",
        "mul",
        "div",
        "neg",
        "absolute",
        "relu",
        "square",
        "exp",
        "log",
        "sigmoid",
        "softplus",
        "matmul",
        "transpose",
        "getitem",
        "scatter_into",
        "reshape",
        "stack",
        "max_over_axis",
        "sum",
        "sum_over_axis",
        "broadcast_along",
    }
)


def _record(op, out_arr, inputs, backward_fn, forward_fn) -> Tensor:
    if not np.isfinite(out_arr).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    requires = False
    for t in inputs:
        if t.requires_grad:
            requires = True
            break
    out = Tensor._wrap(out_arr, requires_grad=requires)
    if requires and _recording():
        tape = _tapes()[-1]
        for t in inputs:
            tape._register(t)
        tape._register(out)
        tape.entries.append(_TapeEntry(op, inputs, out, forward_fn, backward_fn))
        tape.bytes_recorded += out.data.nbytes
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(
        f"{op}: incompatible shapes {a.shape} and {b.shape}"
        " (need identical shapes or a scalar operand)"
    )


def _match(cot: Tensor, operand: Tensor) -> Tensor:
    # Reduce a cotangent back to a scalar operand's shape.
    if cot.shape == operand.shape:
        return cot
    return _sum_all(cot)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)

    def backward(cot, inputs, output):
        x, y = inputs
        ga = _match(cot, x) if x.requires_grad else None
        gb = _match(cot, y) if y.requires_grad else None
        return [ga, gb]

    return _record("add", a.data + b.data, (a, b), backward, lambda xs: xs[0] + xs[1])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)

    def backward(cot, inputs, output):
        x, y = inputs
        ga = _match(cot, x) if x.requires_grad else None
        gb = _match(neg(cot), y) if y.requires_grad else None
        return [ga, gb]

    return _record("sub", a.data - b.data, (a, b), backward, lambda xs: xs[0] - xs[1])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)

    def backward(cot, inputs, output):
        x, y = inputs
        ga = _match(mul(cot, y), x) if x.requires_grad else None
        gb = _match(mul(cot, x), y) if y.requires_grad else None
        return [ga, gb]

    return _record("mul", a.data * b.data, (a, b), backward, lambda xs: xs[0] * xs[1])


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("div", a, b)

    def backward(cot, inputs, output):
        x, y = inputs
        ga = _match(div(cot, y), x) if x.requires_grad else None
        gb = None
        if y.requires_grad:
            gb = _match(neg(div(mul(cot, x), mul(y, y))), y)
        return [ga, gb]

    return _record("div", a.data / b.data, (a, b), backward, lambda xs: xs[0] / xs[1])


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(cot, inputs, output):
        return [neg(cot)]

    return _record("neg", -a.data, (a,), backward, lambda xs: -xs[0])


def absolute(a) -> Tensor:
    """Elementwise |a|.  Subgradient at 0 is 0, matching relu's convention."""
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(cot, inputs, output):
        return [mul(cot, Tensor._wrap(sign))]

    return _record("absolute", np.abs(a.data), (a,), backward, lambda xs: np.abs(xs[0]))


def relu(a) -> Tensor:
    a = as_tensor(a)
    gate = (a.data > 0.0).astype(np.float64)

    def backward(cot, inputs, output):
        return [mul(cot, Tensor._wrap(gate))]

    return _record("relu", np.maximum(a.data, 0.0), (a,), backward, lambda xs: np.maximum(xs[0], 0.0))


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(cot, inputs, output):
        (x,) = inputs
        return [mul(cot, mul(2.0, x))]

    return _record("square", a.data * a.data, (a,), backward, lambda xs: xs[0] * xs[0])


def exp(a) -> Tensor:
    a = as_tensor(a)

    def backward(cot, inputs, output):
        return [mul(cot, output)]

    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), backward, lambda xs: np.exp(xs[0]))


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(cot, inputs, output):
        (x,) = inputs
        return [div(cot, x)]

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), backward, lambda xs: np.log(xs[0]))


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)

    def backward(cot, inputs, output):
        return [mul(cot, mul(output, sub(1.0, output)))]

    return _record("sigmoid", _sigmoid_arr(a.data), (a,), backward, lambda xs: _sigmoid_arr(xs[0]))


def softplus(a) -> Tensor:
    """log(1 + e^a), computed without overflow.  Strictly positive."""
    a = as_tensor(a)

    def backward(cot, inputs, output):
        (x,) = inputs
        return [mul(cot, sigmoid(x))]

    return _record(
        "softplus", np.logaddexp(0.0, a.data), (a,), backward, lambda xs: np.logaddexp(0.0, xs[0])
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape} (need (n,k) @ (k,m))")

    def backward(cot, inputs, output):
        x, y = inputs
        ga = matmul(cot, transpose(y)) if x.requires_grad else None
        gb = matmul(transpose(x), cot) if y.requires_grad else None
        return [ga, gb]

    return _record("matmul", a.data @ b.data, (a, b), backward, lambda xs: xs[0] @ xs[1])


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: need a 2-d tensor, got shape {a.shape}")

    def backward(cot, inputs, output):
        return [transpose(cot)]

    return _record("transpose", a.data.T.copy(), (a,), backward, lambda xs: xs[0].T.copy())


def matvec(w, v) -> Tensor:
    """(n, k) matrix times (k,) vector -> (n,) vector."""
    w, v = as_tensor(w), as_tensor(v)
    if w.ndim != 2 or v.ndim != 1 or w.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {w.shape} and {v.shape}")
    return reshape(matmul(w, reshape(v, (v.shape[0], 1))), (w.shape[0],))


def _sum_all(a) -> Tensor:
    a = as_tensor(a)

    def backward(cot, inputs, output):
        (x,) = inputs
        return [mul(cot, Tensor._wrap(np.ones(x.shape)))]

    return _record("sum", np.asarray(a.data.sum()), (a,), backward, lambda xs: np.asarray(xs[0].sum()))


def sum_over_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis("sum_over_axis", axis, a.ndim)
    size = a.shape[axis]

    def backward(cot, inputs, output):
        return [broadcast_along(cot, axis, size)]

    return _record(
        "sum_over_axis",
        a.data.sum(axis=axis),
        (a,),
        backward,
        lambda xs: xs[0].sum(axis=axis),
    )


def broadcast_along(a, axis: int, size: int) -> Tensor:
    """Insert a new axis of the given size, repeating the values along it."""
    a = as_tensor(a)
    if not 0 <= axis <= a.ndim:
        raise ShapeError(f"broadcast_along: axis {axis} out of range for shape {a.shape}")
    if size < 1:
        raise ShapeError(f"broadcast_along: size must be positive, got {size}")

    def backward(cot, inputs, output):
        return [sum_over_axis(cot, axis)]

    def fwd(xs):
        return np.repeat(np.expand_dims(xs[0], axis), size, axis=axis)

    return _record("broadcast_along", fwd([a.data]), (a,), backward, fwd)


def _normalize_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


_BASIC_KEY_TYPES = (int, np.integer, slice)


def _check_key(op: str, key):
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if not isinstance(p, _BASIC_KEY_TYPES):
            raise ShapeError(f"{op}: only basic indexing (ints and slices) is supported, got {type(p).__name__}")
    return key


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    key = _check_key("getitem", key)
    out = np.asarray(a.data[key])
    if out.size == 0:
        raise ShapeError(f"getitem: index {key!r} selects an empty region of shape {a.shape}")

    def backward(cot, inputs, output):
        (x,) = inputs
        return [scatter_into(cot, key, x.shape)]

    return _record("getitem", out, (a,), backward, lambda xs: np.asarray(xs[0][key]))


def scatter_into(a, key, shape) -> Tensor:
    """Embed a tensor into zeros of the given shape at a basic-index key.
    The exact adjoint of getitem."""
    a = as_tensor(a)
    key = _check_key("scatter_into", key)
    shape = tuple(int(s) for s in shape)

    def fwd(xs):
        z = np.zeros(shape)
        z[key] = xs[0]
        return z

    def backward(cot, inputs, output):
        return [getitem(cot, key)]

    out = fwd([a.data])
    return _record("scatter_into", out, (a,), backward, fwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape) if not isinstance(shape, int) else (shape,)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from e
    old = a.shape

    def backward(cot, inputs, output):
        return [reshape(cot, old)]

    return _record("reshape", out, (a,), backward, lambda xs: xs[0].reshape(shape))


def flatten(a) -> Tensor:
    a = as_tensor(a)
    return reshape(a, (a.size,))


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: need at least one tensor")
    shape0 = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape0:
            raise ShapeError(f"stack: mismatched member shapes {shape0} and {t.shape}")
    if not 0 <= axis <= len(shape0):
        raise ShapeError(f"stack: axis {axis} out of range for member shape {shape0}")

    def backward(cot, inputs, output):
        grads = []
        for i, t in enumerate(inputs):
            if t.requires_grad:
                key = (slice(None),) * axis + (i,)
                grads.append(getitem(cot, key))
            else:
                grads.append(None)
        return grads

    def fwd(xs):
        return np.stack(xs, axis=axis)

    return _record("stack", fwd([t.data for t in ts]), tuple(ts), backward, fwd)


def max_over_axis(a, axis: int) -> Tensor:
    """Maximum along one axis.  Ties break toward the lowest index."""
    a = as_tensor(a)
    axis = _normalize_axis("max_over_axis", axis, a.ndim)
    size = a.shape[axis]
    arg = np.argmax(a.data, axis=axis)  # first occurrence wins ties
    onehot = np.zeros(a.shape)
    np.put_along_axis(onehot, np.expand_dims(arg, axis), 1.0, axis=axis)

    def backward(cot, inputs, output):
        return [mul(broadcast_along(cot, axis, size), Tensor._wrap(onehot))]

    return _record(
        "max_over_axis",
        a.data.max(axis=axis),
        (a,),
        backward,
        lambda xs: xs[0].max(axis=axis),
    )


def maximum(a, b) -> Tensor:
    """Elementwise max of two same-shaped tensors; ties pick the first."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum: incompatible shapes {a.shape} and {b.shape}")
    return max_over_axis(stack([a, b], axis=0), axis=0)


def detach(a) -> Tensor:
    """Same values, cut loose from the tape (constant from here on)."""
    a = as_tensor(a)
    return Tensor._wrap(a.data, requires_grad=False)


# ------------------------------------------------------------- compositions


def log_softmax(z) -> Tensor:
    """Log-probabilities over all elements of z (normally a logit vector).

    Shift-stabilized: the max is subtracted as a constant, which leaves both
    the value and every derivative order exact.
    """
    z = as_tensor(z)
    m = float(z.data.max())
    shifted = sub(z, m)
    lse = add(log(_sum_all(exp(shifted))), m)
    return sub(z, lse)


def softmax(z) -> Tensor:
    return exp(log_softmax(z))


def cross_entropy_soft(logits, target_probs) -> Tensor:
    """- sum(p * log_softmax(logits)) for a probability vector p.  The target
    is a constant; gradients flow through the logits only."""
    logits = as_tensor(logits)
    if isinstance(target_probs, Tensor):
        target_probs = target_probs.numpy()
    p = np.asarray(target_probs, dtype=np.float64)
    if p.shape != logits.shape:
        raise ShapeError(f"cross_entropy_soft: logits {logits.shape} vs targets {p.shape}")
    return neg(_sum_all(mul(log_softmax(logits), Tensor._wrap(p.copy()))))


def cross_entropy_hard(logits, class_index: int) -> Tensor:
    logits = as_tensor(logits)
    idx = int(class_index)
    if logits.ndim != 1 or not 0 <= idx < logits.shape[0]:
        raise ShapeError(
            f"cross_entropy_hard: class {class_index} out of range for logits shape {logits.shape}"
        )
    return neg(getitem(log_softmax(logits), idx))


def conv2d(x, kernel, bias=None) -> Tensor:
    """Valid (no padding), stride-1 cross-correlation.

    Either x (H, W) with kernel (kh, kw), or x (H, W, C_in) with kernel
    (kh, kw, C_in, C_out) and optional bias (C_out,).  Built from slice,
    matmul and add primitives, so it differentiates to any order for free.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim == 2 and kernel.ndim == 2:
        h, w = x.shape
        kh, kw = kernel.shape
        if kh > h or kw > w:
            raise ShapeError(f"conv2d: kernel {kernel.shape} does not fit input {x.shape}")
        ho, wo = h - kh + 1, w - kw + 1
        out = None
        for di in range(kh):
            for dj in range(kw):
                patch = getitem(x, (slice(di, di + ho), slice(dj, dj + wo)))
                term = mul(patch, getitem(kernel, (di, dj)))
                out = term if out is None else add(out, term)
        if bias is not None:
            out = add(out, as_tensor(bias))
        return out
    if x.ndim == 3 and kernel.ndim == 4:
        h, w, cin = x.shape
        kh, kw, kcin, cout = kernel.shape
        if kcin != cin:
            raise ShapeError(
                f"conv2d: input channels {cin} do not match kernel channels {kcin}"
                f" (shapes {x.shape} and {kernel.shape})"
            )
        if kh > h or kw > w:
            raise ShapeError(f"conv2d: kernel {kernel.shape} does not fit input {x.shape}")
        ho, wo = h - kh + 1, w - kw + 1
        out = None
        for di in range(kh):
            for dj in range(kw):
                patch = getitem(x, (slice(di, di + ho), slice(dj, dj + wo), slice(None)))
                flat = reshape(patch, (ho * wo, cin))
                term = reshape(matmul(flat, getitem(kernel, (di, dj))), (ho, wo, cout))
                out = term if out is None else add(out, term)
        if bias is not None:
            b = as_tensor(bias)
            if b.shape != (cout,):
                raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
            out = add(out, broadcast_along(broadcast_along(b, 0, wo), 0, ho))
        return out
    raise ShapeError(
        f"conv2d: unsupported shapes {x.shape} and {kernel.shape}"
        " (need (h,w)+(kh,kw) or (h,w,c)+(kh,kw,c,o))"
    )


def max_pool2d(x, size: int) -> Tensor:
    """Non-overlapping size x size max pooling over the leading two axes.
    Ties break toward the lowest offset in row-major window order."""
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"max_pool2d: need a 2-d or 3-d tensor, got shape {x.shape}")
    size = int(size)
    h, w = x.shape[0], x.shape[1]
    if size < 1 or h % size or w % size:
        raise ShapeError(f"max_pool2d: window {size} does not tile input {x.shape}")
    rest = (slice(None),) * (x.ndim - 2)
    phases = []
    for i in range(size):
        for j in range(size):
            phases.append(getitem(x, (slice(i, h, size), slice(j, w, size)) + rest))
    return max_over_axis(stack(phases, axis=0), axis=0)


# ------------------------------------------------------------------ gradient


def grad(output: Tensor, inputs, create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar output w.r.t. the given tensors.

    Walks the active tape backwards, accumulating cotangents.  With
    ``create_graph=True`` the backward computation is recorded on the same
    tape, so the returned gradients can be differentiated again.  The listed
    inputs must appear on the active tape; inputs the output does not depend
    on get zero gradients.
    """
    stack_ = _tapes()
    if not stack_:
        raise TapeError("grad() requires an active Tape context")
    tape = stack_[-1]
    if not isinstance(output, Tensor):
        raise TapeError(f"grad target must be a Tensor, got {type(output).__name__}")
    if output.shape != ():
        raise TapeError(f"grad target must be a scalar tensor, got shape {output.shape}")
    if output._tape is not tape:
        raise TapeError("output is not recorded on the active tape")
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        if not isinstance(t, Tensor) or t._tape is not tape:
            raise TapeError(f"grad input {i} is not on the active tape")

    entries = list(tape.entries)  # snapshot: backward may append to the tape
    if create_graph:
        for e in entries:
            if e.op not in _DIFFERENTIABLE_BACKWARD:
                raise TapeError(f"create_graph: op '{e.op}' has no recordable backward rule")

    cot: dict[int, Tensor] = {output.node_id: Tensor._wrap(np.asarray(1.0))}
    ctx = nullcontext() if create_graph else no_grad()
    with ctx:
        for e in reversed(entries):
            oc = cot.get(e.output.node_id)
            if oc is None:
                continue
            gs = e.backward_fn(oc, e.inputs, e.output)
            for t, g in zip(e.inputs, gs):
                if g is None or not t.requires_grad:
                    continue
                prev = cot.get(t.node_id)
                cot[t.node_id] = g if prev is None else add(prev, g)

    result = []
    for t in inputs:
        g = cot.get(t.node_id)
        if g is None:
            g = Tensor._wrap(np.zeros(t.shape))
        if g.shape != t.shape:
            raise TapeError(f"internal: gradient shape {g.shape} does not match input shape {t.shape}")
        result.append(g)
    return result


def finite_difference(f, x, eps: float = 1e-5) -> Tensor:
    """Central-difference estimate of d f(x) / dx, one element at a time.

    ``f`` takes a Tensor and returns a scalar (Tensor or float).  It is
    evaluated with recording disabled, so this stays independent of the
    reverse-mode machinery it is used to check.
    """
    if eps <= 0:
        raise ValueError(f"finite_difference: eps must be positive, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base)
    flat_out = out.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy()
            xp.reshape(-1)[i] += eps
            xm = base.copy()
            xm.reshape(-1)[i] -= eps
            fp = float(f(Tensor._wrap(xp)))
            fm = float(f(Tensor._wrap(xm)))
            flat_out[i] = (fp - fm) / (2.0 * eps)
    return Tensor._wrap(out)
