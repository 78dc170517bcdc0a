"""
Dense tensor engine with reverse-mode automatic differentiation.

Every differentiable quantity in the package (network activations, hand meshes,
projections, losses) is a `Tensor` built from the primitives in this module. Each
primitive records its parents and a closure that maps the output gradient to parent
gradients; `backward` walks the recorded graph once in reverse topological order.

Shapes are never broadcast implicitly. Elementwise operations accept equal shapes or
a scalar operand; anything else goes through an explicit `reshape`, `transpose` or
`expand`.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64

# Below this angle rodrigues switches to Taylor expansions of its coefficients
RODRIGUES_TAYLOR_EPS = 1e-6
# Derivative coefficients cancel catastrophically for longer, so they switch later
_RODRIGUES_DERIV_TAYLOR_EPS = 1e-3

_grad_mode = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


def is_grad_enabled() -> bool:
    """Whether operations on this thread currently record gradient history."""
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread for the duration of the block."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", float, int, np.ndarray]


class Tensor:
    """
    N-dimensional float64 array that can take part in reverse-mode differentiation.

    Leaves are created directly; interior nodes come from primitives and keep references
    to their parents until the graph is dropped.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.op = "detach"
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def __add__(self, other: Operand) -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return elementwise("add", other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return elementwise("sub", self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return elementwise("sub", other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return elementwise("mul", self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return elementwise("mul", other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return elementwise("div", self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return elementwise("div", other, self)

    def __neg__(self) -> "Tensor":
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"


def as_tensor(value: Operand) -> Tensor:
    """Wrap arrays and Python scalars as constant tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    name: str,
) -> Tensor:
    """
    Register the result of a primitive.

    Args:
        data: Forward value
        parents: Input tensors, in the order `backward_fn` returns their gradients
        backward_fn: Maps the output gradient to one gradient (or None) per parent
        name: Operation name, kept on the node for diagnostics

    Returns:
        Tensor that records history when grad mode is on and any parent requires grad
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.grad = None
    out.op = name
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _sum_to_shape(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient produced for a broadcast result back onto `shape`."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def elementwise(kind: str, a: Operand, b: Operand) -> Tensor:
    """
    Apply add, sub, mul or div to two operands of equal shape or to a tensor and a scalar.

    Raises:
        ShapeError: If neither operand is a scalar and the shapes differ
        ValueError: For an unknown kind
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not equal and neither is scalar")

    x, y = a.data, b.data
    if kind == "add":
        value = x + y
    elif kind == "sub":
        value = x - y
    elif kind == "mul":
        value = x * y
    elif kind == "div":
        value = x / y
    else:
        raise ValueError(f"Unknown elementwise operation: {kind}")

    def _backward(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga, gb = g * y, g * x
        else:
            ga, gb = g / y, -g * x / (y * y)
        return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

    return custom_op(value, (a, b), _backward, kind)


def add(a: Operand, b: Operand) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Operand, b: Operand) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Operand, b: Operand) -> Tensor:
    return elementwise("mul", a, b)


def div(a: Operand, b: Operand) -> Tensor:
    return elementwise("div", a, b)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return custom_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return custom_op(y, (x,), lambda g: (g * y,), "exp")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        value = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {original} as {tuple(shape)}") from e
    return custom_op(value, (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly broadcast `x` to `shape`; gradients are summed back."""
    shape = tuple(shape)
    try:
        value = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from e
    original = x.shape
    return custom_op(value, (x,), lambda g: (_sum_to_shape(g, original),), "expand")


def getitem(x: Tensor, index) -> Tensor:
    original = x.shape
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def _backward(g):
        grad = np.zeros(original, dtype=DTYPE)
        if advanced:
            np.add.at(grad, index, g)
        else:
            grad[index] += g
        return (grad,)

    return custom_op(x.data[index], (x,), _backward, "getitem")


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Select entries along one axis (rows of a batch, for example)."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    original = x.shape

    def _backward(g):
        grad = np.zeros(original, dtype=DTYPE)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return custom_op(np.take(x.data, idx, axis=axis), (x,), _backward, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: operands have differing shapes {sorted(shapes)}")
    value = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % value.ndim

    def _backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return custom_op(value, tuple(tensors), _backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from e
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op(value, tuple(tensors), _backward, "concat")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    original = x.shape
    value = x.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, original).copy(),)

    return custom_op(value, (x,), _backward, "sum")


def mean(x: Tensor) -> Tensor:
    return tensor_sum(x) / float(x.size)


def sq_l2(a: Operand, b: Operand) -> Tensor:
    """Sum of squared differences, sum-reduced to a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sq_l2: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    value = np.sum(diff * diff)

    def _backward(g):
        scaled = 2.0 * g * diff
        return scaled, -scaled

    return custom_op(value, (a, b), _backward, "sq_l2")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return custom_op(y, (x,), _backward, "softmax")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of two matrices, or of two equally batched stacks of matrices.

    Gradients follow dA = G·Bᵀ and dB = Aᵀ·G per batch entry.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: expected two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch extents differ ({a.shape[0]} vs {b.shape[0]})")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")

    x, y = a.data, b.data

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(x, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return custom_op(np.matmul(x, y), (a, b), _backward, "matmul")


def _as_batched_map(x: Tensor, name: str) -> bool:
    if x.ndim == 3:
        return False
    if x.ndim == 4:
        return True
    raise ShapeError(f"{name}: expected C×H×W or B×C×H×W input, got shape {x.shape}")


def conv_1x1(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Per-pixel channel mixing: out[o, y, x] = Σ_c weight[o, c]·features[c, y, x] + bias[o].

    Accepts C×H×W maps or B×C×H×W batches.
    """
    batched = _as_batched_map(features, "conv_1x1")
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv_1x1: weight {weight.shape} / bias {bias.shape} are not C_out×C_in / C_out")
    c_axis = 1 if batched else 0
    if features.shape[c_axis] != weight.shape[1]:
        raise ShapeError(
            f"conv_1x1: input has {features.shape[c_axis]} channels but weight expects {weight.shape[1]}"
        )

    f, w, bvec = features.data, weight.data, bias.data
    value = np.einsum("oc,...chw->...ohw", w, f) + bvec[:, None, None]

    def _backward(g):
        gf = np.einsum("oc,...ohw->...chw", w, g) if features.requires_grad else None
        gw = np.einsum("...ohw,...chw->oc", g, f)
        gb = g.sum(axis=(0, 2, 3)) if batched else g.sum(axis=(1, 2))
        return gf, gw, gb

    return custom_op(value, (features, weight, bias), _backward, "conv_1x1")


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """
    3×3 convolution with zero padding 1.

    Args:
        x: C×H×W or B×C×H×W input
        weight: C_out×C_in×3×3 kernel
        bias: C_out bias
        stride: Spatial stride (the backbone uses 2)

    Returns:
        Output with spatial extent (S + 2 - 3) // stride + 1 per axis
    """
    batched = _as_batched_map(x, "conv3x3")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3: kernel must be C_out×C_in×3×3, got {weight.shape}")
    data = x.data if batched else x.data[None]
    n, c, h, w = data.shape
    if c != weight.shape[1]:
        raise ShapeError(f"conv3x3: input has {c} channels but kernel expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3x3: bias shape {bias.shape} does not match {weight.shape[0]} output channels")

    c_out = weight.shape[0]
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    padded = np.pad(data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    span_h = stride * (h_out - 1) + 1
    span_w = stride * (w_out - 1) + 1

    cols = np.empty((n, c, 3, 3, h_out, w_out), dtype=DTYPE)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di, dj] = padded[:, :, di:di + span_h:stride, dj:dj + span_w:stride]
    cols = cols.reshape(n, c * 9, h_out * w_out)
    kernel = weight.data.reshape(c_out, c * 9)

    value = np.matmul(kernel, cols) + bias.data[None, :, None]
    value = value.reshape(n, c_out, h_out, w_out)
    if not batched:
        value = value[0]

    def _backward(g):
        g2 = (g if batched else g[None]).reshape(n, c_out, h_out * w_out)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g2.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            dcols = np.matmul(kernel.T, g2).reshape(n, c, 3, 3, h_out, w_out)
            dpad = np.zeros_like(padded)
            for di in range(3):
                for dj in range(3):
                    dpad[:, :, di:di + span_h:stride, dj:dj + span_w:stride] += dcols[:, :, di, dj]
            gx = dpad[:, :, 1:-1, 1:-1]
            if not batched:
                gx = gx[0]
        return gx, gw, gb

    return custom_op(value, (x, weight, bias), _backward, "conv3x3")


def _interpolation_matrix(source: int, target: int) -> np.ndarray:
    """Align-corners linear interpolation weights of shape target×source."""
    matrix = np.zeros((target, source), dtype=DTYPE)
    if target == 1:
        positions = np.array([(source - 1) / 2.0])
    else:
        positions = np.arange(target, dtype=DTYPE) * (source - 1) / (target - 1)
    lower = np.floor(positions).astype(np.int64)
    lower = np.minimum(lower, source - 1)
    upper = np.minimum(lower + 1, source - 1)
    frac = positions - lower
    rows = np.arange(target)
    np.add.at(matrix, (rows, lower), 1.0 - frac)
    np.add.at(matrix, (rows, upper), frac)
    return matrix


def bilinear_resize(features: Tensor, height: int, width: int) -> Tensor:
    """
    Resample each channel to height×width with align-corners bilinear interpolation.

    Source coordinate for target index d is d·(S−1)/(S'−1), or the center (S−1)/2
    when the target extent is 1.
    """
    _as_batched_map(features, "bilinear_resize")
    if height < 1 or width < 1:
        raise ShapeError(f"bilinear_resize: target extent must be ≥ 1, got {height}×{width}")
    h, w = features.shape[-2:]
    if (h, w) == (height, width):
        return custom_op(features.data.copy(), (features,), lambda g: (g,), "bilinear_resize")

    rows = _interpolation_matrix(h, height)
    cols = _interpolation_matrix(w, width)
    value = np.einsum("ph,...hw,qw->...pq", rows, features.data, cols)

    def _backward(g):
        return (np.einsum("ph,...pq,qw->...hw", rows, g, cols),)

    return custom_op(value, (features,), _backward, "bilinear_resize")


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def _skew(v: np.ndarray) -> np.ndarray:
    k = np.zeros(v.shape[:-1] + (3, 3), dtype=DTYPE)
    k[..., 0, 1] = -v[..., 2]
    k[..., 0, 2] = v[..., 1]
    k[..., 1, 0] = v[..., 2]
    k[..., 1, 2] = -v[..., 0]
    k[..., 2, 0] = -v[..., 1]
    k[..., 2, 1] = v[..., 0]
    return k


def _unskew(m: np.ndarray) -> np.ndarray:
    """Inner products <m, skew(e_k)> for k = x, y, z."""
    return np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )


def _rodrigues_coefficients(theta: np.ndarray):
    """
    Coefficients of R = I + a·K + b·K² (K = skew of the unnormalized axis-angle) and
    the derivative terms c = a'(θ)/θ, d = b'(θ)/θ.
    """
    t2 = theta * theta
    small = theta < RODRIGUES_TAYLOR_EPS
    safe = np.where(small, 1.0, theta)
    half_sin = np.sin(safe / 2.0)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * half_sin * half_sin / (safe * safe))

    tiny = theta < _RODRIGUES_DERIV_TAYLOR_EPS
    safe = np.where(tiny, 1.0, theta)
    t4 = t2 * t2
    c = np.where(
        tiny,
        -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
        (safe * np.cos(safe) - np.sin(safe)) / safe ** 3,
    )
    half_sin = np.sin(safe / 2.0)
    d = np.where(
        tiny,
        -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        (safe * np.sin(safe) - 4.0 * half_sin * half_sin) / safe ** 4,
    )
    return a, b, c, d


def rodrigues(axis_angle: Tensor) -> Tensor:
    """
    Convert axis-angle vectors (…×3, radians) to rotation matrices (…×3×3).

    The zero vector maps to the identity and gradients stay finite there.
    """
    if axis_angle.ndim < 1 or axis_angle.shape[-1] != 3:
        raise ShapeError(f"rodrigues: trailing extent must be 3, got shape {axis_angle.shape}")
    r = axis_angle.data
    theta = np.sqrt(np.sum(r * r, axis=-1))
    a, b, c, d = _rodrigues_coefficients(theta)
    k = _skew(r)
    k2 = np.matmul(k, k)
    eye = np.broadcast_to(np.eye(3, dtype=DTYPE), k.shape)
    value = eye + a[..., None, None] * k + b[..., None, None] * k2

    def _backward(g):
        kt = np.swapaxes(k, -1, -2)
        g_k = np.sum(g * k, axis=(-2, -1))
        g_k2 = np.sum(g * k2, axis=(-2, -1))
        radial = (c * g_k + d * g_k2)[..., None] * r
        mixed = a[..., None, None] * g + b[..., None, None] * (np.matmul(g, kt) + np.matmul(kt, g))
        return (radial + _unskew(mixed),)

    return custom_op(value, (axis_angle,), _backward, "rodrigues")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate ∂loss/∂leaf into `.grad` of every leaf that requires grad.

    Raises:
        ShapeError: If the root is not a scalar
    """
    if loss.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward called on a tensor without gradient history")
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing AD gradients with central differences."""

    passed: bool
    max_rel_error: float
    worst_index: Optional[Tuple[int, ...]]
    n_checked: int
    failure: Optional[str] = None
    errors: Dict[Tuple[int, ...], float] = field(default_factory=dict, repr=False)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        detail = f": {self.failure}" if self.failure else ""
        return (
            f"[{status}] max rel err {self.max_rel_error:.3e} at {self.worst_index} "
            f"over {self.n_checked} coordinates{detail}"
        )

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "worst_index": list(self.worst_index) if self.worst_index is not None else None,
            "n_checked": self.n_checked,
            "failure": self.failure,
        }


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    params: Tensor,
    step: float = 1e-5,
    tol: float = 1e-6,
    indices: Optional[Sequence[Tuple[int, ...]]] = None,
    floor: Optional[float] = None,
) -> GradCheckReport:
    """
    Compare AD gradients of a scalar function with central finite differences.

    Relative error per coordinate is |ad − fd| / max(|ad|, |fd|, floor). The floor
    defaults to 1e-3 × max(1, max|ad|) so coordinates with near-zero gradient are
    judged against the gradient's overall scale.

    Args:
        f: Maps `params` to a scalar tensor; must be deterministic
        params: Leaf tensor perturbed in place (restored afterwards)
        step: Central-difference step
        tol: Maximum tolerated relative error
        indices: Coordinates to check (default: all)
        floor: Denominator floor, see above

    Returns:
        GradCheckReport; non-finite losses are reported as failures with their location
    """
    params.requires_grad = True
    params.grad = None
    loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        return GradCheckReport(False, float("inf"), None, 0, "non-finite loss at the unperturbed point")
    backward(loss)
    analytic = params.grad if params.grad is not None else np.zeros_like(params.data)
    if floor is None:
        floor = 1e-3 * max(1.0, float(np.max(np.abs(analytic))) if analytic.size else 1.0)

    if indices is None:
        indices = list(np.ndindex(params.shape))
    original = params.data.copy()
    errors: Dict[Tuple[int, ...], float] = {}
    worst, worst_err = None, 0.0
    try:
        for index in indices:
            index = tuple(index)
            values = []
            for sign in (1.0, -1.0):
                perturbed = original.copy()
                perturbed[index] += sign * step
                params.data = perturbed
                with no_grad():
                    value = f(params).item()
                if not np.isfinite(value):
                    where = "+" if sign > 0 else "-"
                    return GradCheckReport(
                        False, float("inf"), index, len(errors),
                        f"non-finite loss at coordinate {index} ({where}step)", errors,
                    )
                values.append(value)
            numeric = (values[0] - values[1]) / (2.0 * step)
            ad = float(analytic[index])
            err = abs(ad - numeric) / max(abs(ad), abs(numeric), floor)
            errors[index] = err
            if worst is None or err > worst_err:
                worst, worst_err = index, err
    finally:
        params.data = original

    passed = worst_err <= tol
    failure = None if passed else f"relative error {worst_err:.3e} exceeds tolerance {tol:.1e} at {worst}"
    if not passed:
        logger.warning(f"Gradient check failed: {failure}")
    return GradCheckReport(passed, worst_err, worst, len(errors), failure, errors)
