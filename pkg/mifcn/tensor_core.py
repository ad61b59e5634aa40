"""
Dense tensors with reverse-mode automatic differentiation.

This module provides the numeric engine the MIFCN model is built on:
- A float64 :class:`Tensor` that doubles as a node of the computation graph
- Dilated 2-D convolution with symmetric zero padding ("same-zero")
- The leaky ReLU nonlinearity and an elementwise arithmetic suite
- Mean reduction, reverse-mode :func:`backward` and a central-difference
  gradient oracle
- A per-thread :func:`no_grad` switch for inference

The operator set is closed: every op records its parents and a backward
rule, so any composite built from these functions can be differentiated.

Typical usage example:
    x = Tensor(np.random.rand(1, 8, 8), requires_grad=True)
    k = Tensor(np.random.randn(4, 1, 3, 3), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)

    y = lrelu(conv2d_dilated(x, k, b, ConvSpec(kernel_size=3, dilation=2)), 0.2)
    grads = backward(reduce_mean(square(y)))
    grads[k]  # d mean(y^2) / dk

Copyright 2025 The MIFCN Authors

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PreconditionError

logger = logging.getLogger(__name__)

DTYPE = np.float64
PADDING_SAME_ZERO = "same-zero"
# Window elements gathered per convolution row block.
_BLOCK_ELEMENTS = 1 << 20

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
TensorLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_grad_state = threading.local()


class Tensor:
    """Dense float64 array that is also a node of the autodiff graph.

    Leaf tensors are created directly; every operation in this module returns
    a new Tensor whose ``op`` names the operation and whose ``parents`` are the
    operand nodes. Parents are only recorded when some operand requires a
    gradient, so constant expressions do not grow a graph.

    Attributes:
        data: Row-major float64 values
        grad: Gradient of the last backward root with respect to this node
        requires_grad: Whether gradients flow into this node
        op: Operation tag ("leaf" for user-created tensors)
        parents: Operand nodes, in operand order
    """

    __array_priority__ = 100.0

    def __init__(
        self,
        data: TensorLike,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=DTYPE) if op == "leaf" else np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a single-element tensor as a Python float."""
        if self.data.size != 1:
            raise PreconditionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{grad_flag})"

    def __add__(self, other: TensorLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: TensorLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: TensorLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: TensorLike) -> "Tensor":
        if np.isscalar(other):
            return scale(self, float(other))  # type: ignore[arg-type]
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: TensorLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a dilated convolution.

    Attributes:
        kernel_size: Odd kernel extent k (the model uses 1 and 3)
        dilation: Tap spacing d >= 1
        padding: Only "same-zero" is supported; (k - 1) * d / 2 zeros per side
    """

    kernel_size: int = 3
    dilation: int = 1
    padding: str = PADDING_SAME_ZERO

    def __post_init__(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise PreconditionError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.dilation < 1:
            raise PreconditionError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding != PADDING_SAME_ZERO:
            raise PreconditionError(f"unsupported padding {self.padding!r}")

    @property
    def pad(self) -> int:
        return (self.kernel_size - 1) * self.dilation // 2


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@contextmanager
def no_grad() -> Iterator[None]:
    """Build results without recording the graph; the switch is per thread."""
    previous = getattr(_grad_state, "enabled", True)
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


def _node(
    data: np.ndarray, op: str, parents: Tuple[Tensor, ...], backward_fn: BackwardFn
) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)
    return Tensor(data, op=op)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise PreconditionError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise suite
# ---------------------------------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise sum of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))


def add_n(tensors: Sequence[TensorLike]) -> Tensor:
    """Elementwise sum of one or more equally shaped tensors as a single node."""
    if not tensors:
        raise PreconditionError("add_n needs at least one operand")
    items = tuple(as_tensor(t) for t in tensors)
    for t in items[1:]:
        _check_same_shape("add_n", items[0], t)
    total = items[0].data.copy()
    for t in items[1:]:
        total += t.data
    return _node(total, "add_n", items, lambda g: tuple(g for _ in items))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise difference a - b."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def hadamard(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("hadamard", a, b)
    return _node(a.data * b.data, "hadamard", (a, b), lambda g: (g * b.data, g * a.data))


def square(x: TensorLike) -> Tensor:
    """Elementwise square."""
    x = as_tensor(x)
    return _node(x.data * x.data, "square", (x,), lambda g: (2.0 * x.data * g,))


def exp(x: TensorLike) -> Tensor:
    """Elementwise natural exponential."""
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, "exp", (x,), lambda g: (g * out,))


def scale(x: TensorLike, factor: float) -> Tensor:
    """Multiply every entry by a constant scalar."""
    x = as_tensor(x)
    factor = float(factor)
    return _node(x.data * factor, "scale", (x,), lambda g: (g * factor,))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise quotient a / b; every denominator entry must be nonzero."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise PreconditionError("div: denominator has zero entries")
    out = a.data / b.data
    return _node(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def lrelu(x: TensorLike, alpha: float) -> Tensor:
    """Leaky ReLU max(alpha * x, x).

    The subgradient at exactly zero is taken as ``alpha``.
    """
    if not 0.0 <= alpha < 1.0:
        raise PreconditionError(f"lrelu: alpha must lie in [0, 1), got {alpha}")
    x = as_tensor(x)
    slope = np.where(x.data > 0.0, 1.0, alpha)
    return _node(np.maximum(alpha * x.data, x.data), "lrelu", (x,), lambda g: (g * slope,))


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    """View the tensor with a new shape of equal size."""
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise PreconditionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from e
    return _node(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def reduce_mean(x: TensorLike) -> Tensor:
    """Arithmetic mean of all entries, as a 0-d tensor."""
    x = as_tensor(x)
    if x.size == 0:
        raise PreconditionError("reduce_mean of an empty tensor")
    n = x.size
    return _node(
        np.asarray(x.data.mean()),
        "reduce_mean",
        (x,),
        lambda g: (np.full(x.shape, float(g) / n),),
    )


# ---------------------------------------------------------------------------
# Dilated convolution
# ---------------------------------------------------------------------------


def _tap_offsets(k: int, d: int, row_stride: int) -> List[Tuple[int, int, int]]:
    # out(x) = sum_b F(x - d*b) K(b); in padded coordinates tap (p, q) reads
    # rows shifted by d*(k-1-p) and columns by d*(k-1-q).
    return [
        (d * (k - 1 - p) * row_stride + d * (k - 1 - q), p, q) for p in range(k) for q in range(k)
    ]


def _pad_flat(x: np.ndarray, pad: int) -> Tuple[np.ndarray, int]:
    """Zero-pad [N,C,H,W] and flatten the spatial axes.

    One extra zero row at the bottom lets every tap read a contiguous window
    of H * Wp values; the Wp - W trailing columns of each output row are
    discarded after accumulation.
    """
    n, c, h, w = x.shape
    wp = w + 2 * pad
    padded = np.zeros((n, c, h + 2 * pad + 1, wp), dtype=DTYPE)
    padded[:, :, pad : pad + h, pad : pad + w] = x
    return padded.reshape(n, c, -1), wp


def _conv_forward(x4: np.ndarray, weights: np.ndarray, dilation: int, pad: int) -> np.ndarray:
    """Bias-free convolution of [N,Cin,H,W] as one contraction per row block.

    Each block gathers its dilated k x k windows with a strided view and
    contracts (Cin, k, k) against the flipped kernels in a single GEMM.
    """
    n, cin, h, w = x4.shape
    cout, _, k, _ = weights.shape
    span = 2 * pad + 1
    padded = np.pad(x4, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    flipped = weights[:, :, ::-1, ::-1]
    rows = max(1, _BLOCK_ELEMENTS // max(1, n * w * cin * k * k))
    out = np.empty((n, cout, h, w), dtype=DTYPE)
    for top in range(0, h, rows):
        bottom = min(h, top + rows)
        band = padded[:, :, top : bottom + span - 1, :]
        windows = sliding_window_view(band, (span, span), axis=(2, 3))[..., ::dilation, ::dilation]
        block = np.tensordot(windows, flipped, axes=([1, 4, 5], [1, 2, 3]))
        out[:, :, top:bottom, :] = block.transpose(0, 3, 1, 2)
    return out


def conv2d_dilated(
    x: TensorLike,
    kernels: TensorLike,
    bias: TensorLike,
    spec: Optional[ConvSpec] = None,
) -> Tensor:
    """Dilated 2-D convolution with "same-zero" padding.

    Computes out[i] = bias[i] + sum_j (F_j *_d K_ij) with the literal
    convolution orientation (a = x - d*b) and F(a) = 0 outside the image.
    Nothing is kept for the backward pass beyond the inputs themselves, so
    inference under :func:`no_grad` holds no padded copies.

    Args:
        x: Input feature maps [Cin, H, W], or a batch [N, Cin, H, W]
        kernels: Kernel stack [Cout, Cin, k, k]
        bias: Bias vector [Cout]
        spec: Convolution geometry; defaults to dilation 1 with the kernels' k

    Returns:
        Output feature maps [Cout, H, W] (or [N, Cout, H, W])

    Raises:
        PreconditionError: If shapes are inconsistent or k is even
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise PreconditionError(f"conv2d: kernels must be [Cout,Cin,k,k], got {kernels.shape}")
    cout, cin, k, _ = kernels.shape
    if k % 2 == 0:
        raise PreconditionError(f"conv2d: kernel size must be odd, got {k}")
    spec = spec or ConvSpec(kernel_size=k)
    if spec.kernel_size != k:
        raise PreconditionError(f"conv2d: spec kernel size {spec.kernel_size} != kernels {k}")
    if x.ndim not in (3, 4):
        raise PreconditionError(f"conv2d: input must be [Cin,H,W] or [N,Cin,H,W], got {x.shape}")
    if x.shape[-3] != cin:
        raise PreconditionError(f"conv2d: input has {x.shape[-3]} channels, kernels expect {cin}")
    if bias.shape != (cout,):
        raise PreconditionError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")

    batched = x.ndim == 4
    x4 = x.data if batched else x.data[None]
    n, _, h, w = x4.shape
    pad = spec.pad
    weights = kernels.data
    out = _conv_forward(x4, weights, spec.dilation, pad)
    out += bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        xflat, wp = _pad_flat(x4, pad)
        length = h * wp
        g4 = g if batched else g[None]
        gext = np.zeros((n, cout, h, wp), dtype=DTYPE)
        gext[:, :, :, :w] = g4
        gflat = gext.reshape(n, cout, length)
        grad_w = np.empty_like(weights)
        grad_xflat = np.zeros_like(xflat)
        for offset, p, q in _tap_offsets(k, spec.dilation, wp):
            window = xflat[:, :, offset : offset + length]
            grad_w[:, :, p, q] = np.matmul(gflat, window.transpose(0, 2, 1)).sum(axis=0)
            grad_xflat[:, :, offset : offset + length] += np.matmul(weights[:, :, p, q].T, gflat)
        grad_x = grad_xflat.reshape(n, cin, h + 2 * pad + 1, wp)[:, :, pad : pad + h, pad : pad + w]
        grad_b = g4.sum(axis=(0, 2, 3))
        return (grad_x if batched else grad_x[0]), grad_w, grad_b

    return _node(out if batched else out[0], "conv2d_dilated", (x, kernels, bias), backward_fn)


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> List[Tensor]:
    """Return every node reachable from ``root``, parents before children."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> Dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(node) to every node of the graph.

    Gradients from several consumers of the same node are summed. Every
    reachable node that requires a gradient has ``grad`` set (replacing the
    value of any previous pass).

    Args:
        root: Scalar-valued tensor

    Returns:
        Mapping from each leaf that requires a gradient to its gradient

    Raises:
        PreconditionError: If the root is not scalar
    """
    if root.size != 1:
        raise PreconditionError(f"backward needs a scalar root, got shape {root.shape}")
    order = topological_order(root)
    for node in order:
        node.grad = None
    grads: Dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=DTYPE)}

    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node.parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = np.asarray(parent_grad, dtype=DTYPE)

    return {
        node: node.grad
        for node in order
        if node.op == "leaf" and node.requires_grad and node.grad is not None
    }


def finite_difference_grad(
    f: Callable[[np.ndarray], float],
    x: TensorLike,
    eps: float = 1e-6,
    coords: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central-difference gradient oracle.

    Each coordinate i is estimated as (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).

    Args:
        f: Scalar function of an array shaped like ``x``
        x: Evaluation point (left unmodified)
        eps: Step size, must be positive
        coords: Flat indices to estimate; all coordinates when omitted

    Returns:
        The gradient shaped like ``x``, or a 1-D array aligned with ``coords``
    """
    if eps <= 0:
        raise PreconditionError(f"finite difference step must be positive, got {eps}")
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    flat = base.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    estimates = np.empty(len(indices), dtype=DTYPE)

    for slot, i in enumerate(indices):
        original = flat[i]
        flat[i] = original + eps
        f_plus = float(f(base))
        flat[i] = original - eps
        f_minus = float(f(base))
        flat[i] = original
        estimates[slot] = (f_plus - f_minus) / (2.0 * eps)

    return estimates.reshape(base.shape) if coords is None else estimates
