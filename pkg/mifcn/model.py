"""
The multi-input fully-convolutional denoiser.

T branch networks each denoise one input B-scan; a pixel-wise weighted
averaging module fuses the branch outputs around the main branch, and a small
head (B hidden 3x3 layers and a 1x1 layer) reconstructs the final image:

    Y_t --branch_t--> X_t           (A x [3x3 dilated conv -> LReLU], 1x1 conv)
    D_t = (X_1 - X_t)^2,  W_t = exp(-D_t / h),  P_t = W_t / sum_s W_s
    X_bar = sum_t X_t o P_t
    X_R = head(X_bar)

All of it is built from :mod:`mifcn.tensor_core` operations, so the whole
forward pass is differentiable end-to-end (including through P_t).

Typical usage example:
    config = ModelConfig(T=5)
    params = identity_init(config, seed=0)
    output = mifcn_forward([main, near1, near2, near3, near4], params, config)
    denoised = output.final.data

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
import re
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import PreconditionError
from .tensor_core import (
    ConvSpec,
    Tensor,
    TensorLike,
    add_n,
    as_tensor,
    conv2d_dilated,
    div,
    exp,
    hadamard,
    lrelu,
    reshape,
    scale,
    square,
    sub,
)

logger = logging.getLogger(__name__)

# Defaults of the main configuration (MIFCN-3-1)
DEFAULT_BRANCHES = 5
DEFAULT_FEATURE_MAPS = 24
DEFAULT_BRANCH_LAYERS = 3
DEFAULT_HEAD_LAYERS = 1
DEFAULT_H = 400.0
DEFAULT_ALPHA = 0.2
DEFAULT_INIT_NOISE = 1e-4
HIDDEN_KERNEL = 3

_LABEL_PATTERN = re.compile(r"^MIFCN-(\d+)-(\d+)$")


def default_dilations(layers: int) -> List[int]:
    """Dilation schedule for a branch of ``layers`` hidden layers.

    Three layers give 1, 2, 1; longer stacks keep 1 at both
    ends with 2 in between, and two layers use 1, 2.
    """
    if layers <= 1:
        return [1] * max(layers, 0)
    if layers == 2:
        return [1, 2]
    return [1] + [2] * (layers - 2) + [1]


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Attributes:
        T: Number of input branches (main image plus T - 1 nearby images)
        C: Feature maps per hidden layer
        A: 3x3 convolution layers per branch
        B: 3x3 convolution layers after the fusion module
        dilations: Dilation of each branch hidden layer (length A)
        h: Fusion decay constant, in squared intensity units
        alpha: Leak of the LReLU activation
    """

    T: int = DEFAULT_BRANCHES
    C: int = DEFAULT_FEATURE_MAPS
    A: int = DEFAULT_BRANCH_LAYERS
    B: int = DEFAULT_HEAD_LAYERS
    dilations: Optional[List[int]] = None
    h: float = DEFAULT_H
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self) -> None:
        if self.dilations is None:
            self.dilations = default_dilations(self.A)
        self.dilations = [int(d) for d in self.dilations]

    def validate(self) -> List[str]:
        """Return the list of violated invariants (empty when valid)."""
        errors = []
        if self.T < 1:
            errors.append("T must be >= 1")
        if self.C < 1:
            errors.append("C must be >= 1")
        if self.A < 1:
            errors.append("A must be >= 1")
        if self.B < 0:
            errors.append("B must be >= 0")
        if len(self.dilations or []) != self.A:
            errors.append(f"dilations must list A={self.A} values, got {self.dilations}")
        elif any(d < 1 for d in self.dilations or []):
            errors.append("dilations must all be >= 1")
        if not self.h > 0:
            errors.append("h must be > 0")
        if not 0.0 <= self.alpha < 1.0:
            errors.append("alpha must lie in [0, 1)")
        return errors

    def check(self) -> "ModelConfig":
        errors = self.validate()
        if errors:
            raise PreconditionError("Invalid model configuration: " + "; ".join(errors))
        return self

    @property
    def label(self) -> str:
        """Layer-count label in the MIFCN-A-B form."""
        return f"MIFCN-{self.A}-{self.B}"

    @classmethod
    def from_label(cls, label: str, **overrides: Any) -> "ModelConfig":
        """Build a configuration from a label such as ``MIFCN-4-1``."""
        match = _LABEL_PATTERN.match(label.strip())
        if match is None:
            raise PreconditionError(f"not a MIFCN-A-B label: {label!r}")
        return cls(A=int(match.group(1)), B=int(match.group(2)), **overrides)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ModelConfig":
        known = {k: values[k] for k in ("T", "C", "A", "B", "dilations", "h", "alpha") if k in values}
        if "dilations" in known and known["dilations"] is not None:
            known["dilations"] = list(known["dilations"])
        for key in ("T", "C", "A", "B"):
            if key in known:
                known[key] = int(known[key])
        for key in ("h", "alpha"):
            if key in known:
                known[key] = float(known[key])
        return cls(**known)


@dataclass
class ConvLayer:
    """One convolution: kernels [Cout, Cin, k, k], bias [Cout] and a dilation."""

    weight: Tensor
    bias: Tensor
    dilation: int = 1

    def __call__(self, x: TensorLike) -> Tensor:
        spec = ConvSpec(kernel_size=self.weight.shape[-1], dilation=self.dilation)
        return conv2d_dilated(x, self.weight, self.bias, spec)


@dataclass
class LayerStack:
    """Hidden (conv -> LReLU) layers followed by a linear output layer."""

    hidden: List[ConvLayer]
    output: ConvLayer

    def layers(self) -> Iterator[Tuple[str, ConvLayer]]:
        for index, layer in enumerate(self.hidden, start=1):
            yield f"hidden{index}", layer
        yield "output", self.output


@dataclass
class MifcnParams:
    """Every learnable kernel and bias: T independent branches and a head."""

    branches: List[LayerStack]
    head: LayerStack

    def named_tensors(self) -> Dict[str, Tensor]:
        """Parameters keyed by dotted name, in a fixed order."""
        named: Dict[str, Tensor] = {}
        for t, branch in enumerate(self.branches, start=1):
            for layer_name, layer in branch.layers():
                named[f"branch{t}.{layer_name}.weight"] = layer.weight
                named[f"branch{t}.{layer_name}.bias"] = layer.bias
        for layer_name, layer in self.head.layers():
            named[f"head.{layer_name}.weight"] = layer.weight
            named[f"head.{layer_name}.bias"] = layer.bias
        return named

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.named_tensors().items()}

    def copy(self) -> "MifcnParams":
        """Deep copy with fresh leaf tensors."""
        def clone(stack: LayerStack) -> LayerStack:
            return LayerStack(
                hidden=[_clone_layer(layer) for layer in stack.hidden],
                output=_clone_layer(stack.output),
            )

        return MifcnParams(branches=[clone(b) for b in self.branches], head=clone(self.head))

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "MifcnParams":
        """Rebuild parameters from named arrays laid out for ``config``.

        Raises:
            PreconditionError: If a tensor is missing, unexpected, or misshapen
        """
        template = _allocate(config, lambda shape: np.zeros(shape))
        expected = template.named_tensors()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise PreconditionError(
                f"parameter names do not match {config.label} with T={config.T}: "
                f"missing={missing[:4]} unexpected={extra[:4]}"
            )
        for name, tensor in expected.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise PreconditionError(f"{name}: expected shape {tensor.shape}, got {value.shape}")
            tensor.data[...] = value
        return template


def _clone_layer(layer: ConvLayer) -> ConvLayer:
    return ConvLayer(
        weight=Tensor(layer.weight.data, requires_grad=True),
        bias=Tensor(layer.bias.data, requires_grad=True),
        dilation=layer.dilation,
    )


def _layer_shapes(config: ModelConfig) -> Tuple[List[Tuple[int, int, int, int]], List[Tuple[int, int, int, int]]]:
    """Kernel shapes of a branch and of the head, hidden layers then output."""
    c = config.C
    branch = [(c, 1 if l == 0 else c, HIDDEN_KERNEL, HIDDEN_KERNEL) for l in range(config.A)]
    branch.append((1, c, 1, 1))
    head = [(c, 1 if l == 0 else c, HIDDEN_KERNEL, HIDDEN_KERNEL) for l in range(config.B)]
    head.append((1, c if config.B > 0 else 1, 1, 1))
    return branch, head


def _allocate(config: ModelConfig, make_kernel) -> MifcnParams:
    branch_shapes, head_shapes = _layer_shapes(config)

    def stack(shapes, dilations) -> LayerStack:
        layers = [
            ConvLayer(
                weight=Tensor(make_kernel(shape), requires_grad=True),
                bias=Tensor(np.zeros(shape[0]), requires_grad=True),
                dilation=d,
            )
            for shape, d in zip(shapes, dilations)
        ]
        return LayerStack(hidden=layers[:-1], output=layers[-1])

    branches = [stack(branch_shapes, list(config.dilations) + [1]) for _ in range(config.T)]
    head = stack(head_shapes, [1] * len(head_shapes))
    return MifcnParams(branches=branches, head=head)


def identity_kernel(cout: int, cin: int, k: int) -> np.ndarray:
    """Center-tap kernel stack wiring output channel i to input channel i mod Cin.

    Every output channel has exactly one incoming tap of weight 1, so a stack
    of these layers copies its input without any rounding for every C.
    """
    kernel = np.zeros((cout, cin, k, k))
    center = k // 2
    kernel[np.arange(cout), np.arange(cout) % cin, center, center] = 1.0
    return kernel


def identity_init(config: ModelConfig, seed: int, noise_std: float = DEFAULT_INIT_NOISE) -> MifcnParams:
    """Identity initialization with seeded Gaussian tap noise.

    Every layer starts as the identity map (see :func:`identity_kernel`), all
    biases are zero, and each kernel tap receives zero-mean Gaussian noise of
    standard deviation ``noise_std`` to break channel symmetry.
    """
    config.check()
    rng = np.random.default_rng(seed)

    def make_kernel(shape: Tuple[int, int, int, int]) -> np.ndarray:
        kernel = identity_kernel(shape[0], shape[1], shape[2])
        if noise_std > 0:
            kernel = kernel + rng.normal(0.0, noise_std, size=shape)
        return kernel

    params = _allocate(config, make_kernel)
    logger.debug(f"Identity-initialized {config.label} with T={config.T}, seed={seed}")
    return params


def random_init(config: ModelConfig, seed: int, std: float = 0.3, bias_std: float = 0.1) -> MifcnParams:
    """Gaussian kernels and biases, used by gradient checks and oracle tests."""
    config.check()
    rng = np.random.default_rng(seed)
    params = _allocate(config, lambda shape: rng.normal(0.0, std, size=shape))
    for tensor in params.named_tensors().values():
        if tensor.ndim == 1:
            tensor.data[...] = rng.normal(0.0, bias_std, size=tensor.shape)
    return params


@dataclass
class MifcnOutput:
    """Every quantity the loss and the inspection tools need.

    Attributes:
        branch_outputs: X_1..X_T, one per branch
        weights: P_1..P_T fusion weight maps
        fused: X_bar, the weighted average
        final: X_R, the reconstruction
    """

    branch_outputs: List[Tensor]
    weights: List[Tensor]
    fused: Tensor
    final: Tensor

    @property
    def main_branch(self) -> Tensor:
        return self.branch_outputs[0]


def _stack_forward(image: TensorLike, stack: LayerStack, alpha: float) -> Tensor:
    image = as_tensor(image)
    if image.ndim not in (2, 3):
        raise PreconditionError(f"expected an image [H,W] or a batch [N,H,W], got {image.shape}")
    features = reshape(image, image.shape[:-2] + (1,) + image.shape[-2:])
    for layer in stack.hidden:
        features = lrelu(layer(features), alpha)
    return reshape(stack.output(features), image.shape)


def branch_forward(image: TensorLike, branch: LayerStack, alpha: float = DEFAULT_ALPHA) -> Tensor:
    """Denoise one input: A x (dilated 3x3 conv -> LReLU), then a linear 1x1 conv."""
    return _stack_forward(image, branch, alpha)


def head_forward(fused: TensorLike, head: LayerStack, alpha: float = DEFAULT_ALPHA) -> Tensor:
    """Reconstruct X_R from X_bar: B x (3x3 conv -> LReLU), then a linear 1x1 conv."""
    return _stack_forward(fused, head, alpha)


def fusion_weights(branch_outputs: Sequence[TensorLike], h: float) -> List[Tensor]:
    """Pixel-wise weights P_t comparing every branch output with the main branch.

    Args:
        branch_outputs: X_1..X_T of identical shape; X_1 is the main branch
        h: Decay constant, must be positive

    Returns:
        P_1..P_T; they sum to one and P_1 is the largest at every pixel
    """
    if not h > 0:
        raise PreconditionError(f"fusion constant h must be positive, got {h}")
    if not branch_outputs:
        raise PreconditionError("fusion needs at least one branch output")
    outputs = [as_tensor(x) for x in branch_outputs]
    main = outputs[0]
    raw = [exp(scale(square(sub(main, x)), -1.0 / h)) for x in outputs]
    total = add_n(raw)
    return [div(w, total) for w in raw]


def weighted_average(branch_outputs: Sequence[TensorLike], weights: Sequence[TensorLike]) -> Tensor:
    """X_bar = sum_t X_t o P_t for weights that sum to one.

    Evaluated as X_1 + sum_{t>1} P_t o (X_t - X_1), which returns X_1 exactly
    wherever every branch agrees with the main branch.
    """
    if len(branch_outputs) != len(weights) or not weights:
        raise PreconditionError(
            f"got {len(branch_outputs)} branch outputs and {len(weights)} weight maps"
        )
    main = as_tensor(branch_outputs[0])
    offsets = [hadamard(sub(x, main), p) for x, p in zip(branch_outputs[1:], weights[1:])]
    return add_n([main] + offsets) if offsets else main


def mifcn_forward(
    inputs: Sequence[TensorLike],
    params: MifcnParams,
    config: ModelConfig,
    h: Optional[float] = None,
) -> MifcnOutput:
    """Run the full model.

    Args:
        inputs: Y_1..Y_T, each [H,W] or a batch [N,H,W]; Y_1 is the main image
        params: Model parameters laid out for ``config``
        config: Architecture configuration
        h: Fusion constant overriding ``config.h`` (used for post-training sweeps)

    Raises:
        PreconditionError: If the input count differs from T or shapes differ
    """
    if len(inputs) != config.T or len(params.branches) != config.T:
        raise PreconditionError(
            f"model has T={config.T} branches but got {len(inputs)} inputs "
            f"and {len(params.branches)} branch parameter sets"
        )
    images = [as_tensor(y) for y in inputs]
    for image in images[1:]:
        if image.shape != images[0].shape:
            raise PreconditionError(f"input shapes differ: {images[0].shape} vs {image.shape}")

    branch_outputs = [
        branch_forward(image, branch, config.alpha) for image, branch in zip(images, params.branches)
    ]
    weights = fusion_weights(branch_outputs, config.h if h is None else h)
    fused = weighted_average(branch_outputs, weights)
    final = head_forward(fused, params.head, config.alpha)
    return MifcnOutput(branch_outputs=branch_outputs, weights=weights, fused=fused, final=final)
