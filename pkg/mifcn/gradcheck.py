"""
Self-verification suite behind ``mifcn gradcheck``.

Three sweeps, all on seeded synthetic data:
- conv: the fast dilated convolution against the scalar loop oracle
- gradients: backward() against central differences on random small models,
  both for the training loss and for an objective that sees the branch
  parameters only through the fusion weights
- fusion: the weight-map invariants and the exact identity reproduction of
  an identity-initialized model

Copyright 2025 The MIFCN Authors
Licensed under the Apache License, Version 2.0
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from rich import box
from rich.table import Table

from . import oracles
from .errors import NumericError
from .model import MifcnOutput, MifcnParams, ModelConfig, fusion_weights, identity_init, mifcn_forward, random_init
from .tensor_core import (
    ConvSpec,
    Tensor,
    add_n,
    backward,
    conv2d_dilated,
    finite_difference_grad,
    hadamard,
    reduce_mean,
    topological_order,
)
from .training import loss

logger = logging.getLogger(__name__)


@dataclass
class GradcheckConfig:
    """Sizes and tolerances of the three sweeps.

    ``coords_per_tensor`` is the number of parameter coordinates sampled per
    tensor for the finite-difference comparison; None checks every coordinate.
    """

    seed: int = 0
    conv_cases: int = 200
    conv_tolerance: float = 1e-12
    instances: int = 25
    T: int = 3
    C: int = 4
    A: int = 3
    B: int = 1
    patch: int = 8
    h: float = 1.0
    fd_step: float = 1e-6
    tolerance: float = 1e-5
    kink_margin: float = 1e-4
    max_redraws: int = 100
    coords_per_tensor: Optional[int] = 6
    fusion_cases: int = 50

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "GradcheckConfig":
        kwargs: Dict[str, Any] = {}
        for name, default in asdict(cls()).items():
            if name not in values:
                continue
            value = values[name]
            if value is None:
                if name == "coords_per_tensor":
                    kwargs[name] = None
                continue
            kwargs[name] = type(default)(value)
        return cls(**kwargs)

    @property
    def coverage(self) -> str:
        if self.coords_per_tensor is None:
            return "every coordinate"
        return f"{self.coords_per_tensor} sampled coordinates per tensor"


@dataclass
class GradcheckReport:
    """Outcome of a run; ``passed`` is the overall verdict."""

    config: GradcheckConfig
    conv_max_error: float = 0.0
    conv_cases: int = 0
    group_errors: Dict[str, float] = field(default_factory=dict)
    redraws: int = 0
    fusion_failures: List[str] = field(default_factory=list)

    @property
    def conv_passed(self) -> bool:
        return self.conv_max_error <= self.config.conv_tolerance

    @property
    def gradients_passed(self) -> bool:
        return all(error < self.config.tolerance for error in self.group_errors.values())

    @property
    def passed(self) -> bool:
        return self.conv_passed and self.gradients_passed and not self.fusion_failures

    @property
    def max_gradient_error(self) -> float:
        return max(self.group_errors.values(), default=0.0)

    def table(self) -> Table:
        table = Table(title=f"Gradient check ({self.config.coverage})", box=box.SIMPLE_HEAD)
        table.add_column("Check", style="bold")
        table.add_column("Max error", justify="right")
        table.add_column("Status", justify="center")

        def status(ok: bool) -> str:
            return "[green]PASS[/green]" if ok else "[red]FAIL[/red]"

        table.add_row(
            f"conv oracle ({self.conv_cases} cases)",
            f"{self.conv_max_error:.3e}",
            status(self.conv_passed),
            end_section=True,
        )
        for group, error in self.group_errors.items():
            table.add_row(group, f"{error:.3e}", status(error < self.config.tolerance))
        table.add_row(
            "fusion invariants",
            f"{len(self.fusion_failures)} failed",
            status(not self.fusion_failures),
            end_section=True,
        )
        return table


def normalized_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|), guarded against all-zero gradients."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


# ---------------------------------------------------------------------------
# Convolution sweep
# ---------------------------------------------------------------------------


def conv_oracle_sweep(cases: int, seed: int) -> float:
    """Largest absolute difference between conv2d_dilated and the loop oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        cin, cout = rng.integers(1, 5, size=2)
        h, w = rng.integers(1, 17, size=2)
        k = int(rng.choice([1, 3]))
        d = int(rng.integers(1, 4))
        batch = int(rng.integers(0, 3))
        x = rng.normal(size=(max(batch, 1), cin, h, w))
        kernels = rng.normal(size=(cout, cin, k, k))
        bias = rng.normal(size=cout)

        spec = ConvSpec(kernel_size=k, dilation=d)
        fast = conv2d_dilated(x if batch else x[0], kernels, bias, spec).data
        fast = fast if batch else fast[None]
        for n in range(x.shape[0]):
            slow = oracles.conv2d_loop(x[n], kernels, bias, d)
            worst = max(worst, float(np.max(np.abs(fast[n] - slow))))
    return worst


# ---------------------------------------------------------------------------
# Gradient sweep
# ---------------------------------------------------------------------------


def near_kink(root: Tensor, margin: float) -> bool:
    """Whether any leaky-ReLU input in the graph of ``root`` lies within ``margin`` of zero."""
    for node in topological_order(root):
        if node.op == "lrelu" and node.parents:
            if np.any(np.abs(node.parents[0].data) < margin):
                return True
    return False


@dataclass
class _Instance:
    params: MifcnParams
    inputs: List[np.ndarray]
    targets: List[np.ndarray]
    fusion_coefficients: List[np.ndarray]


def _draw_instance(config: ModelConfig, patch: int, rng: np.random.Generator) -> _Instance:
    params = random_init(config, seed=int(rng.integers(2**31)))
    return _Instance(
        params=params,
        inputs=[rng.uniform(0.0, 1.0, size=(patch, patch)) for _ in range(config.T)],
        targets=[rng.uniform(0.0, 1.0, size=(patch, patch)) for _ in range(config.T)],
        fusion_coefficients=[rng.normal(size=(patch, patch)) for _ in range(config.T)],
    )


def training_objective(output: MifcnOutput, instance: _Instance) -> Tensor:
    return loss(output, instance.targets)


def fusion_objective(output: MifcnOutput, instance: _Instance) -> Tensor:
    """Depends on the branch parameters only through P_1..P_T."""
    return reduce_mean(add_n([hadamard(p, c) for p, c in zip(output.weights, instance.fusion_coefficients)]))


Objective = Callable[[MifcnOutput, _Instance], Tensor]


def _check_objective(
    label: str,
    objective: Objective,
    instance: _Instance,
    config: ModelConfig,
    cfg: GradcheckConfig,
    rng: np.random.Generator,
    groups: Optional[Sequence[str]] = None,
) -> Dict[str, float]:
    root = objective(mifcn_forward(instance.inputs, instance.params, config), instance)
    analytic = backward(root)
    errors: Dict[str, float] = {}

    for name, tensor in instance.params.named_tensors().items():
        if groups is not None and not any(name.startswith(g) for g in groups):
            continue
        grad = analytic.get(tensor, np.zeros(tensor.shape))
        original = tensor.data

        def f(values: np.ndarray) -> float:
            tensor.data = values
            try:
                return objective(mifcn_forward(instance.inputs, instance.params, config), instance).item()
            finally:
                tensor.data = original

        if cfg.coords_per_tensor is None or cfg.coords_per_tensor >= tensor.size:
            coords = list(range(tensor.size))
        else:
            coords = sorted(rng.choice(tensor.size, size=cfg.coords_per_tensor, replace=False).tolist())
        numeric = finite_difference_grad(f, original, eps=cfg.fd_step, coords=coords)
        errors[f"{label}:{name}"] = normalized_error(grad.reshape(-1)[coords], numeric)
    return errors


def gradient_sweep(cfg: GradcheckConfig) -> Tuple[Dict[str, float], int]:
    """Max normalized error per parameter group over ``cfg.instances`` models.

    Returns:
        The per-group errors and the number of instances redrawn near a kink
    """
    config = ModelConfig(T=cfg.T, C=cfg.C, A=cfg.A, B=cfg.B, h=cfg.h).check()
    rng = np.random.default_rng(cfg.seed + 1)
    worst: Dict[str, float] = {}
    redraws = 0
    branch_groups = [f"branch{t}." for t in range(1, config.T + 1)]

    for index in range(cfg.instances):
        for _ in range(cfg.max_redraws):
            instance = _draw_instance(config, cfg.patch, rng)
            output = mifcn_forward(instance.inputs, instance.params, config)
            if not near_kink(training_objective(output, instance), cfg.kink_margin):
                break
            redraws += 1
        else:
            raise NumericError(f"no kink-free instance after {cfg.max_redraws} draws")

        errors = _check_objective("loss", training_objective, instance, config, cfg, rng)
        errors.update(_check_objective("fusion", fusion_objective, instance, config, cfg, rng, branch_groups))
        for group, error in errors.items():
            worst[group] = max(worst.get(group, 0.0), error)
        logger.debug(f"Instance {index + 1}/{cfg.instances}: max error {max(errors.values()):.3e}")

    return worst, redraws


# ---------------------------------------------------------------------------
# Fusion sweep
# ---------------------------------------------------------------------------


def fusion_invariant_failures(cases: int, seed: int) -> List[str]:
    """Names of violated fusion invariants (empty when all hold)."""
    rng = np.random.default_rng(seed + 2)
    failures: List[str] = []

    def fail(message: str) -> None:
        if message not in failures:
            failures.append(message)

    for _ in range(cases):
        T = int(rng.integers(2, 6))
        shape = tuple(rng.integers(1, 9, size=2))
        h = float(rng.choice([1.0, 10.0, 100.0, 400.0, 1000.0]))
        outputs = [rng.normal(0.0, 2.0 * np.sqrt(h), size=shape) for _ in range(T)]
        weights = [w.data for w in fusion_weights(outputs, h)]

        if np.max(np.abs(np.sum(weights, axis=0) - 1.0)) > 1e-9:
            fail("weights sum to one")
        if any(np.any(weights[0] < w - 1e-15) for w in weights[1:]):
            fail("main-branch weight is the largest")
        oracle = oracles.fusion_loop(outputs, h)
        if max(float(np.max(np.abs(a - b))) for a, b in zip(weights, oracle)) > 1e-12:
            fail("weights match the pixel loop")

        # P_1 saturates at 1 in float64 once every other weight underflows.
        differs = np.any([np.abs(outputs[0] - x) > 0 for x in outputs[1:]], axis=0)
        differs &= 1.0 - weights[0] > 1e-9
        wider = fusion_weights(outputs, 2.0 * h)[0].data
        if np.any(wider[differs] >= weights[0][differs]):
            fail("main-branch weight decreases in h")

        fused = np.sum([x * w for x, w in zip(outputs, weights)], axis=0)
        if np.any(fused < np.min(outputs, axis=0) - 1e-9) or np.any(fused > np.max(outputs, axis=0) + 1e-9):
            fail("fused value lies between the branch outputs")

    config = ModelConfig().check()
    params = identity_init(config, seed=seed, noise_std=0.0)
    image = rng.integers(0, 256, size=(12, 16)).astype(np.float64)
    final = mifcn_forward([image] * config.T, params, config).final.data
    if not np.array_equal(final, image):
        fail("identity-initialized model reproduces its input")
    return failures


def run_gradcheck(cfg: Optional[GradcheckConfig] = None) -> GradcheckReport:
    """Run every sweep and collect the report."""
    cfg = cfg or GradcheckConfig()
    report = GradcheckReport(config=cfg)

    logger.info(f"Conv oracle sweep: {cfg.conv_cases} cases")
    report.conv_cases = cfg.conv_cases
    report.conv_max_error = conv_oracle_sweep(cfg.conv_cases, cfg.seed)

    logger.info(
        f"Gradient sweep: {cfg.instances} instances (T={cfg.T}, C={cfg.C}, {cfg.patch}x{cfg.patch}), "
        f"{cfg.coverage}"
    )
    report.group_errors, report.redraws = gradient_sweep(cfg)

    logger.info(f"Fusion sweep: {cfg.fusion_cases} cases")
    report.fusion_failures = fusion_invariant_failures(cfg.fusion_cases, cfg.seed)

    verdict = "passed" if report.passed else "FAILED"
    logger.info(
        f"Gradcheck {verdict}: conv {report.conv_max_error:.2e}, "
        f"gradients {report.max_gradient_error:.2e}, {len(report.fusion_failures)} fusion failures"
    )
    return report
