"""
Training: the consistency loss, Adam, augmentation and the epoch loop.

The loss couples every branch to its high-SNR target and ties the final
reconstruction to the main branch:

    J = (1/N) sum_i sum_t mse(X_t^(i), target_t^(i)) + (1/N) sum_i mse(X_1^(i), X_R^(i))

where mse is the per-pixel mean squared error. Parameters are optimized with
Adam; the learning rate drops from ``lr1`` to ``lr2`` after
``lr_decay_epoch`` epochs.

Typical usage example:
    tuples = build_training_set(pairs, dataset_cfg)
    record = train(tuples, ModelConfig(), Hyperparams(), checkpoint_path="model.ckpt")
    print(record.epochs[-1].mean_loss)

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
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, MutableMapping, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import PatchTuple
from .errors import PreconditionError, TrainingDiverged
from .model import DEFAULT_INIT_NOISE, MifcnOutput, MifcnParams, ModelConfig, identity_init, mifcn_forward
from .tensor_core import (
    Tensor,
    TensorLike,
    add_n,
    as_tensor,
    backward,
    no_grad,
    reduce_mean,
    scale,
    square,
    sub,
)

logger = logging.getLogger(__name__)

LOG_HEADER = "# epoch lr mean_J"
LOG_FINAL = "# final_J"


@dataclass
class Hyperparams:
    """Optimization settings.

    Attributes:
        epochs: Passes over the (augmented) training set
        lr1: Learning rate up to and including ``lr_decay_epoch``
        lr2: Learning rate for the remaining epochs
        lr_decay_epoch: Last epoch trained at ``lr1``
        batch: Patch tuples per optimizer step
        beta1, beta2, eps: Adam constants
        seed: Seeds parameter initialization and the per-epoch shuffles
        augment: Triple the data with a horizontal flip and a +90 degree rotation
        init_noise: Std of the tap noise added by identity initialization
    """

    epochs: int = 60
    lr1: float = 1e-4
    lr2: float = 1e-5
    lr_decay_epoch: int = 30
    batch: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    init_noise: float = DEFAULT_INIT_NOISE

    def validate(self) -> List[str]:
        errors = []
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if not (self.lr1 > 0 and self.lr2 > 0):
            errors.append("learning rates must be > 0")
        if self.batch < 1:
            errors.append("batch must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            errors.append("Adam betas must lie in [0, 1)")
        if self.init_noise < 0:
            errors.append("init_noise must be >= 0")
        if not self.eps > 0:
            errors.append("Adam eps must be > 0")
        return errors

    def check(self) -> "Hyperparams":
        errors = self.validate()
        if errors:
            raise PreconditionError("Invalid hyperparameters: " + "; ".join(errors))
        return self

    def lr_for_epoch(self, epoch: int) -> float:
        """Learning rate of a 1-based epoch."""
        return self.lr1 if epoch <= self.lr_decay_epoch else self.lr2

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "Hyperparams":
        kwargs: Dict[str, Any] = {}
        for name, default in asdict(cls()).items():
            if name in values and values[name] is not None:
                kwargs[name] = type(default)(values[name])
        return cls(**kwargs)


@dataclass
class AdamState:
    """First and second moment estimates per named parameter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Raises:
        PreconditionError: If a gradient is missing or misshapen
    """
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step

    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            raise PreconditionError(f"no gradient for parameter {name}")
        if g.shape != value.shape:
            raise PreconditionError(f"{name}: gradient shape {g.shape} != {value.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)

        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        value -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)

    return state


def _sample_loss(output: MifcnOutput, targets: Sequence[TensorLike]) -> Tensor:
    if len(targets) != len(output.branch_outputs):
        raise PreconditionError(
            f"{len(output.branch_outputs)} branch outputs but {len(targets)} targets"
        )
    terms = []
    for estimate, target in zip(output.branch_outputs, targets):
        target = as_tensor(target)
        if target.shape != estimate.shape:
            raise PreconditionError(f"target shape {target.shape} != output shape {estimate.shape}")
        terms.append(reduce_mean(square(sub(estimate, target))))
    if output.final.shape != output.main_branch.shape:
        raise PreconditionError(
            f"final output shape {output.final.shape} != main branch {output.main_branch.shape}"
        )
    terms.append(reduce_mean(square(sub(output.main_branch, output.final))))
    return add_n(terms)


def loss(
    outputs: Union[MifcnOutput, Sequence[MifcnOutput]],
    targets: Union[Sequence[TensorLike], Sequence[Sequence[TensorLike]]],
) -> Tensor:
    """Consistency loss J.

    Accepts either one batched output (every tensor [N,H,W], targets a list of
    T arrays [N,H,W]) or a list of per-sample outputs with one target list per
    sample. Both forms average per-pixel squared errors over pixels and samples.
    """
    if isinstance(outputs, MifcnOutput):
        return _sample_loss(outputs, targets)  # type: ignore[arg-type]
    if len(outputs) == 0 or len(outputs) != len(targets):
        raise PreconditionError(f"got {len(outputs)} outputs and {len(targets)} target sets")
    per_sample = [_sample_loss(o, t) for o, t in zip(outputs, targets)]  # type: ignore[arg-type]
    return scale(add_n(per_sample), 1.0 / len(per_sample))


def augment(sample: PatchTuple) -> List[PatchTuple]:
    """Original, horizontal flip and +90 degree (counter-clockwise) rotation.

    Every noisy and high-SNR patch of the tuple is transformed identically.

    Raises:
        PreconditionError: If the patches are not square
    """
    height, width = sample.noisy.shape[-2:]
    if height != width:
        raise PreconditionError(f"rotation needs square patches, got {height}x{width}")

    def transformed(fn) -> PatchTuple:
        return PatchTuple(
            noisy=np.ascontiguousarray(fn(sample.noisy)),
            clean=np.ascontiguousarray(fn(sample.clean)),
            locations=list(sample.locations),
        )

    return [
        sample,
        transformed(lambda a: np.flip(a, axis=-1)),
        transformed(lambda a: np.rot90(a, k=1, axes=(-2, -1))),
    ]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float


@dataclass
class TrainRecord:
    """Outcome of a training run: one entry per completed epoch.

    ``final_loss`` is the mean J of the trained parameters over the
    unaugmented training tuples.
    """

    epochs: List[EpochRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    steps: int = 0
    checkpoint_path: Optional[Path] = None
    final_loss: Optional[float] = None

    @property
    def mean_losses(self) -> List[float]:
        return [e.mean_loss for e in self.epochs]

    @property
    def last_finite_epoch(self) -> int:
        return self.epochs[-1].epoch if self.epochs else 0


def _stack_tuples(samples: Sequence[PatchTuple], T: int) -> Tuple[np.ndarray, np.ndarray]:
    for index, sample in enumerate(samples):
        if sample.T != T:
            raise PreconditionError(f"tuple {index} has {sample.T} pairs, model expects T={T}")
    return np.stack([s.noisy for s in samples]), np.stack([s.clean for s in samples])


def evaluate_loss(
    samples: Sequence[PatchTuple], params: MifcnParams, config: ModelConfig, batch: int = 256
) -> float:
    """Mean J of ``params`` over ``samples`` without updating anything."""
    if not samples:
        raise PreconditionError("cannot evaluate the loss of an empty set")
    noisy, clean = _stack_tuples(samples, config.T)
    total = 0.0
    for start in range(0, len(samples), batch):
        idx = slice(start, start + batch)
        inputs = [noisy[idx, t] for t in range(config.T)]
        with no_grad():
            output = mifcn_forward(inputs, params, config)
            value = loss(output, [clean[idx, t] for t in range(config.T)]).item()
        total += value * noisy[idx].shape[0]
    return total / len(samples)


def _append_log(log_path: Optional[Path], entry: EpochRecord) -> None:
    if log_path is None:
        return
    new_file = not log_path.exists()
    with open(log_path, "a") as f:
        if new_file:
            f.write(LOG_HEADER + "\n")
        f.write(f"{entry.epoch} {entry.lr:.6g} {entry.mean_loss:.10g}\n")


def _append_final(log_path: Optional[Path], value: float) -> None:
    if log_path is None:
        return
    with open(log_path, "a") as f:
        f.write(f"{LOG_FINAL} {value:.10g}\n")


def train(
    tuples: Sequence[PatchTuple],
    config: ModelConfig,
    hyper: Hyperparams,
    params: Optional[MifcnParams] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainRecord:
    """Fit the model to a set of patch tuples.

    Each epoch shuffles the (augmented) samples with a generator seeded by
    ``hyper.seed``, then runs forward, backward and one Adam step per
    mini-batch. The run is deterministic given its inputs and seeds.

    Args:
        tuples: Training tuples, each with exactly T pairs
        config: Architecture
        hyper: Optimization settings
        params: Starting parameters; identity initialization when omitted
        checkpoint_path: Where to write the final checkpoint
        log_path: Plain-text log receiving one "epoch lr mean_J" line per epoch,
            then the mean J of the trained model over ``tuples``

    Returns:
        The TrainRecord of the run

    Raises:
        PreconditionError: On an empty set or a tuple with the wrong T
        TrainingDiverged: If a mini-batch loss is not finite
    """
    config.check()
    hyper.check()
    if not tuples:
        raise PreconditionError("training set is empty")

    samples: List[PatchTuple] = []
    for sample in tuples:
        samples.extend(augment(sample) if hyper.augment else [sample])
    noisy, clean = _stack_tuples(samples, config.T)
    count = len(samples)

    params = params if params is not None else identity_init(config, hyper.seed, hyper.init_noise)
    named = params.named_tensors()
    arrays = {name: tensor.data for name, tensor in named.items()}
    state = AdamState()
    rng = np.random.default_rng(hyper.seed)
    log_path = Path(log_path) if log_path is not None else None
    record = TrainRecord()
    started = time.perf_counter()

    logger.info(
        f"Training {config.label} (T={config.T}, C={config.C}) on {count} samples, "
        f"{hyper.epochs} epochs, batch {hyper.batch}"
    )

    for epoch in range(1, hyper.epochs + 1):
        lr = hyper.lr_for_epoch(epoch)
        order = rng.permutation(count)
        weighted_sum = 0.0

        for start in range(0, count, hyper.batch):
            idx = order[start : start + hyper.batch]
            inputs = [noisy[idx, t] for t in range(config.T)]
            output = mifcn_forward(inputs, params, config)
            objective = loss(output, [clean[idx, t] for t in range(config.T)])
            value = objective.item()
            if not math.isfinite(value):
                record.wall_clock = time.perf_counter() - started
                raise TrainingDiverged(
                    f"loss became {value} in epoch {epoch} (last finite epoch: "
                    f"{record.last_finite_epoch})",
                    record,
                )
            backward(objective)
            grads = {name: tensor.grad for name, tensor in named.items()}
            adam_step(arrays, grads, state, lr, hyper.beta1, hyper.beta2, hyper.eps)
            weighted_sum += value * len(idx)
            record.steps += 1

        entry = EpochRecord(epoch=epoch, lr=lr, mean_loss=weighted_sum / count)
        record.epochs.append(entry)
        _append_log(log_path, entry)
        logger.info(f"epoch {epoch:3d}  lr {lr:.1e}  mean J {entry.mean_loss:.6f}")

    record.wall_clock = time.perf_counter() - started
    record.final_loss = evaluate_loss(tuples, params, config)
    _append_final(log_path, record.final_loss)
    logger.info(f"mean J of the trained model over {len(tuples)} tuples: {record.final_loss:.6f}")
    if checkpoint_path is not None:
        record.checkpoint_path = save_checkpoint(params, config, checkpoint_path)
    return record
