"""
MIFCN: multi-input fully-convolutional denoising of retinal OCT B-scans.

A main B-scan and its nearby B-scans each pass through a dilated
fully-convolutional branch; a pixel-wise weighted average anchored on the main
branch fuses the branch outputs, and a small head reconstructs the result.

Key features:
- A float64 tensor engine with reverse-mode differentiation
- Patch-tuple dataset construction with exact similar-patch search
- Adam training, checkpointing and batch inference
- PSNR/MSR/CNR/ENL evaluation with paired signed-rank tests

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

__version__ = "0.1.0"
__license__ = "Apache-2.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .config_manager import load_cfg
from .errors import (
    CheckpointError,
    DataError,
    MifcnError,
    NumericError,
    PreconditionError,
    TrainingDiverged,
    UsageError,
)
from .model import MifcnOutput, MifcnParams, ModelConfig, identity_init, mifcn_forward
from .tensor_core import ConvSpec, Tensor, backward, conv2d_dilated, no_grad
from .training import Hyperparams, train

__all__ = [
    "CheckpointError",
    "ConvSpec",
    "DataError",
    "Hyperparams",
    "MifcnError",
    "MifcnOutput",
    "MifcnParams",
    "ModelConfig",
    "NumericError",
    "PreconditionError",
    "Tensor",
    "TrainingDiverged",
    "UsageError",
    "backward",
    "conv2d_dilated",
    "identity_init",
    "load_cfg",
    "load_checkpoint",
    "mifcn_forward",
    "no_grad",
    "save_checkpoint",
    "train",
]
