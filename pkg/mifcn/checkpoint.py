"""
Checkpoint container for trained MIFCN parameters.

A checkpoint is a single MessagePack map:

    {
        "format": "mifcn-checkpoint",
        "version": 1,
        "config": {"T": 5, "C": 24, "A": 3, "B": 1, "dilations": [1, 2, 1],
                   "h": 400.0, "alpha": 0.2},
        "tensors": [
            {"name": "branch1.hidden1.weight", "shape": [24, 1, 3, 3],
             "data": <raw little-endian float64 bytes>},
            ...
        ],
    }

Tensors are stored in the fixed order of :meth:`MifcnParams.named_tensors`,
so saving the same parameters twice yields identical bytes, and loading
restores every value bit for bit.

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
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import msgpack
import numpy as np

from .errors import CheckpointError
from .model import MifcnParams, ModelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mifcn-checkpoint"
CHECKPOINT_VERSION = 1
LITTLE_ENDIAN_F64 = "<f8"


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    """Shape plus raw little-endian float64 bytes."""
    values = np.ascontiguousarray(array, dtype=LITTLE_ENDIAN_F64)
    return {"shape": list(values.shape), "data": values.tobytes()}


def decode_array(entry: Dict[str, Any]) -> np.ndarray:
    """Inverse of :func:`encode_array`; the result owns native-endian memory."""
    shape = tuple(int(s) for s in entry["shape"])
    values = np.frombuffer(entry["data"], dtype=LITTLE_ENDIAN_F64)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{values.size} values cannot fill shape {shape}")
    return values.reshape(shape).astype(np.float64)


def save_checkpoint(params: MifcnParams, config: ModelConfig, path: Union[str, Path]) -> Path:
    """Write parameters and their configuration to ``path``.

    Returns:
        The path written
    """
    config.check()
    tensors = [
        {"name": name, **encode_array(array)} for name, array in params.arrays().items()
    ]
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "tensors": tensors,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as f:
            f.write(msgpack.packb(payload, use_bin_type=True))
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"Saved {config.label} checkpoint (T={config.T}) to {path}")
    return path


def load_checkpoint(
    path: Union[str, Path], expected: Optional[ModelConfig] = None
) -> Tuple[MifcnParams, ModelConfig]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Args:
        path: Checkpoint file
        expected: When given, the stored architecture must match it
            (T, C, A, B and dilations; h and alpha may differ)

    Raises:
        CheckpointError: If the file is unreadable, truncated, of another
            format or version, or does not match ``expected``
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    try:
        payload = msgpack.unpackb(raw, raw=False)
    except (ValueError, msgpack.exceptions.ExtraData, msgpack.exceptions.FormatError) as e:
        raise CheckpointError(f"Corrupt or truncated checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a MIFCN checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint version {payload.get('version')}, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )

    try:
        config = ModelConfig.from_mapping(payload["config"]).check()
        arrays = {entry["name"]: decode_array(entry) for entry in payload["tensors"]}
        params = MifcnParams.from_arrays(config, arrays)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Malformed checkpoint {path}: {e}") from e

    if expected is not None:
        mismatches = [
            f"{key}: checkpoint={getattr(config, key)} configured={getattr(expected, key)}"
            for key in ("T", "C", "A", "B", "dilations")
            if getattr(config, key) != getattr(expected, key)
        ]
        if mismatches:
            raise CheckpointError(
                f"Checkpoint {path} does not match the configured model: " + "; ".join(mismatches)
            )

    logger.debug(f"Loaded {config.label} checkpoint (T={config.T}) from {path}")
    return params, config


__all__ = [
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
    "decode_array",
    "encode_array",
    "load_checkpoint",
    "save_checkpoint",
]
