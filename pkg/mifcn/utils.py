"""
Utility functions for the MIFCN command-line tools.

This module provides:
- Rich console logging setup
- Conversion of NumPy values for JSON summaries
- A JSON writer for run summaries

Typical usage example:
    from mifcn.utils import setup_logging, write_json

    setup_logging(verbose=True)
    write_json({"count": 4000}, out_dir / "summary.json")

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

import json
import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from rich.console import Console
from rich.logging import RichHandler

from .errors import DataError

LOG_FORMAT = "%(message)s"


def setup_logging(verbose: bool = False, console: Optional[Console] = None) -> None:
    """Route package logging through a rich handler on stderr.

    Args:
        verbose: Log at DEBUG instead of INFO
        console: Console to render to (a stderr console when omitted)
    """
    handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=False,
        rich_tracebacks=False,
    )
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        datefmt="[%X]",
        handlers=[handler],
        force=True,
    )


def convert_np_arrays_to_lists(value: Any) -> Any:
    """Recursively turn NumPy arrays and scalars into plain Python values.

    Example:
        >>> convert_np_arrays_to_lists({'stride': np.int64(15), 'shape': np.array([150, 600])})
        {'stride': 15, 'shape': [150, 600]}
    """
    if isinstance(value, dict):
        return {key: convert_np_arrays_to_lists(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [convert_np_arrays_to_lists(item) for item in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(data: Any, path: Union[str, Path]) -> Path:
    """Write ``data`` as indented, key-sorted JSON.

    Raises:
        DataError: If the file cannot be written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(convert_np_arrays_to_lists(data), f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise DataError(f"Failed to write {path}: {e}") from e
    return path

