"""
Images, patch tuples and test cases.

This module covers every file-facing step of the pipeline:
- 8-bit grayscale raster I/O (portable graymap, PNG, or any lossless
  single-channel format Pillow reads)
- Crop and ROI sidecar files
- Anchor extraction on a regular grid inside the manual retina crop
- Nonlocal similar-patch search on the high-SNR image
- Construction of the training set of patch tuples, and its binary archive
- Test-case loading (main image, nearby images, high-SNR reference)

File conventions:
    training pairs   <id>_noisy.<ext> and <id>_highsnr.<ext>
    crop sidecar     one line per pair: "<id or file name> top left height width"
    ROI file         one line per box: "<role> top left height width", exactly
                     one role named "background", every other line a foreground
    test case        main.<ext>, near1.<ext> ... near<K>.<ext>, ref.<ext>

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
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import msgpack
import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, PreconditionError

logger = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 15
DEFAULT_BUDGET = 400
IMAGE_SUFFIXES = (".pgm", ".png", ".tif", ".tiff", ".bmp")
NOISY_SUFFIX = "_noisy"
HIGH_SNR_SUFFIX = "_highsnr"
BACKGROUND_ROLE = "background"

ARCHIVE_FORMAT = "mifcn-patches"
ARCHIVE_VERSION = 1

Location = Tuple[int, int]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in pixel coordinates."""

    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    def inside(self, shape: Tuple[int, ...]) -> bool:
        return (
            self.top >= 0
            and self.left >= 0
            and self.height > 0
            and self.width > 0
            and self.bottom <= shape[0]
            and self.right <= shape[1]
        )

    def overlaps(self, other: "Rect") -> bool:
        return not (
            self.bottom <= other.top
            or other.bottom <= self.top
            or self.right <= other.left
            or other.right <= self.left
        )

    def slices(self) -> Tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)

    @classmethod
    def full(cls, shape: Tuple[int, ...]) -> "Rect":
        return cls(0, 0, int(shape[0]), int(shape[1]))


@dataclass
class ImagePair:
    """A noisy training image, its high-SNR reference and the retina crop."""

    noisy: np.ndarray
    high_snr: np.ndarray
    crop: Optional[Rect] = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.noisy.shape != self.high_snr.shape:
            raise PreconditionError(
                f"{self.name or 'pair'}: noisy {self.noisy.shape} and high-SNR "
                f"{self.high_snr.shape} shapes differ"
            )
        if self.crop is None:
            self.crop = Rect.full(self.noisy.shape)
        if not self.crop.inside(self.noisy.shape):
            raise PreconditionError(
                f"{self.name or 'pair'}: crop {self.crop} outside image {self.noisy.shape}"
            )


@dataclass
class PatchTuple:
    """T (noisy, high-SNR) patch pairs; entry 0 is the anchor itself.

    Attributes:
        noisy: Noisy windows y_1..y_T, shape [T, p, p]
        clean: High-SNR windows x_1..x_T at the same coordinates, shape [T, p, p]
        locations: Top-left (row, col) of each window in the source image
    """

    noisy: np.ndarray
    clean: np.ndarray
    locations: List[Location] = field(default_factory=list)

    @property
    def T(self) -> int:
        return int(self.noisy.shape[0])

    @property
    def patch_size(self) -> int:
        return int(self.noisy.shape[-1])


@dataclass
class TestCase:
    """Main noisy image, its T - 1 nearby images and the high-SNR reference."""

    __test__ = False

    main: np.ndarray
    nearby: List[np.ndarray]
    reference: np.ndarray
    name: str = ""

    @property
    def inputs(self) -> List[np.ndarray]:
        """Y_1..Y_T in branch order."""
        return [self.main] + list(self.nearby)


@dataclass
class RoiSpec:
    """One background box and one or more named foreground boxes."""

    background: Rect
    foreground: Dict[str, Rect]

    def validate(self, shape: Optional[Tuple[int, ...]] = None) -> List[str]:
        errors = []
        if not self.foreground:
            errors.append("at least one foreground ROI is required")
        boxes = [(BACKGROUND_ROLE, self.background)] + list(self.foreground.items())
        for name, rect in boxes:
            if rect.height <= 0 or rect.width <= 0:
                errors.append(f"ROI {name} has zero area")
            elif shape is not None and not rect.inside(shape):
                errors.append(f"ROI {name} {rect} lies outside image {tuple(shape)}")
        for name, rect in self.foreground.items():
            if rect.overlaps(self.background):
                errors.append(f"foreground ROI {name} overlaps the background ROI")
        return errors


@dataclass
class AnchorGrid:
    """Anchor windows chosen on a regular grid inside a crop."""

    locations: List[Location]
    stride: int
    candidates: int


@dataclass
class DatasetConfig:
    """Training-set construction settings."""

    T: int = 5
    patch_size: int = DEFAULT_PATCH_SIZE
    budget: int = DEFAULT_BUDGET
    workers: int = 1


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Read an 8-bit single-channel raster as float64 intensities in [0, 255].

    Raises:
        DataError: If the file is missing, unreadable, multi-channel or not 8-bit
    """
    path = Path(path)
    try:
        with Image.open(path) as image:
            mode = image.mode
            if mode != "L":
                raise DataError(
                    f"{path}: unsupported image mode {mode!r}; "
                    "only 8-bit single-channel images are supported"
                )
            return np.asarray(image, dtype=np.float64).copy()
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"Cannot read image {path}: {e}") from e


def save_image(values: np.ndarray, path: Union[str, Path]) -> Path:
    """Write intensities as an 8-bit image, clamped to [0, 255] and rounded half-to-even."""
    path = Path(path)
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise PreconditionError(f"save_image needs a 2-D array, got shape {array.shape}")
    pixels = np.rint(np.clip(array, 0.0, 255.0)).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(pixels).save(path)
    except (OSError, ValueError) as e:
        raise DataError(f"Cannot write image {path}: {e}") from e
    return path


def find_image(directory: Path, stem: str) -> Optional[Path]:
    """Return ``directory/stem.<ext>`` for the first supported extension present."""
    for suffix in IMAGE_SUFFIXES:
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


# ---------------------------------------------------------------------------
# Sidecar files
# ---------------------------------------------------------------------------


def _rect_lines(path: Path) -> List[Tuple[int, str, Rect]]:
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    entries = []
    for number, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip() if not line.lstrip().startswith("#") else ""
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) != 5:
            raise DataError(f"{path}:{number}: expected 'name top left height width', got {line!r}")
        try:
            rect = Rect(*(int(v) for v in parts[1:]))
        except ValueError as e:
            raise DataError(f"{path}:{number}: non-integer rectangle in {line!r}") from e
        entries.append((number, parts[0], rect))
    return entries


def read_crops(path: Union[str, Path]) -> Dict[str, Rect]:
    """Parse the crop sidecar into a mapping from pair id (or file name) to rectangle."""
    path = Path(path)
    crops: Dict[str, Rect] = {}
    for number, name, rect in _rect_lines(path):
        if name in crops:
            raise DataError(f"{path}:{number}: duplicate crop for {name}")
        crops[name] = rect
    return crops


def read_rois(path: Union[str, Path], shape: Optional[Tuple[int, ...]] = None) -> RoiSpec:
    """Parse an ROI file; exactly one line must carry the ``background`` role.

    Raises:
        DataError: On malformed lines, a missing or repeated background, or
            boxes that violate :meth:`RoiSpec.validate`
    """
    path = Path(path)
    background: Optional[Rect] = None
    foreground: Dict[str, Rect] = {}
    for number, role, rect in _rect_lines(path):
        if role.lower() == BACKGROUND_ROLE:
            if background is not None:
                raise DataError(f"{path}:{number}: more than one background ROI")
            background = rect
        elif role in foreground:
            raise DataError(f"{path}:{number}: duplicate ROI name {role}")
        else:
            foreground[role] = rect
    if background is None:
        raise DataError(f"{path}: no '{BACKGROUND_ROLE}' ROI defined")
    spec = RoiSpec(background=background, foreground=foreground)
    errors = spec.validate(shape)
    if errors:
        raise DataError(f"{path}: " + "; ".join(errors))
    return spec


def load_training_pairs(
    data_dir: Union[str, Path], crops_path: Optional[Union[str, Path]] = None
) -> List[ImagePair]:
    """Load every ``<id>_noisy`` / ``<id>_highsnr`` pair in a directory, sorted by id.

    Raises:
        DataError: If the directory holds no pair, a partner image is missing,
            or a pair has no crop while a crop file is given
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"Training data directory not found: {data_dir}")
    crops = read_crops(crops_path) if crops_path is not None else {}

    noisy_files = sorted(
        p for p in data_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.stem.endswith(NOISY_SUFFIX)
    )
    if not noisy_files:
        raise DataError(f"No '*{NOISY_SUFFIX}' images found in {data_dir}")

    pairs = []
    for noisy_path in noisy_files:
        pair_id = noisy_path.stem[: -len(NOISY_SUFFIX)]
        high_path = find_image(data_dir, pair_id + HIGH_SNR_SUFFIX)
        if high_path is None:
            raise DataError(f"No high-SNR partner '{pair_id}{HIGH_SNR_SUFFIX}.*' for {noisy_path.name}")
        crop = None
        if crops:
            keys = (pair_id, noisy_path.name, high_path.name)
            crop = next((crops[k] for k in keys if k in crops), None)
            if crop is None:
                raise DataError(f"Crop file has no rectangle for pair {pair_id}")
        try:
            pairs.append(ImagePair(load_image(noisy_path), load_image(high_path), crop, pair_id))
        except PreconditionError as e:
            raise DataError(str(e)) from e
    logger.info(f"Loaded {len(pairs)} training pairs from {data_dir}")
    return pairs


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------


def _grid_counts(height: int, width: int, size: int, stride: int) -> Tuple[int, int]:
    return (height - size) // stride + 1, (width - size) // stride + 1


def extract_patches(pair: ImagePair, size: int = DEFAULT_PATCH_SIZE, budget: int = DEFAULT_BUDGET) -> AnchorGrid:
    """Choose ``budget`` anchor windows with as little overlap as possible.

    The stride is the largest value whose regular grid over the crop yields
    at least ``budget`` windows; the grid is truncated to exactly ``budget``
    windows in row-major order. Locations are absolute image coordinates.

    Raises:
        PreconditionError: If the crop is smaller than one patch or cannot
            provide ``budget`` windows even at stride 1
    """
    if size < 1 or budget < 1:
        raise PreconditionError(f"patch size and budget must be positive, got {size}, {budget}")
    crop = pair.crop
    if crop.height < size or crop.width < size:
        raise PreconditionError(
            f"{pair.name or 'pair'}: crop {crop.height}x{crop.width} is smaller than a {size}x{size} patch"
        )

    stride = max(crop.height, crop.width)
    while stride >= 1:
        rows, cols = _grid_counts(crop.height, crop.width, size, stride)
        if rows * cols >= budget:
            break
        stride -= 1
    else:
        rows, cols = _grid_counts(crop.height, crop.width, size, 1)
        raise PreconditionError(
            f"{pair.name or 'pair'}: crop yields only {rows * cols} windows at stride 1, "
            f"budget is {budget}"
        )

    locations = [
        (crop.top + r * stride, crop.left + c * stride) for r in range(rows) for c in range(cols)
    ][:budget]
    return AnchorGrid(locations=locations, stride=stride, candidates=rows * cols)


def window_ssd(region: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Sum of squared differences between ``template`` and every window of ``region``.

    Entry (r, c) compares the window whose top-left corner is (r, c).
    """
    size = template.shape[0]
    rows = region.shape[0] - size + 1
    cols = region.shape[1] - size + 1
    ssd = np.zeros((rows, cols))
    for a in range(size):
        for b in range(size):
            diff = region[a : a + rows, b : b + cols] - template[a, b]
            ssd += diff * diff
    return ssd


def nonlocal_search(
    anchor: Location,
    high_snr: np.ndarray,
    T: int,
    crop: Optional[Rect] = None,
    size: int = DEFAULT_PATCH_SIZE,
) -> List[Location]:
    """The anchor followed by its T - 1 most similar windows.

    Similarity is the SSD between high-SNR windows; every stride-1 window
    fully inside the crop is a candidate, ties are broken in row-major order.

    Raises:
        PreconditionError: If T < 1, the anchor is outside the crop, or the
            crop holds fewer than T windows
    """
    if T < 1:
        raise PreconditionError(f"T must be >= 1, got {T}")
    crop = crop or Rect.full(high_snr.shape)
    top, left = anchor
    if not Rect(top, left, size, size).inside(high_snr.shape) or not (
        crop.top <= top <= crop.bottom - size and crop.left <= left <= crop.right - size
    ):
        raise PreconditionError(f"anchor {anchor} is not a {size}x{size} window inside crop {crop}")

    region = high_snr[crop.slices()]
    rows, cols = region.shape[0] - size + 1, region.shape[1] - size + 1
    if rows * cols < T:
        raise PreconditionError(f"crop {crop} holds {rows * cols} windows, fewer than T={T}")
    if T == 1:
        return [anchor]

    template = high_snr[top : top + size, left : left + size]
    ssd = window_ssd(region, template).reshape(-1)
    anchor_index = (top - crop.top) * cols + (left - crop.left)
    ssd[anchor_index] = -np.inf
    order = np.argsort(ssd, kind="stable")[:T]
    ranked = [(crop.top + int(i) // cols, crop.left + int(i) % cols) for i in order[1:]]
    return [anchor] + ranked


def _tuple_at(pair: ImagePair, locations: Sequence[Location], size: int) -> PatchTuple:
    noisy = np.stack([pair.noisy[r : r + size, c : c + size] for r, c in locations])
    clean = np.stack([pair.high_snr[r : r + size, c : c + size] for r, c in locations])
    return PatchTuple(noisy=noisy, clean=clean, locations=list(locations))


def build_training_set(
    pairs: Sequence[ImagePair], config: Optional[DatasetConfig] = None
) -> Tuple[List[PatchTuple], List[Dict[str, Any]]]:
    """Construct the training tuples from noisy/high-SNR image pairs.

    For every anchor of every pair, the T most similar high-SNR windows are
    located and paired with the noisy windows at identical coordinates.
    Augmentation happens later, in training.

    Returns:
        The tuples (pair order, then anchor order) and a per-pair summary
        (name, stride, anchors)
    """
    config = config or DatasetConfig()
    if not pairs:
        raise PreconditionError("need at least one image pair")

    tuples: List[PatchTuple] = []
    summary: List[Dict[str, Any]] = []
    for pair in pairs:
        grid = extract_patches(pair, config.patch_size, config.budget)

        def search(anchor: Location) -> List[Location]:
            return nonlocal_search(anchor, pair.high_snr, config.T, pair.crop, config.patch_size)

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                matches = list(pool.map(search, grid.locations))
        else:
            matches = [search(anchor) for anchor in grid.locations]

        tuples.extend(_tuple_at(pair, locs, config.patch_size) for locs in matches)
        summary.append({"name": pair.name, "stride": grid.stride, "anchors": len(grid.locations)})
        logger.info(
            f"{pair.name or 'pair'}: {len(grid.locations)} anchors at stride {grid.stride} "
            f"({grid.candidates} grid windows)"
        )
    return tuples, summary


# ---------------------------------------------------------------------------
# Patch archive
# ---------------------------------------------------------------------------


def save_archive(
    tuples: Sequence[PatchTuple], path: Union[str, Path], summary: Optional[List[Dict[str, Any]]] = None
) -> Path:
    """Write tuples to a MessagePack archive of raw little-endian float64 patches."""
    if not tuples:
        raise PreconditionError("refusing to write an empty archive")
    first = tuples[0]
    payload = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "count": len(tuples),
        "T": first.T,
        "patch_size": first.patch_size,
        "sources": list(summary or []),
        "tuples": [
            {
                "locations": [list(loc) for loc in t.locations],
                "noisy": np.ascontiguousarray(t.noisy, dtype="<f8").tobytes(),
                "clean": np.ascontiguousarray(t.clean, dtype="<f8").tobytes(),
            }
            for t in tuples
        ],
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(msgpack.packb(payload, use_bin_type=True))
    except OSError as e:
        raise DataError(f"Cannot write patch archive {path}: {e}") from e
    return path


def load_archive(path: Union[str, Path]) -> Tuple[List[PatchTuple], Dict[str, Any]]:
    """Read an archive written by :func:`save_archive`.

    Returns:
        The tuples and the header (format, version, count, T, patch_size, sources)

    Raises:
        DataError: If the file is missing, truncated or of another format
    """
    path = Path(path)
    try:
        payload = msgpack.unpackb(path.read_bytes(), raw=False)
    except OSError as e:
        raise DataError(f"Cannot read patch archive {path}: {e}") from e
    except (ValueError, msgpack.exceptions.ExtraData, msgpack.exceptions.FormatError) as e:
        raise DataError(f"Corrupt patch archive {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != ARCHIVE_FORMAT:
        raise DataError(f"{path} is not a patch archive")
    if payload.get("version") != ARCHIVE_VERSION:
        raise DataError(f"{path}: unsupported archive version {payload.get('version')}")

    T, size = int(payload["T"]), int(payload["patch_size"])
    tuples = []
    try:
        for entry in payload["tuples"]:
            shape = (T, size, size)
            tuples.append(
                PatchTuple(
                    noisy=np.frombuffer(entry["noisy"], dtype="<f8").reshape(shape).astype(np.float64),
                    clean=np.frombuffer(entry["clean"], dtype="<f8").reshape(shape).astype(np.float64),
                    locations=[(int(r), int(c)) for r, c in entry["locations"]],
                )
            )
    except (KeyError, ValueError) as e:
        raise DataError(f"Malformed tuple in {path}: {e}") from e
    if len(tuples) != payload["count"]:
        raise DataError(f"{path}: header announces {payload['count']} tuples, found {len(tuples)}")
    header = {k: v for k, v in payload.items() if k != "tuples"}
    return tuples, header


# ---------------------------------------------------------------------------
# Test cases
# ---------------------------------------------------------------------------

_NEAR_PATTERN = re.compile(r"^near(\d+)$")


def load_test_case(directory: Union[str, Path], T: int) -> TestCase:
    """Load ``main``, ``near1``..``near{T-1}`` and ``ref`` from a directory.

    The directory must hold exactly T - 1 nearby images numbered from 1.

    Raises:
        DataError: If an image is missing, the nearby images are not exactly
            near1..near{T-1}, or the images differ in shape
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"Test case directory not found: {directory}")
    found = sorted(p.name for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    main_path = find_image(directory, "main")
    ref_path = find_image(directory, "ref")
    missing = [name for name, p in (("main", main_path), ("ref", ref_path)) if p is None]
    if missing:
        raise DataError(f"{directory}: missing {', '.join(missing)} image(s); found {found}")

    near_indices = sorted(
        int(m.group(1))
        for m in (_NEAR_PATTERN.match(Path(name).stem) for name in found)
        if m is not None
    )
    if near_indices != list(range(1, T)):
        count = len(near_indices)
        remedy = f"set T={count + 1}" if near_indices == list(range(1, count + 1)) else "renumber them near1.."
        raise DataError(
            f"{directory}: found {count} nearby images {near_indices}, T={T} needs exactly near1..near{T - 1}; "
            f"{remedy}. Files: {found}"
        )

    main = load_image(main_path)
    nearby = [load_image(find_image(directory, f"near{k}")) for k in range(1, T)]
    reference = load_image(ref_path)
    shapes = {"main": main.shape, "ref": reference.shape}
    shapes.update({f"near{k}": img.shape for k, img in enumerate(nearby, start=1)})
    if len(set(shapes.values())) != 1:
        raise DataError(f"{directory}: image shapes differ: {shapes}")
    return TestCase(main=main, nearby=nearby, reference=reference, name=directory.name)


def list_test_cases(root: Union[str, Path]) -> List[Path]:
    """Test-case directories under ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"Data directory not found: {root}")
    if find_image(root, "main") is not None:
        return [root]
    cases = sorted(p for p in root.iterdir() if p.is_dir() and find_image(p, "main") is not None)
    if not cases:
        raise DataError(f"No test cases (directories with a main image) under {root}")
    return cases
