"""
Image-quality metrics and the paired significance test.

Reference-based: MSE and PSNR (peak 255). ROI-based: MSR over foreground
boxes, CNR between foreground boxes and the background box, and ENL of the
background box. All standard deviations use the population formula.

Degenerate inputs (identical images, constant regions) are not errors; they
produce a :class:`Measurement` whose ``flag`` says why the number is not a
finite real ("infinite" or "undefined").

Typical usage example:
    rois = read_rois("rois.txt", denoised.shape)
    row = evaluate_image("case01", denoised, reference, rois)
    report = MetricReport.from_rows([row, ...])
    console.print(report_table(report))

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

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
from rich import box
from rich.table import Table
from scipy import stats

from .dataset import Rect, RoiSpec
from .errors import DataError, PreconditionError

logger = logging.getLogger(__name__)

DEFAULT_PEAK = 255.0
EXACT_MAX_N = 25
MIN_PAIRS = 5
SIGNIFICANCE = 0.05

FLAG_INFINITE = "infinite"
FLAG_UNDEFINED = "undefined"
FLAG_ALL_ZERO = "all-zero"

METRIC_NAMES = ("mse", "psnr", "msr", "cnr", "enl")
# Per-image CSV columns; MSE goes to the summary file only.
CSV_METRICS = ("psnr", "msr", "cnr", "enl")


@dataclass(frozen=True)
class Measurement:
    """A metric value, or a flag explaining why it has no finite value."""

    value: float
    flag: Optional[str] = None

    @property
    def is_finite(self) -> bool:
        return self.flag is None and math.isfinite(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def format(self, digits: int = 4) -> str:
        if self.flag == FLAG_INFINITE:
            return "inf"
        if self.flag is not None:
            return self.flag
        return f"{self.value:.{digits}f}"

    @classmethod
    def infinite(cls) -> "Measurement":
        return cls(math.inf, FLAG_INFINITE)

    @classmethod
    def undefined(cls) -> "Measurement":
        return cls(math.nan, FLAG_UNDEFINED)


@dataclass(frozen=True)
class RoiStats:
    """Population mean and standard deviation of a rectangle."""

    mean: float
    std: float


def _check_pair(x: np.ndarray, ref: np.ndarray) -> None:
    if x.shape != ref.shape:
        raise PreconditionError(f"image shape {x.shape} != reference shape {ref.shape}")
    if x.size == 0:
        raise PreconditionError("images are empty")


def mse(x: np.ndarray, ref: np.ndarray) -> float:
    """Per-pixel mean squared error."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_pair(x, ref)
    return float(np.mean((x - ref) ** 2))


def psnr_from_mse(error: float, peak: float = DEFAULT_PEAK) -> Measurement:
    if error == 0:
        return Measurement.infinite()
    return Measurement(10.0 * math.log10(peak * peak / error))


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = DEFAULT_PEAK) -> Measurement:
    """Peak signal-to-noise ratio in dB; identical images are flagged infinite."""
    return psnr_from_mse(mse(x, ref), peak)


def roi_stats(image: np.ndarray, rect: Rect) -> RoiStats:
    """Population statistics over ``rect``.

    Raises:
        PreconditionError: If the rectangle is empty or not inside the image
    """
    image = np.asarray(image, dtype=np.float64)
    if rect.area < 1 or not rect.inside(image.shape):
        raise PreconditionError(f"ROI {rect} is empty or lies outside image {image.shape}")
    region = image[rect.slices()]
    mean = float(np.mean(region))
    return RoiStats(mean=mean, std=float(np.sqrt(np.mean((region - mean) ** 2))))


def _foreground_list(foreground: Union[Mapping[str, Rect], Sequence[Rect]]) -> List[Rect]:
    rects = list(foreground.values()) if isinstance(foreground, Mapping) else list(foreground)
    if not rects:
        raise PreconditionError("at least one foreground ROI is required")
    return rects


def msr(image: np.ndarray, foreground: Union[Mapping[str, Rect], Sequence[Rect]]) -> Measurement:
    """Mean-to-standard-deviation ratio averaged over the foreground ROIs."""
    ratios = []
    for rect in _foreground_list(foreground):
        s = roi_stats(image, rect)
        if s.std == 0:
            return Measurement.infinite()
        ratios.append(s.mean / s.std)
    return Measurement(float(np.mean(ratios)))


def cnr(
    image: np.ndarray,
    foreground: Union[Mapping[str, Rect], Sequence[Rect]],
    background: Rect,
) -> Measurement:
    """Contrast-to-noise ratio, mean over ROIs of (mu_m - mu_b) / sqrt(var_m + var_b).

    The result is undefined only when the background and every ROI are flat.
    A flat ROI over a flat background adds 0 when the means agree and an
    infinite contrast otherwise.
    """
    bg = roi_stats(image, background)
    stats = [roi_stats(image, rect) for rect in _foreground_list(foreground)]
    if bg.std**2 + sum(s.std**2 for s in stats) == 0:
        return Measurement.undefined()
    values = []
    for s in stats:
        contrast = s.mean - bg.mean
        spread = s.std**2 + bg.std**2
        if spread == 0:
            values.append(0.0 if contrast == 0 else math.copysign(math.inf, contrast))
        else:
            values.append(contrast / math.sqrt(spread))
    result = float(np.mean(values))
    if math.isinf(result) and result > 0:
        return Measurement.infinite()
    if not math.isfinite(result):
        return Measurement.undefined()
    return Measurement(result)


def enl(image: np.ndarray, background: Rect) -> Measurement:
    """Equivalent number of looks mu_b^2 / sigma_b^2; a flat background is infinite."""
    if background.area < 2:
        raise PreconditionError(f"ENL needs a background of at least 2 pixels, got {background}")
    s = roi_stats(image, background)
    if s.std == 0:
        return Measurement.infinite()
    return Measurement(s.mean**2 / s.std**2)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    """Two-sided signed-rank test outcome.

    Attributes:
        p_value: Two-sided p-value in (0, 1]
        statistic: Sum of the ranks of the positive differences
        n: Number of nonzero differences
        method: "exact", "normal" or "none"
        flag: FLAG_ALL_ZERO when every difference vanished
    """

    p_value: float
    statistic: float
    n: int
    method: str
    flag: Optional[str] = None

    @property
    def significant(self) -> bool:
        return self.flag is None and self.p_value < SIGNIFICANCE


def signed_rank_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign assignments reaching each doubled positive-rank sum.

    Entry s counts the subsets of ``doubled_ranks`` summing to s; the table
    covers all 2^n assignments.
    """
    counts = np.zeros(int(sum(doubled_ranks)) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float], exact_max_n: int = EXACT_MAX_N
) -> WilcoxonResult:
    """Paired two-sided Wilcoxon signed-rank test of ``a`` against ``b``.

    Zero differences are dropped and tied magnitudes get average ranks. Up to
    ``exact_max_n`` nonzero pairs the null distribution is counted exactly;
    beyond that the normal approximation with continuity and tie corrections
    is used.

    Raises:
        PreconditionError: On unequal lengths or fewer than 5 nonzero differences
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise PreconditionError(f"paired samples need equal 1-D lengths, got {a.shape} and {b.shape}")

    d = a - b
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        return WilcoxonResult(p_value=1.0, statistic=0.0, n=0, method="none", flag=FLAG_ALL_ZERO)
    if n < MIN_PAIRS:
        raise PreconditionError(f"signed-rank test needs >= {MIN_PAIRS} nonzero differences, got {n}")

    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= exact_max_n:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = signed_rank_counts(doubled)
        observed = int(round(2 * w_plus))
        low = int(counts[: observed + 1].sum())
        high = int(counts[observed:].sum())
        p = min(1.0, 2.0 * min(low, high) / 2.0**n)
        return WilcoxonResult(p_value=p, statistic=w_plus, n=n, method="exact")

    _, tie_counts = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    if variance <= 0:
        return WilcoxonResult(p_value=1.0, statistic=w_plus, n=n, method="normal")
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(variance)
    p = min(1.0, 2.0 * float(stats.norm.sf(z)))
    return WilcoxonResult(p_value=p, statistic=w_plus, n=n, method="normal")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ImageMetrics:
    """One report row. ROI metrics are None when no ROI file was given."""

    image_id: str
    mse: Measurement
    psnr: Measurement
    msr: Optional[Measurement] = None
    cnr: Optional[Measurement] = None
    enl: Optional[Measurement] = None

    def get(self, metric: str) -> Optional[Measurement]:
        return getattr(self, metric)


def evaluate_image(
    image_id: str,
    denoised: np.ndarray,
    reference: np.ndarray,
    rois: Optional[RoiSpec] = None,
    peak: float = DEFAULT_PEAK,
) -> ImageMetrics:
    """Every metric of one denoised image (unclamped values are expected)."""
    error = mse(denoised, reference)
    row = ImageMetrics(image_id=image_id, mse=Measurement(error), psnr=psnr_from_mse(error, peak))
    if rois is not None:
        problems = rois.validate(np.shape(denoised))
        if problems:
            raise DataError(f"{image_id}: " + "; ".join(problems))
        row.msr = msr(denoised, rois.foreground)
        row.cnr = cnr(denoised, rois.foreground, rois.background)
        row.enl = enl(denoised, rois.background)
    return row


def _column_mean(values: Iterable[Optional[Measurement]]) -> Optional[Measurement]:
    """Mean of a report column, None when the column is empty.

    A flagged value propagates its flag, so every aggregate covers the same
    image set.
    """
    items = [v for v in values if v is not None]
    if not items:
        return None
    flagged = [v for v in items if v.flag is not None]
    if flagged:
        return Measurement(math.nan, flagged[0].flag)
    return Measurement(float(np.mean([v.value for v in items])))


def _population_sd(values: Iterable[Optional[Measurement]]) -> Optional[Measurement]:
    items = [v for v in values if v is not None]
    if not items:
        return None
    flagged = [v for v in items if v.flag is not None]
    if flagged:
        return Measurement(math.nan, flagged[0].flag)
    return Measurement(float(np.std([v.value for v in items])))


@dataclass
class MetricReport:
    """Per-image rows, their mean and SD, and optional paired p-values."""

    rows: List[ImageMetrics]
    mean: Dict[str, Optional[Measurement]] = field(default_factory=dict)
    sd: Dict[str, Optional[Measurement]] = field(default_factory=dict)
    p_values: Dict[str, Optional[WilcoxonResult]] = field(default_factory=dict)
    title: str = "Metrics"

    @classmethod
    def from_rows(cls, rows: Sequence[ImageMetrics], title: str = "Metrics") -> "MetricReport":
        rows = list(rows)
        report = cls(rows=rows, title=title)
        for metric in METRIC_NAMES:
            column = [row.get(metric) for row in rows]
            report.mean[metric] = _column_mean(column)
            report.sd[metric] = _population_sd(column)
        return report

    def summary_row(self, image_id: str) -> ImageMetrics:
        """The per-metric means as a single row (used for one-row-per-setting tables)."""
        mean = self.mean
        return ImageMetrics(
            image_id=image_id,
            mse=mean["mse"] or Measurement.undefined(),
            psnr=mean["psnr"] or Measurement.undefined(),
            msr=mean.get("msr"),
            cnr=mean.get("cnr"),
            enl=mean.get("enl"),
        )

    def compare(self, other: "MetricReport", exact_max_n: int = EXACT_MAX_N) -> Dict[str, Optional[WilcoxonResult]]:
        """Paired signed-rank test per metric against ``other``, matched by image id.

        Metrics with flagged values or too few nonzero differences get None.

        Raises:
            PreconditionError: If the two reports cover different images
        """
        mine = {row.image_id: row for row in self.rows}
        theirs = {row.image_id: row for row in other.rows}
        if set(mine) != set(theirs):
            missing = sorted(set(mine) ^ set(theirs))
            raise PreconditionError(f"reports cover different images: {missing}")

        ids = sorted(mine)
        results: Dict[str, Optional[WilcoxonResult]] = {}
        for metric in METRIC_NAMES:
            pairs = [(mine[i].get(metric), theirs[i].get(metric)) for i in ids]
            if any(x is None or y is None or not x.is_finite or not y.is_finite for x, y in pairs):
                results[metric] = None
                continue
            try:
                results[metric] = wilcoxon_signed_rank(
                    [x.value for x, _ in pairs], [y.value for _, y in pairs], exact_max_n
                )
            except PreconditionError as e:
                logger.warning(f"No signed-rank test for {metric}: {e}")
                results[metric] = None
        self.p_values = results
        return results

    def columns(self) -> List[str]:
        """Metric columns present in at least one row."""
        return [m for m in METRIC_NAMES if any(row.get(m) is not None for row in self.rows)]


def _cell(value: Optional[Measurement]) -> str:
    return "-" if value is None else value.format()


def _p_cell(result: Optional[WilcoxonResult]) -> str:
    if result is None:
        return "-"
    if result.flag is not None:
        return f"1 ({result.flag})"
    return f"{result.p_value:.4g}{'*' if result.significant else ''}"


def report_rows(report: MetricReport) -> List[List[str]]:
    """Header, then one row per image with the columns image, psnr, msr, cnr, enl."""
    columns = [m for m in report.columns() if m in CSV_METRICS]
    rows = [["image"] + columns]
    for row in report.rows:
        rows.append([row.image_id] + [_cell(row.get(m)) for m in columns])
    return rows


def _statistic_rows(report: MetricReport, columns: Sequence[str]) -> List[List[str]]:
    rows = [
        ["mean"] + [_cell(report.mean.get(m)) for m in columns],
        ["sd"] + [_cell(report.sd.get(m)) for m in columns],
    ]
    if report.p_values:
        rows.append(["p"] + [_p_cell(report.p_values.get(m)) for m in columns])
    return rows


def summary_rows(report: MetricReport) -> List[List[str]]:
    """Header, then mean, SD and (if compared) p rows over every metric, MSE included."""
    columns = report.columns()
    return [["statistic"] + columns] + _statistic_rows(report, columns)


def report_table(report: MetricReport) -> Table:
    """Aligned rich table: every metric per image, then the summary rows."""
    columns = report.columns()
    table = Table(title=report.title, show_header=True, box=box.SIMPLE_HEAD)
    table.add_column("image", style="bold")
    for name in columns:
        table.add_column(name.upper(), justify="right")
    for index, row in enumerate(report.rows):
        cells = [row.image_id] + [_cell(row.get(m)) for m in columns]
        table.add_row(*cells, end_section=index == len(report.rows) - 1)
    for cells in _statistic_rows(report, columns):
        table.add_row(*cells)
    return table


def summary_path(path: Union[str, Path]) -> Path:
    """``metrics.csv`` -> ``metrics_summary.csv``."""
    path = Path(path)
    return path.with_name(f"{path.stem}_summary{path.suffix or '.csv'}")


def _write_rows(rows: List[List[str]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(rows)
    return path


def write_csv(report: MetricReport, path: Union[str, Path]) -> Path:
    """Comma-separated form of :func:`report_rows`."""
    path = _write_rows(report_rows(report), path)
    logger.info(f"Wrote {len(report.rows)} metric rows to {path}")
    return path


def write_summary_csv(report: MetricReport, path: Union[str, Path]) -> Path:
    """Comma-separated form of :func:`summary_rows`."""
    path = _write_rows(summary_rows(report), path)
    logger.info(f"Wrote the metric summary to {path}")
    return path
