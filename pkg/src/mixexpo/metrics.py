"""Image quality metrics and the brightness mapping diagnostic."""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Final, Optional

import numpy as np
import torch
from torch.nn import functional as F

from mixexpo.color import luma
from mixexpo.exceptions import ShapeError

__all__ = [
    'PSNR_CAP',
    'psnr',
    'masked_psnr',
    'ssim',
    'ImageMetrics',
    'MetricReport',
    'evaluate_pairs',
    'CurveBin',
    'BrightnessCurve',
    'brightness_mapping_curve',
]

# reported instead of +inf for identical images
PSNR_CAP: Final[float] = 100.0
SSIM_WINDOW: Final[int] = 11
SSIM_SIGMA: Final[float] = 1.5
SSIM_C1: Final[float] = 0.01**2
SSIM_C2: Final[float] = 0.03**2


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f'Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}',
            expected=tuple(a.shape),
            actual=tuple(b.shape),
        )


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(peak**2 / mse))


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB over all elements, capped at PSNR_CAP."""
    _check_same_shape(a, b)
    mse = float(torch.mean((a.double() - b.double()) ** 2))
    return _psnr_from_mse(mse, peak)


def masked_psnr(
    a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor, peak: float = 1.0
) -> Optional[float]:
    """PSNR over the pixels where mask > 0.5; None when the mask selects nothing.

    Args:
        a: (..., C, H, W) image
        b: (..., C, H, W) image
        mask: (..., 1, H, W) region mask, broadcast over channels
        peak: Signal peak
    """
    _check_same_shape(a, b)
    selected = (mask > 0.5).expand_as(a)
    if not bool(selected.any()):
        return None
    diff = (a.double() - b.double())[selected]
    return _psnr_from_mse(float(torch.mean(diff**2)), peak)


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).view(1, 1, size, size)


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
) -> float:
    """Mean structural similarity of the BT.601 luma of two RGB images.

    Uses a Gaussian window, C1 = 0.01^2 and C2 = 0.03^2 for a unit dynamic
    range, and averages the SSIM map over positions where the window fits
    entirely inside the image (and over the batch).

    Args:
        a: (3, H, W) or (B, 3, H, W) image in [0, 1]
        b: Same shape as a
        window: Window side
        sigma: Window standard deviation

    Raises:
        ShapeError: Shapes differ or the image is smaller than the window.
    """
    _check_same_shape(a, b)
    x = luma(a.double())
    y = luma(b.double())
    if x.ndim == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    if min(x.shape[-2:]) < window:
        raise ShapeError(
            f'SSIM needs images of at least {window}x{window}, got '
            f'{x.shape[-2]}x{x.shape[-1]}',
            actual=tuple(a.shape),
        )
    kernel = _gaussian_window(window, sigma, torch.float64)
    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    var_x = F.conv2d(x * x, kernel) - mu_x * mu_x
    var_y = F.conv2d(y * y, kernel) - mu_y * mu_y
    cov = F.conv2d(x * y, kernel) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    )
    return float(ssim_map.mean())


@dataclass(frozen=True)
class ImageMetrics:
    """Metrics of one image pair."""

    name: str
    psnr: float
    ssim: float
    psnr_over: Optional[float] = None
    psnr_under: Optional[float] = None


@dataclass
class MetricReport:
    """Per-image metrics and their dataset means."""

    images: list[ImageMetrics] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        """Mean PSNR over images."""
        return float(np.mean([m.psnr for m in self.images])) if self.images else float('nan')

    @property
    def mean_ssim(self) -> float:
        """Mean SSIM over images."""
        return float(np.mean([m.ssim for m in self.images])) if self.images else float('nan')

    def region_mean(self, region: str) -> Optional[float]:
        """Mean of psnr_over or psnr_under over the images where it is defined."""
        values = [getattr(m, f'psnr_{region}') for m in self.images]
        defined = [v for v in values if v is not None]
        return float(np.mean(defined)) if defined else None

    def write_csv(self, path: str | Path) -> None:
        """Writes ``name, psnr, ssim`` rows (plus region columns when present)."""
        with_regions = any(m.psnr_over is not None or m.psnr_under is not None for m in self.images)
        header = ['name', 'psnr', 'ssim'] + (['psnr_over', 'psnr_under'] if with_regions else [])
        with Path(path).open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for m in self.images:
                row: list[object] = [m.name, f'{m.psnr:.6f}', f'{m.ssim:.6f}']
                if with_regions:
                    row += ['' if v is None else f'{v:.6f}' for v in (m.psnr_over, m.psnr_under)]
                writer.writerow(row)

    def summary(self) -> str:
        """A short human-readable summary."""
        lines = [
            f'images: {len(self.images)}',
            f'mean_psnr: {self.mean_psnr:.4f}',
            f'mean_ssim: {self.mean_ssim:.6f}',
        ]
        for region in ('over', 'under'):
            if (value := self.region_mean(region)) is not None:
                lines.append(f'mean_psnr_{region}: {value:.4f}')
        return '\n'.join(lines)


PairLoader = Callable[[], tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]]


def evaluate_pairs(
    pairs: Iterable[tuple[str, PairLoader]], workers: int = 1
) -> MetricReport:
    """Evaluates image pairs, optionally in parallel.

    Args:
        pairs: (name, loader) items; each loader returns (prediction, gt,
            input-or-None). With an input, PSNR is also reported over the over-
            and underexposed ground-truth regions.
        workers: Thread count; results keep the input order

    Returns:
        The assembled report.
    """
    from mixexpo.losses import compute_gt_mask

    def evaluate(item: tuple[str, PairLoader]) -> ImageMetrics:
        name, load = item
        prediction, gt, source = load()
        over = under = None
        if source is not None:
            region = compute_gt_mask(source, gt)
            over = masked_psnr(prediction, gt, region)
            under = masked_psnr(prediction, gt, 1 - region)
        return ImageMetrics(name, psnr(prediction, gt), ssim(prediction, gt), over, under)

    items = list(pairs)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, items))
    else:
        results = [evaluate(item) for item in items]
    return MetricReport(results)


@dataclass(frozen=True)
class CurveBin:
    """Distribution of target luma for one bin of source luma; NaN when empty."""

    lo: float
    hi: float
    count: int
    x_median: float
    y_q25: float
    y_median: float
    y_q75: float


@dataclass(frozen=True)
class BrightnessCurve:
    """Source-to-target brightness mapping with its distance from the identity."""

    bins: list[CurveBin]

    @property
    def area(self) -> float:
        """Mean |median target - median source| over the bins that hold pixels.

        Zero for identical image sets and for a curve with no pixels; smaller
        is better.
        """
        gaps = [abs(b.y_median - b.x_median) for b in self.bins if b.count > 0]
        return float(sum(gaps) / len(gaps)) if gaps else 0.0

    def write_csv(self, path: str | Path) -> None:
        """Writes one row per bin; empty bins have blank statistics."""
        with Path(path).open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh)
            writer.writerow(['bin', 'lo', 'hi', 'count', 'x_median', 'y_q25', 'y_median', 'y_q75'])
            for index, b in enumerate(self.bins):
                stats = (b.x_median, b.y_q25, b.y_median, b.y_q75)
                writer.writerow(
                    [index, f'{b.lo:.6f}', f'{b.hi:.6f}', b.count]
                    + ['' if b.count == 0 else f'{v:.6f}' for v in stats]
                )


def brightness_mapping_curve(
    pairs: Sequence[tuple[torch.Tensor, torch.Tensor]], bins: int = 64
) -> BrightnessCurve:
    """Bins source luma and summarizes the matching target luma per bin.

    Args:
        pairs: Aligned (source, target) RGB images, e.g. (input, gt)
        bins: Number of equal-width luma bins over [0, 1]

    Returns:
        Median and interquartile range of target luma per bin, plus the
        median source luma that the identity diagonal is compared against.
    """
    if not pairs:
        raise ShapeError('brightness_mapping_curve needs at least one pair')
    xs, ys = [], []
    for source, target in pairs:
        _check_same_shape(source, target)
        xs.append(luma(source.double()).flatten().cpu().numpy())
        ys.append(luma(target.double()).flatten().cpu().numpy())
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    index = np.clip((x * bins).astype(np.int64), 0, bins - 1)

    result = []
    for i in range(bins):
        selected = index == i
        count = int(selected.sum())
        if count == 0:
            nan = float('nan')
            result.append(CurveBin(i / bins, (i + 1) / bins, 0, nan, nan, nan, nan))
            continue
        q25, q50, q75 = np.quantile(y[selected], [0.25, 0.5, 0.75])
        result.append(
            CurveBin(
                lo=i / bins,
                hi=(i + 1) / bins,
                count=count,
                x_median=float(np.quantile(x[selected], 0.5)),
                y_q25=float(q25),
                y_median=float(q50),
                y_q75=float(q75),
            )
        )
    return BrightnessCurve(result)
