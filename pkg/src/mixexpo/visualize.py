"""Figures: predicted masks, perceptual error maps and brightness curves."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping, Optional

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from torch.nn import functional as F  # noqa: E402

from mixexpo.data import save_png  # noqa: E402
from mixexpo.exceptions import ShapeError  # noqa: E402
from mixexpo.losses import compute_gt_mask, mask_target  # noqa: E402
from mixexpo.metrics import BrightnessCurve  # noqa: E402
from mixexpo.model import ExposureCorrectionNet  # noqa: E402
from mixexpo.perceptual import PerceptualExtractor  # noqa: E402
from mixexpo.types import MaskPolarity  # noqa: E402

__all__ = [
    'visualize_masks',
    'feature_error_map',
    'save_feature_error_figure',
    'plot_brightness_curves',
]

logger = logging.getLogger(__name__)


@torch.no_grad()
def visualize_masks(
    model: ExposureCorrectionNet,
    image: torch.Tensor,
    gt: Optional[torch.Tensor] = None,
    path: Optional[str | Path] = None,
    polarity: MaskPolarity = 'under',
) -> torch.Tensor:
    """Lays out the input next to every block's predicted mask.

    With a ground truth the supervision target for the masks is appended as
    the last column, so predicted and expected masks read the same way.

    Args:
        model: Network to inspect
        image: (3, H, W) input image
        gt: Optional (3, H, W) ground truth
        path: Where to write the grid as PNG
        polarity: Mask polarity the model was trained with

    Returns:
        (3, H, W * columns) grid with columns input, block masks, target.
    """
    if image.ndim != 3:
        raise ShapeError(f'Expected a (3, H, W) image, got {tuple(image.shape)}')
    model.eval()
    device = next(model.parameters()).device
    output = model(image.unsqueeze(0).to(device))
    columns = [image.cpu()]
    columns += [mask[0].cpu().expand(3, -1, -1) for mask in output.masks]
    if gt is not None:
        target = mask_target(compute_gt_mask(image, gt.to(image.dtype)), polarity)
        columns.append(target.cpu().expand(3, -1, -1))
    grid = torch.cat(columns, dim=-1)
    if path is not None:
        save_png(grid, path)
        logger.debug('Wrote mask grid to %s', path)
    return grid


@torch.no_grad()
def feature_error_map(
    extractor: PerceptualExtractor, image: torch.Tensor, gt: torch.Tensor
) -> torch.Tensor:
    """Mean absolute perceptual feature difference, upsampled to image size.

    Args:
        extractor: Frozen feature network
        image: (B, 3, H, W) images, e.g. network outputs
        gt: (B, 3, H, W) references

    Returns:
        (B, 1, H, W) error maps.
    """
    if image.shape != gt.shape:
        raise ShapeError(
            f'Shape mismatch: {tuple(image.shape)} vs {tuple(gt.shape)}',
            expected=tuple(image.shape),
            actual=tuple(gt.shape),
        )
    diff = (extractor(image) - extractor(gt)).abs().mean(dim=1, keepdim=True)
    return F.interpolate(diff, size=image.shape[-2:], mode='bilinear', align_corners=False)


def save_feature_error_figure(
    maps: Mapping[str, torch.Tensor], path: str | Path, title: Optional[str] = None
) -> None:
    """Draws (1, H, W) or (H, W) error maps side by side on one color scale."""
    arrays = {name: m.detach().cpu().squeeze().numpy() for name, m in maps.items()}
    vmax = max(float(np.max(a)) for a in arrays.values()) or 1.0
    fig, axes = plt.subplots(1, len(arrays), figsize=(4 * len(arrays), 4), squeeze=False)
    for ax, (name, array) in zip(axes[0], arrays.items()):
        shown = ax.imshow(array, cmap='inferno', vmin=0.0, vmax=vmax)
        ax.set_title(name)
        ax.axis('off')
    fig.colorbar(shown, ax=axes[0].tolist(), shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_brightness_curves(
    curves: Mapping[str, BrightnessCurve], path: str | Path
) -> None:
    """Plots median target luma against source luma with the IQR band.

    The dashed diagonal is the identity mapping; a curve hugging it means the
    two image sets agree in brightness.
    """
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], linestyle='--', color='gray', linewidth=1, label='identity')
    for name, curve in curves.items():
        filled = [b for b in curve.bins if b.count > 0]
        x = [b.x_median for b in filled]
        ax.fill_between(x, [b.y_q25 for b in filled], [b.y_q75 for b in filled], alpha=0.25)
        ax.plot(x, [b.y_median for b in filled], label=f'{name} (area {curve.area:.4f})')
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel('source luma')
    ax.set_ylabel('target luma')
    ax.legend(loc='upper left')
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
