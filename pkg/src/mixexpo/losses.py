"""Training objectives: reconstruction, color, mask supervision and exposure contrast."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Final, Mapping, Optional, Sequence

import torch
from einops import rearrange
from torch import nn
from torch.nn import functional as F

from mixexpo.color import luma
from mixexpo.config import LossWeights
from mixexpo.exceptions import ConfigError, ShapeError
from mixexpo.model import CorrectionOutput, split_regions
from mixexpo.perceptual import PerceptualExtractor
from mixexpo.types import MaskPolarity

__all__ = [
    'LOSS_TERMS',
    'BCE_EPS',
    'ECR_EPS',
    'mse_loss',
    'cosine_color_loss',
    'compute_gt_mask',
    'mask_target',
    'bce_mask_loss',
    'extract_regions',
    'style_correlation',
    'contrastive_ratio',
    'ecr_loss',
    'LossBreakdown',
    'total_loss',
    'ExposureLoss',
]

LOSS_TERMS: Final[tuple[str, ...]] = ('mse', 'cos', 'bce', 'ecr')
BCE_EPS: Final[float] = 1e-6
ECR_EPS: Final[float] = 1e-7


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f'Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}',
            expected=tuple(a.shape),
            actual=tuple(b.shape),
        )


def mse_loss(output: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    _check_same_shape(output, gt)
    return F.mse_loss(output, gt)


def cosine_color_loss(
    output: torch.Tensor, gt: torch.Tensor, eps: float = 1e-8
) -> torch.Tensor:
    """One minus the mean per-pixel cosine similarity of RGB vectors; in [0, 2]."""
    _check_same_shape(output, gt)
    return 1 - F.cosine_similarity(output, gt, dim=1, eps=eps).mean()


def compute_gt_mask(i_in: torch.Tensor, i_gt: torch.Tensor) -> torch.Tensor:
    """Binary mask of pixels whose input luma exceeds the ground truth's.

    1 marks overexposed pixels (input brighter than target), 0 everything else,
    ties included.

    Args:
        i_in: (..., 3, H, W) input image
        i_gt: (..., 3, H, W) ground-truth image

    Returns:
        (..., 1, H, W) mask in the dtype of i_in.
    """
    _check_same_shape(i_in, i_gt)
    return (luma(i_in) - luma(i_gt) > 0).to(i_in.dtype)


def mask_target(gt_mask: torch.Tensor, polarity: MaskPolarity = 'under') -> torch.Tensor:
    """The BCE target for the predicted mask under the given polarity.

    With 'under' the predictor marks underexposure, so it is supervised by the
    complement of the (overexposure) ground-truth mask.
    """
    return 1 - gt_mask if polarity == 'under' else gt_mask


def bce_mask_loss(
    masks: Sequence[torch.Tensor], target: torch.Tensor, eps: float = BCE_EPS
) -> torch.Tensor:
    """Binary cross entropy of every predicted mask against target, averaged over masks."""
    if not masks:
        raise ShapeError('bce_mask_loss needs at least one predicted mask')
    per_mask = []
    for mask in masks:
        _check_same_shape(mask, target)
        p = mask.clamp(eps, 1 - eps)
        per_mask.append(-(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean())
    return torch.stack(per_mask).mean()


def extract_regions(
    image: torch.Tensor, mask_u: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Over- and underexposed regions of an image as mask-multiplied full images.

    Returns:
        (omega_o, omega_u) = (image * (1 - mask_u), image * mask_u).
    """
    return split_regions(image, mask_u)


def style_correlation(h_o: torch.Tensor, h_u: torch.Tensor) -> torch.Tensor:
    """Cross-Gram of two feature maps normalized by position count.

    Args:
        h_o: (B, C, H, W) features of one region
        h_u: (B, C, H, W) features of the other region

    Returns:
        (B, C, C) matrices H_o^T H_u / (H * W).
    """
    _check_same_shape(h_o, h_u)
    positions = h_o.shape[-2] * h_o.shape[-1]
    a = rearrange(h_o, 'b c h w -> b (h w) c')
    b = rearrange(h_u, 'b c h w -> b (h w) c')
    return a.transpose(1, 2) @ b / positions


def contrastive_ratio(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negative: torch.Tensor,
    eps: float = ECR_EPS,
) -> torch.Tensor:
    """D(a, p) / (D(a, p) + D(a, n) + eps) with D the mean absolute difference."""
    d_pos = F.l1_loss(anchor, positive)
    d_neg = F.l1_loss(anchor, negative)
    return d_pos / (d_pos + d_neg + eps)


def ecr_loss(
    i_out: torch.Tensor,
    i_in: torch.Tensor,
    i_gt: torch.Tensor,
    mask_u: torch.Tensor,
    extractor: PerceptualExtractor,
    detach_mask: bool = True,
    eps: float = ECR_EPS,
) -> torch.Tensor:
    """Exposure contrastive regularization, in [0, 3).

    The same mask splits output (anchor), ground truth (positive) and input
    (negative) into regions. Per region, the anchor's perceptual features are
    pulled toward the positive and pushed from the negative; the cross-region
    style correlation gets the same treatment.

    Args:
        i_out: Corrected images
        i_in: Input images
        i_gt: Ground-truth images
        mask_u: (B, 1, H, W) underexposure mask, normally the last block's
        extractor: Frozen perceptual feature network
        detach_mask: Keep this term's gradient away from the mask
        eps: Denominator guard of each ratio

    Returns:
        Scalar loss.
    """
    _check_same_shape(i_out, i_in)
    _check_same_shape(i_out, i_gt)
    if detach_mask:
        mask_u = mask_u.detach()

    regions = [
        region for image in (i_out, i_gt, i_in) for region in extract_regions(image, mask_u)
    ]
    anchor_o, anchor_u, pos_o, pos_u, neg_o, neg_u = extractor(torch.cat(regions)).chunk(6)

    region_term = contrastive_ratio(anchor_o, pos_o, neg_o, eps) + contrastive_ratio(
        anchor_u, pos_u, neg_u, eps
    )
    style_term = contrastive_ratio(
        style_correlation(anchor_o, anchor_u),
        style_correlation(pos_o, pos_u),
        style_correlation(neg_o, neg_u),
        eps,
    )
    return region_term + style_term


@dataclass(frozen=True)
class LossBreakdown:
    """The weighted total and its unweighted components."""

    total: torch.Tensor
    mse: torch.Tensor
    cos: torch.Tensor
    bce: torch.Tensor
    ecr: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        """Detached Python floats for logging, total first."""
        return {
            'total': self.total.detach().item(),
            **{name: getattr(self, name).detach().item() for name in LOSS_TERMS},
        }


def total_loss(
    components: Mapping[str, torch.Tensor | float], weights: LossWeights
) -> LossBreakdown:
    """Weighted sum of the four loss components.

    Args:
        components: Values keyed by 'mse', 'cos', 'bce' and 'ecr'
        weights: The four weights

    Returns:
        The total together with the components it was built from.
    """
    values: dict[str, torch.Tensor] = {}
    for name in LOSS_TERMS:
        value = components[name]
        if not isinstance(value, torch.Tensor):
            value = torch.tensor(value, dtype=torch.float64)
        values[name] = value
    total = sum(getattr(weights, name) * values[name] for name in LOSS_TERMS)
    return LossBreakdown(total=torch.as_tensor(total), **values)


class ExposureLoss(nn.Module):
    """The full training objective over a network output.

    Args:
        weights: Loss weights
        extractor: Perceptual network for the contrastive term; required when
            weights.ecr > 0
        polarity: How predicted masks relate to the ground-truth mask
        detach_ecr_mask: Keep the contrastive term's gradient away from the mask
    """

    def __init__(
        self,
        weights: Optional[LossWeights] = None,
        extractor: Optional[PerceptualExtractor] = None,
        polarity: MaskPolarity = 'under',
        detach_ecr_mask: bool = True,
    ) -> None:
        """Initializes the objective; see class docs."""
        super().__init__()
        self.weights = weights or LossWeights()
        if self.weights.ecr > 0 and extractor is None:
            raise ConfigError(
                'weights.ecr > 0 needs a perceptual extractor', field='perceptual_weights'
            )
        self.extractor = extractor
        self.polarity: MaskPolarity = polarity
        self.detach_ecr_mask = detach_ecr_mask

    def forward(
        self,
        output: CorrectionOutput,
        i_in: torch.Tensor,
        i_gt: torch.Tensor,
        gt_mask: Optional[torch.Tensor] = None,
    ) -> LossBreakdown:
        """Evaluates every term for one batch.

        Args:
            output: The network's corrected images and per-block masks
            i_in: Input images
            i_gt: Ground-truth images
            gt_mask: Cached compute_gt_mask(i_in, i_gt); recomputed when None
        """
        if gt_mask is None:
            gt_mask = compute_gt_mask(i_in, i_gt)
        target = mask_target(gt_mask, self.polarity)

        if self.weights.ecr > 0 and self.extractor is not None:
            ecr = ecr_loss(
                output.image,
                i_in,
                i_gt,
                output.masks[-1],
                self.extractor,
                detach_mask=self.detach_ecr_mask,
            )
        else:
            ecr = output.image.new_zeros(())

        return total_loss(
            {
                'mse': mse_loss(output.image, i_gt),
                'cos': cosine_color_loss(output.image, i_gt),
                'bce': bce_mask_loss(output.masks, target),
                'ecr': ecr,
            },
            self.weights,
        )
