"""Color-space helpers (BT.601 full range)."""

import torch

__all__ = ['rgb_to_ycbcr', 'luma']


def luma(image: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of a channels-first RGB tensor, keeping a singleton channel axis.

    Args:
        image: (..., 3, H, W) RGB in [0, 1]

    Returns:
        (..., 1, H, W) Y in [0, 1].
    """
    r, g, b = image.unbind(dim=-3)
    return (0.299 * r + 0.587 * g + 0.114 * b).unsqueeze(-3)


def rgb_to_ycbcr(image: torch.Tensor) -> torch.Tensor:
    """Full-range BT.601 RGB -> YCbCr with Cb and Cr offset by 0.5.

    Args:
        image: (..., 3, H, W) RGB in [0, 1]

    Returns:
        (..., 3, H, W) YCbCr, every channel in [0, 1].
    """
    r, g, b = image.unbind(dim=-3)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return torch.stack([y, cb, cr], dim=-3)
