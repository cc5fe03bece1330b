"""The exposure-correction network.

The graph is a 1x1 stem, a stack of region-aware blocks that each predict an
underexposure mask, split and normalize their input by region, restore detail
with a mixed-scale path and dual channel self-attention, and fuse the three
results. A squeeze-excite refine block and a zero-initialized 1x1 head close
the network, which adds its output to the input image.

Tensors are channels-first: images are (B, 3, H, W), features (B, C, H, W) and
masks (B, 1, H, W). Every block preserves H x W.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional, Sequence

import torch
from einops import rearrange
from torch import nn
from torch.nn import functional as F

from mixexpo.config import ModelConfig
from mixexpo.exceptions import ConfigError, ShapeError

__all__ = [
    'MIN_IMAGE_SIZE',
    'IN_EPS',
    'check_image',
    'split_regions',
    'instance_norm',
    'attention_weights',
    'channel_attention',
    'ExposureMaskPredictor',
    'MaskAwareInstanceNorm',
    'PlainInstanceNorm',
    'MixedScaleOutput',
    'MixedScaleSpatial',
    'ChannelSelfAttention',
    'BlockOutput',
    'RegionAwareBlock',
    'RefineBlock',
    'CorrectionOutput',
    'ExposureCorrectionNet',
    'count_parameters',
    'parameter_summary',
    'format_parameter_summary',
]

MIN_IMAGE_SIZE = 8
IN_EPS = 1e-5


def check_image(image: torch.Tensor) -> None:
    """Raises ShapeError unless image is (B, 3, H, W) with H, W >= 8."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(
            f'Expected an image batch of shape (B, 3, H, W), got {tuple(image.shape)}',
            actual=tuple(image.shape),
        )
    if min(image.shape[-2:]) < MIN_IMAGE_SIZE:
        raise ShapeError(
            f'Images must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, '
            f'got {image.shape[-2]}x{image.shape[-1]}',
            actual=tuple(image.shape),
        )


def _check_mask(features: torch.Tensor, mask: torch.Tensor) -> None:
    expected = (features.shape[0], 1, *features.shape[-2:])
    if mask.ndim != 4 or tuple(mask.shape) != expected:
        raise ShapeError(
            f'Mask of shape {tuple(mask.shape)} is not aligned with '
            f'features of shape {tuple(features.shape)}',
            expected=expected,
            actual=tuple(mask.shape),
        )


def _conv(
    in_channels: int, out_channels: int, kernel_size: int, groups: int = 1
) -> nn.Conv2d:
    """Size-preserving convolution with fan-in normal weights and zero bias."""
    conv = nn.Conv2d(
        in_channels,
        out_channels,
        kernel_size,
        padding=kernel_size // 2,
        groups=groups,
    )
    nn.init.kaiming_normal_(conv.weight, mode='fan_in', nonlinearity='relu')
    nn.init.zeros_(conv.bias)
    return conv


def split_regions(
    features: torch.Tensor, mask_u: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Splits features into over- and underexposed parts.

    Args:
        features: (B, C, H, W) features
        mask_u: (B, 1, H, W) underexposure mask, broadcast over channels

    Returns:
        (f_o, f_u) with f_u = features * mask_u and f_o = features * (1 - mask_u).
    """
    _check_mask(features, mask_u)
    mask_o = 1 - mask_u
    return features * mask_o, features * mask_u


def instance_norm(features: torch.Tensor, eps: float = IN_EPS) -> torch.Tensor:
    """Per-sample, per-channel standardization over spatial positions, no affine."""
    return F.instance_norm(features, eps=eps)


def attention_weights(
    queries: torch.Tensor, keys: torch.Tensor, heads: int
) -> torch.Tensor:
    """Channel-to-channel attention matrices, shape (B, heads, d, d).

    Each row is a softmax over key channels of the query/key inner products
    taken across all spatial positions, scaled by 1/sqrt(d).
    """
    if queries.shape != keys.shape:
        raise ShapeError(
            f'Query shape {tuple(queries.shape)} differs from key shape {tuple(keys.shape)}',
            expected=tuple(queries.shape),
            actual=tuple(keys.shape),
        )
    if queries.shape[1] % heads != 0:
        raise ConfigError(
            f'{heads} heads do not divide {queries.shape[1]} channels', field='attn_heads'
        )
    head_dim = queries.shape[1] // heads
    q = rearrange(queries, 'b (head d) h w -> b head d (h w)', head=heads)
    k = rearrange(keys, 'b (head d) h w -> b head d (h w)', head=heads)
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)


def channel_attention(
    queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, heads: int
) -> torch.Tensor:
    """Multi-head channel self-attention; output has the layout of values."""
    height, width = values.shape[-2:]
    attn = attention_weights(queries, keys, heads)
    v = rearrange(values, 'b (head d) h w -> b head d (h w)', head=heads)
    return rearrange(attn @ v, 'b head d (h w) -> b (head d) h w', h=height, w=width)


class ExposureMaskPredictor(nn.Module):
    """Conv-relu stack ending in a sigmoid; 1 means underexposed.

    Three 3x3 conv-relu layers narrow C -> C -> C/2 -> C/4, then a 1x1 conv
    produces the mask logit. The logit layer starts with tiny weights so an
    untrained predictor answers close to 0.5 everywhere.
    """

    def __init__(self, channels: int) -> None:
        """Initializes the predictor for features of the given width."""
        super().__init__()
        hidden = max(1, channels // 2)
        narrow = max(1, channels // 4)
        self.body = nn.Sequential(
            _conv(channels, channels, 3),
            nn.ReLU(),
            _conv(channels, hidden, 3),
            nn.ReLU(),
            _conv(hidden, narrow, 3),
            nn.ReLU(),
        )
        self.head = _conv(narrow, 1, 1)
        nn.init.normal_(self.head.weight, std=1e-3)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Returns the (B, 1, H, W) underexposure mask."""
        return torch.sigmoid(self.head(self.body(features)))


class MaskAwareInstanceNorm(nn.Module):
    """Gated, mask-conditioned instance normalization of both exposure regions.

    For each region a 3x3 conv over [channel max, channel mean, region mask]
    gives a sigmoid spatial gate for that region's features. Each gated region
    is concatenated with the block input, instance-normalized and projected
    back to C channels; the two projections are summed.
    """

    def __init__(self, channels: int) -> None:
        """Initializes gates and projections for features of the given width."""
        super().__init__()
        self.gate_o = _conv(3, 1, 3)
        self.gate_u = _conv(3, 1, 3)
        self.proj_o = _conv(2 * channels, channels, 1)
        self.proj_u = _conv(2 * channels, channels, 1)

    @staticmethod
    def region_gate(
        gate: nn.Conv2d, region: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """The (B, 1, H, W) sigmoid gate of one region."""
        pooled = torch.cat(
            [region.amax(dim=1, keepdim=True), region.mean(dim=1, keepdim=True), mask],
            dim=1,
        )
        return torch.sigmoid(gate(pooled))

    def forward(
        self,
        f_o: torch.Tensor,
        f_u: torch.Tensor,
        f_in: torch.Tensor,
        mask_u: torch.Tensor,
    ) -> torch.Tensor:
        """Returns the normalized features."""
        _check_mask(f_in, mask_u)
        mask_o = 1 - mask_u
        gated_o = self.region_gate(self.gate_o, f_o, mask_o) * f_o
        gated_u = self.region_gate(self.gate_u, f_u, mask_u) * f_u
        return self.proj_o(instance_norm(torch.cat([gated_o, f_in], dim=1))) + self.proj_u(
            instance_norm(torch.cat([gated_u, f_in], dim=1))
        )


class PlainInstanceNorm(nn.Module):
    """Region-blind variant: instance-normalize the block input and project it."""

    def __init__(self, channels: int) -> None:
        """Initializes the projection for features of the given width."""
        super().__init__()
        self.proj = _conv(channels, channels, 1)

    def forward(
        self,
        f_o: torch.Tensor,
        f_u: torch.Tensor,
        f_in: torch.Tensor,
        mask_u: torch.Tensor,
    ) -> torch.Tensor:
        """Returns proj(IN(f_in)); the region arguments are accepted and ignored."""
        return self.proj(instance_norm(f_in))


class MixedScaleOutput(NamedTuple):
    """Intermediate tensors of the mixed-scale path."""

    kv_small: torch.Tensor
    kv_large: torch.Tensor
    keys: torch.Tensor
    values: torch.Tensor
    spatial: torch.Tensor


class MixedScaleSpatial(nn.Module):
    """3x3 and 5x5 depth-wise branches merged into keys, values and spatial features."""

    def __init__(self, channels: int) -> None:
        """Initializes the branches for features of the given width."""
        super().__init__()
        self.dw_small = _conv(channels, channels, 3, groups=channels)
        self.dw_large = _conv(channels, channels, 5, groups=channels)
        self.merge_k = _conv(2 * channels, channels, 3)
        self.merge_v = _conv(2 * channels, channels, 5)
        self.fuse = _conv(2 * channels, channels, 1)

    def forward(self, f_n: torch.Tensor) -> MixedScaleOutput:
        """Runs both scales on the normalized features."""
        kv_small = F.relu(self.dw_small(f_n))
        kv_large = F.relu(self.dw_large(f_n))
        both = torch.cat([kv_small, kv_large], dim=1)
        keys = F.relu(self.merge_k(both))
        values = F.relu(self.merge_v(both))
        spatial = self.fuse(torch.cat([keys, values], dim=1))
        return MixedScaleOutput(kv_small, kv_large, keys, values, spatial)


class ChannelSelfAttention(nn.Module):
    """Dual channel self-attention: block input as query, per-scale key/values.

    Queries come from 3x3 and 5x5 convs of the unnormalized block input; each
    scale attends over its own key/value pair and the two results are fused by
    a 1x1 conv.
    """

    def __init__(self, channels: int, heads: int) -> None:
        """Initializes query convs and fusion.

        Raises:
            ConfigError: heads does not divide channels.
        """
        super().__init__()
        if channels % heads != 0:
            raise ConfigError(
                f'{heads} attention heads do not divide {channels} channels',
                field='attn_heads',
            )
        self.heads = heads
        self.query_small = _conv(channels, channels, 3)
        self.query_large = _conv(channels, channels, 5)
        self.fuse = _conv(2 * channels, channels, 1)

    def queries(self, f_in: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """The small- and large-kernel query maps."""
        return F.relu(self.query_small(f_in)), F.relu(self.query_large(f_in))

    def forward(
        self,
        f_in: torch.Tensor,
        keys: Sequence[torch.Tensor],
        values: Sequence[torch.Tensor],
    ) -> torch.Tensor:
        """Attends the block input over the (small, large) key and value pairs."""
        attended = [
            channel_attention(q, k, v, self.heads)
            for q, k, v in zip(self.queries(f_in), keys, values, strict=True)
        ]
        return self.fuse(torch.cat(attended, dim=1))


class BlockOutput(NamedTuple):
    """Result of one region-aware block."""

    features: torch.Tensor
    mask: torch.Tensor


class RegionAwareBlock(nn.Module):
    """Mask prediction, region split, normalization, restoration and fusion."""

    def __init__(self, config: ModelConfig) -> None:
        """Builds the block variant selected by the config."""
        super().__init__()
        channels = config.channels
        self.mask_predictor = ExposureMaskPredictor(channels)
        self.norm: nn.Module = (
            MaskAwareInstanceNorm(channels)
            if config.norm == 'masked'
            else PlainInstanceNorm(channels)
        )
        self.mixed_scale = MixedScaleSpatial(channels) if config.use_msc else None
        self.attention = (
            ChannelSelfAttention(channels, config.attn_heads) if config.use_csa else None
        )
        branches = 1 + int(config.use_msc) + int(config.use_csa)
        self.fuse = _conv(branches * channels, channels, 1)

    def forward(self, f_in: torch.Tensor) -> BlockOutput:
        """Maps (B, C, H, W) features to (B, C, H, W) features plus the block's mask."""
        mask_u = self.mask_predictor(f_in)
        f_o, f_u = split_regions(f_in, mask_u)
        f_n = self.norm(f_o, f_u, f_in, mask_u)

        branches = [f_n]
        kv: tuple[torch.Tensor, torch.Tensor] = (f_n, f_n)
        if self.mixed_scale is not None:
            mixed = self.mixed_scale(f_n)
            branches.append(mixed.spatial)
            kv = (mixed.kv_small, mixed.kv_large)
        if self.attention is not None:
            branches.append(self.attention(f_in, kv, kv))
        return BlockOutput(self.fuse(torch.cat(branches, dim=1)), mask_u)


class RefineBlock(nn.Module):
    """Residual squeeze-excite channel attention: f * gates(f) + f."""

    def __init__(self, channels: int, reduction: int = 4) -> None:
        """Initializes the bottleneck, C -> C/reduction -> C."""
        super().__init__()
        hidden = max(1, channels // reduction)
        self.reduce = _conv(channels, hidden, 1)
        self.expand = _conv(hidden, channels, 1)

    def gates(self, features: torch.Tensor) -> torch.Tensor:
        """Per-sample, per-channel gates of shape (B, C, 1, 1)."""
        squeezed = features.mean(dim=(-2, -1), keepdim=True)
        return torch.sigmoid(self.expand(F.relu(self.reduce(squeezed))))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Scales features channelwise and adds the residual."""
        return features * self.gates(features) + features


class CorrectionOutput(NamedTuple):
    """The corrected image and the mask of every block, first block first."""

    image: torch.Tensor
    masks: list[torch.Tensor]


class ExposureCorrectionNet(nn.Module):
    """Region-aware exposure correction network.

    Args:
        config: Width, depth and variant switches; defaults to ModelConfig()

    Example:
        ```python
        net = ExposureCorrectionNet(ModelConfig(num_blocks=2, base_channels=16))
        corrected, masks = net(images)  # images: (B, 3, H, W) in [0, 1]
        ```
    """

    def __init__(self, config: Optional[ModelConfig] = None) -> None:
        """Builds the network; the output head starts at zero so it begins as identity."""
        super().__init__()
        self.config = config or ModelConfig()
        channels = self.config.channels
        self.stem = _conv(3, channels, 1)
        self.blocks = nn.ModuleList(
            RegionAwareBlock(self.config) for _ in range(self.config.num_blocks)
        )
        self.refine = RefineBlock(channels, self.config.refine_reduction)
        self.head = _conv(channels, 3, 1)
        nn.init.zeros_(self.head.weight)

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        """Validates the image and applies the 1x1 stem."""
        check_image(image)
        return self.stem(image)

    def forward(self, image: torch.Tensor) -> CorrectionOutput:
        """Corrects a (B, 3, H, W) batch; the result is clamped to [0, 1]."""
        features = self.embed(image)
        masks = []
        for block in self.blocks:
            features, mask = block(features)
            masks.append(mask)
        residual = self.head(self.refine(features))
        return CorrectionOutput(torch.clamp(image + residual, 0.0, 1.0), masks)


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    """Number of scalar parameters in a module."""
    return sum(
        p.numel() for p in module.parameters() if p.requires_grad or not trainable_only
    )


def parameter_summary(model: nn.Module) -> list[tuple[str, int]]:
    """Per-module parameter counts; module lists are expanded one level."""
    rows: list[tuple[str, int]] = []
    for name, child in model.named_children():
        if isinstance(child, nn.ModuleList):
            for index, item in enumerate(child):
                for sub_name, sub in item.named_children():
                    rows.append((f'{name}.{index}.{sub_name}', count_parameters(sub)))
        else:
            rows.append((name, count_parameters(child)))
    return rows


def format_parameter_summary(model: nn.Module) -> str:
    """Renders parameter_summary as an aligned text table with a total line."""
    rows = parameter_summary(model)
    width = max([len(name) for name, _ in rows] + [len('total')])
    lines = [f'{"module":<{width}}  {"params":>10}', '-' * (width + 12)]
    lines.extend(f'{name:<{width}}  {count:>10,}' for name, count in rows)
    lines.append('-' * (width + 12))
    lines.append(f'{"total":<{width}}  {count_parameters(model):>10,}')
    return '\n'.join(lines)
