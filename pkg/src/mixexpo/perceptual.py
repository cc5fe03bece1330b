"""Frozen VGG16 feature extractor and its weight file lifecycle."""

from __future__ import annotations

import hashlib
import logging
import os
import pickle
from pathlib import Path
from typing import Final, Optional, Self

import httpx
import torch
from torch import nn
from torchvision.models import vgg16

from mixexpo.exceptions import PerceptualWeightsError, WeightsDownloadError
from mixexpo.types import PerceptualLayer
from mixexpo.version import VERSION

__all__ = [
    'VGG16_URL',
    'VGG16_SHA256_PREFIX',
    'LAYER_STRIDES',
    'PerceptualExtractor',
    'file_sha256',
    'fetch_weights',
]

logger = logging.getLogger(__name__)

VGG16_URL: Final[str] = 'https://download.pytorch.org/models/vgg16-397923af.pth'
# torchvision names its weight files after the first 8 hex digits of their SHA-256
VGG16_SHA256_PREFIX: Final[str] = '397923af'

# index one past the named relu in vgg16().features
_LAYER_ENDS: Final[dict[str, int]] = {
    'relu1_2': 4,
    'relu2_2': 9,
    'relu3_3': 16,
    'relu4_3': 23,
}
LAYER_STRIDES: Final[dict[str, int]] = {
    'relu1_2': 1,
    'relu2_2': 2,
    'relu3_3': 4,
    'relu4_3': 8,
}

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class PerceptualExtractor(nn.Module):
    """A frozen feature network applied after ImageNet input normalization.

    Parameters never require gradients and the module never leaves eval mode,
    but gradients do flow through it to the input image.

    Args:
        features: The truncated feature network, e.g. vgg16().features[:16]
    """

    def __init__(self, features: nn.Sequential) -> None:
        """Wraps and freezes a feature network."""
        super().__init__()
        self.features = features
        self.register_buffer('mean', torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer('std', torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> Self:
        """Ignores mode; the extractor always stays in eval mode."""
        return super().train(False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Features of a (B, 3, H, W) image batch in [0, 1]."""
        return self.features((image - self.mean) / self.std)

    @classmethod
    def from_vgg16(
        cls,
        path: str | Path,
        layer: PerceptualLayer = 'relu3_3',
        sha256: Optional[str] = None,
    ) -> Self:
        """Loads torchvision VGG16 weights from a local file and truncates at a layer.

        Args:
            path: A torchvision VGG16 state dict file
            layer: The relu whose activations are returned
            sha256: Expected SHA-256 (full digest or a prefix of it); unchecked if None

        Raises:
            PerceptualWeightsError: The file is missing, fails its hash check or
                doesn't hold VGG16 weights.
        """
        path = Path(path)
        if not path.is_file():
            raise PerceptualWeightsError(
                f'VGG16 weights not found at {path}; '
                f'download them with `mixexpo fetch-weights {path}`',
                path=str(path),
            )
        if sha256 is not None:
            digest = file_sha256(path)
            if not digest.startswith(sha256.lower()):
                raise PerceptualWeightsError(
                    f'SHA-256 of {path} is {digest}, expected {sha256}', path=str(path)
                )

        try:
            state = torch.load(path, map_location='cpu', weights_only=True)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
            raise PerceptualWeightsError(
                f'Cannot read VGG16 weights from {path}: {e}', path=str(path)
            ) from e

        network = vgg16(weights=None)
        try:
            network.load_state_dict(state)
        except (RuntimeError, TypeError) as e:
            raise PerceptualWeightsError(
                f'{path} does not hold VGG16 weights: {e}', path=str(path)
            ) from e
        logger.info('Loaded VGG16 %s features from %s', layer, path)
        return cls(network.features[: _LAYER_ENDS[layer]])

    @classmethod
    def random_vgg16(cls, layer: PerceptualLayer = 'relu3_3', seed: int = 0) -> Self:
        """A VGG16-shaped extractor with seeded random weights.

        Only for shape checks and tests; training never picks this on its own.
        """
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            network = vgg16(weights=None)
        return cls(network.features[: _LAYER_ENDS[layer]])


def file_sha256(path: str | Path, chunk_size: int = 1 << 20) -> str:
    """Hex SHA-256 of a file."""
    digest = hashlib.sha256()
    with Path(path).open('rb') as fh:
        while chunk := fh.read(chunk_size):
            digest.update(chunk)
    return digest.hexdigest()


async def fetch_weights(
    dest: str | Path,
    url: str = VGG16_URL,
    sha256: Optional[str] = VGG16_SHA256_PREFIX,
    chunk_size: int = 1 << 20,
) -> str:
    """Downloads perceptual weights to dest and verifies them.

    The file is streamed to a sibling ``.part`` file and only moved into place
    once its hash checks out.

    Args:
        dest: Where the weight file should end up
        url: Source URL; defaults to torchvision's VGG16 ImageNet weights
        sha256: Expected SHA-256 (full digest or prefix); None skips the check
        chunk_size: Streaming chunk size in bytes

    Returns:
        The hex SHA-256 of the downloaded file, for recording in a config.

    Raises:
        WeightsDownloadError: The server answered with an error status.
        PerceptualWeightsError: The download doesn't match the expected hash.
    """
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    partial = dest.with_name(dest.name + '.part')
    digest = hashlib.sha256()

    transport = httpx.AsyncHTTPTransport(retries=3)
    async with httpx.AsyncClient(
        timeout=60.0,
        transport=transport,
        follow_redirects=True,
        headers={'User-Agent': f'mixexpo/{VERSION}'},
    ) as client:
        try:
            async with client.stream('GET', url) as response:
                response.raise_for_status()
                with partial.open('wb') as fh:
                    async for chunk in response.aiter_bytes(chunk_size):
                        fh.write(chunk)
                        digest.update(chunk)
        except httpx.HTTPStatusError as e:
            partial.unlink(missing_ok=True)
            raise WeightsDownloadError(
                f'Failed to download {url}: {e}',
                status_code=e.response.status_code,
                response=e.response,
            ) from e

    hexdigest = digest.hexdigest()
    if sha256 is not None and not hexdigest.startswith(sha256.lower()):
        partial.unlink(missing_ok=True)
        raise PerceptualWeightsError(
            f'Downloaded file has SHA-256 {hexdigest}, expected {sha256}', path=str(dest)
        )
    os.replace(partial, dest)
    logger.info('Saved %s to %s (sha256 %s)', url, dest, hexdigest)
    return hexdigest
