"""Paired images: loading, synthetic mixed-exposure degradation and augmentation.

Samples are channels-first tensors in [0, 1]: images (3, H, W) and masks
(1, H, W). Everything random takes an explicit seed, so datasets never carry
hidden RNG state and parallel loaders can't step on each other.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from collections.abc import Iterator, Sequence
from typing import NamedTuple, Optional, Self, overload

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from pydantic import Field, model_validator
from torch.nn import functional as F
from torchvision.transforms.functional import gaussian_blur

from mixexpo.color import rgb_to_ycbcr
from mixexpo.config import ConfigModel
from mixexpo.exceptions import DatasetError, ShapeError
from mixexpo.losses import compute_gt_mask
from mixexpo.types import DegradationMode, RegionLayout

__all__ = [
    'IMAGE_EXTENSIONS',
    'GAIN_RANGE',
    'GAMMA_RANGE',
    'rgb_to_ycbcr',
    'PairedSample',
    'PairedDataset',
    'DegradationSpec',
    'region_weights',
    'degrade',
    'synthesize_pair',
    'procedural_scene',
    'load_png',
    'save_png',
    'image_files',
    'load_image_dir',
    'load_paired_dir',
    'write_synthetic_dataset',
    'flip_sample',
    'augment',
    'CropBatch',
    'random_crop_batch',
]

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff')
GAIN_RANGE = (0.3, 3.0)
GAMMA_RANGE = (0.4, 2.5)


@dataclass(frozen=True)
class PairedSample:
    """An input/ground-truth pair with its cached ground-truth mask."""

    input: torch.Tensor
    gt: torch.Tensor
    gt_mask: torch.Tensor
    id: str = ''

    def __post_init__(self) -> None:
        """Checks the three tensors line up."""
        if self.input.ndim != 3 or self.input.shape[0] != 3:
            raise ShapeError(
                f'Sample {self.id!r}: input must be (3, H, W), got {tuple(self.input.shape)}',
                actual=tuple(self.input.shape),
            )
        if self.gt.shape != self.input.shape:
            raise ShapeError(
                f'Sample {self.id!r}: gt {tuple(self.gt.shape)} differs from input '
                f'{tuple(self.input.shape)}',
                expected=tuple(self.input.shape),
                actual=tuple(self.gt.shape),
            )
        if self.gt_mask.shape != (1, *self.input.shape[-2:]):
            raise ShapeError(
                f'Sample {self.id!r}: gt_mask must be (1, H, W), got {tuple(self.gt_mask.shape)}',
                expected=(1, *self.input.shape[-2:]),
                actual=tuple(self.gt_mask.shape),
            )

    @classmethod
    def from_images(cls, input: torch.Tensor, gt: torch.Tensor, id: str = '') -> Self:
        """Builds a sample, computing its ground-truth mask."""
        return cls(input=input, gt=gt, gt_mask=compute_gt_mask(input, gt), id=id)

    @property
    def size(self) -> tuple[int, int]:
        """(H, W)."""
        return self.input.shape[-2], self.input.shape[-1]


class PairedDataset(Sequence[PairedSample]):
    """An immutable, ordered collection of paired samples."""

    def __init__(self, samples: Sequence[PairedSample]) -> None:
        """Freezes the given samples in order."""
        self._samples = tuple(samples)

    @overload
    def __getitem__(self, index: int) -> PairedSample: ...
    @overload
    def __getitem__(self, index: slice) -> PairedDataset: ...
    def __getitem__(self, index: int | slice) -> PairedSample | PairedDataset:
        """Returns a sample, or a sub-dataset for a slice."""
        if isinstance(index, slice):
            return PairedDataset(self._samples[index])
        return self._samples[index]

    def __len__(self) -> int:
        """Number of samples."""
        return len(self._samples)

    def __iter__(self) -> Iterator[PairedSample]:
        """Iterates in order."""
        return iter(self._samples)

    @property
    def ids(self) -> list[str]:
        """Sample ids in order."""
        return [sample.id for sample in self._samples]


class DegradationSpec(ConfigModel):
    """How a clean image is turned into a mixed-exposure input.

    The image is partitioned into 2-4 smooth regions; each region gets a gain
    (``I' = clamp(g * I)``) or a gamma (``I' = I ** gamma``), blended across
    feathered boundaries. At least one region must brighten and one darken,
    unless every factor is exactly 1 (the no-op spec).

    Attributes:
        factors: One gain or gamma per region
        mode: 'gain' or 'gamma'
        layout: 'blobs' for random smooth regions, or equal 'vertical' /
            'horizontal' stripes (left-to-right / top-to-bottom)
        feather: Boundary blur sigma as a fraction of min(H, W)
        noise_std: Optional gaussian noise added after the exposure change
    """

    factors: tuple[float, ...] = Field(min_length=2, max_length=4)
    mode: DegradationMode = 'gain'
    layout: RegionLayout = 'blobs'
    feather: float = Field(default=0.05, ge=0, le=0.5)
    noise_std: float = Field(default=0.0, ge=0)

    @model_validator(mode='after')
    def check_mixed_exposure(self) -> Self:
        """Rejects out-of-range factors and specs that don't both brighten and darken."""
        low, high = GAIN_RANGE if self.mode == 'gain' else GAMMA_RANGE
        for factor in self.factors:
            if not low <= factor <= high:
                raise ValueError(f'{self.mode} factor {factor} outside [{low}, {high}]')
        if self.is_identity:
            return self
        if self.mode == 'gain':
            brightens = any(f > 1 for f in self.factors)
            darkens = any(f < 1 for f in self.factors)
        else:
            brightens = any(f < 1 for f in self.factors)
            darkens = any(f > 1 for f in self.factors)
        if not (brightens and darkens):
            raise ValueError(
                f'{self.factors} is not a mixed exposure: need a brightening and a darkening region'
            )
        return self

    @property
    def is_identity(self) -> bool:
        """True when every factor is exactly 1 and there is no noise."""
        return all(f == 1.0 for f in self.factors) and self.noise_std == 0

    @classmethod
    def random(
        cls,
        generator: torch.Generator,
        mode: DegradationMode = 'gain',
        layout: RegionLayout = 'blobs',
        noise_std: float = 0.0,
    ) -> Self:
        """Draws a mixed spec with 2-4 regions, one clearly bright and one clearly dark."""

        def uniform(low: float, high: float) -> float:
            return low + (high - low) * float(torch.rand((), generator=generator))

        if mode == 'gain':
            bright, dark, full = (1.4, 2.2), (0.35, 0.7), (0.35, 2.2)
        else:
            bright, dark, full = (0.45, 0.75), (1.5, 2.4), (0.45, 2.4)

        count = int(torch.randint(2, 5, (), generator=generator))
        factors = [uniform(*bright), uniform(*dark)]
        factors += [uniform(*full) for _ in range(count - 2)]
        order = torch.randperm(count, generator=generator).tolist()
        return cls(
            factors=tuple(round(factors[i], 4) for i in order),
            mode=mode,
            layout=layout,
            noise_std=noise_std,
        )


def _blur(stack: torch.Tensor, sigma: float) -> torch.Tensor:
    """Gaussian blur of a (N, H, W) stack with reflect padding."""
    if sigma < 0.3:
        return stack
    limit = 2 * min(stack.shape[-2:]) - 1
    size = min(2 * math.ceil(3 * sigma) + 1, limit)
    return gaussian_blur(stack.unsqueeze(0), [size, size], [sigma, sigma]).squeeze(0)


def region_weights(
    height: int, width: int, spec: DegradationSpec, generator: torch.Generator
) -> torch.Tensor:
    """Soft region memberships, shape (R, H, W), summing to 1 at every pixel."""
    regions = len(spec.factors)
    if spec.layout == 'vertical':
        labels = (torch.arange(width) * regions // width).expand(height, width)
    elif spec.layout == 'horizontal':
        labels = (torch.arange(height) * regions // height).unsqueeze(1).expand(height, width)
    else:
        noise = torch.randn(regions, height, width, generator=generator)
        labels = _blur(noise, min(height, width) / 6).argmax(dim=0)

    hard = F.one_hot(labels, regions).permute(2, 0, 1).to(torch.float32)
    soft = _blur(hard, spec.feather * min(height, width))
    return soft / soft.sum(dim=0, keepdim=True)


def degrade(
    clean: torch.Tensor, spec: DegradationSpec, generator: torch.Generator
) -> torch.Tensor:
    """Applies a degradation spec to a (3, H, W) clean image."""
    if spec.is_identity:
        return clean.clone()
    weights = region_weights(clean.shape[-2], clean.shape[-1], spec, generator)
    factors = torch.tensor(spec.factors, dtype=torch.float32).view(-1, 1, 1)
    field = (weights * factors).sum(dim=0, keepdim=True).to(clean.dtype)
    if spec.mode == 'gain':
        degraded = clean * field
    else:
        degraded = clean.clamp(0, 1) ** field
    if spec.noise_std > 0:
        noise = torch.randn(clean.shape, generator=generator).to(clean.dtype)
        degraded = degraded + spec.noise_std * noise
    return degraded.clamp(0, 1)


def synthesize_pair(
    clean: torch.Tensor, spec: DegradationSpec, seed: int, id: str = ''
) -> PairedSample:
    """Makes a mixed-exposure input for a clean image; the clean image is the target.

    Deterministic given the seed.
    """
    if clean.ndim != 3 or clean.shape[0] != 3:
        raise ShapeError(
            f'Clean image must be (3, H, W), got {tuple(clean.shape)}',
            actual=tuple(clean.shape),
        )
    generator = torch.Generator().manual_seed(seed)
    return PairedSample.from_images(degrade(clean, spec, generator), clean, id=id)


def procedural_scene(size: int | tuple[int, int], seed: int) -> torch.Tensor:
    """A smooth, textured synthetic (3, H, W) scene with values in [0.15, 0.6].

    A low-frequency color field overlaid with a few flat rectangles and some
    fine texture; enough structure for SSIM and the perceptual features to
    have something to look at.
    """
    height, width = (size, size) if isinstance(size, int) else size
    generator = torch.Generator().manual_seed(seed)

    coarse = torch.rand(1, 3, 4, 4, generator=generator)
    scene = F.interpolate(coarse, size=(height, width), mode='bicubic', align_corners=False)[0]
    for _ in range(int(torch.randint(2, 6, (), generator=generator))):
        top = int(torch.randint(0, height - 2, (), generator=generator))
        left = int(torch.randint(0, width - 2, (), generator=generator))
        h = int(torch.randint(2, max(3, height // 2), (), generator=generator))
        w = int(torch.randint(2, max(3, width // 2), (), generator=generator))
        color = torch.rand(3, 1, 1, generator=generator)
        scene[:, top : top + h, left : left + w] = color
    texture = _blur(torch.randn(3, height, width, generator=generator), 0.8)
    scene = scene + 0.05 * texture
    return (0.15 + 0.45 * scene.clamp(0, 1)).to(torch.float32)


def load_png(path: str | Path) -> torch.Tensor:
    """Decodes an 8-bit image file to a (3, H, W) float tensor in [0, 1].

    Raises:
        DatasetError: The file is missing or isn't a readable image.
    """
    try:
        with Image.open(path) as image:
            array = np.asarray(image.convert('RGB'), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetError(f'Cannot read image {path}: {e}', path=str(path)) from e
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def save_png(tensor: torch.Tensor, path: str | Path) -> None:
    """Encodes a (3, H, W) image or (1, H, W) mask in [0, 1] as an 8-bit PNG."""
    if tensor.ndim != 3 or tensor.shape[0] not in (1, 3):
        raise ShapeError(
            f'Expected (3, H, W) or (1, H, W), got {tuple(tensor.shape)}',
            actual=tuple(tensor.shape),
        )
    array = (tensor.detach().cpu().clamp(0, 1) * 255.0).round().to(torch.uint8)
    array_np = array.permute(1, 2, 0).numpy()
    if array_np.shape[-1] == 1:
        image = Image.fromarray(array_np[..., 0])
    else:
        image = Image.fromarray(array_np)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format='PNG')


def image_files(directory: str | Path) -> dict[str, Path]:
    """Image files of a directory keyed by file name, sorted."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f'{directory} is not a directory', path=str(directory))
    return {
        path.name: path
        for path in sorted(directory.iterdir())
        if path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS
    }


def load_image_dir(directory: str | Path) -> list[tuple[str, torch.Tensor]]:
    """Loads every image in a directory, sorted by file name."""
    return [(name, load_png(path)) for name, path in image_files(Path(directory)).items()]


def load_paired_dir(input_dir: str | Path, gt_dir: str | Path) -> PairedDataset:
    """Pairs same-named images from two directories.

    Files present on only one side and pairs whose sizes disagree are skipped
    with a warning. Iteration order is sorted by file name.

    Raises:
        DatasetError: No file name appears in both directories.
    """
    inputs = image_files(Path(input_dir))
    gts = image_files(Path(gt_dir))

    for name in sorted(inputs.keys() ^ gts.keys()):
        side = input_dir if name in inputs else gt_dir
        logger.warning('Skipping %s: only present in %s', name, side)

    common = sorted(inputs.keys() & gts.keys())
    if not common:
        raise DatasetError(
            f'No file names in common between {input_dir} and {gt_dir}', path=str(input_dir)
        )

    samples = []
    for name in common:
        image, gt = load_png(inputs[name]), load_png(gts[name])
        if image.shape != gt.shape:
            logger.warning(
                'Skipping %s: input is %sx%s but ground truth is %sx%s',
                name,
                image.shape[-2],
                image.shape[-1],
                gt.shape[-2],
                gt.shape[-1],
            )
            continue
        samples.append(PairedSample.from_images(image, gt, id=name))
    logger.info('Loaded %d pairs from %s', len(samples), input_dir)
    return PairedDataset(samples)


def write_synthetic_dataset(
    out_dir: str | Path,
    count: int,
    size: int,
    seed: int,
    mode: DegradationMode = 'gain',
    layout: RegionLayout = 'blobs',
    noise_std: float = 0.0,
    clean_dir: Optional[str | Path] = None,
) -> PairedDataset:
    """Writes ``input/``, ``gt/`` and ``mask/`` PNGs plus a key-value manifest.

    Clean images come from clean_dir when given (cycled if count exceeds the
    number of files) and from procedural_scene otherwise.
    """
    out_dir = Path(out_dir)
    cleans = load_image_dir(clean_dir) if clean_dir is not None else []
    if clean_dir is not None and not cleans:
        raise DatasetError(f'No images found in {clean_dir}', path=str(clean_dir))

    spec_generator = torch.Generator().manual_seed(seed)
    manifest = [f'seed = {seed}', f'count = {count}', f'mode = {mode}', f'layout = {layout}']
    samples = []
    for index in range(count):
        name = f'{index:04d}.png'
        pair_seed = seed * 100_003 + index
        clean = cleans[index % len(cleans)][1] if cleans else procedural_scene(size, pair_seed)
        spec = DegradationSpec.random(spec_generator, mode=mode, layout=layout, noise_std=noise_std)
        sample = synthesize_pair(clean, spec, pair_seed, id=name)

        save_png(sample.input, out_dir / 'input' / name)
        save_png(sample.gt, out_dir / 'gt' / name)
        save_png(sample.gt_mask, out_dir / 'mask' / name)
        manifest.append(f'{name}.seed = {pair_seed}')
        manifest.extend(f'{name}.spec.{key} = {value}' for key, value in spec.to_flat().items())
        samples.append(sample)

    (out_dir / 'manifest.txt').write_text('\n'.join(manifest) + '\n', encoding='utf-8')
    logger.info('Wrote %d synthetic pairs to %s', count, out_dir)
    return PairedDataset(samples)


def flip_sample(sample: PairedSample, horizontal: bool, vertical: bool) -> PairedSample:
    """Applies the same flips to input, gt and gt_mask."""
    dims = [d for d, flag in ((-1, horizontal), (-2, vertical)) if flag]
    if not dims:
        return sample
    return PairedSample(
        input=sample.input.flip(dims),
        gt=sample.gt.flip(dims),
        gt_mask=sample.gt_mask.flip(dims),
        id=sample.id,
    )


def augment(sample: PairedSample, seed: int) -> PairedSample:
    """Random joint horizontal and vertical flips, each with probability 1/2."""
    generator = torch.Generator().manual_seed(seed)
    horizontal, vertical = (torch.rand(2, generator=generator) < 0.5).tolist()
    return flip_sample(sample, horizontal, vertical)


class CropBatch(NamedTuple):
    """Aligned crops stacked into (batch, C, crop, crop) tensors."""

    inputs: torch.Tensor
    gts: torch.Tensor
    masks: torch.Tensor


def random_crop_batch(
    samples: Sequence[PairedSample],
    crop: int,
    batch: int,
    seed: int,
    flip: bool = False,
) -> CropBatch:
    """Samples a batch of aligned random crops, with replacement.

    Args:
        samples: Dataset to draw from
        crop: Square crop side
        batch: Number of crops
        seed: Fully determines which samples, windows and flips are used
        flip: Apply augment() to each drawn sample first

    Raises:
        DatasetError: The dataset is empty or crop exceeds a drawn image.
    """
    if not samples:
        raise DatasetError('Cannot draw a batch from an empty dataset')
    generator = torch.Generator().manual_seed(seed)
    inputs, gts, masks = [], [], []
    for _ in range(batch):
        sample = samples[int(torch.randint(len(samples), (), generator=generator))]
        flip_seed = int(torch.randint(2**31 - 1, (), generator=generator))
        if flip:
            sample = augment(sample, flip_seed)
        height, width = sample.size
        if crop > min(height, width):
            raise DatasetError(
                f'Crop {crop} does not fit sample {sample.id!r} of size {height}x{width}'
            )
        top = int(torch.randint(height - crop + 1, (), generator=generator))
        left = int(torch.randint(width - crop + 1, (), generator=generator))
        window = (slice(None), slice(top, top + crop), slice(left, left + crop))
        inputs.append(sample.input[window])
        gts.append(sample.gt[window])
        masks.append(sample.gt_mask[window])
    return CropBatch(torch.stack(inputs), torch.stack(gts), torch.stack(masks))
