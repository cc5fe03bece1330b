"""mixexpo, region-aware correction of mixed over- and underexposure."""

from mixexpo.config import ModelConfig, LossWeights, TrainConfig, SanityConfig
from mixexpo.model import ExposureCorrectionNet, CorrectionOutput
from mixexpo.losses import ExposureLoss, LossBreakdown, total_loss
from mixexpo.perceptual import PerceptualExtractor
from mixexpo.data import PairedSample, PairedDataset, DegradationSpec
from mixexpo.metrics import psnr, ssim, brightness_mapping_curve
from mixexpo.training import train, overfit_sanity, save_checkpoint, load_checkpoint
import mixexpo.exceptions as exceptions

__all__ = [
    'ModelConfig',
    'LossWeights',
    'TrainConfig',
    'SanityConfig',
    'ExposureCorrectionNet',
    'CorrectionOutput',
    'ExposureLoss',
    'LossBreakdown',
    'total_loss',
    'PerceptualExtractor',
    'PairedSample',
    'PairedDataset',
    'DegradationSpec',
    'psnr',
    'ssim',
    'brightness_mapping_curve',
    'train',
    'overfit_sanity',
    'save_checkpoint',
    'load_checkpoint',
    'exceptions',
]
