"""Optimization loop, checkpoints and the overfit sanity harness."""

from __future__ import annotations

import csv
import logging
import math
import os
import pickle
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from mixexpo.color import luma
from mixexpo.config import ModelConfig, SanityConfig, TrainConfig
from mixexpo.data import (
    CropBatch,
    DegradationSpec,
    PairedDataset,
    PairedSample,
    load_paired_dir,
    procedural_scene,
    random_crop_batch,
    synthesize_pair,
)
from mixexpo.exceptions import CheckpointError, ConfigError, TrainingDivergedError
from mixexpo.losses import ExposureLoss, LossBreakdown, mask_target
from mixexpo.metrics import brightness_mapping_curve, psnr
from mixexpo.model import ExposureCorrectionNet
from mixexpo.perceptual import PerceptualExtractor
from mixexpo.version import CHECKPOINT_FORMAT

__all__ = [
    'LOG_COLUMNS',
    'seed_everything',
    'build_extractor',
    'build_optimizer',
    'Checkpoint',
    'save_checkpoint',
    'load_checkpoint',
    'StepBatches',
    'Trainer',
    'TrainReport',
    'train',
    'SanityPoint',
    'SanityReport',
    'make_sanity_pairs',
    'overfit_sanity',
]

logger = logging.getLogger(__name__)

LOG_COLUMNS: Final[tuple[str, ...]] = ('step', 'total', 'mse', 'cos', 'bce', 'ecr', 'lr')


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seeds every RNG; deterministic mode also pins one thread and deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def build_extractor(config: TrainConfig) -> Optional[PerceptualExtractor]:
    """Loads the perceptual extractor the config asks for, or None when ECR is off.

    Raises:
        ConfigError: ECR is weighted but no weight file is configured.
        PerceptualWeightsError: The configured weight file can't be used.
    """
    if config.weights.ecr == 0:
        return None
    config.require_perceptual()
    assert config.perceptual_weights is not None
    return PerceptualExtractor.from_vgg16(
        config.perceptual_weights, config.perceptual_layer, config.perceptual_sha256
    )


def build_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    """ADAM over the model's parameters with the configured lr and betas."""
    return torch.optim.Adam(
        model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2)
    )


@dataclass
class Checkpoint:
    """Everything restored from a checkpoint archive."""

    model_config: ModelConfig
    model_state: dict[str, torch.Tensor]
    optimizer_state: Optional[dict[str, Any]]
    step: int
    train_config: Optional[dict[str, Any]] = None

    def build_model(self) -> ExposureCorrectionNet:
        """A fresh network carrying the saved weights."""
        model = ExposureCorrectionNet(self.model_config)
        model.load_state_dict(self.model_state)
        return model

    def restore(
        self, model: ExposureCorrectionNet, optimizer: Optional[torch.optim.Optimizer] = None
    ) -> None:
        """Loads the saved state into an existing model (and optimizer).

        Raises:
            CheckpointError: The model was built from a different config.
        """
        if model.config != self.model_config:
            raise CheckpointError(
                f'Checkpoint holds {self.model_config!r} but the model is {model.config!r}'
            )
        model.load_state_dict(self.model_state)
        if optimizer is not None and self.optimizer_state is not None:
            optimizer.load_state_dict(self.optimizer_state)


def save_checkpoint(
    path: str | Path,
    model: ExposureCorrectionNet,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    train_config: Optional[TrainConfig] = None,
) -> Path:
    """Writes a self-describing checkpoint archive.

    The archive is written beside the target and moved into place, so a
    crash never leaves a half-written file under the final name.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'format_version': CHECKPOINT_FORMAT,
        'model_config': model.config.model_dump(mode='json'),
        'model_state': model.state_dict(),
        'optimizer_state': optimizer.state_dict() if optimizer is not None else None,
        'step': step,
        'train_config': train_config.to_flat() if train_config is not None else None,
    }
    partial = path.with_name(path.name + '.tmp')
    torch.save(payload, partial)
    os.replace(partial, path)
    logger.info('Saved checkpoint at step %d to %s', step, path)
    return path


def load_checkpoint(
    path: str | Path, expected: Optional[ModelConfig] = None
) -> Checkpoint:
    """Reads a checkpoint archive.

    Args:
        path: The archive
        expected: When given, the saved model config must equal it

    Raises:
        CheckpointError: The file is missing, truncated, of another format
            version, or was saved from a different model config.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f'No checkpoint at {path}', path=str(path)) from e
    except (RuntimeError, EOFError, OSError, ValueError, pickle.UnpicklingError) as e:
        raise CheckpointError(
            f'{path} is truncated or not a checkpoint: {e}', path=str(path)
        ) from e

    if not isinstance(payload, dict) or 'format_version' not in payload:
        raise CheckpointError(f'{path} is not a mixexpo checkpoint', path=str(path))
    if payload['format_version'] != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f'{path} has checkpoint format {payload["format_version"]}, '
            f'this version reads format {CHECKPOINT_FORMAT}',
            path=str(path),
        )

    model_config = ModelConfig.model_validate(payload['model_config'])
    if expected is not None and expected != model_config:
        raise CheckpointError(
            f'{path} was saved with {model_config!r}, expected {expected!r}', path=str(path)
        )
    return Checkpoint(
        model_config=model_config,
        model_state=payload['model_state'],
        optimizer_state=payload['optimizer_state'],
        step=int(payload['step']),
        train_config=payload.get('train_config'),
    )


class StepBatches(Dataset[CropBatch]):
    """Training batches indexed by step number.

    Batch ``step`` is fully determined by (seed, step), so loader workers can
    build batches ahead of the trainer without sharing any RNG.
    """

    def __init__(
        self,
        samples: Sequence[PairedSample],
        crop: int,
        batch: int,
        seed: int,
        flip: bool = True,
    ) -> None:
        """Stores the sampling parameters."""
        self.samples = samples
        self.crop = crop
        self.batch = batch
        self.seed = seed
        self.flip = flip

    def __getitem__(self, step: int) -> CropBatch:
        """The batch used at the given step."""
        return random_crop_batch(
            self.samples, self.crop, self.batch, self.seed * 1_000_003 + step, flip=self.flip
        )


@dataclass
class TrainReport:
    """Outcome of a training run."""

    steps: int
    validation: list[tuple[int, float]] = field(default_factory=list)
    last_breakdown: dict[str, float] = field(default_factory=dict)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def best_psnr(self) -> float:
        """Best validation PSNR seen, NaN without validation."""
        return max((p for _, p in self.validation), default=float('nan'))

    @property
    def best_step(self) -> Optional[int]:
        """Step of the best validation PSNR (earliest on ties)."""
        if not self.validation:
            return None
        best = self.best_psnr
        return next(step for step, p in self.validation if p == best)


class Trainer:
    """Owns a model, its optimizer and the objective; runs optimizer steps.

    Args:
        config: Training configuration
        extractor: Perceptual extractor; loaded from the config when None and
            the contrastive term is weighted
        model: An existing network; a fresh one is built from config.model otherwise
    """

    def __init__(
        self,
        config: TrainConfig,
        extractor: Optional[PerceptualExtractor] = None,
        model: Optional[ExposureCorrectionNet] = None,
    ) -> None:
        """Seeds, builds the network, objective and optimizer."""
        seed_everything(config.seed, config.deterministic)
        self.config = config
        self.device = torch.device(config.device)
        self.model = (model or ExposureCorrectionNet(config.model)).to(self.device)
        if extractor is None and config.weights.ecr > 0:
            extractor = build_extractor(config)
        self.loss = ExposureLoss(
            config.weights,
            extractor,
            polarity=config.mask_polarity,
            detach_ecr_mask=config.detach_ecr_mask,
        ).to(self.device)
        self.optimizer = build_optimizer(self.model, config)
        self.step = 0

    def resume(self, path: str | Path) -> None:
        """Restores weights, optimizer moments and the step counter."""
        checkpoint = load_checkpoint(path, expected=self.config.model)
        checkpoint.restore(self.model, self.optimizer)
        self.step = checkpoint.step
        logger.info('Resumed from %s at step %d', path, self.step)

    def train_step(self, batch: CropBatch) -> LossBreakdown:
        """One optimizer step on a batch.

        Raises:
            TrainingDivergedError: The loss is not finite; weights are untouched.
        """
        inputs, gts, masks = (t.to(self.device) for t in batch)
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        breakdown = self.loss(self.model(inputs), inputs, gts, masks)
        values = breakdown.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDivergedError(self.step + 1, values)
        breakdown.total.backward()
        if self.config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        return breakdown

    @torch.no_grad()
    def validate(self, samples: Sequence[PairedSample]) -> float:
        """Mean PSNR over full, uncropped images."""
        self.model.eval()
        scores = []
        for sample in samples:
            output = self.model(sample.input.unsqueeze(0).to(self.device))
            scores.append(psnr(output.image[0].cpu(), sample.gt))
        return float(np.mean(scores))

    def checkpoint(self, path: str | Path) -> Path:
        """Saves the current state."""
        return save_checkpoint(path, self.model, self.optimizer, self.step, self.config)

    @property
    def lr(self) -> float:
        """Current learning rate."""
        return float(self.optimizer.param_groups[0]['lr'])


def _append_log(path: Path, step: int, values: dict[str, float], lr: float) -> None:
    new = not path.exists()
    with path.open('a', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_COLUMNS)
        row = [step] + [f'{values[name]:.8g}' for name in LOG_COLUMNS[1:-1]] + [f'{lr:.8g}']
        writer.writerow(row)


def train(
    config: TrainConfig,
    train_set: Optional[Sequence[PairedSample]] = None,
    val_set: Optional[Sequence[PairedSample]] = None,
    extractor: Optional[PerceptualExtractor] = None,
    resume: Optional[str | Path] = None,
    progress: bool = False,
) -> TrainReport:
    """Trains a network as configured.

    Datasets not passed in are loaded from the config's directories. Without
    a validation set, validation runs on the full training images. Writes the
    CSV training log and periodic checkpoints under config.output_dir.

    Raises:
        ConfigError: No training data, or ECR weighted without perceptual weights.
        TrainingDivergedError: The loss became non-finite.
    """
    if extractor is None:
        config.require_perceptual()
    if train_set is None:
        if config.train_input_dir is None or config.train_gt_dir is None:
            raise ConfigError(
                'Training needs train_input_dir and train_gt_dir', field='train_input_dir'
            )
        train_set = load_paired_dir(config.train_input_dir, config.train_gt_dir)
    if val_set is None and config.val_input_dir is not None and config.val_gt_dir is not None:
        val_set = load_paired_dir(config.val_input_dir, config.val_gt_dir)
    if val_set is None:
        logger.info('No validation set; validating on the training images')
        val_set = train_set
    if not train_set:
        raise ConfigError('Training set is empty', field='train_input_dir')

    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    log_path = output_dir / 'train_log.csv'

    trainer = Trainer(config, extractor=extractor)
    if resume is not None:
        trainer.resume(resume)
    report = TrainReport(steps=trainer.step)
    report.validation.append((trainer.step, trainer.validate(val_set)))
    logger.info('step %d: validation psnr %.3f', trainer.step, report.validation[-1][1])

    if trainer.step >= config.max_steps:
        return report

    loader = DataLoader(
        StepBatches(train_set, config.crop, config.batch, config.seed),
        batch_size=None,
        sampler=range(trainer.step, config.max_steps),
        num_workers=config.num_workers,
    )
    bar = tqdm(
        total=config.max_steps,
        initial=trainer.step,
        desc='train',
        unit='step',
        disable=not progress,
    )
    with bar:
        for batch in loader:
            values = trainer.train_step(batch).as_floats()
            _append_log(log_path, trainer.step, values, trainer.lr)
            report.last_breakdown = values
            bar.update(1)
            bar.set_postfix(loss=f'{values["total"]:.4f}')
            logger.debug('step %d: %s', trainer.step, values)

            if config.validate_every and trainer.step % config.validate_every == 0:
                report.validation.append((trainer.step, trainer.validate(val_set)))
                logger.info(
                    'step %d: validation psnr %.3f', trainer.step, report.validation[-1][1]
                )
            if config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
                report.checkpoints.append(
                    trainer.checkpoint(output_dir / f'step_{trainer.step:07d}.pt')
                )

    if report.validation[-1][0] != trainer.step:
        report.validation.append((trainer.step, trainer.validate(val_set)))
    report.checkpoints.append(trainer.checkpoint(output_dir / 'last.pt'))
    report.steps = trainer.step
    logger.info(
        'Finished %d steps; best validation psnr %.3f at step %s',
        report.steps,
        report.best_psnr,
        report.best_step,
    )
    return report


@dataclass(frozen=True)
class SanityPoint:
    """Training-set metrics at one step of the overfit harness."""

    step: int
    psnr: float
    mask_error: float
    loss: Optional[float] = None


@dataclass
class SanityReport:
    """Outcome of the overfit harness.

    passed reflects the PSNR and mask-error thresholds; directional and the
    curve areas are diagnostics computed on a held-out pair and the training
    pairs after training.
    """

    passed: bool
    steps: int
    trace: list[SanityPoint]
    psnr_threshold: float
    mask_error_threshold: float
    brightened_under: bool = False
    darkened_over: bool = False
    curve_area_input: float = float('nan')
    curve_area_output: float = float('nan')
    model: Optional[ExposureCorrectionNet] = field(default=None, repr=False)

    @property
    def final(self) -> SanityPoint:
        """The last evaluated point."""
        return self.trace[-1]

    @property
    def directional(self) -> bool:
        """True when the held-out pair's dark region got brighter and bright region darker."""
        return self.brightened_under and self.darkened_over

    def summary(self) -> str:
        """A short human-readable summary."""
        return '\n'.join(
            [
                f'passed: {self.passed}',
                f'steps: {self.steps}',
                f'psnr: {self.final.psnr:.3f} (threshold {self.psnr_threshold})',
                f'mask_error: {self.final.mask_error:.4f} (threshold {self.mask_error_threshold})',
                f'directional: {self.directional}',
                f'curve_area_input: {self.curve_area_input:.5f}',
                f'curve_area_output: {self.curve_area_output:.5f}',
            ]
        )

    def write_trace(self, path: str | Path) -> None:
        """Writes the metric trace as CSV."""
        with Path(path).open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh)
            writer.writerow(['step', 'psnr', 'mask_error', 'loss'])
            for point in self.trace:
                writer.writerow(
                    [point.step, f'{point.psnr:.6f}', f'{point.mask_error:.6f}', point.loss or '']
                )


def make_sanity_pairs(config: SanityConfig, count: int, offset: int = 0) -> PairedDataset:
    """Synthetic mixed-exposure pairs (or identity pairs) for the harness."""
    generator = torch.Generator().manual_seed(config.seed * 7919 + offset)
    samples = []
    for index in range(offset, offset + count):
        pair_seed = config.seed * 100_003 + index
        clean = procedural_scene(config.size, pair_seed)
        if config.identity_pairs:
            spec = DegradationSpec(factors=(1.0, 1.0))
        else:
            spec = DegradationSpec.random(generator)
        samples.append(synthesize_pair(clean, spec, pair_seed, id=f'sanity_{index:02d}'))
    return PairedDataset(samples)


def _stack(samples: Sequence[PairedSample]) -> CropBatch:
    return CropBatch(
        torch.stack([s.input for s in samples]),
        torch.stack([s.gt for s in samples]),
        torch.stack([s.gt_mask for s in samples]),
    )


def overfit_sanity(
    config: Optional[SanityConfig] = None,
    extractor: Optional[PerceptualExtractor] = None,
    progress: bool = False,
) -> SanityReport:
    """Overfits a few synthetic pairs and checks the network can fit them.

    Every step uses the whole pair set at full resolution. Training stops as
    soon as both thresholds are met, or after config.max_steps.
    """
    config = config or SanityConfig()
    if extractor is None and config.weights.ecr > 0 and config.perceptual_weights is None:
        logger.warning('No perceptual weights configured; running the harness with weights.ecr = 0')
        config = config.replace({'weights.ecr': 0.0})

    trainer = Trainer(config, extractor=extractor)
    pairs = make_sanity_pairs(config, config.num_pairs)
    batch = _stack(pairs)
    target = mask_target(batch.masks, config.mask_polarity).to(trainer.device)

    @torch.no_grad()
    def evaluate(loss: Optional[float]) -> SanityPoint:
        trainer.model.eval()
        output = trainer.model(batch.inputs.to(trainer.device))
        mask_error = float(
            torch.stack([(mask - target).abs().mean() for mask in output.masks]).mean()
        )
        return SanityPoint(trainer.step, psnr(output.image.cpu(), batch.gts), mask_error, loss)

    def met(point: SanityPoint) -> bool:
        return (
            point.psnr > config.psnr_threshold
            and point.mask_error < config.mask_error_threshold
        )

    trace = [evaluate(None)]
    with tqdm(total=config.max_steps, desc='sanity', unit='step', disable=not progress) as bar:
        while not met(trace[-1]) and trainer.step < config.max_steps:
            loss = trainer.train_step(batch).as_floats()['total']
            bar.update(1)
            if trainer.step % config.eval_every == 0 or trainer.step == config.max_steps:
                trace.append(evaluate(loss))
                bar.set_postfix(psnr=f'{trace[-1].psnr:.2f}', mask=f'{trace[-1].mask_error:.3f}')

    report = SanityReport(
        passed=met(trace[-1]),
        steps=trainer.step,
        trace=trace,
        psnr_threshold=config.psnr_threshold,
        mask_error_threshold=config.mask_error_threshold,
        model=trainer.model,
    )
    _diagnose(report, trainer, config, batch)
    logger.info('Sanity run finished: %s', report.summary().replace('\n', ', '))
    return report


@torch.no_grad()
def _diagnose(
    report: SanityReport, trainer: Trainer, config: SanityConfig, batch: CropBatch
) -> None:
    """Fills the directional and curve-area diagnostics of a sanity report."""
    trainer.model.eval()
    held_out = make_sanity_pairs(config, 1, offset=config.num_pairs)[0]
    corrected = trainer.model(held_out.input.unsqueeze(0).to(trainer.device)).image[0].cpu()

    y_in, y_gt, y_out = luma(held_out.input), luma(held_out.gt), luma(corrected)
    under, over = y_in < y_gt, y_in > y_gt
    if bool(under.any()):
        report.brightened_under = bool(y_out[under].mean() > y_in[under].mean())
    if bool(over.any()):
        report.darkened_over = bool(y_out[over].mean() < y_in[over].mean())

    outputs = trainer.model(batch.inputs.to(trainer.device)).image.cpu()
    report.curve_area_input = brightness_mapping_curve(list(zip(batch.inputs, batch.gts))).area
    report.curve_area_output = brightness_mapping_curve(list(zip(outputs, batch.gts))).area
