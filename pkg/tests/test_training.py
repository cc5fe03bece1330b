"""Tests for the trainer, checkpoints and the overfit harness."""

import csv
import logging

import pytest
import torch

from mixexpo.config import LossWeights, ModelConfig, SanityConfig, TrainConfig
from mixexpo.data import random_crop_batch
from mixexpo.exceptions import CheckpointError, ConfigError, TrainingDivergedError
from mixexpo.training import (
    LOG_COLUMNS,
    StepBatches,
    Trainer,
    load_checkpoint,
    overfit_sanity,
    save_checkpoint,
    train,
)

from tests.fixtures.images import TINY_MODEL

NO_ECR = LossWeights(ecr=0)


def make_config(tmp_path, **kwargs) -> TrainConfig:
    """A tiny, fast training config writing into tmp_path."""
    defaults = dict(
        model=TINY_MODEL,
        weights=NO_ECR,
        batch=2,
        crop=16,
        lr=1e-3,
        max_steps=3,
        checkpoint_every=0,
        validate_every=0,
        output_dir=tmp_path / 'run',
    )
    return TrainConfig(**{**defaults, **kwargs})


def snapshot(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


@pytest.mark.unit
def test_zero_weights_change_nothing(tmp_path, pairs):
    """Test a step with every loss weight at zero leaves all parameters unchanged."""
    config = make_config(tmp_path, weights=LossWeights(mse=0, cos=0, bce=0, ecr=0))
    trainer = Trainer(config)
    before = snapshot(trainer.model)
    trainer.train_step(random_crop_batch(pairs, 16, 2, seed=0))
    after = snapshot(trainer.model)
    assert all(torch.equal(before[name], after[name]) for name in before)


@pytest.mark.unit
def test_every_parameter_learns(tmp_path, pairs):
    """Test every parameter gets gradient and moves once the head has left zero."""
    trainer = Trainer(make_config(tmp_path))
    trainer.train_step(random_crop_batch(pairs, 16, 2, seed=0))
    assert torch.count_nonzero(trainer.model.head.weight) > 0

    before = snapshot(trainer.model)
    trainer.train_step(random_crop_batch(pairs, 16, 2, seed=1))
    for name, param in trainer.model.named_parameters():
        assert param.grad is not None, name
        assert param.grad.abs().sum() > 0, name
        assert not torch.equal(param.detach(), before[name]), name


@pytest.mark.unit
def test_training_is_deterministic(tmp_path, pairs):
    """Test two runs with one seed produce identical losses."""

    def run() -> list[float]:
        trainer = Trainer(make_config(tmp_path, seed=5))
        batches = StepBatches(pairs, crop=16, batch=2, seed=5)
        return [trainer.train_step(batches[step]).as_floats()['total'] for step in range(10)]

    assert run() == run()


@pytest.mark.unit
def test_step_batches_depend_on_step(pairs):
    """Test batches are reproducible per step and differ across steps."""
    batches = StepBatches(pairs, crop=16, batch=2, seed=0)
    assert torch.equal(batches[3].inputs, batches[3].inputs)
    assert not torch.equal(batches[3].inputs, batches[4].inputs)


@pytest.mark.unit
def test_gradient_clipping(tmp_path, pairs):
    """Test clipping keeps the step finite and the gradient norm bounded."""
    trainer = Trainer(make_config(tmp_path, grad_clip=0.01))
    trainer.train_step(random_crop_batch(pairs, 16, 2, seed=0))
    norm = torch.linalg.vector_norm(
        torch.stack([p.grad.norm() for p in trainer.model.parameters() if p.grad is not None])
    )
    assert norm <= 0.01 + 1e-6


@pytest.mark.unit
def test_divergence_is_reported(tmp_path, pairs):
    """Test a non-finite loss raises instead of corrupting the weights."""
    trainer = Trainer(make_config(tmp_path))
    batch = random_crop_batch(pairs, 16, 2, seed=0)
    broken = batch._replace(inputs=torch.full_like(batch.inputs, float('nan')))
    before = snapshot(trainer.model)
    with pytest.raises(TrainingDivergedError) as exc_info:
        trainer.train_step(broken)
    assert exc_info.value.step == 1
    assert all(torch.equal(before[n], p) for n, p in trainer.model.named_parameters())


@pytest.mark.integration
def test_checkpoint_round_trip(tmp_path, pairs):
    """Test weights, optimizer moments and step survive save and load."""
    trainer = Trainer(make_config(tmp_path))
    for seed in range(2):
        trainer.train_step(random_crop_batch(pairs, 16, 2, seed=seed))
    path = trainer.checkpoint(tmp_path / 'ckpt.pt')

    checkpoint = load_checkpoint(path, expected=TINY_MODEL)
    assert checkpoint.step == 2
    assert checkpoint.train_config['model.num_blocks'] == TINY_MODEL.num_blocks
    restored = checkpoint.build_model()
    image = pairs[0].input.unsqueeze(0)
    assert torch.equal(restored(image).image, trainer.model(image).image)

    resumed = Trainer(make_config(tmp_path))
    resumed.resume(path)
    assert resumed.step == 2
    assert torch.equal(
        resumed.optimizer.state_dict()['state'][0]['exp_avg'],
        trainer.optimizer.state_dict()['state'][0]['exp_avg'],
    )


@pytest.mark.integration
def test_truncated_checkpoint(tmp_path, tiny_net):
    """Test a cut-off archive is reported, not half-loaded."""
    path = save_checkpoint(tmp_path / 'ckpt.pt', tiny_net)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


@pytest.mark.integration
def test_checkpoint_mismatches(tmp_path, tiny_net):
    """Test config and format version mismatches are refused."""
    path = save_checkpoint(tmp_path / 'ckpt.pt', tiny_net)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected=ModelConfig())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'missing.pt')

    torch.save({'format_version': 99}, tmp_path / 'future.pt')
    with pytest.raises(CheckpointError, match='format 99'):
        load_checkpoint(tmp_path / 'future.pt')


@pytest.mark.integration
def test_train_writes_log_and_checkpoints(tmp_path, pairs):
    """Test the CSV log, periodic checkpoints and validation history."""
    config = make_config(tmp_path, max_steps=4, checkpoint_every=2, validate_every=2)
    report = train(config, train_set=pairs, val_set=pairs[:1])

    assert report.steps == 4
    assert [step for step, _ in report.validation] == [0, 2, 4]
    assert report.best_step in {0, 2, 4}
    names = sorted(p.name for p in (tmp_path / 'run').glob('*.pt'))
    assert names == ['last.pt', 'step_0000002.pt', 'step_0000004.pt']

    with (tmp_path / 'run' / 'train_log.csv').open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [int(row[0]) for row in rows[1:]] == [1, 2, 3, 4]


@pytest.mark.integration
def test_train_resume_continues_steps(tmp_path, pairs):
    """Test resuming picks up the step counter where the checkpoint left it."""
    train(make_config(tmp_path, max_steps=2), train_set=pairs)
    report = train(
        make_config(tmp_path, max_steps=4),
        train_set=pairs,
        resume=tmp_path / 'run' / 'last.pt',
    )
    assert report.steps == 4
    with (tmp_path / 'run' / 'train_log.csv').open() as fh:
        steps = [int(row[0]) for row in list(csv.reader(fh))[1:]]
    assert steps == [1, 2, 3, 4]


@pytest.mark.integration
def test_train_zero_steps_only_validates(tmp_path, pairs):
    """Test max_steps=0 reports the initial validation and trains nothing."""
    report = train(make_config(tmp_path, max_steps=0), train_set=pairs)
    assert report.steps == 0
    assert len(report.validation) == 1
    assert not (tmp_path / 'run' / 'train_log.csv').exists()


@pytest.mark.unit
def test_train_config_errors(tmp_path, pairs):
    """Test missing data and missing perceptual weights fail before training."""
    with pytest.raises(ConfigError):
        train(make_config(tmp_path))
    with pytest.raises(ConfigError):
        train(make_config(tmp_path, weights=LossWeights()), train_set=pairs)


@pytest.mark.integration
def test_train_with_extractor(tmp_path, pairs, extractor):
    """Test a passed-in extractor enables the contrastive term."""
    config = make_config(tmp_path, weights=LossWeights(), max_steps=2)
    report = train(config, train_set=pairs, extractor=extractor)
    assert report.last_breakdown['ecr'] > 0


def sanity_config(tmp_path, **kwargs) -> SanityConfig:
    defaults = dict(
        model=TINY_MODEL,
        weights=NO_ECR,
        num_pairs=2,
        size=16,
        max_steps=0,
        output_dir=tmp_path / 'sanity',
    )
    return SanityConfig(**{**defaults, **kwargs})


@pytest.mark.integration
def test_sanity_identity_pairs(tmp_path):
    """Test identity pairs already meet the PSNR threshold before training."""
    report = overfit_sanity(sanity_config(tmp_path, identity_pairs=True))
    assert report.steps == 0
    assert report.trace[0].psnr == 100.0


@pytest.mark.integration
def test_sanity_disables_ecr_without_weights(tmp_path, caplog):
    """Test the harness drops the contrastive term when no weights are configured."""
    config = sanity_config(tmp_path, weights=LossWeights())
    with caplog.at_level(logging.WARNING, logger='mixexpo.training'):
        report = overfit_sanity(config)
    assert 'weights.ecr = 0' in caplog.text
    assert not report.passed
    assert len(report.trace) == 1


@pytest.mark.integration
def test_sanity_report_files(tmp_path):
    """Test the trace and summary of a short run."""
    report = overfit_sanity(sanity_config(tmp_path, max_steps=4, eval_every=2))
    assert [point.step for point in report.trace] == [0, 2, 4]
    report.write_trace(tmp_path / 'trace.csv')
    assert (tmp_path / 'trace.csv').read_text().startswith('step,psnr,mask_error,loss')
    assert 'passed: False' in report.summary()


@pytest.mark.integration
def test_sanity_loss_trends_down(tmp_path):
    """Test the 10-step moving average of the loss falls over the first 50 steps."""
    config = sanity_config(tmp_path, num_pairs=4, size=32, max_steps=50, eval_every=1)
    assert config.lr == 1e-4
    report = overfit_sanity(config)
    losses = [point.loss for point in report.trace[1:]]
    assert len(losses) == 50
    window = 10
    averages = [sum(losses[i : i + window]) / window for i in range(len(losses) - window + 1)]
    assert all(b <= a for a, b in zip(averages, averages[1:]))
    assert averages[-1] < averages[0]


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_sanity_default_run(tmp_path, seed):
    """Test the default harness (4 pairs, 64x64, lr 1e-4, 2000 steps) passes on several seeds."""
    config = SanityConfig(weights=NO_ECR, seed=seed, output_dir=tmp_path / 'sanity')
    assert (config.num_pairs, config.size, config.max_steps) == (4, 64, 2000)
    assert (config.lr, config.beta1, config.beta2) == (1e-4, 0.9, 0.99)
    report = overfit_sanity(config)
    assert report.passed, report.summary()
    assert report.directional
    assert report.curve_area_output < report.curve_area_input


@pytest.mark.slow
def test_sanity_overfits_small_set(tmp_path):
    """Test a narrower network with a larger step size fits a few pairs quickly."""
    config = sanity_config(
        tmp_path,
        model=ModelConfig(num_blocks=2, base_channels=16, attn_heads=2),
        size=32,
        lr=1e-3,
        max_steps=2000,
    )
    report = overfit_sanity(config)
    assert report.passed, report.summary()
    assert report.final.psnr > 30
    assert report.final.mask_error < 0.25
    assert report.directional
    assert report.curve_area_output < report.curve_area_input
