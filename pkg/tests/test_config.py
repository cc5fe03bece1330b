"""Tests for configuration models and the key-value config format."""

from pathlib import Path

import pytest
from pydantic import ValidationError

from mixexpo.config import (
    LossWeights,
    ModelConfig,
    SanityConfig,
    TrainConfig,
    parse_overrides,
    read_config_file,
    write_config_file,
)
from mixexpo.exceptions import ConfigError, ConfigValidationError


@pytest.mark.unit
def test_defaults():
    """Test the documented defaults."""
    config = TrainConfig()
    assert config.lr == 1e-4
    assert (config.beta1, config.beta2) == (0.9, 0.99)
    assert config.batch == 8
    assert config.model == ModelConfig(num_blocks=5, base_channels=32, attn_heads=4)
    assert config.weights == LossWeights(mse=1.0, cos=1.0, bce=0.25, ecr=0.1)
    assert config.mask_polarity == 'under'
    assert config.grad_clip is None


@pytest.mark.unit
def test_dotted_keys_nest():
    """Test dotted keys address nested models."""
    config = TrainConfig.from_mapping({'model.num_blocks': '3', 'weights.ecr': '0', 'lr': '2e-4'})
    assert config.model.num_blocks == 3
    assert config.weights.ecr == 0
    assert config.weights.mse == 1.0
    assert config.lr == 2e-4


@pytest.mark.unit
def test_unknown_keys_rejected():
    """Test typos don't silently pass."""
    with pytest.raises(ConfigValidationError) as exc_info:
        TrainConfig.from_mapping({'model.num_blokcs': 3})
    assert exc_info.value.model_class is TrainConfig
    assert exc_info.value.raw_data == {'model.num_blokcs': 3}


@pytest.mark.unit
@pytest.mark.parametrize(
    'data',
    [
        {'model.num_blocks': 0},
        {'model.num_blocks': 9},
        {'model.attn_heads': 5},
        {'weights.bce': -1},
        {'lr': 0},
        {'mask_polarity': 'sideways'},
    ],
)
def test_invalid_values(data):
    """Test out-of-range values are configuration errors."""
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping(data)


@pytest.mark.unit
def test_configs_are_frozen():
    """Test validated configs can't be mutated."""
    config = ModelConfig()
    with pytest.raises(ValidationError):
        config.num_blocks = 2


@pytest.mark.unit
def test_replace_revalidates():
    """Test replace() applies dotted changes and validates the result."""
    config = TrainConfig().replace({'model.base_channels': 16}, seed=4)
    assert config.model.channels == 16
    assert config.seed == 4
    with pytest.raises(ConfigError):
        config.replace({'model.attn_heads': 3})


@pytest.mark.unit
def test_none_strings_become_none():
    """Test 'none' in a config file clears an optional field."""
    config = TrainConfig.from_mapping({'grad_clip': 'none', 'perceptual_weights': ''})
    assert config.grad_clip is None
    assert config.perceptual_weights is None


@pytest.mark.unit
def test_require_perceptual():
    """Test a weighted ECR term needs perceptual weights configured."""
    with pytest.raises(ConfigError) as exc_info:
        TrainConfig().require_perceptual()
    assert exc_info.value.field == 'perceptual_weights'
    TrainConfig.from_mapping({'weights.ecr': 0}).require_perceptual()
    TrainConfig(perceptual_weights=Path('vgg16.pth')).require_perceptual()


@pytest.mark.unit
def test_sanity_defaults():
    """Test the harness's own defaults and thresholds."""
    config = SanityConfig()
    assert config.num_pairs == 4
    assert config.size == 64
    assert config.max_steps == 2000
    assert config.psnr_threshold == 30.0
    assert config.mask_error_threshold == 0.25


@pytest.mark.unit
def test_read_config_file(tmp_path):
    """Test comments, blank lines and whitespace are handled."""
    path = tmp_path / 'train.cfg'
    path.write_text('# training\nlr = 3e-4   # faster\n\nmodel.num_blocks=2\n')
    assert read_config_file(path) == {'lr': '3e-4', 'model.num_blocks': '2'}


@pytest.mark.unit
def test_read_config_file_errors(tmp_path):
    """Test malformed lines and missing files raise ConfigError."""
    path = tmp_path / 'bad.cfg'
    path.write_text('lr 3e-4\n')
    with pytest.raises(ConfigError, match='bad.cfg:1'):
        read_config_file(path)
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / 'missing.cfg')


@pytest.mark.unit
def test_overrides_win_over_file(tmp_path):
    """Test CLI-style overrides take precedence over file values."""
    path = tmp_path / 'train.cfg'
    path.write_text('lr = 3e-4\nseed = 1\n')
    config = TrainConfig.from_file(path, parse_overrides(['seed=9', 'model.num_blocks = 2']))
    assert config.lr == 3e-4
    assert config.seed == 9
    assert config.model.num_blocks == 2


@pytest.mark.unit
def test_parse_overrides_rejects_bare_keys():
    """Test overrides must contain an equals sign."""
    with pytest.raises(ConfigError):
        parse_overrides(['lr'])


@pytest.mark.unit
def test_written_config_reloads(tmp_path):
    """Test a written config file loads back to an equal config."""
    config = TrainConfig(seed=3, grad_clip=1.0).replace({'model.norm': 'in', 'weights.ecr': 0})
    write_config_file(config, tmp_path / 'out.cfg')
    assert TrainConfig.from_file(tmp_path / 'out.cfg') == config
