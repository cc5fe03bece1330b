"""Configuration models and the flat key-value config file format.

Every configurable object in mixexpo is a pydantic model. Config files are
plain text, one ``key = value`` per line, with ``#`` comments; nested fields
are addressed with dotted keys:

    lr = 1e-4
    model.num_blocks = 5
    weights.ecr = 0.1

Values are left as strings and coerced by pydantic during validation.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional, Self, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mixexpo.exceptions import ConfigError, ConfigValidationError
from mixexpo.types import MaskPolarity, NormKind, PerceptualLayer

__all__ = [
    'ConfigModel',
    'ModelConfig',
    'LossWeights',
    'TrainConfig',
    'SanityConfig',
    'read_config_file',
    'parse_overrides',
    'write_config_file',
]

_NONE_VALUES = {'', 'none', 'null'}


class ConfigModel(BaseModel):
    """Base for all mixexpo configuration models.

    Accepts dotted keys (``model.num_blocks``) anywhere a nested mapping is
    expected, forbids unknown keys, and is immutable once validated.
    """

    model_config = ConfigDict(extra='forbid', frozen=True)

    @model_validator(mode='before')
    @classmethod
    def expand_dotted_keys(cls, data: Any) -> Any:
        """Model validator that nests ``a.b = v`` entries into ``{'a': {'b': v}}``."""
        if not isinstance(data, dict):
            return data
        if not any(isinstance(key, str) and '.' in key for key in data):
            return data

        nested: dict[str, Any] = {}
        for key, value in data.items():
            parts = key.split('.')
            current = nested
            for part in parts[:-1]:
                existing = current.get(part)
                if isinstance(existing, BaseModel):
                    existing = existing.model_dump()
                if existing is None:
                    existing = {}
                if not isinstance(existing, dict):
                    raise ValueError(f'{key!r} addresses a field inside a scalar')
                current[part] = existing
                current = existing
            leaf = parts[-1]
            if isinstance(current.get(leaf), dict) and isinstance(value, dict):
                current[leaf] = {**current[leaf], **value}
            else:
                current[leaf] = value
        return nested

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> Self:
        """Validates a mapping, wrapping pydantic failures in ConfigValidationError."""
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigValidationError(cls, e, raw_data=data) from e

    @classmethod
    def from_file(
        cls, path: Optional[str | Path] = None, overrides: Optional[dict[str, Any]] = None
    ) -> Self:
        """Loads a config file and applies overrides on top of it.

        Args:
            path: A flat key-value config file; None uses only defaults and overrides
            overrides: Dotted-key values that win over the file's values

        Returns:
            The validated configuration.
        """
        data: dict[str, Any] = read_config_file(path) if path is not None else {}
        data.update(overrides or {})
        return cls.from_mapping(data)

    def to_flat(self) -> dict[str, Any]:
        """Flattens the configuration into dotted keys, the inverse of from_mapping."""
        flat: dict[str, Any] = {}

        def walk(prefix: str, value: Any) -> None:
            if isinstance(value, dict):
                for key, inner in value.items():
                    walk(f'{prefix}.{key}' if prefix else key, inner)
            else:
                flat[prefix] = value

        walk('', self.model_dump(mode='json'))
        return flat

    def replace(self, changes: Optional[dict[str, Any]] = None, **kwargs: Any) -> Self:
        """Returns a validated copy with the given (possibly dotted) keys changed."""
        return type(self).from_mapping({**self.to_flat(), **(changes or {}), **kwargs})


class ModelConfig(ConfigModel):
    """Width, depth and variant switches of the correction network.

    Attributes:
        num_blocks: Number of stacked region-aware blocks
        base_channels: Feature width before the width multiplier
        attn_heads: Channel-attention heads; must divide the effective width
        width_multiplier: Scales base_channels (0.5/0.75/1/1.5 sweeps)
        refine_reduction: Bottleneck ratio of the squeeze-excite refine block
        norm: 'masked' for mask-aware instance norm, 'in' for plain instance norm
        use_msc: Keep the multi-scale depth-wise convolution path
        use_csa: Keep the dual channel self-attention path
    """

    num_blocks: int = Field(default=5, ge=1, le=8)
    base_channels: int = Field(default=32, gt=0)
    attn_heads: int = Field(default=4, gt=0)
    width_multiplier: float = Field(default=1.0, gt=0)
    refine_reduction: int = Field(default=4, gt=0)
    norm: NormKind = 'masked'
    use_msc: bool = True
    use_csa: bool = True

    @model_validator(mode='after')
    def check_heads_divide_width(self) -> Self:
        """Rejects widths that can't be split evenly across attention heads."""
        if self.channels % self.attn_heads != 0:
            raise ValueError(
                f'attn_heads={self.attn_heads} does not divide the channel width {self.channels}'
            )
        return self

    @property
    def channels(self) -> int:
        """The effective feature width C."""
        return max(1, round(self.base_channels * self.width_multiplier))

    @property
    def head_dim(self) -> int:
        """Channels per attention head, d = C / k."""
        return self.channels // self.attn_heads

    @property
    def temperature(self) -> float:
        """Attention temperature, sqrt(d)."""
        return float(self.head_dim) ** 0.5


class LossWeights(ConfigModel):
    """The four weights of the total training objective."""

    mse: float = Field(default=1.0, ge=0)
    cos: float = Field(default=1.0, ge=0)
    bce: float = Field(default=0.25, ge=0)
    ecr: float = Field(default=0.1, ge=0)


class TrainConfig(ConfigModel):
    """Everything a training run needs.

    Optimizer defaults are ADAM with lr 1e-4 and betas (0.9, 0.99) at batch 8.
    Paths left as None are simply not used; training from the CLI requires the
    two train directories.
    """

    lr: float = Field(default=1e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.99, ge=0, lt=1)
    batch: int = Field(default=8, gt=0)
    max_steps: int = Field(default=10000, ge=0)
    seed: int = 0
    crop: int = Field(default=128, ge=8)
    checkpoint_every: int = Field(default=1000, ge=0)
    validate_every: int = Field(default=500, ge=0)
    grad_clip: Optional[float] = Field(default=None, gt=0)
    deterministic: bool = False
    num_workers: int = Field(default=0, ge=0)
    device: str = 'cpu'

    model: ModelConfig = Field(default_factory=ModelConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    mask_polarity: MaskPolarity = 'under'
    detach_ecr_mask: bool = True

    perceptual_weights: Optional[Path] = None
    perceptual_sha256: Optional[str] = None
    perceptual_layer: PerceptualLayer = 'relu3_3'

    train_input_dir: Optional[Path] = None
    train_gt_dir: Optional[Path] = None
    val_input_dir: Optional[Path] = None
    val_gt_dir: Optional[Path] = None
    output_dir: Path = Path('runs/latest')

    @model_validator(mode='before')
    @classmethod
    def blank_to_none(cls, data: Any) -> Any:
        """Model validator mapping 'none'/'' strings from config files to None."""
        if isinstance(data, dict):
            return {
                key: None
                if isinstance(value, str) and value.strip().lower() in _NONE_VALUES
                else value
                for key, value in data.items()
            }
        return data

    def require_perceptual(self) -> None:
        """Raises ConfigError if ECR is weighted but no extractor weights are configured."""
        if self.weights.ecr > 0 and self.perceptual_weights is None:
            raise ConfigError(
                'weights.ecr > 0 requires perceptual_weights; '
                'run `mixexpo fetch-weights` or set weights.ecr = 0',
                field='perceptual_weights',
            )


class SanityConfig(TrainConfig):
    """Overfit harness: a few synthetic pairs trained at full resolution.

    The run passes when training PSNR exceeds psnr_threshold and the mean
    absolute mask error is below mask_error_threshold.
    """

    num_pairs: int = Field(default=4, gt=0)
    size: int = Field(default=64, ge=8)
    max_steps: int = Field(default=2000, ge=0)
    batch: int = Field(default=4, gt=0)
    eval_every: int = Field(default=25, gt=0)
    psnr_threshold: float = 30.0
    mask_error_threshold: float = 0.25
    identity_pairs: bool = False
    checkpoint_every: int = Field(default=0, ge=0)
    validate_every: int = Field(default=0, ge=0)
    output_dir: Path = Path('runs/sanity')


def read_config_file(path: str | Path) -> dict[str, str]:
    """Reads a flat ``key = value`` config file.

    Args:
        path: File to read

    Returns:
        Raw string values keyed by (possibly dotted) key.

    Raises:
        ConfigError: The file is missing or a line isn't ``key = value``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f'Cannot read config file {path}: {e}') from e

    data: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f'{path}:{lineno}: expected `key = value`, got {raw!r}')
        data[key] = value.strip()
    return data


def parse_overrides(items: Sequence[str]) -> dict[str, str]:
    """Turns repeated ``--set key=value`` CLI arguments into a mapping."""
    overrides: dict[str, str] = {}
    for item in items:
        key, sep, value = item.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f'Override must look like key=value, got {item!r}')
        overrides[key.strip()] = value.strip()
    return overrides


def write_config_file(config: ConfigModel, path: str | Path) -> None:
    """Writes a config back out in the flat key-value format."""
    lines = [
        f'{key} = {"none" if value is None else value}'
        for key, value in sorted(config.to_flat().items())
    ]
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')
