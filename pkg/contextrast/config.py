"""
Run Configuration
Validated training / contrastive hyperparameters and the flat key=value run file
"""
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .exceptions import ConfigurationError

LOSS_MODES = ('ce_only', 'ce_pa', 'ce_pa_bane')
N_LAYERS = 4


class ContrastConfig(BaseModel):
    """Hyperparameters of the pixel-anchor objective"""
    model_config = ConfigDict(extra='forbid', frozen=True)

    tau: float = 0.1
    alpha: float = 0.1
    # indexed by layer 1..I, i.e. lambda_{4->1} = 1.0, 0.7, 0.4, 0.1
    lambdas: tuple[float, ...] = (0.1, 0.4, 0.7, 1.0)
    w_l: float = 0.3
    w_h: float = 0.7
    bane_ratio: float = 50.0
    positives_per_class: int = 256
    negative_cap: int = 1024
    embed_dim: int = 16
    anchor_source: Literal['highest', 'lowest'] = 'highest'
    # 1-based layers whose anchors take the shared context; the rest keep their own
    shared_layers: tuple[int, ...] = (1, 2, 3, 4)

    @field_validator('tau')
    @classmethod
    def validate_tau(cls, value):
        if value <= 0:
            raise ValueError("tau must be greater than zero")
        return value

    @field_validator('alpha')
    @classmethod
    def validate_alpha(cls, value):
        if value < 0:
            raise ValueError("alpha must not be negative")
        return value

    @field_validator('lambdas')
    @classmethod
    def validate_lambdas(cls, value):
        if not value or any(v < 0 for v in value):
            raise ValueError("lambdas must be a non-empty list of non-negative weights")
        return value

    @field_validator('w_l', 'w_h')
    @classmethod
    def validate_fusion_weight(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("fusion weights must lie in [0, 1]")
        return value

    @field_validator('bane_ratio')
    @classmethod
    def validate_bane_ratio(cls, value):
        if not 0.0 <= value <= 100.0:
            raise ValueError("bane_ratio is a percentage in [0, 100]")
        return value

    @field_validator('positives_per_class', 'negative_cap', 'embed_dim')
    @classmethod
    def validate_positive_int(cls, value):
        if value <= 0:
            raise ValueError("must be greater than zero")
        return value

    @field_validator('shared_layers')
    @classmethod
    def validate_shared_layers(cls, value):
        if any(not 1 <= v <= N_LAYERS for v in value):
            raise ValueError(f"shared_layers must lie in 1..{N_LAYERS}")
        if len(set(value)) != len(value):
            raise ValueError("shared_layers must not repeat a layer")
        return tuple(sorted(value))

    @model_validator(mode='after')
    def validate_weights_sum(self):
        if abs(self.w_l + self.w_h - 1.0) > 1e-9:
            raise ValueError("w_l + w_h must equal 1")
        return self


class TrainConfig(BaseModel):
    """Schedule, data and mode of a desk-scale training run"""
    model_config = ConfigDict(extra='forbid', frozen=True)

    base_lr: float = 1e-2
    momentum: float = 0.9
    power: float = 0.9
    weight_decay: float = 5e-4
    total_iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    mode: Literal['ce_only', 'ce_pa', 'ce_pa_bane'] = 'ce_pa_bane'
    image_size: int = 64
    noise_sigma: float = 0.15
    eval_samples: int = 32
    log_every: int = 50
    contrast: ContrastConfig = ContrastConfig()

    @field_validator('total_iterations', 'batch_size', 'eval_samples', 'log_every')
    @classmethod
    def validate_positive(cls, value):
        if value <= 0:
            raise ValueError("must be greater than zero")
        return value

    @field_validator('base_lr', 'weight_decay', 'noise_sigma')
    @classmethod
    def validate_non_negative(cls, value):
        if value < 0:
            raise ValueError("must not be negative")
        return value

    @field_validator('image_size')
    @classmethod
    def validate_image_size(cls, value):
        if value < 2 ** (N_LAYERS - 1):
            raise ValueError(f"image_size must be at least {2 ** (N_LAYERS - 1)}")
        return value

    @model_validator(mode='after')
    def validate_layer_weights(self):
        if len(self.contrast.lambdas) != N_LAYERS:
            raise ValueError(f"lambdas needs one weight per encoder layer ({N_LAYERS})")
        return self


CONTRAST_KEYS = tuple(ContrastConfig.model_fields)
TRAIN_KEYS = tuple(k for k in TrainConfig.model_fields if k != 'contrast')
# comma-separated values; an empty value is the empty list
LIST_KEYS = ('lambdas', 'shared_layers')


def _config_error(exc):
    first = exc.errors()[0]
    key = next((str(part) for part in reversed(first['loc']) if isinstance(part, str)), None)
    return ConfigurationError(f"Invalid value for {key}: {first['msg']}", key=key)


def build_train_config(values):
    """Flat {key: value} mapping -> TrainConfig; unknown keys are rejected"""
    train, contrast = {}, {}
    for key, value in values.items():
        if key in CONTRAST_KEYS:
            contrast[key] = value
        elif key in TRAIN_KEYS:
            train[key] = value
        else:
            raise ConfigurationError(f"Unknown config key: {key}", key=key)
    try:
        if 'w_h' in contrast and 'w_l' not in contrast:
            contrast['w_l'] = 1.0 - float(contrast['w_h'])
        elif 'w_l' in contrast and 'w_h' not in contrast:
            contrast['w_h'] = 1.0 - float(contrast['w_l'])
    except ValueError as e:
        raise ConfigurationError(f"Fusion weight is not a number: {e}", key='w_h') from e
    try:
        return TrainConfig(**train, contrast=ContrastConfig(**contrast))
    except ValidationError as e:
        raise _config_error(e) from e


def parse_run_config(text):
    """Parse `key=value` lines; blank lines and # comments are skipped"""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(f"Line {lineno} is not key=value: {raw!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if key in values:
            raise ConfigurationError(f"Duplicate config key: {key}", key=key)
        if key in LIST_KEYS:
            value = tuple(v.strip() for v in value.split(',') if v.strip())
        values[key] = value
    return build_train_config(values)


def _format(value):
    if isinstance(value, (tuple, list)):
        return ','.join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flat_config(config):
    """TrainConfig -> flat {key: value} mapping"""
    flat = {k: getattr(config, k) for k in TRAIN_KEYS}
    flat.update({k: getattr(config.contrast, k) for k in CONTRAST_KEYS})
    return flat


def serialize_run_config(config):
    """Canonical text form: sorted keys, repr floats"""
    flat = flat_config(config)
    return ''.join(f"{key}={_format(flat[key])}\n" for key in sorted(flat))


def load_run_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}", key=None)
    return parse_run_config(path.read_text(encoding='utf-8'))
