# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Declarative model/training configuration, validation, the two published presets
and the flat ``key = value`` config file format.

Config file example::

    # small model, desk-scale training
    format_version = 1
    preset = small
    highres_kernels = 7, 15, 15
    batch_size = 4
    lambda_f = 0.1

Keys of :py:class:`ModelConfig`, :py:class:`TrainConfig` and :py:class:`LossWeights`
share one flat namespace. Lists are comma separated, enums are given by value.
Unknown and duplicate keys are errors.
"""
import dataclasses
import enum
import logging
import pathlib
from typing import Any, Callable, Dict, List, Optional, Tuple, Union


_LOGGER: logging.Logger = logging.getLogger(__name__)

CONFIG_FORMAT_VERSION: int = 1
_FORMAT_VERSION_KEY: str = 'format_version'
_PRESET_KEY: str = 'preset'
_COMMENT_PREFIX: str = '#'
_KEY_VALUE_SEPARATOR: str = '='
_LIST_SEPARATOR: str = ','

PYRAMID_LEVELS: int = 5
HIGHRES_DECODERS: int = 3
MIN_REFINEMENT_LEVELS: int = 2
MAX_REFINEMENT_LEVELS: int = 5
INTERPOLATION_TIMESTEP: float = 0.5
# preset level-0 high-res decoder widths, in units of C
SMALL_LEVEL0_FACTOR: int = 32
LARGE_LEVEL0_FACTOR: int = 40
PRESET_MLP_RATIO: int = 3


class DecoderKind(str, enum.Enum):
    """Block kind of the high-resolution flow decoders."""

    NORMAL_CONV = 'normal_conv'
    DW_SEPARABLE = 'dw_separable'


class RefinementStructure(str, enum.Enum):
    """Refinement network family. ``unet`` exists as an ablation baseline."""

    DECODER_ONLY = 'decoder_only'
    UNET = 'unet'


class TrainingStage(str, enum.Enum):
    """Which parameters are trained and how the prediction is formed."""

    FLOW_ONLY = 'flow_only'
    FULL = 'full'
    HD_FINETUNE = 'hd_finetune'


def level_channels_for(base_width: int) -> Tuple[int, ...]:
    """
    Channel schedule of the five pyramid levels, ``[C, 2C, 4C, 8C, 16C]``.
    """
    return tuple(base_width * 2 ** level for level in range(PYRAMID_LEVELS))


def refinement_channels_for(base_width: int, levels: int) -> Tuple[int, ...]:
    """
    Internal widths of the refinement blocks, from the top level down to level 0.
    Level ``l`` uses ``2^(l+1) * C``, e.g. ``[8C, 4C, 2C]`` for three levels.
    """
    return tuple(base_width * 2 ** (level + 1) for level in reversed(range(levels)))


def highres_channels_for(base_width: int) -> Tuple[int, ...]:
    """
    Internal widths of the three high-resolution decoders for levels 2, 1, 0.
    """
    return (4 * base_width, 2 * base_width, 2 * base_width)


def _preset_highres_channels(base_width: int, level0_factor: int) -> Tuple[int, ...]:
    return (4 * base_width, 2 * base_width, level0_factor * base_width)


@dataclasses.dataclass(frozen=True)
class ModelConfig:  # pylint: disable=too-many-instance-attributes
    """
    Architecture hyper-parameters. Build instances with :py:meth:`from_base_width`
    (or the presets) so that derived channel lists stay consistent, and check them
    with :py:func:`validate`.
    """

    base_width: int
    level_channels: Tuple[int, ...]
    attention_blocks: int
    highres_kernels: Tuple[int, ...]
    refinement_levels: int
    refinement_channels: Tuple[int, ...]
    highres_kind: DecoderKind = DecoderKind.DW_SEPARABLE
    highres_channels: Tuple[int, ...] = ()
    refinement_units: int = 1
    refinement_structure: RefinementStructure = RefinementStructure.DECODER_ONLY
    window_size: int = 8
    mlp_ratio: int = 4
    head_width: int = 32
    timestep: float = INTERPOLATION_TIMESTEP

    @classmethod
    def from_base_width(
        cls,
        base_width: int,
        *,
        attention_blocks: int,
        refinement_levels: int = 3,
        **overrides: Any,
    ) -> 'ModelConfig':
        """
        Derives every channel list from ``base_width``. Explicit ``overrides`` win.
        """
        values: Dict[str, Any] = dict(
            base_width=base_width,
            level_channels=level_channels_for(base_width),
            attention_blocks=attention_blocks,
            highres_kernels=(7, 15, 15),
            refinement_levels=refinement_levels,
            refinement_channels=refinement_channels_for(base_width, refinement_levels),
            highres_channels=highres_channels_for(base_width),
        )
        values.update(overrides)
        return cls(**values)

    def with_refinement_levels(self, levels: int) -> 'ModelConfig':
        """Same model with a decoder-only refiner of ``levels`` levels."""
        return dataclasses.replace(
            self,
            refinement_levels=levels,
            refinement_channels=refinement_channels_for(self.base_width, levels),
        )


@dataclasses.dataclass(frozen=True)
class TrainConfig:  # pylint: disable=too-many-instance-attributes
    """
    Optimizer, schedule and data settings of one training stage.

    Defaults are desk scale: batch 4 and 2000 steps per stage on the synthetic set.
    Full Vimeo90K runs use ``batch_size = 32`` and an epoch budget (``steps = 0``).
    The HD-aware fine-tune runs ``epochs = 5`` when epoch-driven.
    """

    batch_size: int = 4
    lr_start: float = 2e-4
    lr_end: float = 2e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    crop_size: int = 128
    stage: TrainingStage = TrainingStage.FLOW_ONLY
    hd_aug_probability: float = 0.5
    hd_downscale: float = 0.5
    epochs: int = 5
    steps: int = 2000
    seed: int = 0
    grad_clip_norm: float = 1.0
    aux_supervision: bool = False
    aux_weight: float = 0.5
    num_workers: int = 0

    def __post_init__(self):
        errors: List[str] = []
        if self.batch_size < 1:
            errors.append(f'batch size must be positive. Got: <{self.batch_size}>')
        if not 0 < self.lr_end < self.lr_start:
            errors.append(
                'learning rates must satisfy 0 < lr_end < lr_start. '
                f'Got: <{self.lr_start}> -> <{self.lr_end}>'
            )
        if self.weight_decay <= 0:
            errors.append(f'weight decay must be positive. Got: <{self.weight_decay}>')
        for name in ('beta1', 'beta2'):
            if not 0 < getattr(self, name) < 1:
                errors.append(f'{name} must be in (0, 1). Got: <{getattr(self, name)}>')
        if self.crop_size < 32 or self.crop_size % 32:
            errors.append(f'crop size must be a multiple of 32. Got: <{self.crop_size}>')
        if not 0 <= self.hd_aug_probability <= 1:
            errors.append(
                f'HD probability must be in [0, 1]. Got: <{self.hd_aug_probability}>'
            )
        if self.hd_downscale != 0.5:
            errors.append(f'only a 0.5 HD downscale is supported. Got: <{self.hd_downscale}>')
        if self.steps < 0 or self.epochs < 0 or (self.steps == 0 and self.epochs == 0):
            errors.append(
                f'either steps or epochs must be positive. Got: <{self.steps}>, <{self.epochs}>'
            )
        if self.grad_clip_norm <= 0:
            errors.append(f'gradient clip norm must be positive. Got: <{self.grad_clip_norm}>')
        if self.aux_weight < 0:
            errors.append(f'auxiliary weight must be non-negative. Got: <{self.aux_weight}>')
        if self.num_workers < 0:
            errors.append(f'worker count must be non-negative. Got: <{self.num_workers}>')
        if errors:
            raise ValueError('Invalid training configuration: ' + '; '.join(errors))


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Weights of the Charbonnier, Laplacian pyramid and frequency terms."""

    lambda_ch: float = 1.0
    lambda_lap: float = 1.0
    lambda_f: float = 0.1

    def __post_init__(self):
        weights = (self.lambda_ch, self.lambda_lap, self.lambda_f)
        if any(weight < 0 for weight in weights):
            raise ValueError(f'Loss weights must be non-negative. Got: <{weights}>')
        if not any(weight > 0 for weight in weights):
            raise ValueError(f'At least one loss weight must be positive. Got: <{weights}>')


@dataclasses.dataclass(frozen=True)
class ConfigBundle:
    """Everything a config file describes."""

    model: ModelConfig
    train: TrainConfig = TrainConfig()
    loss: LossWeights = LossWeights()


def small_config() -> ModelConfig:
    """
    The small published model: ``C = 16`` with two attention blocks per attention level.
    """
    return ModelConfig.from_base_width(
        16,
        attention_blocks=2,
        mlp_ratio=PRESET_MLP_RATIO,
        highres_channels=_preset_highres_channels(16, SMALL_LEVEL0_FACTOR),
    )


def large_config() -> ModelConfig:
    """
    The large published model: ``C = 32`` with four attention blocks per attention level.
    """
    return ModelConfig.from_base_width(
        32,
        attention_blocks=4,
        mlp_ratio=PRESET_MLP_RATIO,
        highres_channels=_preset_highres_channels(32, LARGE_LEVEL0_FACTOR),
    )


PRESETS: Dict[str, Callable[[], ModelConfig]] = {
    'small': small_config,
    'large': large_config,
}


def validate(config: ModelConfig) -> None:
    """
    Checks every invariant of a :py:class:`ModelConfig`.

    Args:
        config: configuration to check.

    Raises:
        ValueError: naming each violated invariant.
    """
    _LOGGER.debug('Validating <%s>.', config)
    errors: List[str] = []
    if config.base_width <= 0:
        errors.append(f'base width must be positive (got <{config.base_width}>)')
    elif tuple(config.level_channels) != level_channels_for(config.base_width):
        errors.append(
            'level channels must be [C, 2C, 4C, 8C, 16C] '
            f'(got <{list(config.level_channels)}> for C=<{config.base_width}>)'
        )
    if config.attention_blocks < 1:
        errors.append(f'attention blocks must be positive (got <{config.attention_blocks}>)')
    if len(config.highres_kernels) != HIGHRES_DECODERS:
        errors.append(
            f'exactly {HIGHRES_DECODERS} high-res kernels are required '
            f'(got <{list(config.highres_kernels)}>)'
        )
    if any(kernel < 3 or kernel % 2 == 0 for kernel in config.highres_kernels):
        errors.append(f'kernels must be odd and >= 3 (got <{list(config.highres_kernels)}>)')
    if len(config.highres_channels) != HIGHRES_DECODERS or any(
        width < 1 for width in config.highres_channels
    ):
        errors.append(
            f'high-res channels must be {HIGHRES_DECODERS} positive widths '
            f'(got <{list(config.highres_channels)}>)'
        )
    if not MIN_REFINEMENT_LEVELS <= config.refinement_levels <= MAX_REFINEMENT_LEVELS:
        errors.append(
            f'refinement levels must be in [{MIN_REFINEMENT_LEVELS}, {MAX_REFINEMENT_LEVELS}] '
            f'(got <{config.refinement_levels}>)'
        )
    if len(config.refinement_channels) != config.refinement_levels:
        errors.append(
            'refinement channels must have one width per refinement level '
            f'(got <{list(config.refinement_channels)}> for <{config.refinement_levels}> levels)'
        )
    if any(width < 1 for width in config.refinement_channels):
        errors.append(f'refinement widths must be positive (got <{config.refinement_channels}>)')
    if config.refinement_units < 0:
        errors.append(f'refinement units must be non-negative (got <{config.refinement_units}>)')
    if config.window_size < 1 or config.mlp_ratio < 1:
        errors.append(
            'window size and MLP ratio must be positive '
            f'(got <{config.window_size}>, <{config.mlp_ratio}>)'
        )
    if config.head_width < 1 or any(
        channels % config.head_width for channels in config.level_channels[3:]
    ):
        errors.append(
            f'attention level widths must be multiples of the head width <{config.head_width}>'
        )
    if config.timestep != INTERPOLATION_TIMESTEP:
        errors.append(f'only t=0.5 is supported (got <{config.timestep}>)')
    if errors:
        raise ValueError('Invalid model configuration: ' + '; '.join(errors))


def load_config_file(path: Union[str, pathlib.Path]) -> ConfigBundle:
    """
    Reads a flat ``key = value`` config file.

    Args:
        path: UTF-8 config file.

    Returns:
        A validated :py:class:`ConfigBundle`.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        ValueError: on syntax errors, unknown keys, wrong versions or invalid values.
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'Config file <{path}> does not exist.')
    _LOGGER.info('Loading config file <%s>.', path)
    return parse_config(path.read_text(encoding='utf-8'), source=str(path))


def parse_config(text: str, *, source: str = '<string>') -> ConfigBundle:
    """
    Parses config file content. See :py:func:`load_config_file`.
    """
    entries = _read_entries(text, source)
    version = entries.pop(_FORMAT_VERSION_KEY, None)
    if version is None:
        raise ValueError(f'Config <{source}> is missing <{_FORMAT_VERSION_KEY}>.')
    if version[1] != str(CONFIG_FORMAT_VERSION):
        raise ValueError(
            f'Config <{source}> line {version[0]}: unsupported format version <{version[1]}>, '
            f'expected <{CONFIG_FORMAT_VERSION}>.'
        )
    preset_entry = entries.pop(_PRESET_KEY, None)
    preset_name = preset_entry[1] if preset_entry else 'small'
    if preset_name not in PRESETS:
        raise ValueError(
            f'Config <{source}>: unknown preset <{preset_name}>, expected one of {list(PRESETS)}.'
        )
    base_model = PRESETS[preset_name]()
    sections = {
        ModelConfig: {},
        TrainConfig: {},
        LossWeights: {},
    }
    owners = _key_owners()
    for key, (line_number, raw) in entries.items():
        owner = owners.get(key)
        if owner is None:
            raise ValueError(f'Config <{source}> line {line_number}: unknown key <{key}>.')
        try:
            sections[owner][key] = _parse_value(_field_types(owner)[key], raw)
        except ValueError as err:
            raise ValueError(
                f'Config <{source}> line {line_number}: bad value <{raw}> for <{key}>. {err}'
            ) from err
    model = _derive_model(base_model, sections[ModelConfig])
    validate(model)
    return ConfigBundle(
        model=model,
        train=TrainConfig(**sections[TrainConfig]),
        loss=LossWeights(**sections[LossWeights]),
    )


def dump_config(bundle: ConfigBundle) -> str:
    """
    Serializes a bundle so that :py:func:`parse_config` reproduces it unchanged.
    """
    lines = [f'{_FORMAT_VERSION_KEY} = {CONFIG_FORMAT_VERSION}']
    for title, section in (
        ('model', bundle.model),
        ('training', bundle.train),
        ('loss weights', bundle.loss),
    ):
        lines.append('')
        lines.append(f'{_COMMENT_PREFIX} {title}')
        for field in dataclasses.fields(section):
            lines.append(f'{field.name} = {_format_value(getattr(section, field.name))}')
    return '\n'.join(lines) + '\n'


def save_config_file(bundle: ConfigBundle, path: Union[str, pathlib.Path]) -> pathlib.Path:
    """Writes :py:func:`dump_config` output to ``path``."""
    path = pathlib.Path(path)
    path.write_text(dump_config(bundle), encoding='utf-8')
    _LOGGER.info('Wrote config file <%s>.', path)
    return path


def _read_entries(text: str, source: str) -> Dict[str, Tuple[int, str]]:
    result: Dict[str, Tuple[int, str]] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        content = line.split(_COMMENT_PREFIX, 1)[0].strip()
        if not content:
            continue
        if _KEY_VALUE_SEPARATOR not in content:
            raise ValueError(
                f'Config <{source}> line {line_number}: expected "key = value". Got: <{line}>.'
            )
        key, value = (part.strip() for part in content.split(_KEY_VALUE_SEPARATOR, 1))
        if not key:
            raise ValueError(f'Config <{source}> line {line_number}: empty key.')
        if key in result:
            raise ValueError(
                f'Config <{source}> line {line_number}: duplicate key <{key}> '
                f'(first set on line {result[key][0]}).'
            )
        result[key] = (line_number, value)
    return result


def _key_owners() -> Dict[str, type]:
    owners: Dict[str, type] = {}
    for owner in (ModelConfig, TrainConfig, LossWeights):
        for field in dataclasses.fields(owner):
            owners[field.name] = owner
    return owners


def _field_types(owner: type) -> Dict[str, Any]:
    defaults = {
        ModelConfig: small_config(),
        TrainConfig: TrainConfig(),
        LossWeights: LossWeights(),
    }[owner]
    return {field.name: getattr(defaults, field.name) for field in dataclasses.fields(owner)}


def _parse_value(example: Any, raw: str) -> Any:
    # the type of the preset value decides how the text is read
    if isinstance(example, enum.Enum):
        return type(example)(raw)
    if isinstance(example, bool):
        lowered = raw.lower()
        if lowered not in ('true', 'false'):
            raise ValueError('Expected "true" or "false".')
        return lowered == 'true'
    if isinstance(example, int):
        return int(raw)
    if isinstance(example, float):
        return float(raw)
    if isinstance(example, tuple):
        return tuple(int(item) for item in raw.split(_LIST_SEPARATOR) if item.strip())
    return raw


def _format_value(value: Any) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(str(item) for item in value)
    return repr(value) if isinstance(value, float) else str(value)


def _derive_model(base: ModelConfig, values: Dict[str, Any]) -> ModelConfig:
    base_width = values.get('base_width', base.base_width)
    refinement_levels = values.get('refinement_levels', base.refinement_levels)
    derived: Dict[str, Any] = {}
    if base_width != base.base_width:
        derived.update(
            level_channels=level_channels_for(base_width),
            highres_channels=highres_channels_for(base_width),
        )
    if base_width != base.base_width or refinement_levels != base.refinement_levels:
        derived['refinement_channels'] = refinement_channels_for(base_width, refinement_levels)
    derived.update(values)
    return dataclasses.replace(base, **derived)


def config_snapshot(config: Optional[Any]) -> Dict[str, Any]:
    """
    Plain-JSON view of a config dataclass (enums by value, tuples as lists).
    """
    if config is None:
        return {}
    result: Dict[str, Any] = {}
    for field in dataclasses.fields(config):
        value = getattr(config, field.name)
        if isinstance(value, enum.Enum):
            value = value.value
        elif isinstance(value, tuple):
            value = list(value)
        result[field.name] = value
    return result


def model_config_from_snapshot(snapshot: Dict[str, Any]) -> ModelConfig:
    """Inverse of :py:func:`config_snapshot` for :py:class:`ModelConfig`."""
    return _from_snapshot(ModelConfig, small_config(), snapshot)


def train_config_from_snapshot(snapshot: Dict[str, Any]) -> TrainConfig:
    """Inverse of :py:func:`config_snapshot` for :py:class:`TrainConfig`."""
    return _from_snapshot(TrainConfig, TrainConfig(), snapshot)


def _from_snapshot(owner: type, example: Any, snapshot: Dict[str, Any]) -> Any:
    values: Dict[str, Any] = {}
    for field in dataclasses.fields(owner):
        if field.name not in snapshot:
            continue
        value = snapshot[field.name]
        current = getattr(example, field.name)
        if isinstance(current, enum.Enum):
            value = type(current)(value)
        elif isinstance(current, tuple):
            value = tuple(value)
        values[field.name] = value
    if owner is ModelConfig:
        return dataclasses.replace(example, **values)
    return owner(**values)
