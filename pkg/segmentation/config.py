"""
Run configuration for training, ablation and the mix demo.

Serialized as flat ``key=value`` UTF-8 text, one key per line, ``#`` starting
a comment. Values from the command line override values from the file; the
merged mapping is validated by ``TrainConfigForm``.
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

from .exceptions import ConfigError
from .losses import LossWeights

logger = logging.getLogger(__name__)

MIX_STRATEGIES = ('none', 'mixup', 'cutmix', 'cutout', 'puzzle')
OCCLUSION_LABELS = ('background', 'zero')
SUPERVISION_MODES = ('scribble', 'mask')
CE_REDUCTIONS = ('mean', 'sum')
COSINE_MODES = ('flat', 'per_class')
PAIRING_RULES = ('shuffle_adjacent',)
SWITCH = {True: 'on', False: 'off'}


@dataclass(frozen=True)
class TrainConfig:
    data_dir: str = ''
    epochs: int = 200
    pairing: str = 'shuffle_adjacent'
    lr: float = 1e-4
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.05
    lambda4: float = 1.0
    mix_strategy: str = 'puzzle'
    occlusion: bool = True
    side_frac: float = 0.15
    occlusion_label: str = 'background'
    stopgrad: bool = False
    seed: int = 0
    block_size: int = 8
    window_radius: int = 1
    n_iter: int = 4
    supervision: str = 'scribble'
    ce_reduction: str = 'sum'
    mixup_alpha: float = 1.0
    loss_cosine: str = 'flat'
    base_channels: int = 8
    num_classes: int = 4
    eval_every: int = 1

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def per_class_cosine(self) -> bool:
        return self.loss_cosine == 'per_class'

    def replace(self, **changes) -> 'TrainConfig':
        return dataclasses.replace(self, **changes)

    def as_mapping(self) -> Dict[str, str]:
        """Every key with its text form."""
        mapping = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                mapping[f.name] = SWITCH[value]
            elif isinstance(value, float):
                mapping[f.name] = repr(value)
            else:
                mapping[f.name] = str(value)
        return mapping

    def to_text(self) -> str:
        lines = ['# scribblemix run configuration']
        lines.extend(f"{key}={value}" for key, value in self.as_mapping().items())
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> 'TrainConfig':
        # forms imports this module
        from .forms import TrainConfigForm

        unknown = sorted(set(mapping) - set(cls.keys()))
        if unknown:
            raise ConfigError({key: ['unknown key.'] for key in unknown})
        form = TrainConfigForm(data={**cls().as_mapping(), **mapping})
        if not form.is_valid():
            raise ConfigError({key: list(messages) for key, messages in form.errors.items()})
        return cls(**{key: form.cleaned_data[key] for key in cls.keys()})

    @classmethod
    def from_text(cls, text: str, overrides: Optional[Mapping[str, str]] = None) -> 'TrainConfig':
        mapping = parse_config_text(text)
        mapping.update(overrides or {})
        return cls.from_mapping(mapping)

    @classmethod
    def keys(cls) -> Iterable[str]:
        return [f.name for f in dataclasses.fields(cls)]


def parse_config_text(text: str) -> Dict[str, str]:
    mapping = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError({f"line {number}": [f"expected key=value, got {raw.strip()!r}."]})
        key, value = line.split('=', 1)
        mapping[key.strip()] = value.strip()
    return mapping


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    """``key=value`` command-line arguments."""
    return parse_config_text('\n'.join(items))


def load_config(
    path=None,
    overrides: Optional[Mapping[str, str]] = None,
    defaults: Optional[Mapping[str, str]] = None,
) -> TrainConfig:
    """Layered: TrainConfig defaults, then `defaults`, the file at `path`, and `overrides`."""
    mapping = dict(defaults or {})
    if path:
        try:
            mapping.update(parse_config_text(Path(path).read_text(encoding='utf-8')))
        except OSError as exc:
            raise ConfigError({'config': [f"cannot read {path}: {exc}"]}) from exc
    mapping.update(overrides or {})
    return TrainConfig.from_mapping(mapping)


def write_config(config: TrainConfig, path) -> Path:
    path = Path(path)
    path.write_text(config.to_text(), encoding='utf-8')
    logger.debug(f"Configuration written to {path}")
    return path
