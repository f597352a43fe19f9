# fiberseg/config_manager.py

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from fiberseg.architectures import ArchSpec
from fiberseg.augment import AugmentConfig
from fiberseg.classic_seg import ClassicParams
from fiberseg.errors import ConfigError, FiberSegError
from fiberseg.metrics import EvaluateConfig
from fiberseg.phantom import PhantomConfig
from fiberseg.predictor import PredictConfig
from fiberseg.tiler import TileConfig
from fiberseg.trainer import TrainConfig

# Секции файла конфигурации и их dataclass
SECTIONS = {
    'arch': ArchSpec,
    'tiles': TileConfig,
    'train': TrainConfig,
    'augment': AugmentConfig,
    'predict': PredictConfig,
    'classic': ClassicParams,
    'evaluate': EvaluateConfig,
    'phantom': PhantomConfig,
}

# Секции, получающие общий seed, если свой не задан
SEEDED_SECTIONS = ('arch', 'train', 'augment', 'phantom')

TOP_LEVEL_KEYS = ('seed', 'workers', 'log_path', 'log_level', 'sample_name')


@dataclass
class RunConfig:
    """Полная конфигурация запуска"""
    seed: int = 0
    workers: int = 1
    log_path: Optional[str] = None
    log_level: str = "INFO"
    sample_name: Optional[str] = None
    arch: ArchSpec = field(default_factory=ArchSpec)
    tiles: TileConfig = field(default_factory=TileConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    classic: ClassicParams = field(default_factory=ClassicParams)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


def _key_lines(text: str) -> Dict[str, int]:
    """Номера строк (с 1) ключей: 'section' и 'section.key'"""
    lines: Dict[str, int] = {}
    root = yaml.compose(text, Loader=yaml.SafeLoader)
    if not isinstance(root, yaml.MappingNode):
        return lines
    for key_node, value_node in root.value:
        name = str(key_node.value)
        lines[name] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for sub_key, _ in value_node.value:
                lines[f"{name}.{sub_key.value}"] = sub_key.start_mark.line + 1
    return lines


def _normalize(cls, values: Dict[str, Any]) -> Dict[str, Any]:
    """Списки YAML для полей-кортежей превращаются в кортежи"""
    out = dict(values)
    for f in fields(cls):
        if f.name in out and isinstance(out[f.name], list) and 'Tuple' in str(f.type):
            out[f.name] = tuple(out[f.name])
    return out


def _build_section(name: str, values: Dict[str, Any], lines: Dict[str, int]):
    cls = SECTIONS[name]
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"Неизвестный параметр {name}.{key}", lines.get(f"{name}.{key}"))
    try:
        return cls(**_normalize(cls, values))
    except (TypeError, ValueError, FiberSegError) as e:
        raise ConfigError(f"Секция {name}: {e}", lines.get(name)) from e


class ConfigManager:
    """
    Менеджер конфигурации запуска

    Отвечает за:
    - чтение YAML-файла с проверкой неизвестных ключей
    - наложение переопределений из командной строки
    - выдачу итоговой конфигурации для манифеста и её сохранение
    """

    def __init__(self, config_path: Optional[str] = None):
        self.config_path = config_path
        self.config: RunConfig = RunConfig()

    def load(self) -> RunConfig:
        """
        Загрузка конфигурации из YAML-файла (без файла - значения по умолчанию)

        Raises:
            ConfigError: синтаксическая ошибка, неизвестный ключ или недопустимое значение
        """
        if not self.config_path:
            self.config = RunConfig()
            return self.config

        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"Не удалось прочитать {self.config_path}: {e}") from e

        self.config = self.from_text(text)
        return self.config

    @staticmethod
    def from_text(text: str) -> RunConfig:
        """Разбор текста конфигурации"""
        try:
            data = yaml.safe_load(text)
            lines = _key_lines(text)
        except yaml.YAMLError as e:
            mark = getattr(e, 'problem_mark', None)
            raise ConfigError(f"Ошибка синтаксиса YAML: {getattr(e, 'problem', e)}",
                              mark.line + 1 if mark is not None else None) from e
        return ConfigManager.from_dict(data, lines)

    @staticmethod
    def from_dict(data: Optional[Dict[str, Any]], lines: Optional[Dict[str, int]] = None) -> RunConfig:
        """Построение конфигурации из словаря (разобранный YAML или манифест запуска)"""
        lines = lines or {}
        if data is None:
            return RunConfig()
        if not isinstance(data, dict):
            raise ConfigError("Конфигурация должна быть словарём секций", 1)

        top = {}
        sections = {}
        for key, value in data.items():
            if key in TOP_LEVEL_KEYS:
                top[key] = value
            elif key in SECTIONS:
                if value is None:
                    value = {}
                if not isinstance(value, dict):
                    raise ConfigError(f"Секция {key} должна быть словарём", lines.get(key))
                sections[key] = value
            else:
                raise ConfigError(f"Неизвестный параметр {key}", lines.get(key))

        seed = top.get('seed', 0)
        for name in SEEDED_SECTIONS:
            sections.setdefault(name, {}).setdefault('seed', seed)

        built = {name: _build_section(name, values, lines) for name, values in sections.items()}
        try:
            return RunConfig(**top, **built)
        except TypeError as e:
            raise ConfigError(f"Некорректные параметры верхнего уровня: {e}") from e

    def apply_overrides(self, overrides: Dict[str, Any]) -> RunConfig:
        """
        Наложение значений из командной строки (None пропускается)

        Ключи: 'seed', 'workers', ... или 'section.key'. Общий seed распространяется
        на все секции со своим seed. Каждая секция проверяется один раз, после наложения
        всех её значений.
        """
        updates: Dict[str, Dict[str, Any]] = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if '.' not in key:
                if key not in TOP_LEVEL_KEYS:
                    raise ConfigError(f"Неизвестный параметр {key}")
                setattr(self.config, key, value)
                if key == 'seed':
                    for name in SEEDED_SECTIONS:
                        updates.setdefault(name, {}).setdefault('seed', value)
                continue

            section, name = key.split('.', 1)
            if section not in SECTIONS:
                raise ConfigError(f"Неизвестная секция {section}")
            updates.setdefault(section, {})[name] = value

        for section, changes in updates.items():
            values = asdict(getattr(self.config, section))
            for name in changes:
                if name not in values:
                    raise ConfigError(f"Неизвестный параметр {section}.{name}")
            values.update(changes)
            setattr(self.config, section, _build_section(section, values, {}))
        return self.config

    def to_dict(self) -> Dict[str, Any]:
        """Итоговая конфигурация в виде словаря (для манифеста и save)"""
        data = asdict(self.config)
        for name in SECTIONS:
            data[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in data[name].items()}
        return data

    def save(self, path: Optional[str] = None) -> str:
        """Сохранение текущей конфигурации в YAML (через временный файл)"""
        target = Path(path or self.config_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(f".{target.name}.tmp")
        with open(tmp, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self.to_dict(), f, default_flow_style=False, allow_unicode=True, sort_keys=False)
        os.replace(tmp, target)
        return str(target)

    def get_config(self) -> RunConfig:
        """Получение текущей конфигурации"""
        return self.config


def create_default_config(path: str) -> str:
    """Запись конфигурации по умолчанию"""
    return ConfigManager().save(path)
