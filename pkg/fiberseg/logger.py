# fiberseg/logger.py

import logging
import os
from pathlib import Path
from enum import Enum
from typing import Optional
from logging.handlers import RotatingFileHandler


class EventType(Enum):
    """Типы событий конвейера"""
    RUN_START = "RUN_START"
    RUN_STOP = "RUN_STOP"
    CONFIG_RESOLVED = "CONFIG_RESOLVED"
    STACK_OPENED = "STACK_OPENED"
    VOLUME_WRITTEN = "VOLUME_WRITTEN"
    PHANTOM_CREATED = "PHANTOM_CREATED"
    TRAIN_START = "TRAIN_START"
    TRAIN_STEP = "TRAIN_STEP"
    EPOCH_END = "EPOCH_END"
    WEIGHTS_SAVED = "WEIGHTS_SAVED"
    WEIGHTS_LOADED = "WEIGHTS_LOADED"
    SLICE_PREDICTED = "SLICE_PREDICTED"
    SLICE_SEGMENTED = "SLICE_SEGMENTED"
    SLICE_EVALUATED = "SLICE_EVALUATED"
    REPORT_WRITTEN = "REPORT_WRITTEN"
    ERROR = "ERROR"
    WARNING = "WARNING"


class EventSeverity(Enum):
    """Уровни важности событий"""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    CRITICAL = "CRITICAL"


class _EventTypeDefault(logging.Filter):
    """Подставляет event_type для записей, пришедших не через PipelineLogger"""

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, 'event_type'):
            record.event_type = '-'
        return True


class PipelineLogger:
    """
    Журнал конвейера сегментации

    Отвечает за:
    - запись событий обучения, предсказания и оценки
    - ротацию файла журнала
    - единый формат "сообщение | ключ=значение"
    """

    LOGGER_NAME = 'fiberseg'

    def __init__(self, log_path: Optional[str] = None, level: str = "INFO"):
        self.log_path = log_path
        self.level = level
        self.logger: Optional[logging.Logger] = None
        self._setup_logger()

    def _setup_logger(self):
        """Настройка логгера: консоль и, если задан путь, файл с ротацией"""
        self.logger = logging.getLogger(self.LOGGER_NAME)
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False

        # Очистка существующих handlers
        self.logger.handlers.clear()
        self.logger.filters.clear()
        self.logger.addFilter(_EventTypeDefault())

        formatter = logging.Formatter(
            '[%(asctime)s] [%(levelname)s] [%(event_type)s] %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        console_handler = logging.StreamHandler()
        console_handler.setLevel(getattr(logging, self.level.upper(), logging.INFO))
        console_handler.setFormatter(formatter)
        self.logger.addHandler(console_handler)

        if self.log_path:
            Path(os.path.dirname(os.path.abspath(self.log_path))).mkdir(parents=True, exist_ok=True)

            # Rotating File Handler (максимум 10 MB, 5 файлов)
            file_handler = RotatingFileHandler(
                self.log_path,
                maxBytes=10 * 1024 * 1024,
                backupCount=5,
                encoding='utf-8'
            )
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

    def _log(self, event_type: EventType, severity: EventSeverity, message: str, **kwargs):
        """
        Внутренний метод логирования

        Args:
            event_type: тип события
            severity: уровень важности
            message: текст сообщения
            **kwargs: дополнительные поля
        """
        extra_info = {'event_type': event_type.value}

        if kwargs:
            details = ' | '.join([f"{k}={v}" for k, v in kwargs.items()])
            message = f"{message} | {details}"

        if severity == EventSeverity.DEBUG:
            self.logger.debug(message, extra=extra_info)
        elif severity == EventSeverity.INFO:
            self.logger.info(message, extra=extra_info)
        elif severity == EventSeverity.WARNING:
            self.logger.warning(message, extra=extra_info)
        elif severity == EventSeverity.CRITICAL:
            self.logger.critical(message, extra=extra_info)

    # ========== Запуск ==========

    def run_start(self, command: str, seed: int):
        """Запуск подкоманды"""
        self._log(EventType.RUN_START, EventSeverity.INFO, "Запуск", command=command, seed=seed)

    def run_stop(self, command: str, exit_code: int):
        """Завершение подкоманды"""
        self._log(EventType.RUN_STOP, EventSeverity.INFO, "Завершение", command=command, exit_code=exit_code)

    def config_resolved(self, summary: str):
        """Итоговая конфигурация после слияния файла и флагов"""
        self._log(EventType.CONFIG_RESOLVED, EventSeverity.INFO, "Конфигурация", config=summary)

    # ========== Данные ==========

    def stack_opened(self, path: str, shape: tuple, dtype: str):
        """Открыт стек срезов"""
        self._log(EventType.STACK_OPENED, EventSeverity.INFO,
                  "Стек открыт", path=path, shape=shape, dtype=dtype)

    def volume_written(self, path: str, shape: tuple, dtype: str):
        """Объём записан на диск"""
        self._log(EventType.VOLUME_WRITTEN, EventSeverity.INFO,
                  "Объём записан", path=path, shape=shape, dtype=dtype)

    def phantom_created(self, shape: tuple, n_fibers: int, defects: list):
        """Сгенерирован фантом"""
        self._log(EventType.PHANTOM_CREATED, EventSeverity.INFO,
                  "Фантом создан", shape=shape, fibers=n_fibers, defects=defects)

    # ========== Обучение ==========

    def train_start(self, arch: str, parameters: int, samples: int):
        """Начало обучения"""
        self._log(EventType.TRAIN_START, EventSeverity.INFO,
                  "Обучение начато", arch=arch, parameters=parameters, samples=samples)

    def train_step(self, step: int, epoch: int, loss: float, accuracy: float):
        """Шаг оптимизации"""
        self._log(EventType.TRAIN_STEP, EventSeverity.DEBUG, "Шаг",
                  step=step, epoch=epoch, loss=f"{loss:.6f}", accuracy=f"{accuracy:.4f}")

    def epoch_end(self, epoch: int, loss: float, accuracy: float,
                  val_loss: Optional[float] = None, val_accuracy: Optional[float] = None):
        """Конец эпохи"""
        extra = {}
        if val_loss is not None:
            extra = {'val_loss': f"{val_loss:.6f}", 'val_accuracy': f"{val_accuracy:.4f}"}
        self._log(EventType.EPOCH_END, EventSeverity.INFO, "Эпоха завершена",
                  epoch=epoch, loss=f"{loss:.6f}", accuracy=f"{accuracy:.4f}", **extra)

    def weights_saved(self, path: str, arch: str):
        """Веса сохранены"""
        self._log(EventType.WEIGHTS_SAVED, EventSeverity.INFO, "Веса сохранены", path=path, arch=arch)

    def weights_loaded(self, path: str, arch: str):
        """Веса загружены"""
        self._log(EventType.WEIGHTS_LOADED, EventSeverity.INFO, "Веса загружены", path=path, arch=arch)

    # ========== Обработка срезов ==========

    def slice_predicted(self, z: int, seconds: float):
        """Срез обработан сетью"""
        self._log(EventType.SLICE_PREDICTED, EventSeverity.DEBUG,
                  "Срез предсказан", z=z, seconds=f"{seconds:.4f}")

    def slice_segmented(self, z: int, labels: int):
        """Срез сегментирован классическим конвейером"""
        self._log(EventType.SLICE_SEGMENTED, EventSeverity.DEBUG,
                  "Срез сегментирован", z=z, labels=labels)

    def slice_evaluated(self, z: int, dice: float, matthews: float):
        """Срез сравнён с эталоном"""
        self._log(EventType.SLICE_EVALUATED, EventSeverity.DEBUG,
                  "Срез оценён", z=z, dice=f"{dice:.4f}", matthews=f"{matthews:.4f}")

    def report_written(self, path: str):
        """Отчёт записан"""
        self._log(EventType.REPORT_WRITTEN, EventSeverity.INFO, "Отчёт записан", path=path)

    # ========== Ошибки и предупреждения ==========

    def error(self, message: str, **kwargs):
        """Ошибка"""
        self._log(EventType.ERROR, EventSeverity.CRITICAL, f"Ошибка: {message}", **kwargs)

    def warning(self, message: str, **kwargs):
        """Предупреждение"""
        self._log(EventType.WARNING, EventSeverity.WARNING, f"Предупреждение: {message}", **kwargs)

    # ========== Утилиты ==========

    def get_recent_logs(self, lines: int = 100) -> list:
        """
        Получение последних записей из файла журнала

        Args:
            lines: количество строк

        Returns:
            список строк журнала
        """
        if not self.log_path or not os.path.exists(self.log_path):
            return []

        with open(self.log_path, 'r', encoding='utf-8') as f:
            all_lines = f.readlines()
        return all_lines[-lines:]


_default_logger: Optional[PipelineLogger] = None


def get_logger() -> PipelineLogger:
    """Общий экземпляр журнала (по умолчанию только консоль)"""
    global _default_logger
    if _default_logger is None:
        _default_logger = PipelineLogger()
    return _default_logger


def configure_logging(log_path: Optional[str] = None, level: str = "INFO") -> PipelineLogger:
    """Перенастройка общего журнала: уровень консоли и файл с ротацией"""
    global _default_logger
    _default_logger = PipelineLogger(log_path, level)
    return _default_logger
