# fiberseg/errors.py

from typing import Optional


class FiberSegError(Exception):
    """Базовая ошибка конвейера сегментации волокон"""


# ========== Ввод/вывод объёмов ==========

class NoSlicesFound(FiberSegError):
    """В директории нет срезов, подходящих под шаблон"""


class InconsistentSliceShape(FiberSegError):
    """Срезы стека различаются формой или типом данных"""


class NonContiguousSlices(FiberSegError):
    """Индексы срезов в именах файлов идут с пропусками"""


class IndexOutOfRange(FiberSegError):
    """Запрошен срез вне диапазона стека"""


class IoError(FiberSegError):
    """Ошибка чтения или записи на диск"""


# ========== Разбиение на тайлы ==========

class GeometryMismatch(FiberSegError):
    """Размер поля не согласован с геометрией тайлов"""

    def __init__(self, message: str, extra_padding: Optional[tuple] = None):
        super().__init__(message)
        self.extra_padding = extra_padding


class MissingTile(FiberSegError):
    """В наборе тайлов не хватает позиции сетки"""


class DuplicateTile(FiberSegError):
    """Позиция сетки встречается в наборе тайлов дважды"""


# ========== Классическая сегментация ==========

class DegenerateHistogram(FiberSegError):
    """Различных значений меньше, чем классов Otsu"""


# ========== Нейросети ==========

class ShapeMismatch(FiberSegError):
    """Формы массивов несовместимы"""


class NonFiniteValue(FiberSegError):
    """В тензоре появились NaN или Inf"""


class EmptyDataset(FiberSegError):
    """Обучающая выборка пуста"""


class InvalidSpec(FiberSegError):
    """Некорректное описание архитектуры"""


class ArchMismatch(FiberSegError):
    """Файл весов принадлежит другой архитектуре"""


class CorruptFile(FiberSegError):
    """Файл весов повреждён или обрезан"""


# ========== Метрики ==========

class SingleClassGold(FiberSegError):
    """Эталон содержит только один класс, ROC не определена"""


# ========== Фантомы и конфигурация ==========

class PlacementFailure(FiberSegError):
    """Не удалось разместить волокна без пересечений"""


class ConfigError(FiberSegError):
    """Ошибка конфигурации"""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"{message} (строка {line})"
        super().__init__(message)
        self.line = line
