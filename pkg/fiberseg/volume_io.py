# fiberseg/volume_io.py

import os
import re
import shutil
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import imageio.v3 as iio
import numpy as np
import tifffile

from fiberseg.errors import (
    IndexOutOfRange, InconsistentSliceShape, IoError, NoSlicesFound, NonContiguousSlices
)

# Типы данных, которые хранятся без преобразования
SUPPORTED_DTYPES = (np.dtype(np.uint8), np.dtype(np.uint16), np.dtype(np.float32), np.dtype(np.int32))

SIDECAR_SUFFIX = ".hdr"
SLICE_NAME = "slice_{:05d}.tif"

_TIFF_SUFFIXES = {".tif", ".tiff"}
_INDEX_RE = re.compile(r'(\d+)(?=\D*$)')


class VolumeFormat(Enum):
    """Форматы записи объёма"""
    RAW = "raw"          # бинарный блок + текстовый заголовок
    STACK = "stack"      # один файл TIFF на срез


@dataclass
class Volume:
    """Трёхмерный объём (depth, height, width)"""
    data: np.ndarray
    spacing: float = 1.0  # мкм на воксел
    name: str = "sample"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"Объём должен быть трёхмерным, получено ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ValueError(f"Пустой объём: shape={self.data.shape}")
        if self.spacing <= 0:
            raise ValueError(f"Размер воксела должен быть положительным: {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    def read_raw(self, z: int) -> np.ndarray:
        _check_index(z, self.depth)
        return self.data[z]


@dataclass
class SliceStackSource:
    """
    Ленивый источник срезов из директории

    Пиксели не загружаются при открытии: форма и тип читаются из заголовков файлов.
    """
    directory: Path
    pattern: str
    files: List[Path]
    first_index: int
    slice_shape: Tuple[int, int]
    dtype: np.dtype
    spacing: float = 1.0
    name: str = "sample"

    @property
    def depth(self) -> int:
        return len(self.files)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.depth,) + tuple(self.slice_shape)

    @property
    def index_range(self) -> range:
        return range(self.first_index, self.first_index + self.depth)

    def read_raw(self, z: int) -> np.ndarray:
        """Срез z (0..depth-1) в исходных единицах"""
        _check_index(z, self.depth)
        path = self.files[z]
        try:
            data = _read_image(path)
        except OSError as e:
            raise IoError(f"Ошибка чтения среза {path}: {e}") from e

        if data.shape != tuple(self.slice_shape) or data.dtype != self.dtype:
            raise InconsistentSliceShape(
                f"Срез {path.name}: {data.shape}/{data.dtype}, ожидалось {self.slice_shape}/{self.dtype}")
        return data


@dataclass
class RawVolumeSource:
    """Источник срезов из бинарного блока с заголовком (через memmap)"""
    path: Path
    shape: Tuple[int, int, int]
    dtype: np.dtype
    spacing: float = 1.0
    name: str = "sample"
    _memmap: Optional[np.memmap] = field(default=None, repr=False)

    @property
    def depth(self) -> int:
        return self.shape[0]

    def read_raw(self, z: int) -> np.ndarray:
        _check_index(z, self.depth)
        if self._memmap is None:
            try:
                self._memmap = np.memmap(self.path, dtype=self.dtype.newbyteorder('<'),
                                         mode='r', shape=self.shape)
            except (OSError, ValueError) as e:
                raise IoError(f"Ошибка отображения {self.path}: {e}") from e
        return np.array(self._memmap[z], dtype=self.dtype)


VolumeSource = Union[Volume, SliceStackSource, RawVolumeSource]


def _check_index(z: int, depth: int):
    if not 0 <= z < depth:
        raise IndexOutOfRange(f"Срез {z} вне диапазона [0, {depth})")


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() in _TIFF_SUFFIXES:
        return tifffile.imread(path)
    return iio.imread(path)


def _image_header(path: Path) -> Tuple[Tuple[int, ...], np.dtype]:
    """Форма и тип изображения без декодирования пикселей"""
    if path.suffix.lower() in _TIFF_SUFFIXES:
        with tifffile.TiffFile(path) as tf:
            page = tf.pages[0]
            return tuple(page.shape), np.dtype(page.dtype)
    props = iio.improps(path)
    return tuple(props.shape), np.dtype(props.dtype)


# ========== Чтение ==========

def open_stack(path: Union[str, Path], pattern: str = "*.tif*",
               spacing: float = 1.0, name: Optional[str] = None) -> SliceStackSource:
    """
    Открытие стека срезов

    Args:
        path: директория со срезами
        pattern: glob-шаблон имён файлов
        spacing: размер воксела, мкм
        name: имя образца (по умолчанию имя директории)

    Returns:
        ленивый источник срезов
    """
    directory = Path(path)
    if not directory.is_dir():
        raise NoSlicesFound(f"Директория не найдена: {directory}")

    files = sorted(p for p in directory.glob(pattern) if p.is_file())
    if not files:
        raise NoSlicesFound(f"Нет файлов по шаблону {pattern} в {directory}")

    # Индексы из имён файлов должны идти подряд
    first_index = 0
    matches = [_INDEX_RE.search(p.stem) for p in files]
    if all(matches):
        indices = [int(m.group(1)) for m in matches]
        first_index = indices[0]
        expected = list(range(first_index, first_index + len(files)))
        if indices != expected:
            raise NonContiguousSlices(f"Индексы срезов в {directory} не непрерывны")

    try:
        shape, dtype = _image_header(files[0])
        for p in files[1:]:
            other_shape, other_dtype = _image_header(p)
            if other_shape != shape or other_dtype != dtype:
                raise InconsistentSliceShape(
                    f"{p.name}: {other_shape}/{other_dtype} != {files[0].name}: {shape}/{dtype}")
    except OSError as e:
        raise IoError(f"Ошибка чтения заголовка в {directory}: {e}") from e

    if len(shape) != 2:
        raise InconsistentSliceShape(f"Ожидались полутоновые срезы, получено {shape}")

    return SliceStackSource(
        directory=directory,
        pattern=pattern,
        files=files,
        first_index=first_index,
        slice_shape=shape,
        dtype=dtype,
        spacing=spacing,
        name=name or directory.name,
    )


def open_raw(path: Union[str, Path]) -> RawVolumeSource:
    """Открытие бинарного объёма по заголовку"""
    path = Path(path)
    header = read_sidecar(path)
    if not path.is_file():
        raise IoError(f"Файл данных не найден: {path}")

    expected = int(np.prod(header['shape'])) * header['dtype'].itemsize
    if path.stat().st_size != expected:
        raise IoError(f"Размер {path} ({path.stat().st_size}) не совпадает с заголовком ({expected})")

    return RawVolumeSource(path=path, shape=header['shape'], dtype=header['dtype'],
                           spacing=header['spacing_um'], name=header['name'])


def open_volume(path: Union[str, Path], pattern: str = "*.tif*") -> Union[SliceStackSource, RawVolumeSource]:
    """Открытие объёма: директория - стек срезов, файл - бинарный блок"""
    path = Path(path)
    if path.is_dir():
        return open_stack(path, pattern)
    return open_raw(path)


def normalize(raw: np.ndarray) -> np.ndarray:
    """Перевод в float32 [0, 1] делением на максимум типа"""
    if np.issubdtype(raw.dtype, np.integer):
        return raw.astype(np.float32) / np.float32(np.iinfo(raw.dtype).max)
    return raw.astype(np.float32, copy=True)


def read_slice(src: VolumeSource, z: int) -> np.ndarray:
    """Срез z, нормированный в float32 [0, 1]"""
    return normalize(src.read_raw(z))


def iter_slices(src: VolumeSource, normalized: bool = True) -> Iterator[Tuple[int, np.ndarray]]:
    """Последовательный обход срезов, в памяти один срез"""
    for z in range(src.depth):
        yield z, (read_slice(src, z) if normalized else src.read_raw(z))


def read_volume(path: Union[str, Path], pattern: str = "*.tif*") -> Volume:
    """Полная загрузка объёма без изменения типа данных"""
    src = open_volume(path, pattern)
    first = src.read_raw(0)
    data = np.empty(src.shape, dtype=first.dtype)
    data[0] = first
    for z in range(1, src.depth):
        data[z] = src.read_raw(z)
    return Volume(data=data, spacing=src.spacing, name=src.name)


# ========== Дополнение и обрезка ==========

def _margins(margin, ndim: int) -> Tuple[int, ...]:
    if np.isscalar(margin):
        margins = (int(margin),) * ndim
    else:
        margins = tuple(int(m) for m in margin)
    if len(margins) != ndim or any(m < 0 for m in margins):
        raise ValueError(f"Некорректные поля: {margin}")
    return margins


def pad(field: np.ndarray, margin, mode: str = "zero") -> np.ndarray:
    """
    Дополнение поля нулями на margin вокселов с каждой стороны

    Args:
        field: 2D или 3D поле
        margin: ширина поля (число или по осям)
        mode: только "zero"
    """
    if mode != "zero":
        raise ValueError(f"Неподдерживаемый режим дополнения: {mode}")
    margins = _margins(margin, field.ndim)
    return np.pad(field, [(m, m) for m in margins], mode='constant', constant_values=0)


def crop(field: np.ndarray, margin) -> np.ndarray:
    """Обратная операция к pad"""
    margins = _margins(margin, field.ndim)
    return field[tuple(slice(m, s - m) for m, s in zip(margins, field.shape))]


# ========== Запись ==========

def storage_dtype(data: np.ndarray) -> np.dtype:
    """
    Тип хранения на диске

    Поддерживаемые типы сохраняются как есть; булевы маски - uint8;
    прочие целые (карты меток) - int32.
    """
    if data.dtype in SUPPORTED_DTYPES:
        return data.dtype
    if data.dtype == np.bool_:
        return np.dtype(np.uint8)
    if np.issubdtype(data.dtype, np.integer):
        if data.size and (data.min() < np.iinfo(np.int32).min or data.max() > np.iinfo(np.int32).max):
            raise ValueError("Метки не помещаются в int32")
        return np.dtype(np.int32)
    if np.issubdtype(data.dtype, np.floating):
        return np.dtype(np.float32)
    raise ValueError(f"Неподдерживаемый тип данных: {data.dtype}")


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def write_sidecar(path: Union[str, Path], shape: tuple, dtype: np.dtype, spacing: float, name: str):
    """Текстовый заголовок key=value (UTF-8)"""
    lines = [
        f"shape={','.join(str(s) for s in shape)}",
        f"dtype={np.dtype(dtype).name}",
        "order=zyx",
        "endianness=little",
        f"spacing_um={spacing!r}",
        f"name={name}",
    ]
    _atomic_write_text(sidecar_path(path), "\n".join(lines) + "\n")


def read_sidecar(path: Union[str, Path]) -> dict:
    """Разбор заголовка бинарного объёма"""
    header_path = sidecar_path(path)
    try:
        text = header_path.read_text(encoding='utf-8')
    except OSError as e:
        raise IoError(f"Не найден заголовок {header_path}: {e}") from e

    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise IoError(f"Некорректная строка заголовка {header_path}: {line!r}")
        values[key.strip()] = value.strip()

    try:
        header = {
            'shape': tuple(int(s) for s in values['shape'].split(',')),
            'dtype': np.dtype(values['dtype']),
            'order': values.get('order', 'zyx'),
            'endianness': values.get('endianness', 'little'),
            'spacing_um': float(values.get('spacing_um', 1.0)),
            'name': values.get('name', Path(path).stem),
        }
    except (KeyError, ValueError, TypeError) as e:
        raise IoError(f"Некорректный заголовок {header_path}: {e}") from e

    if header['order'] != 'zyx' or header['endianness'] != 'little':
        raise IoError(f"Неподдерживаемый порядок данных в {header_path}")
    return header


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        tmp.write_text(text, encoding='utf-8')
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise IoError(f"Ошибка записи {path}: {e}") from e


class StackWriter:
    """
    Потоковая запись стека срезов

    Срезы пишутся во временную директорию; на close() она атомарно заменяет целевую.
    При исключении внутри with временная директория удаляется, цель не трогается.
    """

    def __init__(self, path: Union[str, Path], dtype=None):
        self.path = Path(path)
        self.dtype = np.dtype(dtype) if dtype is not None else None
        self.count = 0
        self._tmp_dir: Optional[Path] = None
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._tmp_dir = Path(tempfile.mkdtemp(prefix=f".{self.path.name}.", dir=self.path.parent))
        except OSError as e:
            raise IoError(f"Нет доступа к {self.path.parent}: {e}") from e

    def write(self, data: np.ndarray):
        """Запись очередного среза"""
        if self.dtype is None:
            self.dtype = storage_dtype(data)
        try:
            tifffile.imwrite(self._tmp_dir / SLICE_NAME.format(self.count), data.astype(self.dtype, copy=False))
        except OSError as e:
            raise IoError(f"Ошибка записи среза {self.count} в {self.path}: {e}") from e
        self.count += 1

    def close(self):
        """Замена целевой директории готовым стеком"""
        if self._tmp_dir is None:
            return
        old = None
        try:
            if self.path.exists():
                old = self.path.with_name(f".{self.path.name}.old")
                if old.exists():
                    shutil.rmtree(old)
                os.replace(self.path, old)
            os.replace(self._tmp_dir, self.path)
        except OSError as e:
            raise IoError(f"Ошибка завершения записи {self.path}: {e}") from e
        finally:
            self._tmp_dir = None
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)

    def abort(self):
        if self._tmp_dir is not None:
            shutil.rmtree(self._tmp_dir, ignore_errors=True)
            self._tmp_dir = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


def write_volume(vol: Union[Volume, np.ndarray], path: Union[str, Path],
                 fmt: VolumeFormat = VolumeFormat.RAW, spacing: Optional[float] = None,
                 name: Optional[str] = None):
    """
    Запись объёма или карты меток

    Args:
        vol: Volume или массив (z, y, x)
        path: файл .raw (RAW) или директория (STACK)
        fmt: формат записи
        spacing, name: метаданные для массива без обёртки Volume
    """
    if isinstance(vol, Volume):
        data, spacing, name = vol.data, vol.spacing, vol.name
    else:
        data = np.asarray(vol)
    spacing = 1.0 if spacing is None else spacing
    name = name or Path(path).stem

    if data.ndim != 3:
        raise ValueError(f"Ожидался объём (z, y, x), получено ndim={data.ndim}")
    dtype = storage_dtype(data)
    path = Path(path)

    if fmt == VolumeFormat.RAW:
        tmp = path.with_name(f".{path.name}.tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.ascontiguousarray(data, dtype=dtype.newbyteorder('<')).tofile(tmp)
            os.replace(tmp, path)
        except OSError as e:
            if tmp.exists():
                tmp.unlink()
            raise IoError(f"Ошибка записи {path}: {e}") from e
        write_sidecar(path, data.shape, dtype, spacing, name)

    elif fmt == VolumeFormat.STACK:
        with StackWriter(path, dtype) as writer:
            for z in range(data.shape[0]):
                writer.write(data[z])
    else:
        raise ValueError(f"Неизвестный формат: {fmt}")
