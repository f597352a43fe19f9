# fiberseg/tiler.py

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, List, Sequence, Tuple

import numpy as np

from fiberseg.errors import DuplicateTile, GeometryMismatch, MissingTile, ShapeMismatch


@dataclass(frozen=True)
class TileSpec:
    """
    Геометрия тайлов

    tile_shape - размер тайла по осям, stride - шаг сетки.
    Перекрытие (tile - stride) симметрично: margin = (tile - stride) / 2 с каждой стороны.
    """
    tile_shape: Tuple[int, ...]
    stride: Tuple[int, ...]

    def __post_init__(self):
        if len(self.tile_shape) != len(self.stride):
            raise ValueError(f"Размерности tile_shape {self.tile_shape} и stride {self.stride} различаются")
        for t, s in zip(self.tile_shape, self.stride):
            if not t > s > 0:
                raise ValueError(f"Требуется tile > stride > 0, получено tile={t}, stride={s}")
            if (t - s) % 2:
                raise ValueError(f"Перекрытие tile - stride = {t - s} должно быть чётным")

    @classmethod
    def cubic(cls, tile: int, stride: int, ndim: int) -> 'TileSpec':
        """Одинаковая геометрия по всем осям"""
        return cls((tile,) * ndim, (stride,) * ndim)

    @property
    def ndim(self) -> int:
        return len(self.tile_shape)

    @property
    def margin(self) -> Tuple[int, ...]:
        return tuple((t - s) // 2 for t, s in zip(self.tile_shape, self.stride))


# Значения по умолчанию: 288/256 для срезов, 64/32 для кубов
DEFAULT_TILE_2D = TileSpec.cubic(288, 256, 2)
DEFAULT_CHUNK_3D = TileSpec.cubic(64, 32, 3)


@dataclass
class TileConfig:
    """Секция конфигурации tiles: геометрия тайлов 2D и кубов 3D"""
    tile: int = 288
    stride: int = 256
    chunk: int = 64
    chunk_stride: int = 32

    def __post_init__(self):
        # проверка правил геометрии
        self.spec(2)
        self.spec(3)

    def spec(self, dims: int) -> TileSpec:
        if dims == 2:
            return TileSpec.cubic(self.tile, self.stride, 2)
        return TileSpec.cubic(self.chunk, self.chunk_stride, 3)


@dataclass
class Tile:
    """Тайл с привязкой к координатам дополненного источника"""
    data: np.ndarray
    anchor: Tuple[int, ...]
    grid_index: Tuple[int, ...]


@dataclass
class TileSet:
    """Набор перекрывающихся тайлов (или кубов) в порядке обхода по строкам"""
    tiles: List[Tile]
    spec: TileSpec
    grid_shape: Tuple[int, ...]
    source_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self) -> Iterator[Tile]:
        return iter(self.tiles)

    def __getitem__(self, i: int) -> Tile:
        return self.tiles[i]

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> 'TileSet':
        """Новый набор с преобразованными данными тайлов"""
        return TileSet(
            tiles=[Tile(fn(t.data), t.anchor, t.grid_index) for t in self.tiles],
            spec=self.spec,
            grid_shape=self.grid_shape,
            source_shape=self.source_shape,
            out_shape=self.out_shape,
        )


# Для 3D используется тот же тип
ChunkSet = TileSet


def grid_shape(extent: Sequence[int], spec: TileSpec) -> Tuple[int, ...]:
    """
    Число тайлов по осям для дополненного поля

    Returns:
        (extent - tile) / stride + 1 по каждой оси
    """
    if len(extent) != spec.ndim:
        raise ShapeMismatch(f"Поле размерности {len(extent)} и тайлы размерности {spec.ndim}")

    extra = extra_padding(extent, spec)
    if any(extra):
        raise GeometryMismatch(
            f"Размер {tuple(extent)} не согласован с тайлами {spec.tile_shape}/{spec.stride}; "
            f"не хватает дополнения {extra}",
            extra_padding=extra,
        )
    return tuple((e - t) // s + 1 for e, t, s in zip(extent, spec.tile_shape, spec.stride))


def extra_padding(extent: Sequence[int], spec: TileSpec) -> Tuple[int, ...]:
    """Минимальное дополнение дополненного поля по осям до допустимого размера"""
    extra = []
    for e, t, s in zip(extent, spec.tile_shape, spec.stride):
        if e < t:
            extra.append(t - e)
        else:
            extra.append((-(e - t)) % s)
    return tuple(extra)


def _grid(field: np.ndarray, spec: TileSpec) -> TileSet:
    counts = grid_shape(field.shape, spec)
    tiles = []
    for index in itertools.product(*(range(c) for c in counts)):
        anchor = tuple(i * s for i, s in zip(index, spec.stride))
        window = tuple(slice(a, a + t) for a, t in zip(anchor, spec.tile_shape))
        tiles.append(Tile(data=field[window], anchor=anchor, grid_index=index))

    out_shape = tuple(c * s for c, s in zip(counts, spec.stride))
    return TileSet(tiles=tiles, spec=spec, grid_shape=counts,
                   source_shape=tuple(field.shape), out_shape=out_shape)


def tile_grid(field: np.ndarray, spec: TileSpec) -> TileSet:
    """
    Разбиение дополненного 2D поля на перекрывающиеся тайлы

    Args:
        field: дополненное поле (высота, ширина)
        spec: геометрия тайлов

    Returns:
        набор тайлов; данные тайлов - представления (views) исходного массива
    """
    if field.ndim != 2:
        raise ShapeMismatch(f"tile_grid ожидает 2D поле, получено ndim={field.ndim}")
    return _grid(field, spec)


def chunk_grid(vol: np.ndarray, spec: TileSpec) -> ChunkSet:
    """Разбиение дополненного 3D объёма на перекрывающиеся кубы"""
    if vol.ndim != 3:
        raise ShapeMismatch(f"chunk_grid ожидает 3D объём, получено ndim={vol.ndim}")
    return _grid(vol, spec)


def stitch(tiles: Iterable[Tile], spec: TileSpec, out_shape: Sequence[int]) -> np.ndarray:
    """
    Сборка поля из тайлов с отбрасыванием перекрытий

    Каждый воксел результата берётся из центрального окна (размера stride) ровно одного тайла.

    Args:
        tiles: тайлы с предсказаниями (порядок не важен)
        spec: геометрия тайлов
        out_shape: форма результата без дополнения

    Returns:
        собранное поле формы out_shape
    """
    out_shape = tuple(int(s) for s in out_shape)
    if len(out_shape) != spec.ndim:
        raise ShapeMismatch(f"out_shape {out_shape} не соответствует размерности тайлов {spec.ndim}")

    counts = tuple(-(-o // s) for o, s in zip(out_shape, spec.stride))
    coverage = tuple(c * s for c, s in zip(counts, spec.stride))
    margin = spec.margin
    centre = tuple(slice(m, m + s) for m, s in zip(margin, spec.stride))

    out = None
    seen = set()
    for tile in tiles:
        index = tuple(tile.grid_index)
        if any(not 0 <= i < c for i, c in zip(index, counts)):
            raise ShapeMismatch(f"Позиция {index} вне сетки {counts}")
        if index in seen:
            raise DuplicateTile(f"Позиция сетки {index} встречается дважды")
        seen.add(index)

        if tuple(tile.data.shape) != tuple(spec.tile_shape):
            raise ShapeMismatch(f"Тайл {index}: форма {tile.data.shape}, ожидалась {spec.tile_shape}")

        if out is None:
            out = np.zeros(coverage, dtype=tile.data.dtype)
        target = tuple(slice(i * s, (i + 1) * s) for i, s in zip(index, spec.stride))
        out[target] = tile.data[centre]

    expected = int(np.prod(counts))
    if len(seen) != expected:
        missing = next(i for i in itertools.product(*(range(c) for c in counts)) if i not in seen)
        raise MissingTile(f"Не хватает тайлов: {expected - len(seen)}, например {missing}")

    return out[tuple(slice(0, o) for o in out_shape)]


def auto_pad(field: np.ndarray, spec: TileSpec) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Дополнение нулями до допустимой геометрии

    Поле дополняется на margin с каждой стороны и, при необходимости, в конце осей,
    чтобы исходный размер стал кратен stride.

    Returns:
        (дополненное поле, исходная форма для обрезки после stitch)
    """
    if field.ndim != spec.ndim:
        raise ShapeMismatch(f"Поле размерности {field.ndim} и тайлы размерности {spec.ndim}")
    widths = []
    for n, m, s in zip(field.shape, spec.margin, spec.stride):
        widths.append((m, m + (-n) % s))
    padded = np.pad(field, widths, mode='constant', constant_values=0)
    return padded, tuple(field.shape)
