# fiberseg/predictor.py

"""
Предсказание по объёму: срезы (2D) или z-слои (3D) режутся на тайлы, прогоняются
через сеть, склеиваются; затем порог и разметка отдельных волокон.
"""

import time
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from skimage import measure

from fiberseg.architectures import ARCH_IDS, load_weights
from fiberseg.classic_seg import wusem
from fiberseg.errors import ArchMismatch, ShapeMismatch
from fiberseg.logger import PipelineLogger, get_logger
from fiberseg.metrics import threshold as apply_threshold
from fiberseg.tiler import Tile, TileConfig, auto_pad, chunk_grid, stitch, tile_grid
from fiberseg.volume_io import pad, read_slice


@dataclass
class PredictConfig:
    """Параметры предсказания"""
    arch: str = 'unet2d'
    weights: Optional[str] = None
    threshold: float = 0.5
    batch_size: int = 4
    auto_pad: bool = True
    binary: bool = False
    label: bool = False
    separate_touching: bool = False
    wusem_delta_radius: int = 2

    def __post_init__(self):
        if self.arch not in ARCH_IDS:
            raise ValueError(f"Неизвестная архитектура: {self.arch}")
        if not 0 <= self.threshold <= 1:
            raise ValueError(f"threshold в [0, 1], получено {self.threshold}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size >= 1, получено {self.batch_size}")

    @property
    def dims(self) -> int:
        return int(self.arch[-2])


@dataclass
class InstanceStats:
    """Статистика одного волокна"""
    label: int
    voxels: int
    centroid: Tuple[float, ...]
    equivalent_radius: float  # в единицах spacing (мкм)


class Predictor:
    """
    Потоковое предсказание вероятностей волокон

    Отвечает за:
    - разбиение срезов и z-слоёв на тайлы с автоматическим дополнением
    - пакетный прогон тайлов через сеть в режиме вывода
    - сборку результата и учёт времени на срез
    """

    def __init__(self, network, cfg: Optional[PredictConfig] = None,
                 logger: Optional[PipelineLogger] = None, dims: Optional[int] = None,
                 tiles: Optional[TileConfig] = None):
        self.network = network
        self.cfg = cfg or PredictConfig()
        self.tiles = tiles or TileConfig()
        self.logger = logger or get_logger()
        self.dims = dims or getattr(network, 'dims', 2)
        self.spec = self.tiles.spec(self.dims)
        self.timings: List[Tuple[int, float]] = []

    def _run_tiles(self, tiles: List[Tile]) -> List[Tile]:
        out = []
        batch = self.cfg.batch_size
        for start in range(0, len(tiles), batch):
            chunk = tiles[start:start + batch]
            x = np.stack([t.data for t in chunk])[:, None].astype(np.float32, copy=False)
            y = self.network.forward(x, training=False)
            if y.shape != x.shape:
                raise ShapeMismatch(f"Сеть вернула {y.shape} на вход {x.shape}")
            out += [Tile(y[i, 0], t.anchor, t.grid_index) for i, t in enumerate(chunk)]
        return out

    def predict_slice(self, slice_: np.ndarray) -> np.ndarray:
        """Вероятности для одного 2D среза"""
        if slice_.ndim != 2:
            raise ShapeMismatch(f"Ожидался 2D срез, получено {slice_.shape}")
        if self.cfg.auto_pad:
            padded, out_shape = auto_pad(slice_, self.spec)
        else:
            # только поля margin; неделящийся размер - GeometryMismatch из tile_grid
            padded, out_shape = pad(slice_, self.spec.margin), slice_.shape
        tiles = tile_grid(padded, self.spec)
        return stitch(self._run_tiles(tiles.tiles), self.spec, out_shape)

    def predict_slab(self, slab: np.ndarray, out_depth: int) -> np.ndarray:
        """
        Вероятности для z-слоя

        slab уже содержит по margin соседних срезов сверху и снизу; результат - out_depth срезов.
        """
        margin = self.spec.margin
        if slab.shape[0] != self.spec.tile_shape[0]:
            raise ShapeMismatch(f"Толщина слоя {slab.shape[0]}, ожидалась {self.spec.tile_shape[0]}")
        height, width = slab.shape[1:]
        widths = [(0, 0)] + [(m, m + (-n) % s) for n, m, s in
                             zip((height, width), margin[1:], self.spec.stride[1:])]
        padded = np.pad(slab, widths)
        chunks = chunk_grid(padded, self.spec)
        return stitch(self._run_tiles(chunks.tiles), self.spec, (out_depth, height, width))

    def _timed_slice(self, z: int, slice_: np.ndarray) -> Tuple[int, np.ndarray, float]:
        start = time.perf_counter()
        prob = self.predict_slice(slice_)
        return z, prob, time.perf_counter() - start

    def iter_predictions(self, src, workers: int = 1) -> Iterator[Tuple[int, np.ndarray]]:
        """Вероятности по срезам в порядке z"""
        self.timings = []
        if self.dims == 2:
            yield from self._iter_2d(src, workers)
        else:
            yield from self._iter_3d(src)

    def _iter_2d(self, src, workers: int) -> Iterator[Tuple[int, np.ndarray]]:
        if workers <= 1:
            for z in range(src.depth):
                z, prob, seconds = self._timed_slice(z, read_slice(src, z))
                self._record(z, seconds)
                yield z, prob
            return

        for start in range(0, src.depth, workers):
            batch = range(start, min(start + workers, src.depth))
            results = Parallel(n_jobs=workers, prefer='threads')(
                delayed(self._timed_slice)(z, read_slice(src, z)) for z in batch)
            for z, prob, seconds in results:
                self._record(z, seconds)
                yield z, prob

    def _iter_3d(self, src) -> Iterator[Tuple[int, np.ndarray]]:
        depth = src.depth
        margin = self.spec.margin[0]
        step = self.spec.stride[0]
        for z0 in range(0, depth, step):
            start = time.perf_counter()
            slab = read_slab(src, z0 - margin, self.spec.tile_shape[0])
            out_depth = min(step, depth - z0)
            prob = self.predict_slab(slab, out_depth)
            per_slice = (time.perf_counter() - start) / out_depth
            for i in range(out_depth):
                self._record(z0 + i, per_slice)
                yield z0 + i, prob[i]

    def _record(self, z: int, seconds: float):
        self.timings.append((z, seconds))
        self.logger.slice_predicted(z, seconds)

    def predict_volume(self, src, workers: int = 1) -> np.ndarray:
        """Вероятности для всего объёма (z, y, x) float32"""
        out = None
        for z, prob in self.iter_predictions(src, workers):
            if out is None:
                out = np.empty((src.depth,) + prob.shape, dtype=np.float32)
            out[z] = prob
        return out

    def timing_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.timings, columns=['slice', 'seconds'])


def read_slab(src, z_start: int, thickness: int) -> np.ndarray:
    """Срезы z_start..z_start+thickness-1; за пределами объёма - нули"""
    shape = tuple(src.shape[1:])
    slab = np.zeros((thickness,) + shape, dtype=np.float32)
    for i in range(thickness):
        z = z_start + i
        if 0 <= z < src.depth:
            slab[i] = read_slice(src, z)
    return slab


def load_predictor(cfg: PredictConfig, tiles: Optional[TileConfig] = None,
                   logger: Optional[PipelineLogger] = None) -> Predictor:
    """Загрузка сети из файла весов и создание предсказателя"""
    logger = logger or get_logger()
    expected = cfg.arch
    network = load_weights(cfg.weights)
    if network.arch_id != expected:
        raise ArchMismatch(f"{cfg.weights}: файл архитектуры {network.arch_id}, запрошена {expected}")
    logger.weights_loaded(cfg.weights, network.arch_id)
    return Predictor(network, cfg, logger, tiles=tiles)


def predict_volume(src, cfg: PredictConfig, tiles: Optional[TileConfig] = None, workers: int = 1,
                   logger: Optional[PipelineLogger] = None) -> np.ndarray:
    """Загрузка весов и предсказание вероятностей по всему объёму"""
    return load_predictor(cfg, tiles, logger).predict_volume(src, workers)


# ========== Разметка волокон ==========

def instance_stats(labels: np.ndarray, spacing: float = 1.0) -> List[InstanceStats]:
    """
    Статистика волокон по карте меток

    Эквивалентный радиус - sqrt(площадь / pi) * spacing; в 3D площадь - среднее
    сечение (вокселы / протяжённость по z).
    """
    stats = []
    for region in measure.regionprops(np.asarray(labels)):
        if labels.ndim == 3:
            z_extent = region.bbox[3] - region.bbox[0]
            area = region.area / z_extent
        else:
            area = region.area
        stats.append(InstanceStats(
            label=int(region.label),
            voxels=int(region.area),
            centroid=tuple(float(c) for c in region.centroid),
            equivalent_radius=float(np.sqrt(area / np.pi) * spacing),
        ))
    return stats


def label_instances(mask: np.ndarray, spacing: float = 1.0, separate_touching: bool = False,
                    delta_radius: int = 2) -> Tuple[np.ndarray, List[InstanceStats]]:
    """
    Разметка связных компонент и статистика волокон

    Связность: 4 в 2D, 6 в 3D.

    Args:
        mask: бинарный срез или объём
        spacing: размер воксела, мкм
        separate_touching: разделять касающиеся волокна (WUSEM, только 2D)
        delta_radius: шаг радиуса эрозий для WUSEM
    """
    mask = np.asarray(mask) > 0
    if separate_touching:
        if mask.ndim != 2:
            raise ShapeMismatch("Разделение касающихся волокон выполняется по 2D срезам")
        labels = wusem(mask, 0, delta_radius)
    else:
        labels = measure.label(mask, connectivity=1).astype(np.int32)
    return labels, instance_stats(labels, spacing)


def instance_frame(stats: List[InstanceStats], z: Optional[int] = None) -> pd.DataFrame:
    """Таблица статистики волокон (для CSV)"""
    rows = []
    for s in stats:
        row = {'label': s.label, 'voxels': s.voxels, 'radius_um': s.equivalent_radius}
        for axis, c in zip('zyx'[-len(s.centroid):], s.centroid):
            row[f'centroid_{axis}'] = c
        if z is not None:
            row = {'slice': z, **row}
        rows.append(row)
    return pd.DataFrame(rows)


def binarize(prob: np.ndarray, t: float) -> np.ndarray:
    """Маска волокон uint8 по порогу (строго больше t)"""
    return apply_threshold(prob, t).astype(np.uint8)
