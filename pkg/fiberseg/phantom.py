# fiberseg/phantom.py

"""
Синтетические фантомы: светлые цилиндры вдоль z на тёмном фоне с гауссовым шумом.
Эталонная разметка известна точно; дефектные срезы имитируют потерю контраста.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from fiberseg.errors import PlacementFailure
from fiberseg.logger import PipelineLogger, get_logger
from fiberseg.volume_io import Volume


@dataclass
class PhantomConfig:
    """Параметры фантома (размеры в пикселях)"""
    n_fibers: int = 200
    radius_min: float = 6.5
    radius_max: float = 10.0
    depth: int = 64
    size: int = 512
    noise: float = 0.05
    background: float = 0.25
    fiber: float = 0.75
    gap: float = 2.0
    defect_slices: List[int] = field(default_factory=list)
    defect_band: Tuple[float, float] = (0.25, 0.75)
    max_attempts: int = 100000
    spacing: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_fibers < 0:
            raise ValueError(f"n_fibers >= 0, получено {self.n_fibers}")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError(f"Требуется 0 < radius_min <= radius_max: {self.radius_min}, {self.radius_max}")
        if self.depth < 1 or self.size < 1:
            raise ValueError(f"Пустой фантом: depth={self.depth}, size={self.size}")
        if self.noise < 0:
            raise ValueError(f"noise >= 0, получено {self.noise}")
        for z in self.defect_slices:
            if not 0 <= z < self.depth:
                raise ValueError(f"Дефектный срез {z} вне [0, {self.depth})")


@dataclass
class Fiber:
    """Волокно-цилиндр: центр сечения и радиус"""
    row: float
    col: float
    radius: float


@dataclass
class Phantom:
    """Фантом: объём, эталонные метки (z, y, x) и описание волокон"""
    volume: Volume
    labels: np.ndarray
    fibers: List[Fiber]
    defect_slices: List[int]

    @property
    def mask(self) -> np.ndarray:
        return self.labels > 0

    def metadata(self) -> dict:
        return {
            'shape': list(self.volume.shape),
            'n_fibers': len(self.fibers),
            'defect_slices': list(self.defect_slices),
            'spacing_um': self.volume.spacing,
            'fibers': [[f.row, f.col, f.radius] for f in self.fibers],
        }


def place_fibers(cfg: PhantomConfig, rng: np.random.Generator) -> List[Fiber]:
    """
    Размещение волокон без пересечений (зазор не меньше cfg.gap)

    Raises:
        PlacementFailure: бюджет попыток исчерпан
    """
    fibers: List[Fiber] = []
    centers = np.empty((0, 2))
    radii = np.empty(0)
    attempts = 0
    while len(fibers) < cfg.n_fibers:
        if attempts >= cfg.max_attempts:
            raise PlacementFailure(
                f"Размещено {len(fibers)} из {cfg.n_fibers} волокон за {cfg.max_attempts} попыток")
        attempts += 1
        r = rng.uniform(cfg.radius_min, cfg.radius_max)
        low, high = r + 1, cfg.size - r - 2
        if high <= low:
            raise PlacementFailure(f"Волокно радиуса {r:.1f} не помещается в срез {cfg.size}")
        center = rng.uniform(low, high, size=2)
        if len(fibers):
            distance = np.hypot(*(centers - center).T)
            if np.any(distance < radii + r + cfg.gap):
                continue
        fibers.append(Fiber(float(center[0]), float(center[1]), float(r)))
        centers = np.vstack([centers, center])
        radii = np.append(radii, r)
    return fibers


def rasterize(fibers: Sequence[Fiber], size: int) -> np.ndarray:
    """Карта меток сечения: метка i + 1 для волокна i"""
    labels = np.zeros((size, size), dtype=np.int32)
    rows, cols = np.ogrid[:size, :size]
    for i, f in enumerate(fibers):
        r = int(np.ceil(f.radius)) + 1
        r0, r1 = max(int(f.row) - r, 0), min(int(f.row) + r + 1, size)
        c0, c1 = max(int(f.col) - r, 0), min(int(f.col) + r + 1, size)
        inside = (rows[r0:r1] - f.row) ** 2 + (cols[:, c0:c1] - f.col) ** 2 <= f.radius ** 2
        labels[r0:r1, c0:c1][inside] = i + 1
    return labels


def make_phantom(cfg: Optional[PhantomConfig] = None,
                 logger: Optional[PipelineLogger] = None) -> Phantom:
    """
    Генерация фантома

    Дефектный срез: в полосе строк defect_band (доли высоты) сигнал волокон стёрт,
    остаются фон и шум; эталон при этом не меняется.
    """
    cfg = cfg or PhantomConfig()
    logger = logger or get_logger()
    rng = np.random.default_rng(cfg.seed)

    fibers = place_fibers(cfg, rng)
    section = rasterize(fibers, cfg.size)
    clean = np.where(section > 0, cfg.fiber, cfg.background).astype(np.float32)

    data = np.empty((cfg.depth, cfg.size, cfg.size), dtype=np.float32)
    band = slice(int(cfg.defect_band[0] * cfg.size), int(cfg.defect_band[1] * cfg.size))
    for z in range(cfg.depth):
        data[z] = clean
        if z in cfg.defect_slices:
            data[z, band] = cfg.background
        data[z] += rng.normal(0.0, cfg.noise, size=clean.shape).astype(np.float32)
    np.clip(data, 0.0, 1.0, out=data)

    labels = np.broadcast_to(section, data.shape).copy()
    volume = Volume(data=data, spacing=cfg.spacing, name='phantom')
    logger.phantom_created(volume.shape, len(fibers), sorted(cfg.defect_slices))
    return Phantom(volume=volume, labels=labels, fibers=fibers, defect_slices=sorted(cfg.defect_slices))


# ========== Обучающие выборки ==========

def disk_pairs(count: int, size: int = 32, radius: float = 6.0, noise: float = 0.05,
               seed: int = 0, retries: int = 100) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Небольшая выборка: по два непересекающихся диска на изображение

    Если первый диск не оставил места для второго, изображение строится заново
    с новым seed (не более retries раз).

    Raises:
        PlacementFailure: диски не помещаются ни в одной из попыток
    """
    if retries < 1:
        raise ValueError(f"retries >= 1, получено {retries}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        for attempt in range(retries):
            cfg = PhantomConfig(n_fibers=2, radius_min=radius, radius_max=radius, depth=1, size=size,
                                noise=noise, gap=2.0, max_attempts=2000,
                                seed=int(rng.integers(2 ** 31)))
            try:
                phantom = make_phantom(cfg)
                break
            except PlacementFailure:
                if attempt == retries - 1:
                    raise
        pairs.append((phantom.volume.data[0], phantom.mask[0].astype(np.uint8)))
    return pairs
