# fiberseg/augment.py

"""
Геометрическая аугментация пар (изображение, разметка).

2D: поворот, сдвиг, масштаб, скос, отражения. 3D: то же преобразование в плоскости (y, x)
для всех срезов плюс необязательное отражение по z.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi

from fiberseg.errors import ShapeMismatch


@dataclass
class AugmentConfig:
    """Диапазоны случайных преобразований (углы в градусах, сдвиги и масштаб - доли)"""
    enabled: bool = True
    rotation_range: float = 10.0
    horizontal_flip: bool = True
    vertical_flip: bool = True
    width_shift: float = 0.05
    height_shift: float = 0.05
    zoom_range: float = 0.1
    shear_range: float = 5.0
    z_flip: bool = False
    fill: str = 'zero'
    seed: int = 0

    def __post_init__(self):
        for name in ('rotation_range', 'width_shift', 'height_shift', 'zoom_range', 'shear_range'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} не может быть отрицательным: {getattr(self, name)}")
        for name in ('width_shift', 'height_shift', 'zoom_range'):
            if getattr(self, name) >= 1:
                raise ValueError(f"{name} должен быть меньше 1: {getattr(self, name)}")
        if self.fill != 'zero':
            raise ValueError(f"Поддерживается только заполнение нулями, получено {self.fill}")

    @classmethod
    def identity(cls) -> 'AugmentConfig':
        return cls(rotation_range=0.0, horizontal_flip=False, vertical_flip=False, width_shift=0.0,
                   height_shift=0.0, zoom_range=0.0, shear_range=0.0, z_flip=False)


@dataclass
class AffineTransform:
    """
    Аффинное преобразование в однородных координатах относительно центра поля

    matrix отображает координаты выхода в координаты входа: (ndim + 1) x (ndim + 1),
    оси в порядке (z,) y, x. Параметры сохраняются для журнала и проверок.
    """
    matrix: np.ndarray
    angle: float = 0.0
    shear: float = 0.0
    zoom: Tuple[float, float] = (1.0, 1.0)
    shift: Tuple[float, float] = (0.0, 0.0)
    hflip: bool = False
    vflip: bool = False
    zflip: bool = False

    @property
    def ndim(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:-1, :-1]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:-1, -1]

    def is_integral(self) -> bool:
        """Перестановка индексов со знаком и целым сдвигом (отражения, повороты на 90 градусов)"""
        m = self.matrix[:-1]
        return bool(np.allclose(m, np.round(m), atol=1e-9))


def planar_matrix(angle: float = 0.0, shear: float = 0.0, zoom: Tuple[float, float] = (1.0, 1.0),
                  shift: Tuple[float, float] = (0.0, 0.0), hflip: bool = False,
                  vflip: bool = False) -> np.ndarray:
    """Матрица 3x3 в плоскости (y, x): поворот * скос * масштаб * отражение + сдвиг (в пикселях)"""
    theta = np.deg2rad(angle)
    phi = np.deg2rad(shear)
    rotation = np.array([[np.cos(theta), -np.sin(theta)],
                         [np.sin(theta), np.cos(theta)]])
    shearing = np.array([[1.0, -np.sin(phi)],
                         [0.0, np.cos(phi)]])
    scaling = np.diag(zoom)
    flipping = np.diag([-1.0 if vflip else 1.0, -1.0 if hflip else 1.0])

    matrix = np.eye(3)
    matrix[:2, :2] = rotation @ shearing @ scaling @ flipping
    matrix[:2, 2] = shift
    return matrix


def make_transform(ndim: int = 2, angle: float = 0.0, shear: float = 0.0,
                   zoom: Tuple[float, float] = (1.0, 1.0), shift: Tuple[float, float] = (0.0, 0.0),
                   hflip: bool = False, vflip: bool = False, zflip: bool = False) -> AffineTransform:
    """Построение преобразования по явным параметрам"""
    planar = planar_matrix(angle, shear, zoom, shift, hflip, vflip)
    if ndim == 2:
        matrix = planar
    elif ndim == 3:
        matrix = np.eye(4)
        matrix[0, 0] = -1.0 if zflip else 1.0
        matrix[1:, 1:] = planar
    else:
        raise ShapeMismatch(f"Аугментация поддерживает 2D и 3D, получено ndim={ndim}")
    return AffineTransform(matrix=matrix, angle=angle, shear=shear, zoom=tuple(zoom),
                           shift=tuple(shift), hflip=hflip, vflip=vflip, zflip=zflip and ndim == 3)


def sample_transform(cfg: AugmentConfig, rng: np.random.Generator,
                     shape: Sequence[int]) -> AffineTransform:
    """
    Случайное преобразование из диапазонов конфигурации

    Все величины разыгрываются всегда в одном порядке, поэтому поток случайных чисел
    не зависит от того, какие преобразования включены.

    Args:
        cfg: диапазоны
        rng: генератор (задаёт детерминизм)
        shape: форма поля ((z,) y, x) для перевода сдвигов в пиксели
    """
    ndim = len(shape)
    height, width = shape[-2], shape[-1]

    angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    shear = rng.uniform(-cfg.shear_range, cfg.shear_range)
    zoom = (rng.uniform(1 - cfg.zoom_range, 1 + cfg.zoom_range),
            rng.uniform(1 - cfg.zoom_range, 1 + cfg.zoom_range))
    shift = (rng.uniform(-cfg.height_shift, cfg.height_shift) * height,
             rng.uniform(-cfg.width_shift, cfg.width_shift) * width)
    flips = rng.random(3) < 0.5

    if not cfg.enabled:
        return make_transform(ndim)
    return make_transform(
        ndim,
        angle=float(angle), shear=float(shear),
        zoom=(float(zoom[0]), float(zoom[1])),
        shift=(float(shift[0]), float(shift[1])),
        hflip=cfg.horizontal_flip and bool(flips[0]),
        vflip=cfg.vertical_flip and bool(flips[1]),
        zflip=cfg.z_flip and bool(flips[2]),
    )


def _centered(transform: AffineTransform, shape: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Линейная часть и смещение в индексных координатах: in = L @ out + offset"""
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2
    linear = transform.linear
    offset = center - linear @ center + transform.translation
    return linear, offset


def _gather(field: np.ndarray, linear: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Точная перестановка индексов для целочисленных преобразований; вне поля - 0"""
    linear = np.round(linear).astype(np.int64)
    offset = np.round(offset).astype(np.int64)
    grid = np.indices(field.shape).reshape(field.ndim, -1)
    source = linear @ grid + offset[:, None]
    inside = np.all((source >= 0) & (source < np.asarray(field.shape)[:, None]), axis=0)

    out = np.zeros(field.size, dtype=field.dtype)
    out[inside] = field[tuple(source[:, inside])]
    return out.reshape(field.shape)


def warp(field: np.ndarray, transform: AffineTransform, order: int) -> np.ndarray:
    """Деформация поля: order=1 - билинейная интерполяция, order=0 - ближайший сосед"""
    if field.ndim != transform.ndim:
        raise ShapeMismatch(f"Преобразование {transform.ndim}D к полю {field.shape}")
    linear, offset = _centered(transform, field.shape)
    if transform.is_integral() and np.allclose(offset, np.round(offset), atol=1e-9):
        return _gather(field, linear, offset)
    return ndi.affine_transform(field, linear, offset=offset, output_shape=field.shape,
                                order=order, mode='constant', cval=0.0)


def apply(transform: AffineTransform, image: np.ndarray,
          label: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Одно и то же преобразование для изображения (билинейно) и разметки (ближайший сосед)

    Raises:
        ShapeMismatch: формы изображения и разметки различаются
    """
    if image.shape != label.shape:
        raise ShapeMismatch(f"Формы изображения {image.shape} и разметки {label.shape} различаются")
    warped_image = warp(image.astype(np.float32, copy=False), transform, order=1)
    # ndimage не интерполирует bool: метки деформируются как uint8
    warped_label = warp((np.asarray(label) > 0).astype(np.uint8), transform, order=0)
    return warped_image.astype(np.float32, copy=False), warped_label.astype(label.dtype, copy=False)


def item_rng(cfg: AugmentConfig, epoch: int, index: int, seed: int = 0) -> np.random.Generator:
    """Генератор для элемента выборки: зависит только от (cfg.seed, seed, эпоха, индекс)"""
    return np.random.default_rng([cfg.seed, seed, epoch, index])


def augment_pair(image: np.ndarray, label: np.ndarray, cfg: AugmentConfig,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Случайная аугментация пары"""
    if not cfg.enabled:
        return image, label
    transform = sample_transform(cfg, rng, image.shape)
    return apply(transform, image, label)
