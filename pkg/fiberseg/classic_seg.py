# fiberseg/classic_seg.py

"""
Классический (без обучения) конвейер сегментации волокон:
выравнивание гистограммы -> TV-фильтр Шамболя -> многоуровневый Otsu ->
бинаризация -> разделение касающихся волокон последовательными эрозиями (WUSEM).
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi
from skimage import exposure, morphology, segmentation

from fiberseg.errors import DegenerateHistogram


@dataclass
class ClassicParams:
    """Параметры классического конвейера"""
    tv_weight: float = 0.3
    otsu_classes: int = 4
    fiber_class: Optional[int] = None  # None - верхний класс
    wusem_initial_radius: int = 0
    wusem_delta_radius: int = 2
    watershed_line: bool = True
    histogram_bins: int = 256
    tv_max_iter: int = 200
    tv_tol: float = 2e-4
    roi_center: Optional[Tuple[float, float]] = None  # (строка, столбец)
    roi_radius: Optional[float] = None

    def __post_init__(self):
        if self.otsu_classes < 2:
            raise ValueError(f"otsu_classes >= 2, получено {self.otsu_classes}")
        if not 1 <= self.resolved_fiber_class <= self.otsu_classes:
            raise ValueError(f"fiber_class вне [1, {self.otsu_classes}]: {self.fiber_class}")
        if self.tv_weight < 0:
            raise ValueError(f"tv_weight >= 0, получено {self.tv_weight}")
        if self.wusem_delta_radius < 1:
            raise ValueError(f"wusem_delta_radius >= 1, получено {self.wusem_delta_radius}")
        if self.wusem_initial_radius < 0:
            raise ValueError(f"wusem_initial_radius >= 0, получено {self.wusem_initial_radius}")
        if self.histogram_bins < 2:
            raise ValueError(f"histogram_bins >= 2, получено {self.histogram_bins}")
        if (self.roi_center is None) != (self.roi_radius is None):
            raise ValueError("roi_center и roi_radius задаются вместе")

    @property
    def resolved_fiber_class(self) -> int:
        return self.otsu_classes if self.fiber_class is None else self.fiber_class


@dataclass
class TVResult:
    """Результат TV-фильтрации"""
    image: np.ndarray
    converged: bool
    iterations: int
    energy: float


# ========== Выравнивание гистограммы ==========

def equalize_histogram(field: np.ndarray, bins: int = 256) -> np.ndarray:
    """
    Выравнивание гистограммы: значение пикселя заменяется эмпирической функцией распределения

    Args:
        field: поле в [0, 1]
        bins: число корзин гистограммы

    Returns:
        поле в [0, 1] (float32), отображение монотонно
    """
    if bins < 2:
        raise ValueError(f"bins >= 2, получено {bins}")
    return exposure.equalize_hist(field, nbins=bins).astype(np.float32)


# ========== TV-фильтр ==========

def _gradient(u: np.ndarray) -> np.ndarray:
    """Прямые разности, на последнем элементе оси - ноль (условие Неймана)"""
    g = np.zeros((u.ndim,) + u.shape, dtype=u.dtype)
    for ax in range(u.ndim):
        head = [slice(None)] * u.ndim
        head[ax] = slice(0, -1)
        g[ax][tuple(head)] = np.diff(u, axis=ax)
    return g


def _divergence(p: np.ndarray) -> np.ndarray:
    """Дивергенция, сопряжённая с -_gradient"""
    d = np.zeros(p.shape[1:], dtype=p.dtype)
    for ax in range(p.shape[0]):
        d += p[ax]
        tail = [slice(None)] * d.ndim
        tail[ax] = slice(1, None)
        head = [slice(None)] * d.ndim
        head[ax] = slice(0, -1)
        d[tuple(tail)] -= p[ax][tuple(head)]
    return d


def total_variation(field: np.ndarray) -> float:
    """Изотропная полная вариация (прямые разности)"""
    g = _gradient(np.asarray(field, dtype=np.float64))
    return float(np.sqrt((g ** 2).sum(axis=0)).sum())


def denoise_tv_chambolle(field: np.ndarray, weight: float = 0.3,
                         max_iter: int = 200, tol: float = 2e-4) -> TVResult:
    """
    TV-фильтрация проекционным алгоритмом Шамболя

    Минимизирует ||u - f||^2 / (2 * weight) + TV(u) итерациями по двойственной переменной p,
    u = f - weight * div(p). Возвращается итерация с наименьшей энергией;
    начальная итерация (p = 0) совпадает с входом, поэтому TV(результата) <= TV(входа).

    Args:
        field: 2D или 3D поле
        weight: вес регуляризации (0 - без фильтрации)
        max_iter: максимум итераций
        tol: порог относительного изменения p

    Returns:
        TVResult с изображением float32 и флагом сходимости
    """
    if weight < 0:
        raise ValueError(f"weight >= 0, получено {weight}")

    f = np.asarray(field, dtype=np.float64)
    if weight == 0 or f.size == 0:
        return TVResult(image=f.astype(np.float32), converged=True, iterations=0,
                        energy=total_variation(f))

    tau = 1.0 / (2 * f.ndim)
    p = np.zeros((f.ndim,) + f.shape, dtype=np.float64)

    best_u = f
    best_energy = total_variation(f)
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        g = _gradient(_divergence(p) - f / weight)
        norm = np.sqrt((g ** 2).sum(axis=0))
        p_new = (p + tau * g) / (1.0 + tau * norm)

        change = np.linalg.norm(p_new - p) / max(np.linalg.norm(p_new), 1e-12)
        p = p_new

        u = f - weight * _divergence(p)
        energy = ((u - f) ** 2).sum() / (2 * weight) + total_variation(u)
        if energy < best_energy:
            best_u, best_energy = u, energy

        if change < tol:
            converged = True
            break

    return TVResult(image=best_u.astype(np.float32), converged=converged,
                    iterations=iterations, energy=float(best_energy))


# ========== Многоуровневый Otsu ==========

def multi_otsu_histogram(hist: np.ndarray, classes: int) -> Tuple[int, ...]:
    """
    Оптимальное разбиение гистограммы на classes смежных классов

    Динамическое программирование по таблице H(a, b) = S(a..b)^2 / P(a..b):
    максимум суммы по классам эквивалентен максимуму межклассовой дисперсии.

    Args:
        hist: счётчики корзин
        classes: число классов

    Returns:
        индексы последних корзин первых classes - 1 классов
    """
    hist = np.asarray(hist, dtype=np.float64)
    nbins = hist.size
    if np.count_nonzero(hist) < classes:
        raise DegenerateHistogram(
            f"Непустых корзин {np.count_nonzero(hist)} меньше, чем классов {classes}")

    prob = hist / hist.sum()
    levels = np.arange(nbins, dtype=np.float64)
    P = np.concatenate([[0.0], np.cumsum(prob)])
    S = np.concatenate([[0.0], np.cumsum(prob * levels)])

    # lut[a, b]: вклад класса из корзин a..b включительно
    mass = P[None, 1:] - P[:-1, None]
    moment = S[None, 1:] - S[:-1, None]
    with np.errstate(divide='ignore', invalid='ignore'):
        lut = np.where(mass > 0, moment ** 2 / mass, 0.0)
    lut[np.tril_indices(nbins, -1)] = -np.inf

    # best[k, j]: лучший вклад k+1 классов, покрывающих корзины 0..j
    best = np.full((classes, nbins), -np.inf)
    arg = np.zeros((classes, nbins), dtype=np.int64)
    best[0] = lut[0]
    for k in range(1, classes):
        for j in range(k, nbins):
            # последний класс - корзины i+1..j, предыдущие заканчиваются на i
            candidates = best[k - 1, k - 1:j] + lut[k:j + 1, j]
            i = int(np.argmax(candidates))
            best[k, j] = candidates[i]
            arg[k, j] = i + k - 1

    indices = []
    j = nbins - 1
    for k in range(classes - 1, 0, -1):
        j = arg[k, j]
        indices.append(int(j))
    return tuple(reversed(indices))


def between_class_variance(hist: np.ndarray, indices: Sequence[int]) -> float:
    """Межклассовая дисперсия разбиения гистограммы по индексам последних корзин"""
    hist = np.asarray(hist, dtype=np.float64)
    prob = hist / hist.sum()
    levels = np.arange(hist.size, dtype=np.float64)
    mu_total = (prob * levels).sum()
    bounds = [-1] + list(indices) + [hist.size - 1]
    variance = 0.0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        w = prob[lo + 1:hi + 1].sum()
        if w > 0:
            mu = (prob[lo + 1:hi + 1] * levels[lo + 1:hi + 1]).sum() / w
            variance += w * (mu - mu_total) ** 2
    return float(variance)


def multi_otsu(field: np.ndarray, classes: int = 4, bins: int = 256) -> np.ndarray:
    """
    Пороги многоуровневого Otsu

    Гистограмма строится на [min, max] поля; порог - правая граница последней корзины класса,
    так что пиксель, равный порогу, относится к верхнему классу.

    Returns:
        classes - 1 возрастающих порогов
    """
    values = np.asarray(field).ravel()
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        raise DegenerateHistogram(f"Постоянное поле ({lo}), классов {classes}")

    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    indices = multi_otsu_histogram(hist, classes)
    return np.array([edges[i + 1] for i in indices], dtype=np.float64)


def binarize_class(field: np.ndarray, thresholds: Sequence[float], fiber_class: int) -> np.ndarray:
    """
    Маска пикселей класса fiber_class (классы нумеруются с 1)

    Класс k - интервал [t_{k-1}, t_k); равенство порогу относит пиксель к верхнему классу.
    """
    thresholds = np.asarray(thresholds)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("Пороги должны быть упорядочены")
    classes = np.digitize(field, thresholds)
    return classes == (fiber_class - 1)


# ========== WUSEM ==========

def relabel_raster(labels: np.ndarray) -> np.ndarray:
    """Перенумерация меток 1..K в порядке первого появления при обходе по строкам"""
    flat = labels.ravel()
    values, first = np.unique(flat, return_index=True)
    keep = values != 0
    values, first = values[keep], first[keep]
    order = values[np.argsort(first, kind='stable')]

    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int32)
    lut[order] = np.arange(1, order.size + 1, dtype=np.int32)
    return lut[labels]


def wusem(mask: np.ndarray, initial_radius: int = 0, delta_radius: int = 2,
          watershed_line: bool = True) -> np.ndarray:
    """
    Разделение касающихся волокон: водораздел с маркерами из последовательных эрозий

    Маска эродируется дисками радиуса r = initial_radius, initial_radius + delta_radius, ...
    пока результат не пуст. Маркер - компонента самого глубокого уровня каждой ветви:
    компоненты более мелких эрозий добавляются, только если не содержат уже найденных маркеров.
    Затем водораздел по -расстоянию до фона внутри маски (4-связность).

    Returns:
        карта меток int32, 0 - фон или линия водораздела
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros(mask.shape, dtype=np.int32)
    if delta_radius < 1:
        raise ValueError(f"delta_radius >= 1, получено {delta_radius}")

    levels = []
    radius = initial_radius
    while True:
        eroded = mask if radius == 0 else ndi.binary_erosion(mask, structure=morphology.disk(radius))
        if not eroded.any():
            break
        levels.append(eroded)
        radius += delta_radius

    # Компоненты эрозий ищутся с 8-связностью: дискретная эрозия диска может дать диагональные пары
    full = ndi.generate_binary_structure(mask.ndim, mask.ndim)
    markers = np.zeros(mask.shape, dtype=np.int32)
    count = 0
    for eroded in reversed(levels):
        components, n = ndi.label(eroded, structure=full)
        if n == 0:
            continue
        taken = np.unique(components[markers > 0])
        fresh = np.setdiff1d(np.arange(1, n + 1), taken)
        if fresh.size == 0:
            continue
        lut = np.zeros(n + 1, dtype=np.int32)
        lut[fresh] = np.arange(count + 1, count + 1 + fresh.size, dtype=np.int32)
        new = lut[components]
        markers = np.where(new > 0, new, markers)
        count += fresh.size

    distance = ndi.distance_transform_edt(mask)
    labels = segmentation.watershed(-distance, markers, mask=mask, connectivity=1,
                                    watershed_line=watershed_line)
    return relabel_raster(labels.astype(np.int32))


# ========== Конвейер ==========

def roi_mask(shape: Tuple[int, int], center: Tuple[float, float], radius: float) -> np.ndarray:
    """Круговая область интереса"""
    rows, cols = np.ogrid[:shape[0], :shape[1]]
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius ** 2


def segment_classic(slice_: np.ndarray, params: Optional[ClassicParams] = None) -> np.ndarray:
    """
    Классическая сегментация среза

    Args:
        slice_: срез в [0, 1]
        params: параметры конвейера

    Returns:
        карта меток волокон (int32)
    """
    params = params or ClassicParams()

    equalized = equalize_histogram(slice_, params.histogram_bins)
    denoised = denoise_tv_chambolle(equalized, params.tv_weight,
                                    params.tv_max_iter, params.tv_tol).image
    try:
        thresholds = multi_otsu(denoised, params.otsu_classes, params.histogram_bins)
    except DegenerateHistogram:
        # Однородный срез: волокон нет
        return np.zeros(slice_.shape, dtype=np.int32)

    mask = binarize_class(denoised, thresholds, params.resolved_fiber_class)
    if params.roi_center is not None:
        mask &= roi_mask(mask.shape, params.roi_center, params.roi_radius)

    return wusem(mask, params.wusem_initial_radius, params.wusem_delta_radius, params.watershed_line)


def label_count(labels: np.ndarray) -> int:
    """Число меток в карте после перенумерации"""
    return int(np.count_nonzero(np.unique(labels)))
