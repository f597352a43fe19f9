# fiberseg/metrics.py

"""
Сравнение сегментации с эталоном: матрица ошибок, Dice, Matthews, ROC/AUC,
посрезовая статистика со средним и стандартным отклонением.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import auc as trapezoid_auc
from sklearn.metrics import roc_curve

from fiberseg.errors import ShapeMismatch, SingleClassGold
from fiberseg.logger import PipelineLogger, get_logger

ROC_MODES = ('per_slice', 'pooled', 'none')

# Коды карты категорий
CATEGORY_TN = 0
CATEGORY_TP = 1
CATEGORY_FP = 2
CATEGORY_FN = 3


@dataclass
class EvaluateConfig:
    """Параметры оценки"""
    threshold: float = 0.5
    ddof: int = 1
    roc: str = 'per_slice'
    roc_bins: int = 1000
    worst_slices: int = 5
    category_maps: bool = False

    def __post_init__(self):
        if not 0 <= self.threshold <= 1:
            raise ValueError(f"threshold в [0, 1], получено {self.threshold}")
        if self.roc not in ROC_MODES:
            raise ValueError(f"roc должен быть одним из {ROC_MODES}, получено {self.roc}")
        if self.ddof not in (0, 1):
            raise ValueError(f"ddof 0 или 1, получено {self.ddof}")


@dataclass(frozen=True)
class ConfusionCounts:
    """Матрица ошибок бинарной сегментации"""
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: 'ConfusionCounts') -> 'ConfusionCounts':
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def both_empty(self) -> bool:
        """Ни в предсказании, ни в эталоне нет переднего плана"""
        return self.tp + self.fp + self.fn == 0


def _binary(field_: np.ndarray) -> np.ndarray:
    return np.asarray(field_) > 0 if field_.dtype != np.bool_ else field_


def confusion(pred: np.ndarray, gold: np.ndarray) -> ConfusionCounts:
    """Подсчёт TP/FP/TN/FN (ненулевые значения - передний план)"""
    if pred.shape != gold.shape:
        raise ShapeMismatch(f"Формы предсказания {pred.shape} и эталона {gold.shape} различаются")
    p = _binary(pred)
    g = _binary(gold)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, tn=int(p.size) - tp - fp - fn, fn=fn)


def dice(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); для пустых предсказания и эталона - 1.0 (см. both_empty)"""
    if c.both_empty:
        return 1.0
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn)


def matthews(c: ConfusionCounts) -> float:
    """Коэффициент корреляции Мэтьюса; при нулевом множителе знаменателя - 0.0"""
    numerator = c.tp * c.tn - c.fp * c.fn
    product = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if product == 0:
        return 0.0
    return numerator / math.sqrt(product)


def threshold(pred: np.ndarray, t: float = 0.5) -> np.ndarray:
    """Бинаризация: волокно там, где значение строго больше t"""
    return np.asarray(pred) > t


def roc_auc(scores: np.ndarray, gold: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    ROC по всем различным порогам и площадь под ней (трапеции)

    Returns:
        (fpr, tpr, auc)

    Raises:
        SingleClassGold: эталон содержит один класс
    """
    if scores.shape != gold.shape:
        raise ShapeMismatch(f"Формы оценок {scores.shape} и эталона {gold.shape} различаются")
    g = _binary(gold).ravel()
    positives = int(np.count_nonzero(g))
    if positives == 0 or positives == g.size:
        raise SingleClassGold("Для ROC эталон должен содержать оба класса")

    fpr, tpr, _ = roc_curve(g, np.asarray(scores, dtype=np.float64).ravel(), drop_intermediate=False)
    return fpr, tpr, float(trapezoid_auc(fpr, tpr))


def category_map(pred: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Карта категорий воксела: 0 - TN, 1 - TP, 2 - FP, 3 - FN (uint8)"""
    if pred.shape != gold.shape:
        raise ShapeMismatch(f"Формы предсказания {pred.shape} и эталона {gold.shape} различаются")
    p = _binary(pred)
    g = _binary(gold)
    out = np.full(p.shape, CATEGORY_TN, dtype=np.uint8)
    out[p & g] = CATEGORY_TP
    out[p & ~g] = CATEGORY_FP
    out[~p & g] = CATEGORY_FN
    return out


# ========== Оценка стека ==========

@dataclass
class Summary:
    """Среднее и стандартное отклонение по срезам"""
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, values: List[float], ddof: int = 1) -> 'Summary':
        values = [v for v in values if v is not None]
        if not values:
            return cls(float('nan'), float('nan'), 0)
        std = float(np.std(values, ddof=ddof)) if len(values) > ddof else 0.0
        return cls(float(np.mean(values)), std, len(values))

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f} ± {100 * self.std:.2f} %"


@dataclass
class SliceMetrics:
    """Метрики одного среза"""
    z: int
    counts: ConfusionCounts
    dice: float
    matthews: float
    both_empty: bool
    auc: Optional[float] = None
    roc: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)


@dataclass
class MetricsReport:
    """
    Итог сравнения стеков

    Отвечает за:
    - посрезовые метрики и их сводку (среднее ± std)
    - суммарную матрицу ошибок
    - ROC по срезам или по всему объёму
    """
    slices: List[SliceMetrics]
    totals: ConfusionCounts
    dice: Summary
    matthews: Summary
    dice_nonempty: Summary
    matthews_nonempty: Summary
    auc: Optional[Summary] = None
    pooled_roc: Optional[Tuple[np.ndarray, np.ndarray, float]] = field(default=None, repr=False)
    threshold: float = 0.5
    ddof: int = 1

    @property
    def empty_slices(self) -> List[int]:
        return [s.z for s in self.slices if s.both_empty]

    def worst(self, n: int = 5) -> List[SliceMetrics]:
        """Срезы с наименьшим коэффициентом Мэтьюса"""
        return sorted(self.slices, key=lambda s: (s.matthews, s.z))[:n]

    def to_frame(self) -> pd.DataFrame:
        """Посрезовая таблица"""
        rows = []
        for s in self.slices:
            row = {'slice': s.z, 'dice': s.dice, 'matthews': s.matthews, 'both_empty': s.both_empty}
            row.update(asdict(s.counts))
            row['auc'] = s.auc
            rows.append(row)
        return pd.DataFrame(rows, columns=['slice', 'dice', 'matthews', 'both_empty',
                                           'tp', 'fp', 'tn', 'fn', 'auc'])

    def roc_frame(self) -> pd.DataFrame:
        """Точки ROC для построения графиков (по срезам или объединённая)"""
        frames = []
        if self.pooled_roc is not None:
            fpr, tpr, _ = self.pooled_roc
            frames.append(pd.DataFrame({'slice': -1, 'fpr': fpr, 'tpr': tpr}))
        for s in self.slices:
            if s.roc is not None:
                frames.append(pd.DataFrame({'slice': s.z, 'fpr': s.roc[0], 'tpr': s.roc[1]}))
        if not frames:
            return pd.DataFrame(columns=['slice', 'fpr', 'tpr'])
        return pd.concat(frames, ignore_index=True)

    def summary(self, worst: int = 5) -> Dict:
        """Сводка для JSON"""
        data = {
            'slices': len(self.slices),
            'threshold': self.threshold,
            'ddof': self.ddof,
            'dice': asdict(self.dice),
            'matthews': asdict(self.matthews),
            'dice_nonempty': asdict(self.dice_nonempty),
            'matthews_nonempty': asdict(self.matthews_nonempty),
            'empty_slices': self.empty_slices,
            'totals': asdict(self.totals),
            'worst_slices': [{'slice': s.z, 'matthews': s.matthews, 'dice': s.dice}
                             for s in self.worst(worst)],
        }
        if self.auc is not None:
            data['auc'] = asdict(self.auc)
        if self.pooled_roc is not None:
            data['pooled_auc'] = self.pooled_roc[2]
        return data


def _as_scores(raw: np.ndarray) -> np.ndarray:
    """Оценки в [0, 1]: вещественные - как есть, целые (маски, метки) - бинарно"""
    if np.issubdtype(raw.dtype, np.floating):
        return raw.astype(np.float64, copy=False)
    return (raw > 0).astype(np.float64)


def _evaluate_slice(z: int, pred_raw: np.ndarray, gold_raw: np.ndarray,
                    cfg: EvaluateConfig) -> Tuple[SliceMetrics, Optional[Tuple[np.ndarray, np.ndarray]]]:
    if pred_raw.shape != gold_raw.shape:
        raise ShapeMismatch(f"Срез {z}: формы {pred_raw.shape} и {gold_raw.shape} различаются")
    scores = _as_scores(pred_raw)
    gold = _binary(gold_raw)
    counts = confusion(threshold(scores, cfg.threshold), gold)
    metrics = SliceMetrics(z=z, counts=counts, dice=dice(counts), matthews=matthews(counts),
                           both_empty=counts.both_empty)

    if cfg.roc == 'per_slice':
        try:
            fpr, tpr, area = roc_auc(scores, gold)
            metrics.auc = area
            metrics.roc = (fpr, tpr)
        except SingleClassGold:
            pass

    pooled = None
    if cfg.roc == 'pooled':
        bins = np.minimum((scores * cfg.roc_bins).astype(np.int64), cfg.roc_bins - 1).ravel()
        g = gold.ravel()
        pooled = (np.bincount(bins[g], minlength=cfg.roc_bins),
                  np.bincount(bins[~g], minlength=cfg.roc_bins))
    return metrics, pooled


def pooled_roc_from_histograms(positives: np.ndarray, negatives: np.ndarray
                               ) -> Tuple[np.ndarray, np.ndarray, float]:
    """ROC объёма по гистограммам оценок положительных и отрицательных вокселов"""
    if positives.sum() == 0 or negatives.sum() == 0:
        raise SingleClassGold("Для ROC эталон должен содержать оба класса")
    # пороги по убыванию: корзины от верхней к нижней
    tps = np.concatenate([[0], np.cumsum(positives[::-1])])
    fps = np.concatenate([[0], np.cumsum(negatives[::-1])])
    tpr = tps / tps[-1]
    fpr = fps / fps[-1]
    return fpr, tpr, float(trapezoid_auc(fpr, tpr))


def evaluate_stack(pred_source, gold_source, cfg: Optional[EvaluateConfig] = None,
                   workers: int = 1, logger: Optional[PipelineLogger] = None,
                   category_writer=None) -> MetricsReport:
    """
    Посрезовое сравнение стеков предсказания и эталона

    Срезы читаются по одному, в памяти одновременно не больше workers срезов на пару.

    Args:
        pred_source: источник предсказаний (вероятности, маски или метки)
        gold_source: источник эталона (ненулевое - волокно)
        cfg: параметры оценки
        workers: число потоков
        logger: журнал
        category_writer: если задан, получает карту категорий каждого среза (метод write)

    Raises:
        ShapeMismatch: формы стеков различаются
    """
    cfg = cfg or EvaluateConfig()
    logger = logger or get_logger()
    if tuple(pred_source.shape) != tuple(gold_source.shape):
        raise ShapeMismatch(f"Формы стеков различаются: {tuple(pred_source.shape)} и {tuple(gold_source.shape)}")

    def job(z: int):
        pred_raw = pred_source.read_raw(z)
        gold_raw = gold_source.read_raw(z)
        result = _evaluate_slice(z, pred_raw, gold_raw, cfg)
        categories = None
        if category_writer is not None:
            categories = category_map(threshold(_as_scores(pred_raw), cfg.threshold), gold_raw)
        return result, categories

    slices = []
    totals = ConfusionCounts()
    pos_hist = neg_hist = None
    for start in range(0, pred_source.depth, workers):
        batch = range(start, min(start + workers, pred_source.depth))
        results = Parallel(n_jobs=workers, prefer='threads')(delayed(job)(z) for z in batch)
        for (metrics, pooled), categories in results:
            slices.append(metrics)
            totals = totals + metrics.counts
            logger.slice_evaluated(metrics.z, metrics.dice, metrics.matthews)
            if categories is not None:
                category_writer.write(categories)
            if pooled is not None:
                pos_hist = pooled[0] if pos_hist is None else pos_hist + pooled[0]
                neg_hist = pooled[1] if neg_hist is None else neg_hist + pooled[1]

    nonempty = [s for s in slices if not s.both_empty]
    report = MetricsReport(
        slices=slices,
        totals=totals,
        dice=Summary.of([s.dice for s in slices], cfg.ddof),
        matthews=Summary.of([s.matthews for s in slices], cfg.ddof),
        dice_nonempty=Summary.of([s.dice for s in nonempty], cfg.ddof),
        matthews_nonempty=Summary.of([s.matthews for s in nonempty], cfg.ddof),
        threshold=cfg.threshold,
        ddof=cfg.ddof,
    )
    if cfg.roc == 'per_slice':
        report.auc = Summary.of([s.auc for s in slices], cfg.ddof)
    elif cfg.roc == 'pooled':
        try:
            report.pooled_roc = pooled_roc_from_histograms(pos_hist, neg_hist)
            report.auc = Summary(report.pooled_roc[2], 0.0, 1)
        except SingleClassGold:
            logger.warning("ROC объёма не определена: эталон содержит один класс")
    return report
