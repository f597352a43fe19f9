# fiberseg/trainer.py

"""
Обучение сети на парах (изображение, бинарная разметка) с историей потерь и точности.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fiberseg.augment import AugmentConfig, augment_pair, item_rng
from fiberseg.errors import EmptyDataset, ShapeMismatch
from fiberseg.logger import PipelineLogger, get_logger
from fiberseg.nn_engine import BinaryCrossEntropy, Module, Optimizer, backward, pixel_accuracy

HISTORY_COLUMNS = ['step', 'epoch', 'loss', 'accuracy', 'val_loss', 'val_accuracy']

# Правило по семействам: U-net - Adam, Tiramisu - RMSProp
DEFAULT_OPTIMIZER = {'unet': 'adam', 'tiramisu': 'rmsprop'}

Pair = Tuple[np.ndarray, np.ndarray]


@dataclass
class TrainConfig:
    """Гиперпараметры обучения (None - значение по правилу семейства/размерности)"""
    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: Optional[int] = None
    optimizer: Optional[str] = None
    loss: str = 'bce'
    seed: int = 0
    shuffle: bool = True
    validation_fraction: float = 0.0

    def __post_init__(self):
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(f"validation_fraction в [0, 1), получено {self.validation_fraction}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate не может быть отрицательной: {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs >= 1, получено {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size >= 1, получено {self.batch_size}")
        if self.optimizer is not None and self.optimizer not in ('adam', 'rmsprop'):
            raise ValueError(f"Неизвестный оптимизатор: {self.optimizer}")
        if self.loss != 'bce':
            raise ValueError(f"Поддерживается только loss=bce, получено {self.loss}")

    def resolve(self, family: str, dims: int) -> 'TrainConfig':
        """Конфигурация с подставленными оптимизатором и размером пакета"""
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size or (4 if dims == 2 else 2),
            optimizer=self.optimizer or DEFAULT_OPTIMIZER.get(family, 'adam'),
            loss=self.loss,
            seed=self.seed,
            shuffle=self.shuffle,
            validation_fraction=self.validation_fraction,
        )


@dataclass
class TrainingHistory:
    """История обучения: по шагам и по эпохам"""
    steps: List[Dict] = field(default_factory=list)
    epochs: List[Dict] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [s['loss'] for s in self.steps]

    def to_frame(self) -> pd.DataFrame:
        """
        Таблица истории: строка на шаг; валидационные метрики эпохи
        записываются в последнюю строку эпохи
        """
        rows = [dict(s, val_loss=None, val_accuracy=None) for s in self.steps]
        last_row = {}
        for i, s in enumerate(self.steps):
            last_row[s['epoch']] = i
        for e in self.epochs:
            if e['epoch'] in last_row:
                rows[last_row[e['epoch']]]['val_loss'] = e.get('val_loss')
                rows[last_row[e['epoch']]]['val_accuracy'] = e.get('val_accuracy')
        return pd.DataFrame(rows, columns=HISTORY_COLUMNS)

    def write_csv(self, path: str):
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(f".{target.name}.tmp")
        self.to_frame().to_csv(tmp, index=False)
        tmp.replace(target)


@dataclass
class TrainingResult:
    network: Module
    history: TrainingHistory
    config: TrainConfig

    def manifest(self) -> Dict:
        """Сводка для манифеста запуска"""
        last = self.history.epochs[-1] if self.history.epochs else {}
        return {'config': asdict(self.config), 'steps': len(self.history.steps), 'final': last}


def _as_sample(x: np.ndarray, dims: int) -> np.ndarray:
    """(*S) или (1, *S) -> (1, *S)"""
    return x if x.ndim == dims + 1 else x[None]


def make_batch(pairs: Sequence[Pair], dims: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Пакет (N, 1, *S) из списка пар"""
    xs = np.stack([_as_sample(np.asarray(x, dtype=np.float32), dims) for x, _ in pairs])
    ys = np.stack([_as_sample((np.asarray(y) > 0).astype(np.float32), dims) for _, y in pairs])
    if xs.shape != ys.shape:
        raise ShapeMismatch(f"Формы входов {xs.shape} и разметки {ys.shape} различаются")
    return xs, ys


def evaluate_batches(network: Module, dataset: Sequence[Pair], batch_size: int, dims: int = 2) -> Tuple[float, float]:
    """Средние потери и точность в режиме вывода (взвешены по числу образцов)"""
    loss_fn = BinaryCrossEntropy()
    total_loss = total_acc = 0.0
    for start in range(0, len(dataset), batch_size):
        x, y = make_batch(dataset[start:start + batch_size], dims)
        pred = network.forward(x, training=False)
        total_loss += loss_fn(pred, y) * len(x)
        total_acc += pixel_accuracy(pred, y) * len(x)
    return total_loss / len(dataset), total_acc / len(dataset)


def train(network: Module, dataset: Sequence[Pair], config: Optional[TrainConfig] = None,
          validation: Optional[Sequence[Pair]] = None, augment: Optional[AugmentConfig] = None,
          logger: Optional[PipelineLogger] = None) -> TrainingResult:
    """
    Обучение сети

    Порядок примеров в эпохе и аугментация определяются только seed, номером эпохи
    и индексом примера, поэтому два запуска с одним seed дают одинаковую историю.

    Args:
        network: сеть (построенная architectures.build или совместимая)
        dataset: пары (изображение, разметка) одинаковой формы
        config: гиперпараметры
        validation: отложенная выборка для метрик по эпохам
        augment: аугментация на лету (новая в каждой эпохе)
        logger: журнал

    Raises:
        EmptyDataset: выборка пуста
    """
    logger = logger or get_logger()
    if len(dataset) == 0:
        raise EmptyDataset("Обучающая выборка пуста")

    spec = getattr(network, 'spec', None)
    family = spec.family if spec is not None else 'unet'
    dims = spec.dims if spec is not None else np.asarray(dataset[0][0]).ndim
    config = (config or TrainConfig()).resolve(family, dims)

    optimizer = Optimizer(config.optimizer, config.learning_rate)
    loss_fn = BinaryCrossEntropy()
    history = TrainingHistory()
    arch = getattr(network, 'arch_id', type(network).__name__)
    logger.train_start(arch, sum(p.size for p in network.parameters()), len(dataset))

    step = 0
    for epoch in range(config.epochs):
        order = np.arange(len(dataset))
        if config.shuffle:
            order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))

        epoch_loss = epoch_acc = 0.0
        seen = 0
        for start in range(0, len(order), config.batch_size):
            pairs = []
            for i in order[start:start + config.batch_size]:
                x, y = dataset[i]
                if augment is not None and augment.enabled:
                    x, y = augment_pair(np.asarray(x), np.asarray(y), augment,
                                        item_rng(augment, epoch, int(i), config.seed))
                pairs.append((x, y))
            x, y = make_batch(pairs, dims)

            pred = network.forward(x, training=True)
            loss = loss_fn(pred, y)
            accuracy = pixel_accuracy(pred, y)
            backward(network, loss_fn)
            optimizer.step(network)

            step += 1
            history.steps.append({'step': step, 'epoch': epoch, 'loss': loss, 'accuracy': accuracy})
            logger.train_step(step, epoch, loss, accuracy)
            epoch_loss += loss * len(x)
            epoch_acc += accuracy * len(x)
            seen += len(x)

        record = {'epoch': epoch, 'loss': epoch_loss / seen, 'accuracy': epoch_acc / seen}
        if validation:
            record['val_loss'], record['val_accuracy'] = evaluate_batches(
                network, validation, config.batch_size, dims)
        history.epochs.append(record)
        logger.epoch_end(epoch, record['loss'], record['accuracy'],
                         record.get('val_loss'), record.get('val_accuracy'))

    return TrainingResult(network=network, history=history, config=config)


def split_dataset(dataset: Sequence[Pair], validation_fraction: float,
                  seed: int = 0) -> Tuple[List[Pair], List[Pair]]:
    """Случайное разделение на обучающую и отложенную выборки"""
    if not 0 <= validation_fraction < 1:
        raise ValueError(f"validation_fraction в [0, 1), получено {validation_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = int(round(len(dataset) * validation_fraction))
    val = [dataset[i] for i in sorted(order[:n_val])]
    train_set = [dataset[i] for i in sorted(order[n_val:])]
    return train_set, val


def extract_pairs(data: np.ndarray, mask: np.ndarray, size: int, stride: int, dims: int = 2,
                  slices: Optional[Sequence[int]] = None) -> List[Pair]:
    """
    Обучающие пары (фрагмент, маска) из объёма (z, y, x)

    2D - квадраты size x size из срезов (все или slices); 3D - кубы size^3. Шаг сетки stride.
    Фрагменты - представления исходных массивов.
    """
    if data.shape != mask.shape:
        raise ShapeMismatch(f"Формы объёма {data.shape} и разметки {mask.shape} различаются")
    depth, height, width = data.shape
    rows = range(0, height - size + 1, stride)
    cols = range(0, width - size + 1, stride)
    pairs = []
    if dims == 2:
        for z in (slices if slices is not None else range(depth)):
            for r in rows:
                for c in cols:
                    pairs.append((data[z, r:r + size, c:c + size], mask[z, r:r + size, c:c + size]))
    else:
        for z in range(0, depth - size + 1, stride):
            for r in rows:
                for c in cols:
                    window = (slice(z, z + size), slice(r, r + size), slice(c, c + size))
                    pairs.append((data[window], mask[window]))
    return pairs
