# fiberseg/nn_engine.py

"""
Минимальный дифференцируемый движок на numpy.

Каждый модуль хранит в forward кэш, нужный для backward; градиенты накапливаются
в Parameter.grad. Тензоры имеют раскладку (N, C, *пространственные оси).
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from fiberseg.errors import NonFiniteValue, ShapeMismatch

DEFAULT_DTYPE = np.float32
BCE_EPSILON = 1e-7


def check_finite(array: np.ndarray, where: str):
    """NaN/Inf в тензоре - нарушение контракта"""
    if not np.all(np.isfinite(array)):
        raise NonFiniteValue(f"Нечисловые значения в {where}")


class Parameter:
    """Обучаемый тензор (или буфер, если trainable=False) с градиентом"""

    __slots__ = ('value', 'grad', 'trainable')

    def __init__(self, value: np.ndarray, trainable: bool = True):
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size


class Module:
    """
    Базовый модуль сети

    Отвечает за:
    - прямой проход с кэшированием (forward)
    - обратный проход с накоплением градиентов параметров (backward)
    - обход вложенных модулей и параметров по именам
    """

    kind = 'module'

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, training: bool = False):
        return self.forward(x, training)

    def children(self) -> List[Tuple[str, 'Module']]:
        return [(name, value) for name, value in vars(self).items() if isinstance(value, Module)]

    def own_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(name, value) for name, value in vars(self).items() if isinstance(value, Parameter)]

    def named_parameters(self, prefix: str = '', trainable_only: bool = False
                         ) -> Iterator[Tuple[str, Parameter]]:
        """Параметры в порядке построения: имена вида 'encoder.0.weight'"""
        for name, param in self.own_parameters():
            if trainable_only and not param.trainable:
                continue
            yield f"{prefix}{name}", param
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.", trainable_only)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters(trainable_only=True)]

    def modules(self) -> Iterator['Module']:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def zero_grad(self):
        for _, param in self.named_parameters():
            param.zero_grad()

    def astype(self, dtype) -> 'Module':
        """Приведение всех параметров и буферов к dtype (float64 - для проверки градиентов)"""
        for _, param in self.named_parameters():
            param.value = param.value.astype(dtype)
            param.grad = np.zeros_like(param.value)
        return self


class Sequential(Module):
    """Последовательная цепочка модулей"""

    kind = 'sequential'

    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


# ========== Свёртки ==========

def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """Инициализация He-uniform: U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))"""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DEFAULT_DTYPE)


class Conv(Module):
    """
    Свёртка с дополнением 'same' (нулями) и шагом 1

    Веса (out, in, k, ..., k), смещение (out,). dims = 2 или 3.
    """

    def __init__(self, dims: int, in_channels: int, out_channels: int, kernel: int = 3,
                 rng: Optional[np.random.Generator] = None):
        if dims not in (2, 3):
            raise ValueError(f"dims должно быть 2 или 3, получено {dims}")
        if kernel % 2 != 1:
            raise ValueError(f"Ядро 'same'-свёртки должно быть нечётным, получено {kernel}")
        rng = rng or np.random.default_rng(0)
        self.dims = dims
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = in_channels * kernel ** dims
        self.weight = Parameter(he_uniform(rng, (out_channels, in_channels) + (kernel,) * dims, fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=DEFAULT_DTYPE))
        self._cache = None

    @property
    def kind(self) -> str:
        return f"conv{self.dims}d"

    def _check(self, x: np.ndarray):
        if x.ndim != self.dims + 2 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"{self.kind}: ожидался вход (N, {self.in_channels}, {self.dims} осей), получено {x.shape}")

    def _windows(self, x: np.ndarray) -> np.ndarray:
        pad = self.kernel // 2
        widths = [(0, 0), (0, 0)] + [(pad, pad)] * self.dims
        padded = np.pad(x, widths)
        spatial = tuple(range(2, 2 + self.dims))
        # (N, C, *S, *K)
        return sliding_window_view(padded, (self.kernel,) * self.dims, axis=spatial)

    def forward(self, x, training=False):
        self._check(x)
        windows = self._windows(x)
        d = self.dims
        kernel_axes = list(range(2 + d, 2 + 2 * d))
        out = np.tensordot(windows, self.weight.value, axes=([1] + kernel_axes, [1] + list(range(2, 2 + d))))
        out = np.moveaxis(out, -1, 1) + self.bias.value.reshape((1, -1) + (1,) * d)
        self._cache = x
        return np.ascontiguousarray(out)

    def backward(self, dout):
        x = self._cache
        d = self.dims
        spatial = list(range(2, 2 + d))
        windows = self._windows(x)

        self.weight.grad += np.tensordot(dout, windows, axes=([0] + spatial, [0] + spatial))
        self.bias.grad += dout.sum(axis=tuple([0] + spatial))

        flipped = self.weight.value[(slice(None), slice(None)) + (slice(None, None, -1),) * d]
        dwindows = self._windows_of(dout)
        kernel_axes = list(range(2 + d, 2 + 2 * d))
        dx = np.tensordot(dwindows, flipped, axes=([1] + kernel_axes, [0] + spatial))
        return np.ascontiguousarray(np.moveaxis(dx, -1, 1))

    def _windows_of(self, dout: np.ndarray) -> np.ndarray:
        pad = self.kernel // 2
        widths = [(0, 0), (0, 0)] + [(pad, pad)] * self.dims
        return sliding_window_view(np.pad(dout, widths), (self.kernel,) * self.dims,
                                   axis=tuple(range(2, 2 + self.dims)))


class UpConv(Module):
    """Транспонированная свёртка 2x..x2 с шагом 2 (удваивает пространственные размеры)"""

    kind = 'upconv'

    def __init__(self, dims: int, in_channels: int, out_channels: int,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.dims = dims
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * 2 ** dims
        self.weight = Parameter(he_uniform(rng, (in_channels, out_channels) + (2,) * dims, fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=DEFAULT_DTYPE))
        self._cache = None

    def forward(self, x, training=False):
        d = self.dims
        if x.ndim != d + 2 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"upconv: ожидался вход (N, {self.in_channels}, ...), получено {x.shape}")
        n, spatial = x.shape[0], x.shape[2:]
        # (N, *S, O, *K) -> (N, O, S0, K0, S1, K1, ...)
        t = np.tensordot(x, self.weight.value, axes=([1], [0]))
        order = [0, d + 1]
        for i in range(d):
            order += [1 + i, d + 2 + i]
        out = t.transpose(order).reshape((n, self.out_channels) + tuple(2 * s for s in spatial))
        out = out + self.bias.value.reshape((1, -1) + (1,) * d)
        self._cache = x
        return np.ascontiguousarray(out)

    def backward(self, dout):
        x = self._cache
        d = self.dims
        n, spatial = x.shape[0], x.shape[2:]
        shape = (n, self.out_channels)
        for s in spatial:
            shape += (s, 2)
        r = dout.reshape(shape)
        # (N, O, S0, K0, ...) -> (N, *S, O, *K)
        order = [0] + [2 + 2 * i for i in range(d)] + [1] + [3 + 2 * i for i in range(d)]
        r = r.transpose(order)

        self.bias.grad += dout.sum(axis=tuple([0] + list(range(2, 2 + d))))
        self.weight.grad += np.tensordot(x, r, axes=([0] + list(range(2, 2 + d)),
                                                     [0] + list(range(1, 1 + d))))
        dx = np.tensordot(r, self.weight.value, axes=(list(range(d + 1, 2 * d + 2)),
                                                      [1] + list(range(2, 2 + d))))
        return np.ascontiguousarray(np.moveaxis(dx, -1, 1))


class MaxPool(Module):
    """Максимум по окнам 2x..x2 с шагом 2"""

    kind = 'maxpool'

    def __init__(self, dims: int):
        self.dims = dims
        self._cache = None

    def forward(self, x, training=False):
        d = self.dims
        spatial = x.shape[2:]
        if x.ndim != d + 2 or any(s % 2 for s in spatial):
            raise ShapeMismatch(f"maxpool: размеры {x.shape} должны быть чётными по {d} осям")
        n, c = x.shape[:2]
        shape = (n, c)
        for s in spatial:
            shape += (s // 2, 2)
        order = [0, 1] + [2 + 2 * i for i in range(d)] + [3 + 2 * i for i in range(d)]
        blocks = x.reshape(shape).transpose(order)
        pooled_shape = blocks.shape[:2 + d]
        blocks = blocks.reshape(pooled_shape + (2 ** d,))
        argmax = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, argmax, shape, order)
        return out

    def backward(self, dout):
        x_shape, argmax, shape, order = self._cache
        d = self.dims
        grad = np.zeros(argmax.shape + (2 ** d,), dtype=dout.dtype)
        np.put_along_axis(grad, argmax[..., None], dout[..., None], axis=-1)
        grad = grad.reshape(argmax.shape + (2,) * d)
        inverse = np.argsort(order)
        return np.ascontiguousarray(grad.transpose(inverse).reshape(x_shape))


# ========== Нормализация и регуляризация ==========

class BatchNorm(Module):
    """
    Пакетная нормализация по каналам

    При обучении - статистики пакета и обновление скользящих средних
    (running = momentum * running + (1 - momentum) * batch), при выводе - скользящие средние.
    """

    kind = 'batch_norm'

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-3):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.running_mean = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE), trainable=False)
        self.running_var = Parameter(np.ones(channels, dtype=DEFAULT_DTYPE), trainable=False)
        self._cache = None

    def _shape(self, x: np.ndarray) -> Tuple[int, ...]:
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, training=False):
        if x.ndim < 3 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"batch_norm: ожидалось {self.channels} каналов, получено {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        shape = self._shape(x)

        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean.value = (m * self.running_mean.value + (1 - m) * mean).astype(x.dtype)
            self.running_var.value = (m * self.running_var.value + (1 - m) * var).astype(x.dtype)
        else:
            mean = self.running_mean.value
            var = self.running_var.value

        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        self._cache = (xhat, inv_std, training, axes)
        return (self.gamma.value.reshape(shape) * xhat + self.beta.value.reshape(shape)).astype(x.dtype)

    def backward(self, dout):
        xhat, inv_std, training, axes = self._cache
        shape = self._shape(dout)

        self.gamma.grad += (dout * xhat).sum(axis=axes)
        self.beta.grad += dout.sum(axis=axes)

        dxhat = dout * self.gamma.value.reshape(shape)
        if not training:
            return dxhat * inv_std.reshape(shape)

        count = dout.size // dout.shape[1]
        sum_dxhat = dxhat.sum(axis=axes).reshape(shape)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes).reshape(shape)
        return (inv_std.reshape(shape) / count) * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)


class Dropout(Module):
    """Инвертированный dropout: при обучении выжившие значения делятся на (1 - rate)"""

    kind = 'dropout'

    def __init__(self, rate: float, seed: int = 0):
        if not 0 <= rate < 1:
            raise ValueError(f"Доля dropout должна быть в [0, 1), получено {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)
        self._mask = None

    def forward(self, x, training=False):
        if not training or self.rate == 0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = (keep / (1 - self.rate)).astype(x.dtype)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


# ========== Активации и объединение ==========

class ReLU(Module):
    kind = 'relu'

    def __init__(self):
        self._mask = None

    def forward(self, x, training=False):
        mask = x > 0
        self._mask = mask
        return np.where(mask, x, 0).astype(x.dtype)

    def backward(self, dout):
        return np.where(self._mask, dout, 0).astype(dout.dtype)


class Sigmoid(Module):
    kind = 'sigmoid'

    def __init__(self):
        self._out = None

    def forward(self, x, training=False):
        out = expit(x)
        self._out = out
        return out

    def backward(self, dout):
        return dout * self._out * (1 - self._out)


class Concat(Module):
    """Объединение тензоров по оси каналов; forward принимает список"""

    kind = 'concat'

    def __init__(self):
        self._splits = None

    def forward(self, xs, training=False):
        spatial = {x.shape[2:] for x in xs}
        batch = {x.shape[0] for x in xs}
        if len(spatial) != 1 or len(batch) != 1:
            raise ShapeMismatch(f"concat: несовместимые формы {[x.shape for x in xs]}")
        self._splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, dout):
        return np.split(dout, self._splits, axis=1)


# ========== Функция потерь ==========

class BinaryCrossEntropy:
    """Бинарная кросс-энтропия со срезкой предсказаний в [eps, 1 - eps]"""

    def __init__(self, eps: float = BCE_EPSILON):
        self.eps = eps
        self._cache = None

    def forward(self, pred: np.ndarray, target: np.ndarray) -> float:
        if pred.shape != target.shape:
            raise ShapeMismatch(f"bce: формы предсказания {pred.shape} и цели {target.shape}")
        p = np.clip(pred.astype(np.float64), self.eps, 1 - self.eps)
        y = target.astype(np.float64)
        loss = float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))
        if not np.isfinite(loss):
            raise NonFiniteValue("Нечисловое значение функции потерь")
        self._cache = (pred, p, y)
        return loss

    __call__ = forward

    def backward(self) -> np.ndarray:
        pred, p, y = self._cache
        inside = (pred > self.eps) & (pred < 1 - self.eps)
        grad = np.where(inside, (p - y) / (p * (1 - p)), 0.0) / p.size
        return grad.astype(pred.dtype)


def bce_loss(pred: np.ndarray, target: np.ndarray, eps: float = BCE_EPSILON) -> float:
    """Средняя бинарная кросс-энтропия"""
    return BinaryCrossEntropy(eps).forward(pred, target)


def pixel_accuracy(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    """Доля пикселей, где бинаризованное предсказание совпадает с целью"""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"accuracy: формы {pred.shape} и {target.shape}")
    return float(np.mean((pred > threshold) == (target > 0.5)))


def backward(network: Module, loss: BinaryCrossEntropy) -> Dict[str, np.ndarray]:
    """
    Обратный проход от функции потерь по всей сети

    Требует предшествующего forward(training=True) и loss.forward.

    Returns:
        имя параметра -> градиент
    """
    network.zero_grad()
    network.backward(loss.backward())
    grads = {}
    for name, param in network.named_parameters(trainable_only=True):
        check_finite(param.grad, f"градиенте {name}")
        grads[name] = param.grad
    return grads


# ========== Оптимизаторы ==========

@dataclass
class OptimizerState:
    """Состояние оптимизатора: номер шага и моменты по именам параметров"""
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def step_adam(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    Шаг Adam с коррекцией смещения моментов (параметры обновляются на месте)

    theta -= lr * m_hat / (sqrt(v_hat) + eps)
    """
    state.step += 1
    t = state.step
    for name, value in params.items():
        g = grads[name]
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.first[name] = m
        state.second[name] = v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype)
    return params, state


def step_rmsprop(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
                 lr: float, rho: float = 0.9, eps: float = 1e-8
                 ) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    Шаг RMSProp без центрирования и момента (параметры обновляются на месте)

    theta -= lr * g / (sqrt(v) + eps), v = rho * v + (1 - rho) * g^2
    """
    state.step += 1
    for name, value in params.items():
        g = grads[name]
        v = state.second.get(name)
        if v is None:
            v = np.zeros_like(value)
        v = rho * v + (1 - rho) * g * g
        state.second[name] = v
        value -= (lr * g / (np.sqrt(v) + eps)).astype(value.dtype)
    return params, state


OPTIMIZERS = {
    'adam': step_adam,
    'rmsprop': step_rmsprop,
}


class Optimizer:
    """Обёртка над шагами оптимизаторов для сети"""

    def __init__(self, name: str, lr: float):
        if name not in OPTIMIZERS:
            raise ValueError(f"Неизвестный оптимизатор: {name}")
        if lr < 0:
            raise ValueError(f"Скорость обучения не может быть отрицательной: {lr}")
        self.name = name
        self.lr = lr
        self.state = OptimizerState()

    def step(self, network: Module):
        params = {}
        grads = {}
        for name, param in network.named_parameters(trainable_only=True):
            params[name] = param.value
            grads[name] = param.grad
        OPTIMIZERS[self.name](params, grads, self.state, self.lr)
