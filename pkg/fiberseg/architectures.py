# fiberseg/architectures.py

"""
Построители четырёх сетей: U-net и Tiramisu (FC-DenseNet), 2D и 3D.
Масштаб (глубина, ширина) задаётся ArchSpec, так что полноразмерные и учебные
варианты строятся одним кодом. Здесь же - формат файла весов.
"""

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from fiberseg.errors import (
    ArchMismatch, CorruptFile, InvalidSpec, IoError, NonFiniteValue, ShapeMismatch,
)
from fiberseg.nn_engine import (
    BatchNorm, Concat, Conv, Dropout, MaxPool, Module, ReLU, Sequential, Sigmoid, UpConv,
    check_finite,
)

FAMILIES = ('unet', 'tiramisu')
ARCH_IDS = ('unet2d', 'unet3d', 'tiramisu2d', 'tiramisu3d')

WEIGHTS_MAGIC = b"FSEGNET1"
WEIGHTS_FORMAT_VERSION = 1


@dataclass
class ArchSpec:
    """
    Описание архитектуры

    dropout_rate = None означает правило по семейству:
    2D U-net - 0.5 в последнем блоке анализа и в бутылочном горлышке,
    3D U-net - без dropout, Tiramisu - 0.2 в каждом слое dense-блоков.
    """
    family: str = 'unet'
    dims: int = 2
    depth: int = 4
    base_channels: int = 64
    growth_rate: int = 16
    layers_per_block: int = 4
    first_channels: int = 48
    dropout_rate: Optional[float] = None
    batch_norm: bool = True
    momentum: float = 0.99
    seed: int = 0

    @property
    def arch_id(self) -> str:
        return f"{self.family}{self.dims}d"

    @property
    def resolved_dropout(self) -> float:
        if self.dropout_rate is not None:
            return self.dropout_rate
        if self.family == 'tiramisu':
            return 0.2
        return 0.5 if self.dims == 2 else 0.0

    def validate(self):
        if self.family not in FAMILIES:
            raise InvalidSpec(f"Неизвестное семейство: {self.family}")
        if self.dims not in (2, 3):
            raise InvalidSpec(f"dims должно быть 2 или 3, получено {self.dims}")
        if self.depth < 1:
            raise InvalidSpec(f"depth >= 1, получено {self.depth}")
        for name in ('base_channels', 'growth_rate', 'layers_per_block', 'first_channels'):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} >= 1, получено {getattr(self, name)}")
        if not 0 <= self.resolved_dropout < 1:
            raise InvalidSpec(f"dropout_rate в [0, 1), получено {self.dropout_rate}")

    @classmethod
    def from_arch_id(cls, arch_id: str, **overrides) -> 'ArchSpec':
        """Спецификация полного масштаба по идентификатору, с заменой отдельных полей"""
        if arch_id not in ARCH_IDS:
            raise InvalidSpec(f"Неизвестная архитектура: {arch_id}")
        family, dims = arch_id[:-2], int(arch_id[-2])
        defaults: Dict[str, Any] = {'family': family, 'dims': dims}
        if family == 'unet':
            defaults.update(depth=4, base_channels=64 if dims == 2 else 32)
        else:
            defaults.update(depth=5 if dims == 2 else 3, growth_rate=16, layers_per_block=4)
        defaults.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**defaults)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ArchSpec':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSpec(f"Неизвестные поля архитектуры: {sorted(unknown)}")
        return cls(**data)


# ========== Блоки ==========

def conv_block(spec: ArchSpec, rng: np.random.Generator, in_ch: int, out_ch: int,
               dropout: float = 0.0) -> Sequential:
    """Conv3 - BN - ReLU - Conv3 - BN - ReLU [- Dropout]"""
    layers = []
    for c_in in (in_ch, out_ch):
        layers.append(Conv(spec.dims, c_in, out_ch, 3, rng))
        if spec.batch_norm:
            layers.append(BatchNorm(out_ch, spec.momentum))
        layers.append(ReLU())
    if dropout > 0:
        layers.append(Dropout(dropout, seed=int(rng.integers(2 ** 31))))
    return Sequential(*layers)


class UNetLevel(Module):
    """
    Уровень U-net: блок анализа, спуск, вложенный уровень (или бутылочное горлышко),
    подъём транспонированной свёрткой, объединение с пропуском и блок синтеза
    """

    kind = 'unet_level'

    def __init__(self, encoder: Module, inner: Module, up: UpConv, decoder: Module, dims: int):
        self.encoder = encoder
        self.pool = MaxPool(dims)
        self.inner = inner
        self.up = up
        self.concat = Concat()
        self.decoder = decoder

    def forward(self, x, training=False):
        skip = self.encoder.forward(x, training)
        deep = self.inner.forward(self.pool.forward(skip, training), training)
        merged = self.concat.forward([skip, self.up.forward(deep, training)], training)
        return self.decoder.forward(merged, training)

    def backward(self, dout):
        dskip, dup = self.concat.backward(self.decoder.backward(dout))
        ddeep = self.inner.backward(self.up.backward(dup))
        return self.encoder.backward(dskip + self.pool.backward(ddeep))


class DenseLayer(Sequential):
    """BN - ReLU - Conv3 - Dropout, выдаёт growth_rate новых каналов"""

    kind = 'dense_layer'


class DenseBlock(Module):
    """
    Dense-блок: каждый слой получает объединение входа и всех предыдущих выходов

    keep_input=True - на выходе вход и все новые каналы, иначе только новые.
    """

    kind = 'dense_block'

    def __init__(self, spec: ArchSpec, rng: np.random.Generator, in_ch: int, keep_input: bool):
        self.keep_input = keep_input
        self.in_channels = in_ch
        self.growth = spec.growth_rate
        rate = spec.resolved_dropout
        layers = []
        channels = in_ch
        for _ in range(spec.layers_per_block):
            parts = []
            if spec.batch_norm:
                parts.append(BatchNorm(channels, spec.momentum))
            parts += [ReLU(), Conv(spec.dims, channels, spec.growth_rate, 3, rng)]
            if rate > 0:
                parts.append(Dropout(rate, seed=int(rng.integers(2 ** 31))))
            layers.append(DenseLayer(*parts))
            channels += spec.growth_rate
        self.layers = Sequential(*layers)

    @property
    def out_channels(self) -> int:
        new = self.growth * len(self.layers)
        return self.in_channels + new if self.keep_input else new

    def forward(self, x, training=False):
        features = x
        for layer in self.layers.layers:
            new = layer.forward(features, training)
            features = np.concatenate([features, new], axis=1)
        self._in_channels_seen = x.shape[1]
        return features if self.keep_input else features[:, x.shape[1]:]

    def backward(self, dout):
        c0 = self._in_channels_seen
        total = c0 + self.growth * len(self.layers)
        if self.keep_input:
            dfeatures = dout.copy()
        else:
            dfeatures = np.zeros((dout.shape[0], total) + dout.shape[2:], dtype=dout.dtype)
            dfeatures[:, c0:] = dout

        for i in reversed(range(len(self.layers))):
            start = c0 + i * self.growth
            dnew = dfeatures[:, start:start + self.growth]
            dinput = self.layers.layers[i].backward(dnew)
            dfeatures = dfeatures[:, :start] + dinput
        return dfeatures


def transition_down(spec: ArchSpec, rng: np.random.Generator, channels: int) -> Sequential:
    """BN - ReLU - Conv1 - Dropout - MaxPool"""
    parts = []
    if spec.batch_norm:
        parts.append(BatchNorm(channels, spec.momentum))
    parts += [ReLU(), Conv(spec.dims, channels, channels, 1, rng)]
    if spec.resolved_dropout > 0:
        parts.append(Dropout(spec.resolved_dropout, seed=int(rng.integers(2 ** 31))))
    parts.append(MaxPool(spec.dims))
    return Sequential(*parts)


class TiramisuLevel(UNetLevel):
    """Уровень Tiramisu: та же схема, что у U-net, с dense-блоками вместо пар свёрток"""

    kind = 'tiramisu_level'

    def __init__(self, encoder: Module, down: Module, inner: Module, up: UpConv, decoder: Module):
        self.encoder = encoder
        self.pool = down
        self.inner = inner
        self.up = up
        self.concat = Concat()
        self.decoder = decoder


# ========== Сеть ==========

class Network(Module):
    """
    Сеть сегментации: тело и голова Conv1 -> 1 канал -> сигмоида

    Отвечает за:
    - прямой проход по тайлу (N, 1, *S) -> (N, 1, *S) со значениями в (0, 1)
    - проверку конечности выхода
    """

    kind = 'network'

    def __init__(self, spec: ArchSpec, stem: Module, body: Module, body_channels: int,
                 rng: np.random.Generator):
        self.spec = spec
        self.stem = stem
        self.body = body
        self.head = Conv(spec.dims, body_channels, 1, 1, rng)
        self.sigmoid = Sigmoid()

    @property
    def arch_id(self) -> str:
        return self.spec.arch_id

    @property
    def dims(self) -> int:
        return self.spec.dims

    def forward(self, x, training=False):
        multiple = 2 ** self.spec.depth
        if any(s % multiple for s in x.shape[2:]):
            raise ShapeMismatch(f"Размеры входа {x.shape[2:]} должны делиться на {multiple}")
        out = self.stem.forward(x, training)
        out = self.body.forward(out, training)
        out = self.sigmoid.forward(self.head.forward(out, training), training)
        check_finite(out, f"выходе {self.arch_id}")
        return out

    def backward(self, dout):
        dout = self.head.backward(self.sigmoid.backward(dout))
        return self.stem.backward(self.body.backward(dout))


def _build_unet(spec: ArchSpec, rng: np.random.Generator) -> Network:
    rate = spec.resolved_dropout

    def level(i: int, in_ch: int) -> UNetLevel:
        ch = spec.base_channels * 2 ** i
        last = i == spec.depth - 1
        encoder = conv_block(spec, rng, in_ch, ch, rate if last else 0.0)
        if last:
            inner = conv_block(spec, rng, ch, 2 * ch, rate)
        else:
            inner = level(i + 1, ch)
        up = UpConv(spec.dims, 2 * ch, ch, rng)
        decoder = conv_block(spec, rng, 2 * ch, ch)
        return UNetLevel(encoder, inner, up, decoder, spec.dims)

    body = level(0, 1)
    return Network(spec, Sequential(), body, spec.base_channels, rng)


def _build_tiramisu(spec: ArchSpec, rng: np.random.Generator) -> Network:
    grown = spec.growth_rate * spec.layers_per_block

    def level(i: int, in_ch: int) -> Tuple[TiramisuLevel, int]:
        encoder = DenseBlock(spec, rng, in_ch, keep_input=True)
        skip_ch = encoder.out_channels
        down = transition_down(spec, rng, skip_ch)
        if i == spec.depth - 1:
            inner, inner_ch = DenseBlock(spec, rng, skip_ch, keep_input=False), grown
        else:
            inner, inner_ch = level(i + 1, skip_ch)
        up = UpConv(spec.dims, inner_ch, inner_ch, rng)
        decoder = DenseBlock(spec, rng, skip_ch + inner_ch, keep_input=(i == 0))
        return TiramisuLevel(encoder, down, inner, up, decoder), decoder.out_channels

    stem = Sequential(Conv(spec.dims, 1, spec.first_channels, 3, rng))
    body, out_ch = level(0, spec.first_channels)
    return Network(spec, stem, body, out_ch, rng)


def build(spec: ArchSpec) -> Network:
    """
    Построение сети по спецификации (веса инициализируются из spec.seed)

    Raises:
        InvalidSpec: некорректная спецификация
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.family == 'unet':
        return _build_unet(spec, rng)
    return _build_tiramisu(spec, rng)


def parameter_count(network: Module) -> int:
    """Число обучаемых скаляров"""
    return int(sum(p.size for p in network.parameters()))


def dropout_layers(network: Module) -> list:
    """Все слои dropout сети в порядке построения"""
    return [m for m in network.modules() if isinstance(m, Dropout)]


# ========== Файл весов ==========

def save_weights(network: Network, path: str, training: Optional[Dict[str, Any]] = None):
    """
    Сохранение весов

    Формат: b"FSEGNET1", длина заголовка (uint64 LE), JSON-заголовок (архитектура,
    спецификация, список тензоров), затем тензоры float32 LE в порядке заголовка.
    Запись идёт во временный файл с последующим переименованием.
    """
    tensors = list(network.named_parameters())
    header = {
        'format_version': WEIGHTS_FORMAT_VERSION,
        'arch': network.arch_id,
        'spec': asdict(network.spec),
        'seed': network.spec.seed,
        'training': training or {},
        'tensors': [{'name': name, 'shape': list(p.shape), 'trainable': p.trainable}
                    for name, p in tensors],
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode('utf-8')

    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
        with os.fdopen(fd, 'wb') as f:
            f.write(WEIGHTS_MAGIC)
            f.write(struct.pack('<Q', len(header_bytes)))
            f.write(header_bytes)
            for _, p in tensors:
                f.write(np.ascontiguousarray(p.value, dtype='<f4').tobytes())
        os.replace(tmp, target)
    except OSError as e:
        raise IoError(f"Не удалось записать веса {path}: {e}") from e


def read_weights_header(path: str) -> Tuple[Dict[str, Any], bytes]:
    """Чтение заголовка и тела файла весов с проверкой сигнатуры и длины"""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Не удалось прочитать веса {path}: {e}") from e

    if len(data) < len(WEIGHTS_MAGIC) + 8 or not data.startswith(WEIGHTS_MAGIC):
        raise CorruptFile(f"{path}: неверная сигнатура файла весов")
    (length,) = struct.unpack('<Q', data[8:16])
    if 16 + length > len(data):
        raise CorruptFile(f"{path}: заголовок обрезан")
    try:
        header = json.loads(data[16:16 + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"{path}: заголовок не читается: {e}") from e
    return header, data[16 + length:]


def _comparable(spec: ArchSpec) -> Dict[str, Any]:
    """Поля, определяющие структуру сети (seed влияет только на инициализацию)"""
    data = asdict(spec)
    data.pop('seed')
    return data


def load_weights(path: str, spec: Optional[ArchSpec] = None) -> Network:
    """
    Загрузка сети из файла весов

    Args:
        path: путь к файлу
        spec: ожидаемая спецификация; если задана, архитектура файла должна совпадать

    Raises:
        ArchMismatch: файл другой архитектуры
        CorruptFile: файл повреждён или обрезан
    """
    header, body = read_weights_header(path)
    try:
        stored = ArchSpec.from_dict(header['spec'])
        entries = header['tensors']
    except (KeyError, TypeError, InvalidSpec) as e:
        raise CorruptFile(f"{path}: некорректный заголовок: {e}") from e

    if spec is not None:
        if spec.arch_id != header.get('arch'):
            raise ArchMismatch(f"{path}: файл архитектуры {header.get('arch')}, запрошена {spec.arch_id}")
        if _comparable(spec) != _comparable(stored):
            raise ArchMismatch(f"{path}: параметры архитектуры отличаются от запрошенных")

    network = build(stored)
    params = dict(network.named_parameters())
    if [e['name'] for e in entries] != list(params):
        raise CorruptFile(f"{path}: список тензоров не соответствует архитектуре {stored.arch_id}")

    offset = 0
    for entry in entries:
        param = params[entry['name']]
        if tuple(entry['shape']) != param.shape:
            raise CorruptFile(f"{path}: тензор {entry['name']} формы {entry['shape']}, ожидалась {param.shape}")
        nbytes = 4 * param.size
        if offset + nbytes > len(body):
            raise CorruptFile(f"{path}: файл обрезан на тензоре {entry['name']}")
        param.value = np.frombuffer(body, dtype='<f4', count=param.size, offset=offset
                                    ).reshape(param.shape).astype(np.float32)
        param.grad = np.zeros_like(param.value)
        offset += nbytes
    if offset != len(body):
        raise CorruptFile(f"{path}: лишние {len(body) - offset} байт после тензоров")

    try:
        for name, param in params.items():
            check_finite(param.value, f"тензоре {name}")
    except NonFiniteValue as e:
        raise CorruptFile(f"{path}: {e}") from e
    return network
