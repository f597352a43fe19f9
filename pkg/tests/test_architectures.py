# tests/test_architectures.py

import numpy as np
import pytest

from fiberseg.architectures import (
    ARCH_IDS, ArchSpec, build, dropout_layers, load_weights, parameter_count, read_weights_header,
    save_weights,
)
from fiberseg.errors import ArchMismatch, CorruptFile, InvalidSpec, ShapeMismatch
from fiberseg.nn_engine import BinaryCrossEntropy, backward

TINY = {
    'unet2d': dict(depth=1, base_channels=4),
    'unet3d': dict(depth=1, base_channels=2),
    'tiramisu2d': dict(depth=1, growth_rate=2, layers_per_block=2, first_channels=3),
    'tiramisu3d': dict(depth=1, growth_rate=2, layers_per_block=2, first_channels=2),
}


def tiny(arch_id, **extra):
    return ArchSpec.from_arch_id(arch_id, **TINY[arch_id], **extra)


def sample_input(spec, rng, n=2, size=8):
    return rng.random((n, 1) + (size,) * spec.dims).astype(np.float32)


def test_unet_parameter_count():
    net = build(ArchSpec(family='unet', dims=2, depth=1, base_channels=4))
    assert parameter_count(net) == 1709


@pytest.mark.parametrize("arch_id", ARCH_IDS)
def test_output_shape_and_range(rng, arch_id):
    spec = tiny(arch_id)
    net = build(spec)
    x = sample_input(spec, rng, size=4 if spec.dims == 3 else 8)
    for training in (True, False):
        out = net.forward(x, training=training)
        assert out.shape == x.shape
        assert np.all((out > 0) & (out < 1))


def test_input_must_divide_by_pooling_factor(rng):
    net = build(ArchSpec(family='unet', dims=2, depth=2, base_channels=2))
    with pytest.raises(ShapeMismatch):
        net.forward(rng.random((1, 1, 6, 8)).astype(np.float32))


def test_same_seed_same_weights():
    a = build(tiny('tiramisu2d', seed=5))
    b = build(tiny('tiramisu2d', seed=5))
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.value, pb.value)


# ========== Правила dropout ==========

def test_unet2d_dropout_in_deepest_encoder_and_bottleneck():
    net = build(ArchSpec(family='unet', dims=2, depth=3, base_channels=2))
    layers = dropout_layers(net)
    assert [d.rate for d in layers] == [0.5, 0.5]
    deepest = net.body.inner.inner
    assert layers[0] is deepest.encoder.layers[-1]
    assert layers[1] is deepest.inner.layers[-1]


def test_unet3d_has_no_dropout():
    assert dropout_layers(build(tiny('unet3d'))) == []


def test_tiramisu_dropout_everywhere():
    spec = tiny('tiramisu2d')
    layers = dropout_layers(build(spec))
    # 3 dense-блока по 2 слоя и один переход вниз
    assert len(layers) == 3 * 2 + 1
    assert all(d.rate == pytest.approx(0.2) for d in layers)


def test_dropout_override():
    net = build(ArchSpec(family='unet', dims=2, depth=1, base_channels=2, dropout_rate=0.0))
    assert dropout_layers(net) == []


# ========== Спецификация ==========

def test_full_scale_defaults():
    assert ArchSpec.from_arch_id('tiramisu2d').depth == 5
    assert ArchSpec.from_arch_id('tiramisu3d').depth == 3
    assert ArchSpec.from_arch_id('unet3d').base_channels == 32
    assert ArchSpec.from_arch_id('unet2d', depth=2).depth == 2
    assert ArchSpec.from_arch_id('unet2d').arch_id == 'unet2d'


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        ArchSpec.from_arch_id('segnet2d')
    with pytest.raises(InvalidSpec):
        build(ArchSpec(family='resnet'))
    with pytest.raises(InvalidSpec):
        build(ArchSpec(depth=0))
    with pytest.raises(InvalidSpec):
        build(ArchSpec(dropout_rate=1.0))
    with pytest.raises(InvalidSpec):
        ArchSpec.from_dict({'family': 'unet', 'width': 3})


def test_tiramisu_gradients(rng):
    net = build(tiny('tiramisu2d', dropout_rate=0.0)).astype(np.float64)
    x = rng.random((1, 1, 4, 4))
    y = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
    loss = BinaryCrossEntropy()

    def f():
        return loss.forward(net.forward(x, training=True), y)

    f()
    grads = {name: g.copy() for name, g in backward(net, loss).items()}
    eps = 1e-6
    for name, param in net.named_parameters(trainable_only=True):
        index = tuple(rng.integers(0, s) for s in param.shape)
        saved = param.value[index]
        param.value[index] = saved + eps
        plus = f()
        param.value[index] = saved - eps
        minus = f()
        param.value[index] = saved
        numeric = (plus - minus) / (2 * eps)
        assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-8), name


# ========== Файл весов ==========

@pytest.mark.parametrize("arch_id", ARCH_IDS)
def test_weights_round_trip(tmp_path, rng, arch_id):
    spec = tiny(arch_id, seed=3)
    net = build(spec)
    x = sample_input(spec, rng, size=4 if spec.dims == 3 else 8)
    net.forward(x, training=True)  # обновляет скользящие средние BN

    path = tmp_path / f"{arch_id}.fsegnet"
    save_weights(net, str(path), training={'epochs': 1})
    loaded = load_weights(str(path))

    assert loaded.arch_id == arch_id
    for (name, a), (other, b) in zip(net.named_parameters(), loaded.named_parameters()):
        assert name == other
        assert a.value.tobytes() == b.value.tobytes()
    np.testing.assert_array_equal(net.forward(x), loaded.forward(x))


def test_weights_header(tmp_path):
    net = build(tiny('unet2d'))
    path = tmp_path / 'w.fsegnet'
    save_weights(net, str(path), training={'epochs': 2})
    header, body = read_weights_header(str(path))
    assert header['arch'] == 'unet2d'
    assert header['training'] == {'epochs': 2}
    assert len(body) == 4 * sum(p.size for _, p in net.named_parameters())


def test_load_checks_architecture(tmp_path):
    path = tmp_path / 'w.fsegnet'
    save_weights(build(tiny('unet2d', seed=1)), str(path))

    assert load_weights(str(path), tiny('unet2d', seed=9)).arch_id == 'unet2d'
    with pytest.raises(ArchMismatch):
        load_weights(str(path), tiny('unet3d'))
    with pytest.raises(ArchMismatch):
        load_weights(str(path), ArchSpec(family='unet', dims=2, depth=1, base_channels=8))


def test_corrupt_files(tmp_path):
    path = tmp_path / 'w.fsegnet'
    save_weights(build(tiny('unet2d')), str(path))
    data = path.read_bytes()

    truncated = tmp_path / 'truncated.fsegnet'
    truncated.write_bytes(data[:-10])
    with pytest.raises(CorruptFile):
        load_weights(str(truncated))

    padded = tmp_path / 'padded.fsegnet'
    padded.write_bytes(data + b'\x00' * 4)
    with pytest.raises(CorruptFile):
        load_weights(str(padded))

    foreign = tmp_path / 'foreign.fsegnet'
    foreign.write_bytes(b'NOTANET!' + data[8:])
    with pytest.raises(CorruptFile):
        load_weights(str(foreign))

    short_header = tmp_path / 'short.fsegnet'
    short_header.write_bytes(data[:20])
    with pytest.raises(CorruptFile):
        load_weights(str(short_header))
