# tests/test_trainer.py

import numpy as np
import pandas as pd
import pytest

from fiberseg.architectures import ArchSpec, build
from fiberseg.augment import AugmentConfig
from fiberseg.errors import EmptyDataset, ShapeMismatch
from fiberseg.metrics import confusion, dice
from fiberseg.phantom import disk_pairs
from fiberseg.trainer import (
    HISTORY_COLUMNS, TrainConfig, extract_pairs, make_batch, split_dataset, train,
)


def tiny_net(seed=0):
    return build(ArchSpec(family='unet', dims=2, depth=1, base_channels=2, seed=seed))


@pytest.fixture
def pairs():
    return disk_pairs(6, size=16, radius=3.0, seed=2)


def test_resolve_family_defaults():
    assert TrainConfig().resolve('unet', 2).optimizer == 'adam'
    assert TrainConfig().resolve('unet', 2).batch_size == 4
    resolved = TrainConfig().resolve('tiramisu', 3)
    assert resolved.optimizer == 'rmsprop' and resolved.batch_size == 2
    assert TrainConfig(optimizer='adam', batch_size=8).resolve('tiramisu', 3).batch_size == 8


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer='sgd')
    with pytest.raises(ValueError):
        TrainConfig(loss='dice')
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)


def test_history_shape(pairs, logger):
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3)
    result = train(tiny_net(), pairs, cfg, validation=pairs[:2], logger=logger)

    # 6 примеров пакетами по 4: два шага на эпоху
    assert len(result.history.steps) == 4
    assert [e['epoch'] for e in result.history.epochs] == [0, 1]
    assert all('val_loss' in e for e in result.history.epochs)
    assert all(np.isfinite(result.history.losses))

    frame = result.history.to_frame()
    assert list(frame.columns) == HISTORY_COLUMNS
    assert frame['val_loss'].notna().sum() == 2
    assert result.manifest()['steps'] == 4


def test_history_csv(tmp_path, pairs, logger):
    result = train(tiny_net(), pairs, TrainConfig(epochs=1), logger=logger)
    path = tmp_path / 'out' / 'history.csv'
    result.history.write_csv(str(path))
    frame = pd.read_csv(path)
    assert len(frame) == 2
    assert list(frame.columns) == HISTORY_COLUMNS


def test_same_seed_same_history(pairs, logger):
    cfg = TrainConfig(epochs=2, batch_size=2, seed=5)
    augment = AugmentConfig(seed=5)
    a = train(tiny_net(1), pairs, cfg, augment=augment, logger=logger)
    b = train(tiny_net(1), pairs, cfg, augment=augment, logger=logger)
    assert a.history.losses == b.history.losses
    for (_, pa), (_, pb) in zip(a.network.named_parameters(), b.network.named_parameters()):
        np.testing.assert_array_equal(pa.value, pb.value)


def test_loss_decreases(pairs, logger):
    result = train(tiny_net(), pairs, TrainConfig(epochs=15, batch_size=6, learning_rate=1e-2,
                                                  shuffle=False), logger=logger)
    assert result.history.losses[-1] < result.history.losses[0]


def test_empty_dataset(logger):
    with pytest.raises(EmptyDataset):
        train(tiny_net(), [], logger=logger)


# ========== Выборки ==========

def test_make_batch_layout():
    x, y = make_batch([(np.zeros((4, 4)), np.ones((4, 4))), (np.ones((4, 4)), np.zeros((4, 4)))])
    assert x.shape == y.shape == (2, 1, 4, 4)
    assert x.dtype == np.float32
    with pytest.raises(ShapeMismatch):
        make_batch([(np.zeros((4, 4)), np.ones((4, 5)))])


def test_split_dataset(pairs):
    train_set, val = split_dataset(pairs, 0.34, seed=1)
    assert len(train_set) == 4 and len(val) == 2
    again, _ = split_dataset(pairs, 0.34, seed=1)
    assert all(a[0] is b[0] for a, b in zip(train_set, again))
    assert split_dataset(pairs, 0.0)[1] == []


def test_extract_pairs(rng):
    data = rng.random((8, 16, 16)).astype(np.float32)
    mask = data > 0.5
    flat = extract_pairs(data, mask, size=8, stride=8)
    assert len(flat) == 8 * 4
    assert np.shares_memory(flat[0][0], data)
    np.testing.assert_array_equal(flat[5][1], mask[1, 0:8, 8:16])

    assert len(extract_pairs(data, mask, size=8, stride=8, slices=[2])) == 4
    cubes = extract_pairs(data, mask, size=8, stride=8, dims=3)
    assert len(cubes) == 4 and cubes[0][0].shape == (8, 8, 8)

    with pytest.raises(ShapeMismatch):
        extract_pairs(data, mask[:4], size=8, stride=8)


@pytest.mark.slow
def test_unet_generalizes_to_held_out_disks(logger):
    # оценка на изображениях, которых сеть не видела при обучении
    train_set = disk_pairs(200, seed=0)
    held_out = disk_pairs(50, seed=1)
    net = build(ArchSpec(family='unet', dims=2, depth=2, base_channels=8, seed=0))
    result = train(net, train_set, TrainConfig(epochs=5, batch_size=4, learning_rate=1e-3), logger=logger)
    assert result.history.losses[-1] < 0.1

    x, y = make_batch(held_out)
    pred = result.network.forward(x) > 0.5
    assert dice(confusion(pred, y > 0)) >= 0.95
