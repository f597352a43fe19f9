# tests/test_main.py

import numpy as np
import pandas as pd
import pytest

from fiberseg.architectures import ArchSpec, build, save_weights
from fiberseg.main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from fiberseg.reports import read_json
from fiberseg.volume_io import read_volume

QUIET = ['--log-level', 'WARNING']
TINY_TILES = ['--tile-size', '24', '--stride', '16']


def make_phantom_run(out, size=48, seed=1):
    code = main(['phantom', '--out', str(out), '--n-fibers', '4', '--size', str(size), '--depth', '3',
                 '--radius-min', '4', '--radius-max', '5', '--noise', '0.02', '--seed', str(seed)] + QUIET)
    assert code == EXIT_OK
    return out


@pytest.fixture(scope='module')
def phantom_dir(tmp_path_factory):
    return make_phantom_run(tmp_path_factory.mktemp('phantom'))


def test_phantom_command(phantom_dir):
    manifest = read_json(phantom_dir / 'manifest.json')
    assert manifest['command'] == 'phantom'
    assert manifest['sample_name'] == 'phantom'
    assert manifest['config']['phantom']['n_fibers'] == 4
    assert manifest['versions']['numpy'] is not None
    assert read_volume(phantom_dir / 'volume').shape == (3, 48, 48)
    assert read_volume(phantom_dir / 'gold').data.max() == 4
    assert read_json(phantom_dir / 'phantom.json')


def test_classic_evaluate_report(phantom_dir, tmp_path):
    classic = tmp_path / 'classic'
    code = main(['segment-classic', '--input', str(phantom_dir / 'volume'), '--out', str(classic),
                 '--otsu-classes', '2'] + QUIET)
    assert code == EXIT_OK
    for name in ('labels', 'counts.csv', 'instances.csv', 'manifest.json'):
        assert (classic / name).exists()
    counts = pd.read_csv(classic / 'counts.csv')
    assert counts['slice'].tolist() == [0, 1, 2]

    evaluation = tmp_path / 'eval'
    code = main(['evaluate', '--pred', str(classic / 'labels'), '--gold', str(phantom_dir / 'gold'),
                 '--out', str(evaluation)] + QUIET)
    assert code == EXIT_OK
    summary = read_json(evaluation / 'summary.json')
    assert summary['slices'] == 3
    assert summary['dice']['mean'] > 0.7
    # архитектура берётся из манифеста запуска, породившего стек
    assert read_json(evaluation / 'manifest.json')['arch'] == 'classic'
    assert (evaluation / 'roc.csv').exists()

    report = tmp_path / 'report'
    assert main(['report', '--runs', str(evaluation), '--out', str(report)] + QUIET) == EXIT_OK
    table = pd.read_csv(report / 'comparison.csv')
    assert table['arch'].tolist() == ['classic']


def test_train_predict_evaluate(phantom_dir, tmp_path):
    trained = tmp_path / 'train'
    code = main(['train', '--input', str(phantom_dir / 'volume'), '--gold', str(phantom_dir / 'gold'),
                 '--out', str(trained), '--arch', 'unet2d', '--net-depth', '1', '--base-channels', '2',
                 '--epochs', '1'] + TINY_TILES + QUIET)
    assert code == EXIT_OK
    assert (trained / 'weights.fsegnet').is_file()
    history = pd.read_csv(trained / 'history.csv')
    assert len(history) > 0
    manifest = read_json(trained / 'manifest.json')
    assert manifest['arch'] == 'unet2d'
    assert manifest['config']['tiles']['tile'] == 24

    predicted = tmp_path / 'predict'
    code = main(['predict', '--input', str(phantom_dir / 'volume'), '--weights', str(trained / 'weights.fsegnet'),
                 '--out', str(predicted), '--binary', '--label'] + TINY_TILES + QUIET)
    assert code == EXIT_OK
    prob = read_volume(predicted / 'prob').data
    assert prob.shape == (3, 48, 48)
    assert np.all((prob >= 0) & (prob <= 1))
    assert set(np.unique(read_volume(predicted / 'mask').data)) <= {0, 1}
    assert len(pd.read_csv(predicted / 'timing.csv')) == 3
    assert (predicted / 'instances.csv').is_file()

    evaluation = tmp_path / 'eval'
    code = main(['evaluate', '--pred', str(predicted / 'prob'), '--gold', str(phantom_dir / 'gold'),
                 '--out', str(evaluation)] + QUIET)
    assert code == EXIT_OK
    assert read_json(evaluation / 'manifest.json')['arch'] == 'unet2d'


def test_rerun_from_manifest(phantom_dir, tmp_path):
    first = tmp_path / 'first'
    assert main(['segment-classic', '--input', str(phantom_dir / 'volume'), '--out', str(first),
                 '--otsu-classes', '2'] + QUIET) == EXIT_OK

    second = tmp_path / 'second'
    assert main(['--manifest', str(first / 'manifest.json'), '--rerun-out', str(second)]) == EXIT_OK
    np.testing.assert_array_equal(read_volume(second / 'labels').data, read_volume(first / 'labels').data)
    assert read_json(second / 'manifest.json')['config'] == read_json(first / 'manifest.json')['config']


def test_training_is_reproducible(phantom_dir, tmp_path):
    args = ['train', '--input', str(phantom_dir / 'volume'), '--gold', str(phantom_dir / 'gold'),
            '--arch', 'unet2d', '--net-depth', '1', '--base-channels', '2', '--epochs', '1',
            '--workers', '1'] + TINY_TILES + QUIET
    assert main(args + ['--out', str(tmp_path / 'a')]) == EXIT_OK
    assert main(args + ['--out', str(tmp_path / 'b')]) == EXIT_OK
    first = (tmp_path / 'a' / 'weights.fsegnet').read_bytes()
    assert first == (tmp_path / 'b' / 'weights.fsegnet').read_bytes()


# ========== Коды завершения ==========

def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(['phantom', '--no-such-flag']) == EXIT_USAGE
    assert main(['phantom'] + QUIET) == EXIT_USAGE

    config = tmp_path / 'bad.yaml'
    config.write_text("train:\n  epochs: 0\n", encoding='utf-8')
    assert main(['phantom', '--config', str(config), '--out', str(tmp_path / 'out')]) == EXIT_USAGE

    broken = tmp_path / 'broken.json'
    broken.write_text('{', encoding='utf-8')
    assert main(['--manifest', str(broken)]) == EXIT_USAGE


def test_predict_requires_weights(phantom_dir, tmp_path):
    code = main(['predict', '--input', str(phantom_dir / 'volume'), '--out', str(tmp_path / 'p')] + QUIET)
    assert code == EXIT_USAGE


def test_predict_with_other_architecture_fails(phantom_dir, tmp_path):
    weights = tmp_path / 'w.fsegnet'
    save_weights(build(ArchSpec(family='unet', dims=2, depth=1, base_channels=2)), str(weights))
    code = main(['predict', '--input', str(phantom_dir / 'volume'), '--weights', str(weights),
                 '--arch', 'tiramisu2d', '--out', str(tmp_path / 'p')] + QUIET)
    assert code == EXIT_FAILURE


def test_evaluate_shape_mismatch_fails(phantom_dir, tmp_path):
    other = make_phantom_run(tmp_path / 'other', size=32, seed=2)
    code = main(['evaluate', '--pred', str(other / 'gold'), '--gold', str(phantom_dir / 'gold'),
                 '--out', str(tmp_path / 'eval')] + QUIET)
    assert code == EXIT_FAILURE
