# fiberseg/main.py

#!/usr/bin/env python3
"""
Fiberseg - сегментация волокон в микротомографических объёмах

Единая точка входа: phantom, train, predict, segment-classic, evaluate, report.
Коды завершения: 0 - успех, 1 - ошибка обработки, 2 - ошибка вызова или конфигурации.
"""

import argparse
import contextlib
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from fiberseg import __version__
from fiberseg.architectures import ARCH_IDS, build, parameter_count, save_weights
from fiberseg.classic_seg import label_count, segment_classic
from fiberseg.config_manager import ConfigManager, RunConfig
from fiberseg.errors import ConfigError, FiberSegError, ShapeMismatch
from fiberseg.logger import PipelineLogger, configure_logging, get_logger
from fiberseg.metrics import evaluate_stack
from fiberseg.phantom import make_phantom
from fiberseg.predictor import binarize, instance_frame, instance_stats, label_instances, load_predictor
from fiberseg.reports import MANIFEST_FILE, SUMMARY_FILE, TIMING_FILE, build_report, read_json, write_csv, write_json
from fiberseg.trainer import extract_pairs, split_dataset, train
from fiberseg.volume_io import StackWriter, VolumeFormat, normalize, open_volume, read_slice, read_volume, write_volume

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

WEIGHTS_FILE = 'weights.fsegnet'
HISTORY_FILE = 'history.csv'

VERSIONED_PACKAGES = ('numpy', 'scipy', 'scikit-image', 'scikit-learn', 'tifffile', 'imageio',
                      'pandas', 'joblib', 'PyYAML')

# Флаги командной строки -> ключи конфигурации (по подкомандам)
OVERRIDES: Dict[str, List[Tuple[str, str]]] = {
    'phantom': [
        ('n_fibers', 'phantom.n_fibers'),
        ('radius_min', 'phantom.radius_min'),
        ('radius_max', 'phantom.radius_max'),
        ('depth', 'phantom.depth'),
        ('size', 'phantom.size'),
        ('noise', 'phantom.noise'),
        ('defect_slices', 'phantom.defect_slices'),
        ('spacing', 'phantom.spacing'),
    ],
    'train': [
        ('net_depth', 'arch.depth'),
        ('base_channels', 'arch.base_channels'),
        ('growth_rate', 'arch.growth_rate'),
        ('layers_per_block', 'arch.layers_per_block'),
        ('epochs', 'train.epochs'),
        ('learning_rate', 'train.learning_rate'),
        ('batch_size', 'train.batch_size'),
        ('optimizer', 'train.optimizer'),
        ('validation_fraction', 'train.validation_fraction'),
    ],
    'predict': [
        ('arch', 'predict.arch'),
        ('weights', 'predict.weights'),
        ('threshold', 'predict.threshold'),
        ('binary', 'predict.binary'),
        ('label', 'predict.label'),
        ('separate_touching', 'predict.separate_touching'),
        ('batch_size', 'predict.batch_size'),
    ],
    'segment-classic': [
        ('tv_weight', 'classic.tv_weight'),
        ('otsu_classes', 'classic.otsu_classes'),
        ('fiber_class', 'classic.fiber_class'),
        ('initial_radius', 'classic.wusem_initial_radius'),
        ('delta_radius', 'classic.wusem_delta_radius'),
        ('roi_center', 'classic.roi_center'),
        ('roi_radius', 'classic.roi_radius'),
    ],
    'evaluate': [
        ('threshold', 'evaluate.threshold'),
        ('roc', 'evaluate.roc'),
        ('category_maps', 'evaluate.category_maps'),
        ('worst_slices', 'evaluate.worst_slices'),
    ],
    'report': [],
}


class UsageError(Exception):
    """Некорректный вызов: не хватает аргументов или они противоречат друг другу"""


# ========== Разбор аргументов ==========

def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML-файл конфигурации')
    common.add_argument('--seed', type=int, help='Общий seed (распространяется на секции)')
    common.add_argument('--workers', type=int, help='Число потоков обработки срезов')
    common.add_argument('--out', help='Директория результатов')
    common.add_argument('--log-level', dest='log_level', help='Уровень журнала консоли')
    common.add_argument('--log-path', dest='log_path', help='Файл журнала (с ротацией)')
    common.add_argument('--sample-name', dest='sample_name', help='Имя образца для манифеста')
    return common


def _tile_options(parser: argparse.ArgumentParser):
    parser.add_argument('--tile-size', dest='tile_size', type=int,
                        help='Размер тайла (по умолчанию 288 в 2D, 64 в 3D)')
    parser.add_argument('--stride', type=int, help='Шаг тайлов (по умолчанию 256 в 2D, 32 в 3D)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='fiberseg',
        description='Сегментация волокон в микротомографических объёмах',
    )
    parser.add_argument('--version', action='version', version=f'fiberseg {__version__}')
    parser.add_argument('--manifest', help='Повторить запуск по сохранённому manifest.json')
    parser.add_argument('--rerun-out', dest='rerun_out',
                        help='Директория результатов повторного запуска (вместо записанной в манифесте)')

    common = _common_options()
    sub = parser.add_subparsers(dest='command', metavar='command')

    p = sub.add_parser('phantom', parents=[common], help='Синтетический объём волокон с эталоном')
    p.add_argument('--n-fibers', dest='n_fibers', type=int)
    p.add_argument('--radius-min', dest='radius_min', type=float)
    p.add_argument('--radius-max', dest='radius_max', type=float)
    p.add_argument('--depth', type=int)
    p.add_argument('--size', type=int)
    p.add_argument('--noise', type=float)
    p.add_argument('--defect-slices', dest='defect_slices', type=int, nargs='*')
    p.add_argument('--spacing', type=float, help='Размер воксела, мкм')
    p.add_argument('--format', choices=[f.value for f in VolumeFormat], default=VolumeFormat.STACK.value)

    p = sub.add_parser('train', parents=[common], help='Обучение сети на объёме с эталоном')
    p.add_argument('--input', required=True, help='Объём: директория срезов или файл .raw')
    p.add_argument('--gold', required=True, help='Эталонная разметка той же формы')
    p.add_argument('--arch', choices=ARCH_IDS)
    p.add_argument('--net-depth', dest='net_depth', type=int, help='Число уровней сети')
    p.add_argument('--base-channels', dest='base_channels', type=int)
    p.add_argument('--growth-rate', dest='growth_rate', type=int)
    p.add_argument('--layers-per-block', dest='layers_per_block', type=int)
    p.add_argument('--epochs', type=int)
    p.add_argument('--learning-rate', dest='learning_rate', type=float)
    p.add_argument('--batch-size', dest='batch_size', type=int)
    p.add_argument('--optimizer', choices=['adam', 'rmsprop'])
    p.add_argument('--validation-fraction', dest='validation_fraction', type=float)
    p.add_argument('--no-augment', dest='no_augment', action='store_true')
    _tile_options(p)

    p = sub.add_parser('predict', parents=[common], help='Вероятности волокон по объёму')
    p.add_argument('--input', required=True)
    p.add_argument('--weights')
    p.add_argument('--arch', choices=ARCH_IDS)
    p.add_argument('--threshold', type=float)
    p.add_argument('--binary', action='store_true', default=None, help='Записать бинарную маску')
    p.add_argument('--label', action='store_true', default=None, help='Разметить отдельные волокна')
    p.add_argument('--separate-touching', dest='separate_touching', action='store_true', default=None)
    p.add_argument('--batch-size', dest='batch_size', type=int)
    _tile_options(p)

    p = sub.add_parser('segment-classic', parents=[common], help='Классическая сегментация')
    p.add_argument('--input', required=True)
    p.add_argument('--tv-weight', dest='tv_weight', type=float)
    p.add_argument('--otsu-classes', dest='otsu_classes', type=int)
    p.add_argument('--fiber-class', dest='fiber_class', type=int)
    p.add_argument('--initial-radius', dest='initial_radius', type=int)
    p.add_argument('--delta-radius', dest='delta_radius', type=int)
    p.add_argument('--roi-center', dest='roi_center', type=float, nargs=2, metavar=('ROW', 'COL'))
    p.add_argument('--roi-radius', dest='roi_radius', type=float)

    p = sub.add_parser('evaluate', parents=[common], help='Сравнение с эталоном')
    p.add_argument('--pred', required=True, help='Предсказание: вероятности, маска или метки')
    p.add_argument('--gold', required=True)
    p.add_argument('--threshold', type=float)
    p.add_argument('--roc', choices=['per_slice', 'pooled', 'none'])
    p.add_argument('--category-maps', dest='category_maps', action='store_true', default=None)
    p.add_argument('--worst-slices', dest='worst_slices', type=int)
    p.add_argument('--arch', help='Подпись архитектуры для сравнительной таблицы')

    p = sub.add_parser('report', parents=[common], help='Сводная таблица по запускам')
    p.add_argument('--runs', nargs='+', required=True, help='Директории запусков')

    return parser


# ========== Конфигурация ==========

def _arch_overrides(arch_id: Optional[str]) -> Dict[str, Any]:
    if not arch_id:
        return {}
    return {'arch.family': arch_id[:-2], 'arch.dims': int(arch_id[-2])}


def _tile_overrides(args: argparse.Namespace, dims: int) -> Dict[str, Any]:
    size, stride = getattr(args, 'tile_size', None), getattr(args, 'stride', None)
    if dims == 2:
        return {'tiles.tile': size, 'tiles.stride': stride}
    return {'tiles.chunk': size, 'tiles.chunk_stride': stride}


def resolve_config(args: argparse.Namespace) -> ConfigManager:
    """
    Конфигурация запуска: файл, затем флаги командной строки

    Raises:
        ConfigError: ошибка в файле или недопустимое значение флага
    """
    manager = ConfigManager(args.config)
    manager.load()

    overrides: Dict[str, Any] = {
        'seed': args.seed,
        'workers': args.workers,
        'log_level': args.log_level,
        'log_path': args.log_path,
        'sample_name': args.sample_name,
    }
    if args.command == 'train':
        overrides.update(_arch_overrides(args.arch))
        if args.no_augment:
            overrides['augment.enabled'] = False
    for dest, key in OVERRIDES[args.command]:
        overrides[key] = getattr(args, dest, None)
    manager.apply_overrides(overrides)

    # геометрия тайлов зависит от размерности сети
    config = manager.get_config()
    if args.command == 'train':
        manager.apply_overrides(_tile_overrides(args, config.arch.dims))
    elif args.command == 'predict':
        manager.apply_overrides(_tile_overrides(args, config.predict.dims))

    if config.workers < 1:
        raise ConfigError(f"workers >= 1, получено {config.workers}")
    return manager


def package_versions() -> Dict[str, Optional[str]]:
    versions: Dict[str, Optional[str]] = {'python': platform.python_version(), 'fiberseg': __version__}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


# ========== Подкоманды ==========

def _sample_name(src, fallback: str) -> str:
    return getattr(src, 'name', None) or fallback


def cmd_phantom(args: argparse.Namespace, config: RunConfig, logger: PipelineLogger) -> Dict[str, Any]:
    """Генерация фантома: объём, эталонные метки и описание волокон"""
    out = Path(args.out)
    phantom = make_phantom(config.phantom, logger)
    fmt = VolumeFormat(args.format)
    suffix = '.raw' if fmt == VolumeFormat.RAW else ''

    volume_path = out / f'volume{suffix}'
    gold_path = out / f'gold{suffix}'
    write_volume(phantom.volume, volume_path, fmt)
    logger.volume_written(str(volume_path), phantom.volume.shape, str(phantom.volume.dtype))
    write_volume(phantom.labels, gold_path, fmt, spacing=config.phantom.spacing, name='gold')
    logger.volume_written(str(gold_path), phantom.labels.shape, str(phantom.labels.dtype))
    metadata_path = write_json(out / 'phantom.json', phantom.metadata())

    return {
        'outputs': {'volume': str(volume_path), 'gold': str(gold_path), 'metadata': str(metadata_path)},
        'sample_name': config.sample_name or 'phantom',
    }


def cmd_train(args: argparse.Namespace, config: RunConfig, logger: PipelineLogger) -> Dict[str, Any]:
    """Обучение: пары тайлов из объёма и эталона, веса и история"""
    out = Path(args.out)
    src = open_volume(args.input)
    gold_src = open_volume(args.gold)
    logger.stack_opened(args.input, src.shape, str(src.dtype))
    logger.stack_opened(args.gold, gold_src.shape, str(gold_src.dtype))
    if tuple(src.shape) != tuple(gold_src.shape):
        raise ShapeMismatch(f"Формы объёма {tuple(src.shape)} и эталона {tuple(gold_src.shape)} различаются")

    spec = config.arch
    network = build(spec)
    data = normalize(read_volume(args.input).data)
    mask = (read_volume(args.gold).data > 0).astype(np.uint8)
    tile = config.tiles.spec(spec.dims)
    pairs = extract_pairs(data, mask, tile.tile_shape[0], tile.stride[0], spec.dims)
    train_set, validation = split_dataset(pairs, config.train.validation_fraction, config.train.seed)

    result = train(network, train_set, config.train, validation=validation or None,
                   augment=config.augment, logger=logger)

    weights_path = out / WEIGHTS_FILE
    save_weights(network, str(weights_path), training=result.manifest())
    logger.weights_saved(str(weights_path), network.arch_id)
    history_path = out / HISTORY_FILE
    result.history.write_csv(str(history_path))

    return {
        'outputs': {'weights': str(weights_path), 'history': str(history_path)},
        'arch': network.arch_id,
        'sample_name': config.sample_name or _sample_name(src, Path(args.input).name),
        'training': {**result.manifest(), 'parameters': parameter_count(network),
                     'samples': len(train_set), 'validation_samples': len(validation)},
    }


def cmd_predict(args: argparse.Namespace, config: RunConfig, logger: PipelineLogger) -> Dict[str, Any]:
    """Предсказание: стек вероятностей, по запросу - маска, метки и статистика волокон"""
    cfg = config.predict
    if not cfg.weights:
        raise UsageError("Не задан файл весов (--weights или predict.weights)")
    out = Path(args.out)
    src = open_volume(args.input)
    logger.stack_opened(args.input, src.shape, str(src.dtype))
    predictor = load_predictor(cfg, config.tiles, logger)

    outputs = {'probability': str(out / 'prob')}
    frames = []
    with contextlib.ExitStack() as stack:
        prob_writer = stack.enter_context(StackWriter(out / 'prob', np.float32))
        mask_writer = label_writer = None
        if cfg.binary:
            mask_writer = stack.enter_context(StackWriter(out / 'mask', np.uint8))
            outputs['mask'] = str(out / 'mask')
        if cfg.label:
            label_writer = stack.enter_context(StackWriter(out / 'labels', np.int32))
            outputs['labels'] = str(out / 'labels')

        for z, prob in predictor.iter_predictions(src, config.workers):
            prob_writer.write(prob)
            mask = binarize(prob, cfg.threshold)
            if mask_writer is not None:
                mask_writer.write(mask)
            if label_writer is not None:
                labels, stats = label_instances(mask, src.spacing, cfg.separate_touching,
                                                cfg.wusem_delta_radius)
                label_writer.write(labels)
                frames.append(instance_frame(stats, z))
                logger.slice_segmented(z, len(stats))

    timing_path = write_csv(out / TIMING_FILE, predictor.timing_frame())
    outputs['timing'] = str(timing_path)
    if cfg.label:
        outputs['instances'] = str(write_csv(out / 'instances.csv', _concat(frames)))

    return {
        'outputs': outputs,
        'arch': predictor.network.arch_id,
        'sample_name': config.sample_name or _sample_name(src, Path(args.input).name),
    }


def _concat(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
    frames = [f for f in frames if not f.empty]
    if not frames:
        return pd.DataFrame(columns=['slice', 'label', 'voxels', 'radius_um', 'centroid_y', 'centroid_x'])
    return pd.concat(frames, ignore_index=True)


def _classic_slice(src, z: int, config: RunConfig) -> Tuple[int, np.ndarray]:
    return z, segment_classic(read_slice(src, z), config.classic)


def cmd_classic(args: argparse.Namespace, config: RunConfig, logger: PipelineLogger) -> Dict[str, Any]:
    """Классическая сегментация: стек меток и статистика волокон по срезам"""
    out = Path(args.out)
    src = open_volume(args.input)
    logger.stack_opened(args.input, src.shape, str(src.dtype))
    workers = config.workers

    frames = []
    counts = []
    with StackWriter(out / 'labels', np.int32) as writer:
        for start in range(0, src.depth, workers):
            batch = range(start, min(start + workers, src.depth))
            results = Parallel(n_jobs=workers, prefer='threads')(
                delayed(_classic_slice)(src, z, config) for z in batch)
            for z, labels in results:
                writer.write(labels)
                count = label_count(labels)
                counts.append({'slice': z, 'labels': count})
                frames.append(instance_frame(instance_stats(labels, src.spacing), z))
                logger.slice_segmented(z, count)

    counts_path = write_csv(out / 'counts.csv', pd.DataFrame(counts, columns=['slice', 'labels']))
    instances_path = write_csv(out / 'instances.csv', _concat(frames))
    return {
        'outputs': {'labels': str(out / 'labels'), 'counts': str(counts_path),
                    'instances': str(instances_path)},
        'arch': 'classic',
        'sample_name': config.sample_name or _sample_name(src, Path(args.input).name),
    }


def _run_arch(path: str) -> Optional[str]:
    """Архитектура запуска, породившего стек (manifest.json в родительской директории)"""
    manifest = Path(path).resolve().parent / MANIFEST_FILE
    if not manifest.is_file():
        return None
    try:
        return read_json(manifest).get('arch')
    except FiberSegError:
        return None


def cmd_evaluate(args: argparse.Namespace, config: RunConfig, logger: PipelineLogger) -> Dict[str, Any]:
    """Оценка: посрезовые метрики, сводка, точки ROC, карты категорий"""
    out = Path(args.out)
    cfg = config.evaluate
    pred_src = open_volume(args.pred)
    gold_src = open_volume(args.gold)
    logger.stack_opened(args.pred, pred_src.shape, str(pred_src.dtype))
    logger.stack_opened(args.gold, gold_src.shape, str(gold_src.dtype))

    outputs = {}
    with contextlib.ExitStack() as stack:
        writer = None
        if cfg.category_maps:
            writer = stack.enter_context(StackWriter(out / 'categories', np.uint8))
            outputs['categories'] = str(out / 'categories')
        report = evaluate_stack(pred_src, gold_src, cfg, config.workers, logger, writer)

    summary = report.summary(cfg.worst_slices)
    outputs['slices'] = str(write_csv(out / 'slices.csv', report.to_frame()))
    outputs['summary'] = str(write_json(out / SUMMARY_FILE, summary))
    if cfg.roc != 'none':
        outputs['roc'] = str(write_csv(out / 'roc.csv', report.roc_frame()))
    logger.report_written(outputs['summary'])

    return {
        'outputs': outputs,
        'arch': args.arch or _run_arch(args.pred) or Path(args.pred).name,
        'sample_name': config.sample_name or _sample_name(gold_src, Path(args.gold).name),
        'metrics': {'dice': summary['dice'], 'matthews': summary['matthews']},
    }


def cmd_report(args: argparse.Namespace, config: RunConfig, logger: PipelineLogger) -> Dict[str, Any]:
    """Сравнительная таблица и сводка времени по директориям запусков"""
    log_tail = logger.get_recent_logs(200) if config.log_path else None
    written = build_report(args.runs, args.out, log_tail)
    for path in written.values():
        logger.report_written(str(path))
    return {'outputs': {k: str(v) for k, v in written.items()}, 'runs': list(args.runs)}


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig, PipelineLogger], Dict[str, Any]]] = {
    'phantom': cmd_phantom,
    'train': cmd_train,
    'predict': cmd_predict,
    'segment-classic': cmd_classic,
    'evaluate': cmd_evaluate,
    'report': cmd_report,
}


# ========== Запуск ==========

def _stored_args(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k not in ('manifest', 'rerun_out')}


def write_manifest(args: argparse.Namespace, manager: ConfigManager, result: Dict[str, Any]) -> Path:
    """Манифест запуска: подкоманда, аргументы, итоговая конфигурация, версии, результаты"""
    config = manager.get_config()
    manifest = {
        'command': args.command,
        'args': _stored_args(args),
        'config': manager.to_dict(),
        'seed': config.seed,
        'workers': config.workers,
        'sample_name': result.pop('sample_name', config.sample_name),
        'arch': result.pop('arch', None),
        'versions': package_versions(),
        'outputs': result.pop('outputs', {}),
    }
    manifest.update(result)
    return write_json(Path(args.out) / MANIFEST_FILE, manifest)


def _load_rerun(args: argparse.Namespace) -> Tuple[argparse.Namespace, ConfigManager]:
    """Аргументы и конфигурация из сохранённого манифеста"""
    try:
        manifest = read_json(args.manifest)
        stored = argparse.Namespace(**manifest['args'])
        config = manifest['config']
    except (FiberSegError, KeyError, TypeError) as e:
        raise UsageError(f"Манифест {args.manifest} не читается: {e}") from e
    if stored.command not in COMMANDS:
        raise UsageError(f"Неизвестная подкоманда в манифесте: {stored.command}")
    if args.rerun_out:
        stored.out = args.rerun_out
    manager = ConfigManager()
    manager.config = ConfigManager.from_dict(config)
    return stored, manager


def run(args: argparse.Namespace, manager: ConfigManager) -> int:
    """Выполнение подкоманды с уже разрешённой конфигурацией"""
    config = manager.get_config()
    logger = configure_logging(config.log_path, config.log_level)
    logger.run_start(args.command, config.seed)
    logger.config_resolved(str(manager.to_dict()))

    try:
        result = COMMANDS[args.command](args, config, logger)
        path = write_manifest(args, manager, result)
        logger.report_written(str(path))
    except UsageError as e:
        logger.error(str(e), command=args.command)
        logger.run_stop(args.command, EXIT_USAGE)
        return EXIT_USAGE
    except FiberSegError as e:
        logger.error(f"{type(e).__name__}: {e}", command=args.command)
        logger.run_stop(args.command, EXIT_FAILURE)
        return EXIT_FAILURE

    logger.run_stop(args.command, EXIT_OK)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Точка входа командной строки"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    logger = get_logger()
    try:
        if args.manifest:
            args, manager = _load_rerun(args)
        elif args.command is None:
            raise UsageError("Не задана подкоманда")
        else:
            manager = resolve_config(args)
        if not args.out:
            raise UsageError("Не задана директория результатов (--out)")
    except ConfigError as e:
        logger.error(f"Конфигурация: {e}")
        return EXIT_USAGE
    except UsageError as e:
        logger.error(str(e))
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    return run(args, manager)


if __name__ == "__main__":
    sys.exit(main())
