# fiberseg/reports.py

"""
Отчёты: атомарная запись CSV/JSON, сводка времени предсказания
и сравнительная таблица Dice/Matthews по образцам и архитектурам.
"""

import json
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd

from fiberseg.errors import IoError

PathLike = Union[str, Path]

SUMMARY_FILE = 'summary.json'
TIMING_FILE = 'timing.csv'
MANIFEST_FILE = 'manifest.json'


# ========== Атомарная запись ==========

def _atomic_write(path: PathLike, write) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            write(f)
        os.replace(tmp, target)
    except OSError as e:
        raise IoError(f"Ошибка записи {target}: {e}") from e
    return target


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Не сериализуется в JSON: {type(value).__name__}")


def write_json(path: PathLike, data: Dict) -> Path:
    """JSON во временный файл с переименованием"""
    return _atomic_write(path, lambda f: json.dump(data, f, ensure_ascii=False, indent=2,
                                                   default=_json_default))


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    """CSV во временный файл с переименованием"""
    return _atomic_write(path, lambda f: frame.to_csv(f, index=False))


def write_text(path: PathLike, text: str) -> Path:
    return _atomic_write(path, lambda f: f.write(text))


def read_json(path: PathLike) -> Dict:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"Ошибка чтения {path}: {e}") from e


# ========== Сводки ==========

def timing_summary(runs: Iterable[Dict]) -> pd.DataFrame:
    """
    Среднее ± std времени на срез по образцам и архитектурам

    Args:
        runs: элементы {'sample', 'arch', 'timing': DataFrame(slice, seconds)}
    """
    rows = []
    for run in runs:
        seconds = run['timing']['seconds'].to_numpy(dtype=np.float64)
        if seconds.size == 0:
            continue
        rows.append({
            'sample': run['sample'],
            'arch': run['arch'],
            'slices': int(seconds.size),
            'mean_s': float(seconds.mean()),
            'std_s': float(seconds.std(ddof=1)) if seconds.size > 1 else 0.0,
            'total_s': float(seconds.sum()),
        })
    return pd.DataFrame(rows, columns=['sample', 'arch', 'slices', 'mean_s', 'std_s', 'total_s'])


def comparison_table(runs: Iterable[Dict]) -> pd.DataFrame:
    """
    Таблица Dice/Matthews (среднее ± std) по образцам и архитектурам

    Лучшая по среднему Dice архитектура каждого образца отмечается в столбце best.

    Args:
        runs: элементы {'sample', 'arch', 'summary': сводка MetricsReport.summary()}
    """
    rows = []
    for run in runs:
        s = run['summary']
        rows.append({
            'sample': run['sample'],
            'arch': run['arch'],
            'dice_mean': s['dice']['mean'],
            'dice_std': s['dice']['std'],
            'matthews_mean': s['matthews']['mean'],
            'matthews_std': s['matthews']['std'],
            'slices': s['slices'],
        })
    frame = pd.DataFrame(rows, columns=['sample', 'arch', 'dice_mean', 'dice_std',
                                        'matthews_mean', 'matthews_std', 'slices'])
    if frame.empty:
        frame['best'] = pd.Series(dtype=bool)
        return frame
    best = frame.groupby('sample')['dice_mean'].transform('max')
    frame['best'] = frame['dice_mean'] == best
    return frame.sort_values(['sample', 'arch']).reset_index(drop=True)


def _percent(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def comparison_markdown(frame: pd.DataFrame) -> str:
    """Таблица сравнения в Markdown (лучшая архитектура выделена жирным)"""
    lines = ["| Образец | Архитектура | Dice, % | Matthews, % |",
             "|---|---|---|---|"]
    for row in frame.itertuples(index=False):
        arch = f"**{row.arch}**" if row.best else row.arch
        lines.append(f"| {row.sample} | {arch} | {_percent(row.dice_mean, row.dice_std)} | "
                     f"{_percent(row.matthews_mean, row.matthews_std)} |")
    return "\n".join(lines) + "\n"


def collect_runs(directories: Iterable[PathLike]) -> List[Dict]:
    """
    Сбор результатов запусков: manifest.json и, если есть, summary.json и timing.csv

    Образец и архитектура берутся из манифеста (sample_name, arch).
    """
    runs = []
    for directory in directories:
        directory = Path(directory)
        manifest = read_json(directory / MANIFEST_FILE)
        run = {
            'dir': str(directory),
            'sample': manifest.get('sample_name') or directory.name,
            'arch': manifest.get('arch') or manifest.get('command'),
        }
        if (directory / SUMMARY_FILE).exists():
            run['summary'] = read_json(directory / SUMMARY_FILE)
        if (directory / TIMING_FILE).exists():
            run['timing'] = pd.read_csv(directory / TIMING_FILE)
        runs.append(run)
    return runs


def build_report(directories: Iterable[PathLike], out_dir: PathLike,
                 log_tail: Optional[List[str]] = None) -> Dict[str, Path]:
    """Запись сравнительной таблицы и сводки времени в out_dir"""
    runs = collect_runs(directories)
    out_dir = Path(out_dir)
    written = {}

    evaluated = [r for r in runs if 'summary' in r]
    if evaluated:
        table = comparison_table(evaluated)
        written['comparison_csv'] = write_csv(out_dir / 'comparison.csv', table)
        written['comparison_md'] = write_text(out_dir / 'comparison.md', comparison_markdown(table))

    timed = [r for r in runs if 'timing' in r]
    if timed:
        written['timing_csv'] = write_csv(out_dir / 'timing_summary.csv', timing_summary(timed))

    if log_tail:
        written['log_tail'] = write_text(out_dir / 'log_tail.txt', ''.join(log_tail))
    return written
