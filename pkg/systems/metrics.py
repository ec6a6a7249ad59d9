import json
import os
from typing import Dict, List

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import matplotlib.ticker as ticker

from control.errors import DataError, EmptyInputError
from systems.logger import LoggerSingleton


_logger = LoggerSingleton.new_instance()


class MetricsLog:
    """Append-only line-delimited JSON, one record per epoch."""

    def __init__(self, path: str):
        self.path = path
        folder = os.path.dirname(path)
        if folder and not os.path.exists(folder):
            os.makedirs(folder)

    def append(self, record: Dict[str, object]):
        with open(self.path, 'a', encoding='utf-8') as file:
            file.write(json.dumps(record, sort_keys=True) + '\n')

    def read(self) -> List[Dict[str, object]]:
        return read_metrics(self.path)


def read_metrics(path: str) -> List[Dict[str, object]]:
    try:
        with open(path, encoding='utf-8') as file:
            lines = [line for line in file if line.strip()]
    except OSError as e:
        raise DataError(f'cannot read metrics log {path}: {e.strerror}')
    records = []
    for number, line in enumerate(lines, start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise DataError(f'{path}:{number}: invalid JSON ({e.msg})')
    return records


def plot_losses(records: List[Dict[str, object]], out_path: str, title: str = 'Training') -> str:
    """Train/validation loss per epoch, learning rate on a second axis."""
    if not records:
        raise EmptyInputError('metrics log has no epochs to plot')
    epochs = [r['epoch'] for r in records]
    fig, ax = plt.subplots(figsize=(11, 5))
    try:
        ax.plot(epochs, [r['train_loss'] for r in records], marker='o', label='train loss')
        ax.plot(epochs, [r['val_loss'] for r in records], marker='o', label='validation loss')
        ax.set_xlabel('Epoch')
        ax.set_ylabel('NLL per token')
        ax.xaxis.set_major_locator(ticker.MaxNLocator(integer=True))
        ax.grid(True, linestyle='--', alpha=0.5)

        lr_axis = ax.twinx()
        lr_axis.plot(epochs, [r['lr'] for r in records], color='gray', linestyle=':', label='learning rate')
        lr_axis.set_ylabel('Learning rate')
        lr_axis.yaxis.set_major_formatter(ticker.FuncFormatter(lambda y, _: f'{y:.0e}'))

        lines = ax.get_legend_handles_labels()
        lr_lines = lr_axis.get_legend_handles_labels()
        ax.legend(lines[0] + lr_lines[0], lines[1] + lr_lines[1], loc='upper right')
        plt.title(title)
        plt.tight_layout()

        folder = os.path.dirname(out_path)
        if folder and not os.path.exists(folder):
            os.makedirs(folder)
        fig.savefig(out_path, format='png')
    finally:
        plt.close(fig)
    _logger.add_info(f'loss curve written to {out_path}')
    return out_path
