"""Delimited metrics output.

Rows are dicts; floats are written with ``repr`` so they round-trip
exactly, configurations as ``"8-16-64"``. Line endings are ``\\n`` and
column order is fixed, so identical inputs give byte-identical files.

Standard column sets:

``EVAL_COLUMNS``
    one row per evaluated configuration: ``config, accuracy, total_macs, grouped_macs``
``EPOCH_COLUMNS``
    one row per training epoch: ``epoch, lr, train_loss, train_accuracy, val_accuracy``
``MAC_COLUMNS``
    one row per costed layer: ``layer, kind, macs``
"""

import csv

import numpy as np

__all__ = ["write_metrics_csv", "read_metrics_csv", "EVAL_COLUMNS", "EPOCH_COLUMNS", "MAC_COLUMNS"]

EVAL_COLUMNS = ["config", "accuracy", "total_macs", "grouped_macs"]
EPOCH_COLUMNS = ["epoch", "lr", "train_loss", "train_accuracy", "val_accuracy"]
MAC_COLUMNS = ["layer", "kind", "macs"]


def _render(value):
    if value is None:
        return ""
    if isinstance(value, (tuple, list)):
        return "-".join(str(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_metrics_csv(path, rows, columns=None):
    """Write ``rows`` to ``path``; ``columns`` defaults to the first row's keys."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            missing = set(columns) - set(row)
            if missing:
                raise KeyError(f"row lacks columns {sorted(missing)}")
            writer.writerow([_render(row[c]) for c in columns])


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
