"""Reading and writing delimited numeric tables, and column preprocessing."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np

from .core import DataError, DataSet

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
MAD_FLOOR = 1e-12


def format_float(x) -> str:
    return FLOAT_FORMAT % x


def ingest(path, na_token: str = "NA", delimiter: str = ",") -> DataSet:
    """Parse a delimited table with a header row into a :class:`DataSet`.

    Cells equal to ``na_token`` become missing. Any other cell must parse as a
    finite real.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError("%s: empty file" % path)
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError("%s: no data rows" % path)
    J = len(header)
    values = np.empty((len(body), J))
    observed = np.ones((len(body), J), dtype=bool)
    for i, row in enumerate(body):
        if len(row) != J:
            raise DataError("%s: row %d has %d fields, expected %d"
                            % (path, i + 2, len(row), J))
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == na_token:
                observed[i, j] = False
                values[i, j] = np.nan
                continue
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise DataError("%s: non-numeric value %r at row %d, column %d (%s)"
                                % (path, cell, i + 2, j + 1, header[j]))
            values[i, j] = v
    logger.info("read %d rows x %d columns from %s (%d missing cells)",
                len(body), J, path, int((~observed).sum()))
    return DataSet(values, observed, header)


def write_table(path, header, rows, na_token: str = "NA", delimiter: str = ","):
    """Write rows of numbers/strings; floats with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v, na_token) for v in row])


def _cell(v, na_token):
    if v is None:
        return na_token
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return na_token if math.isnan(v) else format_float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_dataset(path, data: DataSet, na_token: str = "NA", delimiter: str = ","):
    names = data.variable_names or ["X%d" % (j + 1) for j in range(data.J)]
    rows = [[data.values[i, j] if data.observed[i, j] else None for j in range(data.J)]
            for i in range(data.n)]
    write_table(path, names, rows, na_token, delimiter)


def robust_center_scale(data: DataSet):
    """Column medians and median absolute deviations over observed cells."""
    med = np.empty(data.J)
    mad = np.empty(data.J)
    for j in range(data.J):
        x = data.values[data.observed[:, j], j]
        med[j] = np.median(x)
        mad[j] = max(np.median(np.abs(x - med[j])), MAD_FLOOR)
    return med, mad


def preprocess_transform(data: DataSet, robust_standardize: bool = False,
                         scale: float = 1.0):
    """Per-column ``(shift, divisor)`` applied by :func:`preprocess`."""
    if not scale > 0:
        raise DataError("scale must be positive")
    if robust_standardize:
        shift, divisor = robust_center_scale(data)
    else:
        shift, divisor = np.zeros(data.J), np.ones(data.J)
    return shift, divisor * scale


def preprocess(data: DataSet, robust_standardize: bool = False,
               scale: float = 1.0) -> DataSet:
    """Optionally center by the median and divide by the MAD, then divide by ``scale``.

    A larger ``scale`` shrinks the data and so raises the share of crisp
    assignments when ``m > 1``. The missing mask is unchanged.
    """
    shift, divisor = preprocess_transform(data, robust_standardize, scale)
    return DataSet((data.values - shift) / divisor, data.observed, data.variable_names)
