"""Variance statistics and the report CSV format."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from gradclust.numerics import ContractError

CSV_COLUMNS = ("step", "estimator", "avg_var", "e_g2", "norm_var", "draws")
DEGENERATE_DENOMINATOR = 1e-30
# recorded in report metadata: how the second moment is aggregated over coordinates
E_G2_AGGREGATION = "coordinate-mean of per-example E[g^2]; ratio of coordinate averages"


def average_variance(estimates) -> float:
    """Trace of the sample covariance of the estimates divided by the dimension."""
    e = np.asarray(estimates, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    if e.shape[0] < 2:
        raise ContractError("average_variance needs at least two estimates")
    return float(e.var(axis=0, ddof=1).mean())


def second_moment(per_example) -> float:
    """Coordinate-averaged second non-central moment of a single-example gradient.

    Per coordinate this is ``mean^2 + population variance``, i.e. the mean of
    the squared per-example gradients.
    """
    g = np.asarray(per_example, dtype=np.float64)
    return float(np.einsum("nd,nd->", g, g) / g.size)


def normalized_variance(avg_var: float, e_g2: float) -> float:
    if e_g2 < DEGENERATE_DENOMINATOR:
        return math.inf
    return avg_var / e_g2


@dataclass(frozen=True)
class SmoothedSeries:
    window: int
    mean: np.ndarray
    std: np.ndarray


def rolling(series, window: int) -> SmoothedSeries:
    """Trailing-window mean and unbiased std; early steps use the partial window."""
    if window < 1:
        raise ContractError("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    mean = np.empty_like(x)
    std = np.zeros_like(x)
    for i in range(x.size):
        w = x[max(0, i - window + 1):i + 1]
        # shift by the first value so a constant window gives exactly zero spread
        dev = w - w[0]
        mean[i] = w[0] + dev.mean()
        if w.size > 1:
            std[i] = dev.std(ddof=1)
    return SmoothedSeries(window, mean, std)


@dataclass(frozen=True)
class ReportRow:
    step: int
    estimator: str
    avg_var: float
    e_g2: float
    norm_var: float
    draws: int


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def format_rows(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.step, r.estimator, _fmt(r.avg_var), _fmt(r.e_g2), _fmt(r.norm_var), r.draws])
    return buf.getvalue()


def parse_rows(text: str, source: str = "<csv>") -> list[ReportRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ContractError(f"{source}: header must be {','.join(CSV_COLUMNS)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        try:
            if len(rec) != len(CSV_COLUMNS):
                raise ValueError(f"expected {len(CSV_COLUMNS)} fields, got {len(rec)}")
            rows.append(ReportRow(int(rec[0]), rec[1], float(rec[2]), float(rec[3]), float(rec[4]), int(rec[5])))
        except ValueError as exc:
            raise ContractError(f"{source}: malformed row {lineno}: {exc}") from None
    return rows


def aggregate_tail(values, tail: float = 0.7) -> tuple[float, float]:
    """Mean and max over the last ``tail`` fraction of a measurement series."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    start = v.size - max(1, math.ceil(tail * v.size - 1e-12))
    t = v[start:]
    return float(t.mean()), float(t.max())
