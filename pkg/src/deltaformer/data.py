"""Dataset container and CSV ingestion."""
from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import IngestionError
from .preprocess import SplitRanges, split_ranges

ETT_SPLIT = (0.6, 0.2, 0.2)
DEFAULT_SPLIT = (0.7, 0.1, 0.2)
# 12/4/4 months of the ETT benchmarks; the remaining rows are unused by convention
ETT_STEPS = {"h": 20 * 30 * 24, "m": 20 * 30 * 24 * 4}


@dataclass
class TimeSeriesDataset:
    name: str
    values: np.ndarray                      # (C, T)
    variable_names: list[str]
    frequency: str = ""
    split_ratios: tuple[float, float, float] = DEFAULT_SPLIT
    key_mask: np.ndarray | None = None
    checksum: str = ""
    notes: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise IngestionError(f"dataset values must be (C, T), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise IngestionError("dataset contains non-finite values")
        if self.key_mask is not None:
            self.key_mask = np.asarray(self.key_mask, dtype=bool)
            if self.key_mask.shape != (self.n_vars,):
                raise IngestionError(f"key mask must have length {self.n_vars}")
        if not self.checksum:
            self.checksum = hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()

    @property
    def n_vars(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def ranges(self) -> SplitRanges:
        return split_ranges(self.n_steps, self.split_ratios)

    def with_values(self, values: np.ndarray, suffix: str = "") -> "TimeSeriesDataset":
        return TimeSeriesDataset(self.name + suffix, values, list(self.variable_names), self.frequency,
                                 self.split_ratios, self.key_mask, notes=list(self.notes),
                                 meta=dict(self.meta))


def _ett_kind(name: str) -> str | None:
    low = name.lower()
    if low.startswith("etth"):
        return "h"
    if low.startswith("ettm"):
        return "m"
    return None


def load_csv_dataset(path: str | os.PathLike, name: str | None = None,
                     columns: list[str] | None = None, split_ratios=None,
                     trim_ett: bool = True) -> TimeSeriesDataset:
    """Read a timestamp-first CSV into a ``(C, T)`` dataset.

    ETT files (name starting with ETTh/ETTm) get the 6:2:2 split over their
    first 20 months; everything else 7:1:2 over all rows.
    """
    path = os.fspath(path)
    name = name or os.path.splitext(os.path.basename(path))[0]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path} is empty", line=1) from None
        if len(header) < 2:
            raise IngestionError("expected a timestamp column followed by at least one variable", line=1)
        names = [h.strip() for h in header[1:]]
        if columns:
            missing = [c for c in columns if c not in names]
            if missing:
                raise IngestionError(f"columns not in header: {missing}", line=1)
            picks = [names.index(c) for c in columns]
        else:
            picks = list(range(len(names)))
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                vals = [float(row[1 + j]) for j in picks]
            except ValueError:
                bad = next(row[1 + j] for j in picks if not _is_float(row[1 + j]))
                raise IngestionError(f"non-numeric cell {bad!r}", line=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError("missing or non-finite value", line=lineno)
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path} has a header but no data rows", line=2)
    values = np.asarray(rows, dtype=np.float64).T
    kind = _ett_kind(name)
    notes = []
    if split_ratios is None:
        split_ratios = ETT_SPLIT if kind else DEFAULT_SPLIT
    if kind and trim_ett and values.shape[1] > ETT_STEPS[kind]:
        notes.append(f"trimmed {values.shape[1]} rows to the first {ETT_STEPS[kind]} (ETT 12/4/4 months)")
        values = values[:, :ETT_STEPS[kind]]
    with open(path, "rb") as fh:
        checksum = hashlib.sha256(fh.read()).hexdigest()
    freq = {"h": "hourly", "m": "15min"}.get(kind or "", "")
    return TimeSeriesDataset(name, values, [names[j] for j in picks], freq, tuple(split_ratios),
                             checksum=checksum, notes=notes)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_csv_dataset(dataset: TimeSeriesDataset, path: str | os.PathLike) -> None:
    """Write in the same timestamp-first layout (integer step as timestamp)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *dataset.variable_names])
        for t in range(dataset.n_steps):
            w.writerow([t, *(repr(float(v)) for v in dataset.values[:, t])])
