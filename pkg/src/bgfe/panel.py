"""Balanced-panel data model, CSV ingestion, and model configuration.

A panel holds N units observed over T periods.  Covariates are split into
two blocks: ``x`` carries the columns whose coefficients may be
group-specific and ``z`` carries columns with a single common coefficient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DuplicateCellError,
    HorizonTooLargeError,
    MissingCellError,
    NonNumericError,
    PanelFormatError,
)


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel of N units x T periods.

    Attributes
    ----------
    y : (N, T) outcomes.
    x : (N, T, p) group-effect covariates (may include a constant column
        and a materialized lag of y).
    z : (N, T, q) common-effect covariates, or None when q = 0.
    unit_ids, period_ids : labels, units sorted by label and periods
        ascending.
    """

    y: np.ndarray
    x: np.ndarray
    z: Optional[np.ndarray]
    unit_ids: tuple
    period_ids: tuple

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        if self.z is not None:
            z = np.asarray(self.z, dtype=float)
            if z.shape[2] == 0:
                z = None
            object.__setattr__(self, "z", z)
        if y.ndim != 2:
            raise PanelFormatError("y must be N x T")
        if x.ndim != 3 or x.shape[:2] != y.shape:
            raise PanelFormatError("x must be N x T x p")
        if x.shape[2] < 1:
            raise PanelFormatError("at least one group-effect covariate required")
        if self.z is not None and self.z.shape[:2] != y.shape:
            raise PanelFormatError("z must be N x T x q")
        if len(self.unit_ids) != y.shape[0] or len(self.period_ids) != y.shape[1]:
            raise PanelFormatError("label lengths do not match data dimensions")
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise PanelFormatError("panel contains non-finite values")
        y.setflags(write=False)
        x.setflags(write=False)
        if self.z is not None:
            self.z.setflags(write=False)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_x(self) -> int:
        return self.x.shape[2]

    @property
    def n_z(self) -> int:
        return 0 if self.z is None else self.z.shape[2]

    def dimensions(self):
        """(N, T, p, q) tuple."""
        return (self.n_units, self.n_periods, self.n_x, self.n_z)


@dataclass(frozen=True)
class HoldoutSlice:
    """Held-out outcomes and the covariate rows needed to forecast them."""

    y: np.ndarray  # (N, h)
    x: np.ndarray  # (N, h, p)
    z: Optional[np.ndarray]  # (N, h, q)
    period_ids: tuple


@dataclass(frozen=True)
class ModelConfig:
    """Selects which x-columns carry group-specific coefficients and
    whether error variances are grouped.

    group_slopes marks each x column; columns marked False are estimated
    with a single common coefficient alongside z.
    """

    group_slopes: tuple
    heteroskedastic: bool = True

    def __post_init__(self):
        gs = tuple(bool(b) for b in self.group_slopes)
        object.__setattr__(self, "group_slopes", gs)
        if not any(gs):
            raise ValueError("at least one x-column must be group-specific")

    @classmethod
    def for_data(cls, data: PanelDataset, heteroskedastic: bool = True) -> "ModelConfig":
        return cls(group_slopes=(True,) * data.n_x, heteroskedastic=heteroskedastic)


def _parse_float(value: str, column: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise NonNumericError(column, value) from None


def load_panel(path, n_x: Optional[int] = None) -> PanelDataset:
    """Load a long-format CSV panel.

    Expected header: ``unit,period,y,x1,...,xp[,z1,...,zq]``.  Every
    (unit, period) pair must be present exactly once; unbalanced panels
    are rejected with the offending unit named.

    n_x overrides the covariate split when column naming is ambiguous;
    by default columns named ``x*`` feed the group-effect block and
    ``z*`` the common block.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingCellError("<empty file>") from None
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise MissingCellError("<empty file>")

    header = [h.strip() for h in header]
    if len(header) < 3 or header[0] != "unit" or header[1] != "period":
        raise PanelFormatError(
            "header must start with 'unit,period,y'; got %r" % (header,)
        )
    value_cols = header[2:]
    if value_cols[0] != "y":
        raise PanelFormatError("third column must be 'y'")
    cov_cols = value_cols[1:]
    if n_x is None:
        n_x = sum(1 for c in cov_cols if not c.startswith("z"))
    if n_x < 1 or n_x > len(cov_cols):
        raise PanelFormatError("panel needs at least one x column")

    cells = {}
    for row in rows:
        if len(row) != len(header):
            raise PanelFormatError(f"row has {len(row)} fields, expected {len(header)}")
        unit = row[0].strip()
        period_raw = row[1].strip()
        try:
            period = float(period_raw)
            period = int(period) if period == int(period) else period
        except ValueError:
            period = period_raw
        key = (unit, period)
        if key in cells:
            raise DuplicateCellError(unit, period)
        cells[key] = [_parse_float(v, c) for v, c in zip(row[2:], value_cols)]

    units = sorted({k[0] for k in cells})
    periods = sorted({k[1] for k in cells})
    n, t = len(units), len(periods)
    values = np.empty((n, t, len(value_cols)))
    for i, unit in enumerate(units):
        for j, period in enumerate(periods):
            try:
                values[i, j] = cells[(unit, period)]
            except KeyError:
                raise MissingCellError(unit, period) from None

    y = values[:, :, 0]
    x = values[:, :, 1 : 1 + n_x]
    z = values[:, :, 1 + n_x :] if len(cov_cols) > n_x else None
    return PanelDataset(y=y, x=x, z=z, unit_ids=tuple(units), period_ids=tuple(periods))


def write_panel(data: PanelDataset, path) -> None:
    """Write a panel back to long-format CSV, round-trippable by load_panel."""
    p, q = data.n_x, data.n_z
    header = ["unit", "period", "y"]
    header += [f"x{j + 1}" for j in range(p)]
    header += [f"z{j + 1}" for j in range(q)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, unit in enumerate(data.unit_ids):
            for t, period in enumerate(data.period_ids):
                row = [unit, period, repr(float(data.y[i, t]))]
                row += [repr(float(v)) for v in data.x[i, t]]
                if data.z is not None:
                    row += [repr(float(v)) for v in data.z[i, t]]
                writer.writerow(row)


def split_holdout(data: PanelDataset, h: int):
    """Split off the last h periods as a forecast-evaluation sample.

    Returns (training panel with T - h periods, HoldoutSlice).  Requires
    h >= 1 and at least two remaining training periods.
    """
    if h < 1:
        raise ValueError("holdout horizon must be >= 1")
    t_train = data.n_periods - h
    if t_train < 2:
        raise HorizonTooLargeError(
            f"holdout of {h} leaves {t_train} training periods (need >= 2)"
        )
    train = PanelDataset(
        y=data.y[:, :t_train].copy(),
        x=data.x[:, :t_train].copy(),
        z=None if data.z is None else data.z[:, :t_train].copy(),
        unit_ids=data.unit_ids,
        period_ids=data.period_ids[:t_train],
    )
    holdout = HoldoutSlice(
        y=data.y[:, t_train:].copy(),
        x=data.x[:, t_train:].copy(),
        z=None if data.z is None else data.z[:, t_train:].copy(),
        period_ids=data.period_ids[t_train:],
    )
    return train, holdout


def append_holdout(train: PanelDataset, holdout: HoldoutSlice) -> PanelDataset:
    """Inverse of split_holdout."""
    z = None
    if train.z is not None:
        z = np.concatenate([train.z, holdout.z], axis=1)
    return PanelDataset(
        y=np.concatenate([train.y, holdout.y], axis=1),
        x=np.concatenate([train.x, holdout.x], axis=1),
        z=z,
        unit_ids=train.unit_ids,
        period_ids=tuple(train.period_ids) + tuple(holdout.period_ids),
    )


def add_lag_column(data: PanelDataset, to_z: bool = False) -> PanelDataset:
    """Materialize a lag-of-y covariate column.

    The first period has no observed lag, so the returned panel drops it
    (T shrinks by one).  The lag joins the x block by default, or the z
    block when the lag coefficient is common across groups.
    """
    if data.n_periods < 3:
        raise HorizonTooLargeError("need at least 3 periods to materialize a lag")
    lag = data.y[:, :-1][:, :, None]
    y = data.y[:, 1:]
    x = data.x[:, 1:]
    z = None if data.z is None else data.z[:, 1:]
    if to_z:
        z = lag if z is None else np.concatenate([z, lag], axis=2)
    else:
        x = np.concatenate([x, lag], axis=2)
    return PanelDataset(
        y=y.copy(),
        x=x.copy(),
        z=None if z is None else z.copy(),
        unit_ids=data.unit_ids,
        period_ids=data.period_ids[1:],
    )
