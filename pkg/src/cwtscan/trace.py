"""Time-series containers and the trace CSV exchange format."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed into a valid trace."""


@dataclass(frozen=True)
class Signal:
    """A uniformly sampled univariate series.

    Parameters
    ----------
    values : array-like of float
        Samples, finite and nonempty.
    dt : float
        Sampling interval in seconds.
    name : str
        Identifier, used as the CSV column header.
    """

    values: np.ndarray
    dt: float = 0.1
    name: str = "signal"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("signal values must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"signal {self.name!r} contains non-finite samples")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self):
        return self.values.size

    @property
    def duration(self):
        return self.values.size * self.dt

    def replace(self, values, name=None):
        """Return a signal with the same sampling but new samples."""
        return Signal(values, self.dt, self.name if name is None else name)


@dataclass(frozen=True)
class MultivariateTrace:
    """Synchronised signals from one process run."""

    signals: tuple
    run_id: str = "run"
    recipe_id: str = "recipe"

    def __post_init__(self):
        signals = tuple(self.signals)
        if not signals:
            raise ValueError("a trace needs at least one signal")
        n, dt = len(signals[0]), signals[0].dt
        for s in signals:
            if len(s) != n or s.dt != dt:
                raise ValueError("all signals of a trace must share length and dt")
        names = [s.name for s in signals]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate signal names: {names}")
        object.__setattr__(self, "signals", signals)

    @property
    def dt(self):
        return self.signals[0].dt

    @property
    def names(self):
        return [s.name for s in self.signals]

    def __len__(self):
        return len(self.signals[0])

    def __getitem__(self, name):
        for s in self.signals:
            if s.name == name:
                return s
        raise KeyError(name)


@dataclass(frozen=True)
class TimeWindow:
    """A fixed-length excerpt of a signal centred on ``center_index``.

    ``samples`` has ``2 * half_width_samples + 1`` entries; positions
    falling outside the parent signal are zero.
    """

    center_index: int
    half_width_samples: int
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.shape != (2 * self.half_width_samples + 1,):
            raise ValueError("window length must be 2 * half_width_samples + 1")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def start_index(self):
        return self.center_index - self.half_width_samples


def load_trace_csv(path, run_id=None, recipe_id="recipe"):
    """Read a trace written as ``time,<name1>,<name2>,...`` columns.

    The sampling interval is inferred from the time column, which must be
    uniformly spaced (relative tolerance 1e-9).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    header = [h.strip() for h in header]
    if len(header) < 2:
        raise TraceFormatError(f"{path}: need a time column and at least one signal column")
    if not rows:
        raise TraceFormatError(f"{path}: no data rows")
    try:
        data = np.array([[float(c) for c in row] for row in rows])
    except ValueError as exc:
        raise TraceFormatError(f"{path}: non-numeric cell ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise TraceFormatError(f"{path}: ragged rows")
    if np.isnan(data).any():
        raise TraceFormatError(f"{path}: missing (NaN) values are not supported")
    if not np.all(np.isfinite(data)):
        raise TraceFormatError(f"{path}: non-finite values")

    time = data[:, 0]
    if time.size == 1:
        raise TraceFormatError(f"{path}: cannot infer dt from a single row")
    dt = (time[-1] - time[0]) / (time.size - 1)
    if not dt > 0:
        raise TraceFormatError(f"{path}: time column must be increasing")
    expected = time[0] + dt * np.arange(time.size)
    if np.max(np.abs(time - expected)) > 1e-9 * max(abs(time[-1]), dt):
        raise TraceFormatError(f"{path}: non-uniform time grid")

    signals = tuple(Signal(data[:, j], dt, name) for j, name in enumerate(header[1:], start=1))
    return MultivariateTrace(signals, run_id=run_id or path.stem, recipe_id=recipe_id)


def save_trace_csv(trace, path):
    """Write ``trace`` so that :func:`load_trace_csv` reproduces it exactly."""
    if isinstance(trace, Signal):
        trace = MultivariateTrace((trace,))
    if not isinstance(trace, MultivariateTrace):
        raise TypeError("expected a MultivariateTrace")
    path = Path(path)
    n = len(trace)
    columns = [trace.dt * np.arange(n)] + [s.values for s in trace.signals]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time"] + trace.names)
        for i in range(n):
            # repr() round-trips float64 exactly
            writer.writerow([repr(float(c[i])) for c in columns])


def as_trace(signals: Sequence[Signal], run_id="run", recipe_id="recipe"):
    return MultivariateTrace(tuple(signals), run_id=run_id, recipe_id=recipe_id)
