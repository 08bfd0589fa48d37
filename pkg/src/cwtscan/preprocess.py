"""Step-signature extraction: min-max scaling, smooth baseline removal,
peak picking and window extraction.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import solveh_banded
from sklearn.base import BaseEstimator, TransformerMixin

from .trace import Signal, TimeWindow


@dataclass(frozen=True)
class AlsConfig:
    """Penalised least-squares baseline settings.

    ``lam`` weighs the squared second differences of the baseline, ``w`` the
    fidelity to the data. With a constant ``w`` the problem has no
    asymmetric reweighting and is solved in a single banded solve.
    """

    lam: float = 1e4
    w: float = 0.5

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 0 < self.w <= 1:
            raise ValueError("w must lie in (0, 1]")


@dataclass(frozen=True)
class PeakConfig:
    min_height: float = 0.1
    min_spacing_seconds: float = 10.0

    def __post_init__(self):
        if not self.min_height > 0:
            raise ValueError("min_height must be positive")
        if not self.min_spacing_seconds > 0:
            raise ValueError("min_spacing_seconds must be positive")


class Polarity(str, Enum):
    RISING = "rising-step"
    FALLING = "falling-step"


@dataclass(frozen=True)
class PeakEvent:
    index: int
    amplitude: float
    polarity: Polarity


def normalize_minmax(signal):
    """Affinely map ``signal`` onto [0, 1]; a constant signal maps to zeros."""
    y = signal.values
    lo, hi = y.min(), y.max()
    if hi == lo:
        return signal.replace(np.zeros_like(y))
    out = (y - lo) / (hi - lo)
    # pin the extrema exactly; rounding can leave max at 1 - ulp
    out[y == lo] = 0.0
    out[y == hi] = 1.0
    return signal.replace(out)


def _penalty_bands(n, lam, w):
    """Upper banded form of ``w*I + lam * D.T @ D`` for ``solveh_banded``."""
    # D.T @ D for the second difference operator, diagonals 0, 1, 2
    d0 = np.full(n, 6.0)
    d0[[0, -1]] = 1.0
    d0[[1, -2]] = 5.0
    d1 = np.full(n - 1, -4.0)
    d1[[0, -1]] = -2.0
    d2 = np.ones(n - 2)
    ab = np.zeros((3, n))
    ab[0, 2:] = lam * d2
    ab[1, 1:] = lam * d1
    ab[2, :] = w + lam * d0
    return ab


def second_difference_matrix(n):
    """Dense ``(n - 2, n)`` second-difference operator."""
    D = np.zeros((n - 2, n))
    i = np.arange(n - 2)
    D[i, i] = 1.0
    D[i, i + 1] = -2.0
    D[i, i + 2] = 1.0
    return D


def als_cost(y, z, cfg):
    """Penalised least-squares objective minimised by the baseline."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    return cfg.w * np.sum((y - z) ** 2) + cfg.lam * np.sum(np.diff(z, 2) ** 2)


def estimate_baseline_als(signal, cfg=AlsConfig()):
    """Return the minimiser of the smoothness-penalised least-squares cost.

    Solves ``(w I + lam D^T D) z = w y`` with a banded Cholesky factorisation;
    the matrix is symmetric positive definite with two off-diagonals.

    Returns
    -------
    baseline : numpy.ndarray
        Same length as ``signal``.
    """
    y = signal.values if isinstance(signal, Signal) else np.asarray(signal, dtype=float)
    n = y.size
    if n < 3:
        raise ValueError("baseline estimation needs at least 3 samples")
    # solve for the correction z - y: exact (to rounding) on the penalty null space
    rhs = -cfg.lam * np.convolve(np.diff(y, 2), [1.0, -2.0, 1.0])
    ab = _penalty_bands(n, cfg.lam, cfg.w)
    return y + solveh_banded(ab, rhs, lower=False, check_finite=False)


def subtract_baseline(signal, baseline):
    baseline = np.asarray(baseline, dtype=float)
    if baseline.shape != signal.values.shape:
        raise ValueError(
            f"baseline length {baseline.size} does not match signal length {len(signal)}")
    return signal.replace(signal.values - baseline)


def _polarity(residual, index, half):
    left = residual[max(index - half, 0):index]
    right = residual[index + 1:index + 1 + half]
    balance = (right.sum() if right.size else 0.0) - (left.sum() if left.size else 0.0)
    # a rising step leaves a negative lobe before it and a positive lobe after it
    if balance == 0:
        balance = residual[index]
    return Polarity.RISING if balance > 0 else Polarity.FALLING


def detect_peaks(residual, cfg=PeakConfig()):
    """Find step signatures as local maxima of ``|residual|``.

    Candidates are local maxima at least ``cfg.min_height`` tall. They are
    accepted greedily from largest to smallest, dropping any candidate closer
    than ``min_spacing_seconds / dt`` samples to an accepted one.

    Returns
    -------
    list of PeakEvent
        Sorted by index.
    """
    r = residual.values
    a = np.abs(r)
    n = a.size
    if n < 3:
        return []
    left = np.concatenate(([-np.inf], a[:-1]))
    right = np.concatenate((a[1:], [-np.inf]))
    # plateaus: keep the first sample of a flat top
    candidates = np.flatnonzero((a > left) & (a >= right) & (a >= cfg.min_height))
    spacing = int(round(cfg.min_spacing_seconds / residual.dt))
    order = candidates[np.lexsort((candidates, -a[candidates]))]
    accepted = []
    for idx in order:
        if all(abs(idx - j) >= spacing for j in accepted):
            accepted.append(int(idx))
    accepted.sort()
    half = max(1, int(round(1.0 / residual.dt)))
    return [PeakEvent(i, float(r[i]), _polarity(r, i, half)) for i in accepted]


def window_half_width(window_seconds, dt):
    if not window_seconds > 0:
        raise ValueError("window_seconds must be positive")
    return int(round(window_seconds / dt)) // 2


def extract_window(signal, peak, window_seconds=10.0):
    """Cut ``round(window_seconds/dt) + 1`` samples centred on the peak.

    ``peak`` may be a :class:`PeakEvent` or a plain sample index. Parts of
    the window beyond the signal edges are zero-filled.
    """
    center = peak.index if isinstance(peak, PeakEvent) else int(peak)
    n = len(signal)
    if not 0 <= center < n:
        raise ValueError(f"window center {center} outside signal of length {n}")
    half = window_half_width(window_seconds, signal.dt)
    out = np.zeros(2 * half + 1)
    lo, hi = max(center - half, 0), min(center + half + 1, n)
    out[lo - (center - half):hi - (center - half)] = signal.values[lo:hi]
    return TimeWindow(center, half, out)


def oob_centers(n, peak_indices, half, exclusion):
    """Boolean mask of centres whose full window fits and avoids every peak."""
    valid = np.zeros(n, dtype=bool)
    if n >= 2 * half + 1:
        valid[half:n - half] = True
    for p in peak_indices:
        valid[max(p - exclusion + 1, 0):p + exclusion] = False
    return valid


def extract_oob_windows(residual, peaks, window_seconds=10.0, count=1, rng_seed=0,
                        clearance_seconds=None):
    """Sample ``count`` windows from peak-free stretches of ``residual``.

    Window centres are drawn uniformly without replacement among positions
    that keep the whole window inside the signal and lie at least
    ``clearance_seconds`` (default: half a window) from every peak.
    """
    half = window_half_width(window_seconds, residual.dt)
    if clearance_seconds is None:
        clearance = half
    else:
        clearance = max(int(round(clearance_seconds / residual.dt)), half)
    n = len(residual)
    if n <= 2 * half + 1:
        raise ValueError("residual is not longer than the window")
    indices = [p.index if isinstance(p, PeakEvent) else int(p) for p in peaks]
    valid = np.flatnonzero(oob_centers(n, indices, half, clearance))
    if valid.size < count:
        raise ValueError(
            f"only {valid.size} peak-free window centres available, {count} requested")
    rng = np.random.default_rng(rng_seed)
    centers = np.sort(rng.choice(valid, size=count, replace=False))
    return [extract_window(residual, int(c), window_seconds) for c in centers]


def baseline_residual(signal, als=AlsConfig()):
    """Normalise, estimate the baseline, and return ``(residual, baseline)``."""
    norm = normalize_minmax(signal)
    baseline = estimate_baseline_als(norm, als)
    return subtract_baseline(norm, baseline), baseline


class BaselineCorrector(TransformerMixin, BaseEstimator):
    """Min-max scale each row and remove its smooth baseline.

    Stateless; ``fit`` only validates parameters. Rows of ``X`` are treated
    as independent signals.
    """

    def __init__(self, lam=1e4, w=0.5, normalize=True):
        self.lam = lam
        self.w = w
        self.normalize = normalize

    def fit(self, X, y=None):
        AlsConfig(self.lam, self.w)
        self.n_features_in_ = np.asarray(X).shape[-1]
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_array, check_is_fitted

        check_is_fitted(self)
        X = check_array(X, ensure_min_features=3)
        cfg = AlsConfig(self.lam, self.w)
        out = np.empty_like(X)
        for i, row in enumerate(X):
            s = Signal(row)
            if self.normalize:
                s = normalize_minmax(s)
            out[i] = s.values - estimate_baseline_als(s, cfg)
        return out
