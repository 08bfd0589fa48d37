"""Mexican-hat continuous wavelet transform and scalogram rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .trace import TimeWindow

RICKER_NORM = 2.0 / (np.sqrt(3.0) * np.pi ** 0.25)
MID_GRAY = 128


def ricker(t):
    """Unit-energy Mexican hat wavelet ``c (1 - t^2) exp(-t^2 / 2)``."""
    t = np.asarray(t, dtype=float)
    t2 = t * t
    return RICKER_NORM * (1.0 - t2) * np.exp(-0.5 * t2)


@dataclass(frozen=True)
class ScaleGrid:
    scales: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("scale grid must be a nonempty 1-D sequence")
        if np.any(s <= 0) or np.any(np.diff(s) <= 0):
            raise ValueError("scales must be positive and strictly increasing")
        s.setflags(write=False)
        object.__setattr__(self, "scales", s)

    @classmethod
    def logspace(cls, smallest=0.2, largest=5.0, count=32):
        return cls(np.geomspace(smallest, largest, count))

    def __len__(self):
        return self.scales.size


@dataclass(frozen=True)
class Scalogram:
    coefficients: np.ndarray
    scale_grid: ScaleGrid
    dt: float

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        if c.ndim != 2 or c.shape[0] != len(self.scale_grid):
            raise ValueError("coefficient rows must match the scale grid")
        if not np.all(np.isfinite(c)):
            raise ValueError("scalogram contains non-finite coefficients")
        object.__setattr__(self, "coefficients", c)

    def __neg__(self):
        return Scalogram(-self.coefficients, self.scale_grid, self.dt)


@dataclass(frozen=True)
class ScalogramImage:
    pixels: np.ndarray = field(repr=False)
    source_class_hint: str | None = None

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError("scalogram image must be an H x W x 3 uint8 array")
        object.__setattr__(self, "pixels", p)

    @property
    def size(self):
        return self.pixels.shape[0]

    def save_png(self, path):
        save_png(self.pixels, path)


def _samples(window):
    if isinstance(window, TimeWindow):
        return window.samples
    return np.asarray(window, dtype=float)


def cwt_direct(window, grid, dt):
    """Reference O(N^2 S) evaluation of the transform, one term at a time."""
    x = _samples(window)
    n = x.size
    out = np.zeros((len(grid), n))
    for s, f in enumerate(grid.scales):
        for k in range(n):
            acc = 0.0
            for kp in range(n):
                acc += x[kp] * float(ricker((kp - k) * dt / f))
            out[s, k] = acc
    return Scalogram(out, grid, dt)


def cwt_transform(window, grid, dt):
    """Mexican-hat CWT of a window.

    ``coefficients[s, n] = sum_m x[m] * psi((m - n) * dt / scale[s])``,
    evaluated as a matrix product against the sampled wavelet at every lag
    ``-(N-1) .. N-1``. The window is taken as zero outside its extent.
    """
    x = _samples(window)
    n = x.size
    lags = np.arange(-(n - 1), n) * dt
    kernels = ricker(lags[None, :] / grid.scales[:, None])  # (S, 2N-1)
    # toeplitz gather: row n of the lag matrix holds lags m - n for m = 0..N-1
    idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) + (n - 1)
    coeffs = np.einsum("snm,m->sn", kernels[:, idx], x)
    return Scalogram(coeffs, grid, dt)


def _diverging_rgb(c, amplitude):
    """Blue (-A) / white (0) / red (+A) colour map, values clipped to [-A, A]."""
    v = np.clip(c / amplitude, -1.0, 1.0)
    pos = np.clip(v, 0.0, 1.0)
    neg = np.clip(-v, 0.0, 1.0)
    r = 1.0 - neg
    g = 1.0 - pos - neg
    b = 1.0 - pos
    return np.stack([r, g, b], axis=-1)


def _bilinear_axis(arr, size, axis):
    n = arr.shape[axis]
    if n == size:
        return arr
    src = np.linspace(0.0, n - 1, size)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1] * arr.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - frac) + np.take(arr, hi, axis=axis) * frac


def render_scalogram(scalogram, size=64, amplitude=None, class_hint=None):
    """Render a scalogram as a ``size x size`` RGB image.

    Coefficients go through a signed diverging map scaled by ``amplitude``
    (default: ``max |coefficients|`` of this scalogram) and are resampled
    bilinearly, time running left to right and the largest scale at the
    bottom. A zero amplitude yields a uniform mid-gray image.
    """
    c = scalogram.coefficients
    a = float(np.max(np.abs(c))) if amplitude is None else float(amplitude)
    if a <= 0:
        return ScalogramImage(np.full((size, size, 3), MID_GRAY, np.uint8), class_hint)
    rgb = _diverging_rgb(c, a)
    rgb = _bilinear_axis(_bilinear_axis(rgb, size, 0), size, 1)
    # row 0 is the smallest scale; image row 0 is the top
    pixels = np.rint(rgb * 255.0).clip(0, 255).astype(np.uint8)
    return ScalogramImage(np.ascontiguousarray(pixels), class_hint)


def save_png(pixels, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed encoder settings and no metadata keep files byte-reproducible
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(
        path, format="PNG", optimize=False, compress_level=6)


def load_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


class ScalogramImager(TransformerMixin, BaseEstimator):
    """Turn fixed-length windows into rendered scalogram images.

    Parameters
    ----------
    dt : float
        Sampling interval of the windows, seconds.
    min_scale, max_scale, n_scales : float, float, int
        Logarithmic scale grid, seconds.
    size : int
        Output image side length in pixels.
    normalization : {'per-image', 'global'}
        With ``'global'``, ``fit`` records the largest absolute coefficient
        over the training windows and every image shares that colour range,
        so relative amplitude survives rendering.
    amplitude : float or None
        Explicit shared colour range; overrides what ``fit`` learns.

    ``transform`` returns an ``(n, size, size, 3)`` uint8 array.
    """

    def __init__(self, dt=0.1, min_scale=0.2, max_scale=5.0, n_scales=32, size=64,
                 normalization="per-image", amplitude=None):
        self.dt = dt
        self.min_scale = min_scale
        self.max_scale = max_scale
        self.n_scales = n_scales
        self.size = size
        self.normalization = normalization
        self.amplitude = amplitude

    @property
    def grid_(self):
        return ScaleGrid.logspace(self.min_scale, self.max_scale, self.n_scales)

    def scalograms(self, X):
        X = check_array(X)
        grid = self.grid_
        return [cwt_transform(row, grid, self.dt) for row in X]

    def fit(self, X, y=None):
        if self.normalization not in ("per-image", "global"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        if self.amplitude is not None:
            self.amplitude_ = float(self.amplitude)
        elif self.normalization == "global":
            self.amplitude_ = max(float(np.abs(s.coefficients).max()) for s in self.scalograms(X))
        else:
            self.amplitude_ = None
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return np.stack([render_scalogram(s, self.size, self.amplitude_).pixels
                         for s in self.scalograms(X)])
