"""Synthetic step traces, induced anomalies and the three image datasets.

Every image comes from a freshly generated trace. Per-trace seeds are
derived from ``(seed, dataset, index, attempt)``, so builds are
reproducible and independent of evaluation order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig, SynthConfig
from .cwt import cwt_transform, load_png, render_scalogram, save_png
from .preprocess import (Polarity, detect_peaks, estimate_baseline_als, extract_oob_windows,
                         extract_window, normalize_minmax, subtract_baseline)
from .trace import Signal

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
DATASET1_CLASSES = ("H_L", "L_H", "O_o_B")
DATASET2_CLASSES = DATASET1_CLASSES + ("L_H_L", "L_H_R", "H_L_L", "H_L_R")
MAX_RETRIES = 10


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepRecipe:
    step_times: tuple
    step_levels: tuple
    noise_sigma: float = 0.01
    duration: float = 60.0
    rng_seed: int = 0
    initial_level: float = 0.0
    dt: float = 0.1

    def __post_init__(self):
        times = np.asarray(self.step_times, dtype=float)
        levels = np.asarray(self.step_levels, dtype=float)
        if times.shape != levels.shape:
            raise ValueError("need one level per step time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("step times must be strictly increasing")
        if times.size and (times[0] <= 0 or times[-1] >= self.duration):
            raise ValueError("step times must lie inside (0, duration)")
        if np.any((levels < 0) | (levels > 1)) or not 0 <= self.initial_level <= 1:
            raise ValueError("levels must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    shift_seconds: float | None = None
    factor: float | None = None

    def __post_init__(self):
        if self.kind == "time-shift":
            if self.shift_seconds is None or self.factor is not None:
                raise ValueError("a time-shift anomaly takes shift_seconds only")
        elif self.kind == "amplitude-shift":
            if self.factor is None or self.shift_seconds is not None:
                raise ValueError("an amplitude-shift anomaly takes factor only")
            if not self.factor > 0:
                raise ValueError("factor must be positive")
        else:
            raise ValueError(f"unknown anomaly kind {self.kind!r}")

    def apply(self, signal, baseline=None):
        if self.kind == "time-shift":
            return induce_time_shift(signal, self.shift_seconds)
        if baseline is None:
            baseline = estimate_baseline_als(signal)
        return induce_amplitude_shift(signal, baseline, self.factor)


def generate_step_trace(recipe, name="signal"):
    """Piecewise-constant trace plus i.i.d. Gaussian noise."""
    n = int(round(recipe.duration / recipe.dt))
    values = np.full(n, float(recipe.initial_level))
    for t, level in zip(recipe.step_times, recipe.step_levels):
        values[int(round(t / recipe.dt)):] = level
    if recipe.noise_sigma > 0:
        rng = np.random.default_rng(recipe.rng_seed)
        values = values + rng.normal(0.0, recipe.noise_sigma, n)
    return Signal(values, recipe.dt, name)


def induce_time_shift(signal, shift_seconds):
    """Delay (positive) or advance (negative) the whole signal.

    Vacated samples repeat the nearest original boundary value.
    """
    n = len(signal)
    m = int(round(shift_seconds / signal.dt))
    if abs(m) >= n:
        raise ValueError("shift must be shorter than the signal")
    src = np.clip(np.arange(n) - m, 0, n - 1)
    return signal.replace(signal.values[src])


def induce_amplitude_shift(signal, baseline, factor):
    """Scale the excursions of ``signal`` about ``baseline`` by ``factor``."""
    if not factor > 0:
        raise ValueError("factor must be positive")
    baseline = np.asarray(baseline, dtype=float)
    if baseline.shape != signal.values.shape:
        raise ValueError("baseline and signal lengths differ")
    y = signal.values
    return signal.replace(y + (factor - 1.0) * (y - baseline))


@dataclass
class ManifestEntry:
    path: str
    label: str
    split: str
    meta: dict = field(default_factory=dict)
    image: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_json(self):
        out = {"path": self.path, "label": self.label, "split": self.split}
        if self.meta:
            out["meta"] = self.meta
        return out


@dataclass
class DatasetManifest:
    """Image paths, labels and train/test assignment of one dataset."""

    class_names: list
    entries: list
    seed: int
    name: str = "dataset"
    train_fraction: float = 0.7
    root: Path | None = None
    generator_version: str = GENERATOR_VERSION

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError("class names must be distinct")
        known = set(self.class_names)
        for e in self.entries:
            if e.label not in known:
                raise DatasetError(f"entry {e.path} has unknown label {e.label!r}")

    def __len__(self):
        return len(self.entries)

    def counts(self, split=None):
        out = {c: 0 for c in self.class_names}
        for e in self.entries:
            if split is None or e.split == split:
                out[e.label] += 1
        return out

    def image(self, entry):
        if entry.image is None:
            if self.root is None:
                raise DatasetError(f"no pixels in memory and no root for {entry.path}")
            entry.image = load_png(self.root / entry.path)
        return entry.image

    def select(self, split=None, splits=None):
        """Entries of one split; ``splits`` overrides the stored assignment."""
        if splits is None:
            splits = [e.split for e in self.entries]
        return [e for e, s in zip(self.entries, splits) if split is None or s == split]

    def arrays(self, split=None, splits=None):
        """Return ``(images, labels)`` for ``split`` as ``(n,H,W,3)`` uint8 and str arrays."""
        chosen = self.select(split, splits)
        if not chosen:
            raise DatasetError(f"split {split!r} is empty")
        X = np.stack([self.image(e) for e in chosen])
        y = np.array([e.label for e in chosen])
        return X, y

    def resplit(self, train_fraction, seed=None):
        """Stratified split with a different train fraction, same seed by default."""
        return stratified_split([e.label for e in self.entries], train_fraction,
                                self.seed if seed is None else seed)

    def to_json(self):
        return {
            "class_names": list(self.class_names),
            "entries": [e.to_json() for e in self.entries],
            "generator_version": self.generator_version,
            "name": self.name,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    def save(self, root):
        """Write every image as PNG plus ``manifest.json`` under ``root``."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for e in self.entries:
            save_png(self.image(e), root / e.path)
        path = root / "manifest.json"
        path.write_text(self.dumps())
        self.root = root
        return path

    @classmethod
    def load(cls, path):
        """Read a manifest file (or a dataset directory containing one)."""
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            data = json.loads(path.read_text())
            entries = [ManifestEntry(d["path"], d["label"], d["split"], d.get("meta", {}))
                       for d in data["entries"]]
            return cls(list(data["class_names"]), entries, int(data["seed"]),
                       name=data.get("name", "dataset"),
                       train_fraction=float(data.get("train_fraction", 0.7)),
                       root=path.parent,
                       generator_version=str(data.get("generator_version", "?")))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"invalid manifest {path}: {exc}") from None


def stratified_split(labels, train_fraction, seed):
    """Per-class random split; ``round((1 - f) * n)`` items of each class go to test."""
    labels = np.asarray(labels)
    splits = np.array(["train"] * labels.size, dtype=object)
    for k, c in enumerate(sorted(set(labels.tolist()))):
        idx = np.flatnonzero(labels == c)
        rng = np.random.default_rng([int(seed), 7919, k])
        n_test = int(round((1.0 - train_fraction) * idx.size))
        if idx.size > 1:
            n_test = min(max(n_test, 1), idx.size - 1)
        else:
            n_test = 0
        splits[rng.permutation(idx)[:n_test]] = "test"
    return splits.tolist()


def _subseed(*key):
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def random_recipe(synth, seed):
    rng = np.random.default_rng(seed)
    j = synth.time_jitter
    rise = synth.rise_time + rng.uniform(-j, j)
    fall = synth.fall_time + rng.uniform(-j, j)
    high = rng.uniform(synth.level_low, synth.level_high)
    return StepRecipe((rise, fall), (high, 0.0), synth.noise_sigma, synth.duration,
                      rng_seed=int(rng.integers(2 ** 31)), dt=synth.dt)


def residual_of(signal, pipeline):
    norm = normalize_minmax(signal)
    return subtract_baseline(norm, estimate_baseline_als(norm, pipeline.als))


def _window_image(residual, center, pipeline, amplitude=None, hint=None):
    w = extract_window(residual, center, pipeline.window_seconds)
    sc = cwt_transform(w, pipeline.scale_grid, residual.dt)
    return render_scalogram(sc, pipeline.image_size, amplitude, hint).pixels


def _nearest_peak(residual, pipeline, expected):
    peaks = detect_peaks(residual, pipeline.peaks)
    if not peaks:
        return None
    return min(peaks, key=lambda p: abs(p.index - expected)).index


@dataclass
class _Run:
    """One generated trace and its detected rising and falling steps."""

    run_id: str
    recipe: StepRecipe
    signal: Signal
    residual: Signal
    rise: int
    fall: int
    peaks: list


def _generate_run(synth, pipeline, seed, dataset_id, index):
    for attempt in range(MAX_RETRIES):
        recipe = random_recipe(synth, _subseed(seed, dataset_id, index, attempt))
        signal = generate_step_trace(recipe)
        residual = residual_of(signal, pipeline)
        peaks = detect_peaks(residual, pipeline.peaks)
        tol = int(round(1.0 / synth.dt))
        want = [int(round(t / synth.dt)) for t in recipe.step_times]
        if len(peaks) == 2 and all(abs(p.index - w) <= tol for p, w in zip(peaks, want)) \
                and peaks[0].polarity is Polarity.RISING and peaks[1].polarity is Polarity.FALLING:
            return _Run(f"run{index:04d}", recipe, signal, residual,
                        peaks[0].index, peaks[1].index, peaks)
        log.debug("run %d attempt %d: unexpected peaks %s", index, attempt, peaks)
    raise DatasetError(f"trace {index} failed the pipeline after {MAX_RETRIES} attempts")


def _entry(label, run_id, center, pixels, meta):
    return ManifestEntry(f"{label}/{run_id}_{center}.png", label, "train",
                         dict(meta, run_id=run_id, center_index=int(center)), pixels)


def _base_entries(run, synth, pipeline, seed, dataset_id, index):
    oob = extract_oob_windows(run.residual, run.peaks, pipeline.window_seconds, 1,
                              _subseed(seed, dataset_id, index, 99),
                              pipeline.oob_clearance_seconds)[0]
    return [
        _entry("L_H", run.run_id, run.rise, _window_image(run.residual, run.rise, pipeline),
               {"peak_index": run.rise}),
        _entry("H_L", run.run_id, run.fall, _window_image(run.residual, run.fall, pipeline),
               {"peak_index": run.fall}),
        _entry("O_o_B", run.run_id, oob.center_index,
               _window_image(run.residual, oob.center_index, pipeline), {}),
    ]


def _shift_entries(run, synth, pipeline):
    out = []
    for side, shift in (("L", -synth.shift_seconds), ("R", synth.shift_seconds)):
        shifted = residual_of(induce_time_shift(run.signal, shift), pipeline)
        m = int(round(shift / synth.dt))
        # windows stay at the expected (unshifted) step positions
        for parent, center in (("L_H", run.rise), ("H_L", run.fall)):
            label = f"{parent}_{side}"
            pixels = _window_image(shifted, center, pipeline)
            out.append(_entry(label, run.run_id, center, pixels, {
                "peak_index": _nearest_peak(shifted, pipeline, center + m),
                "expected_index": int(center), "shift_samples": m}))
    return out


def _finish(entries, class_names, seed, name, train_fraction):
    order = {c: k for k, c in enumerate(class_names)}
    entries.sort(key=lambda e: (order[e.label], e.path))
    splits = stratified_split([e.label for e in entries], train_fraction, seed)
    for e, s in zip(entries, splits):
        e.split = s
    return DatasetManifest(list(class_names), entries, int(seed), name, train_fraction)


def build_dataset1(n_per_class=56, seed=0, synth=None, pipeline=None, train_fraction=0.7):
    """Normal steps and idle windows: classes ``H_L``, ``L_H``, ``O_o_B``."""
    synth = synth or SynthConfig(n_per_class=n_per_class)
    pipeline = pipeline or PipelineConfig()
    if n_per_class < 4:
        raise ValueError("n_per_class must be at least 4")
    entries = []
    for i in range(n_per_class):
        run = _generate_run(synth, pipeline, seed, 1, i)
        entries += _base_entries(run, synth, pipeline, seed, 1, i)
    return _finish(entries, DATASET1_CLASSES, seed, "dataset1", train_fraction)


def build_dataset2(n_per_class=56, seed=0, synth=None, pipeline=None, train_fraction=0.7):
    """Dataset-1 classes plus left/right time-shifted rising and falling steps."""
    synth = synth or SynthConfig(n_per_class=n_per_class)
    pipeline = pipeline or PipelineConfig()
    if n_per_class < 4:
        raise ValueError("n_per_class must be at least 4")
    entries = []
    for i in range(n_per_class):
        run = _generate_run(synth, pipeline, seed, 2, i)
        entries += _base_entries(run, synth, pipeline, seed, 2, i)
        entries += _shift_entries(run, synth, pipeline)
    return _finish(entries, DATASET2_CLASSES, seed, "dataset2", train_fraction)


def dataset3_label(group, factor):
    return f"P{group}_x{factor:g}"


def build_dataset3(seed=0, synth=None, pipeline=None):
    """Amplitude-scaled copies of the two steps of one normal trace.

    Each peak gives a group of images at factors 1.0 plus ``synth.factors``;
    every image is its own class. With global normalisation all images share
    one colour range, the largest absolute coefficient over the set.
    """
    synth = synth or SynthConfig()
    pipeline = pipeline or PipelineConfig()
    run = _generate_run(synth, pipeline, seed, 3, 0)
    norm = normalize_minmax(run.signal)
    baseline = estimate_baseline_als(norm, pipeline.als)
    factors = sorted({1.0, *synth.factors})
    grid = pipeline.scale_grid
    items = []
    for f in factors:
        shifted = induce_amplitude_shift(norm, baseline, f)
        residual = subtract_baseline(shifted, estimate_baseline_als(shifted, pipeline.als))
        for g, center in ((1, run.rise), (2, run.fall)):
            w = extract_window(residual, center, pipeline.window_seconds)
            items.append((g, f, center, cwt_transform(w, grid, residual.dt)))
    if synth.dataset3_normalization == "global":
        amplitude = max(float(np.abs(sc.coefficients).max()) for *_, sc in items)
    else:
        amplitude = None
    entries = []
    for g, f, center, sc in sorted(items, key=lambda it: (it[0], it[1])):
        label = dataset3_label(g, f)
        pixels = render_scalogram(sc, pipeline.image_size, amplitude).pixels
        entries.append(ManifestEntry(f"{label}/{run.run_id}_{center}.png", label, "train",
                                     {"group": g, "factor": f, "center_index": int(center),
                                      "run_id": run.run_id}, pixels))
    names = [e.label for e in entries]
    return DatasetManifest(names, entries, int(seed), "dataset3", 1.0)


def build_dataset(dataset_id, seed=0, synth=None, pipeline=None, train_fraction=0.7):
    synth = synth or SynthConfig()
    if dataset_id == 1:
        return build_dataset1(synth.n_per_class, seed, synth, pipeline, train_fraction)
    if dataset_id == 2:
        return build_dataset2(synth.n_per_class, seed, synth, pipeline, train_fraction)
    if dataset_id == 3:
        return build_dataset3(seed, synth, pipeline)
    raise ValueError(f"unknown dataset id {dataset_id}")


def make_reference_trace(seed=0, n_variables=2, duration=90.0, synth=None):
    """A known-good multivariate run: every variable steps up and back down once.

    Step times differ per variable and are spaced well beyond the peak
    spacing rule.
    """
    from .trace import MultivariateTrace

    synth = synth or SynthConfig()
    signals = []
    for v in range(n_variables):
        rng = np.random.default_rng([int(seed), 31, v])
        rise = 20.0 + 7.0 * v + rng.uniform(-1, 1)
        fall = rise + 30.0 + rng.uniform(-1, 1)
        high = rng.uniform(synth.level_low, synth.level_high)
        recipe = StepRecipe((rise, fall), (high, 0.0), synth.noise_sigma, duration,
                            rng_seed=int(rng.integers(2 ** 31)), dt=synth.dt)
        signals.append(generate_step_trace(recipe, name=f"var{v + 1}"))
    return MultivariateTrace(tuple(signals), run_id=f"reference{seed}", recipe_id="synthetic")


def with_anomaly(trace, variable, anomaly, als=None):
    """Copy of ``trace`` with ``anomaly`` applied to one variable."""
    from .preprocess import AlsConfig
    from .trace import MultivariateTrace

    signals = []
    for s in trace.signals:
        if s.name == variable:
            baseline = estimate_baseline_als(s, als or AlsConfig()) \
                if anomaly.kind == "amplitude-shift" else None
            s = anomaly.apply(s, baseline)
        signals.append(s)
    if variable not in trace.names:
        raise KeyError(variable)
    return MultivariateTrace(tuple(signals), run_id=f"{trace.run_id}-query", recipe_id=trace.recipe_id)
