"""Shared-weight pair scoring and the reference-vs-query trace scan.

Both branches of the pair run the same trained classifier; the score of a
pair is the dot product of the two class-probability vectors.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .cwt import cwt_transform, render_scalogram
from .preprocess import detect_peaks, extract_window, oob_centers, window_half_width


class ScanError(ValueError):
    pass


@dataclass(frozen=True)
class SiamesePair:
    anchor: np.ndarray
    query: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        if np.shape(self.anchor) != np.shape(self.query):
            raise ValueError("anchor and query images differ in shape")


@dataclass(frozen=True)
class SimilarityVerdict:
    time_index: int
    window_center_seconds: float
    score: float
    anchor_class: str
    query_class: str
    is_anomaly: bool


def pair_scores(p, q):
    """Row-wise dot products of probability matrices."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return np.einsum("ij,ij->i", np.broadcast_to(p, q.shape), q)


def similarity(model, pair):
    """Dot product of the class-probability vectors of anchor and query."""
    pa = model.predict_proba(np.asarray(pair.anchor)[None])[0]
    pq = model.predict_proba(np.asarray(pair.query)[None])[0]
    if pa.shape != pq.shape:
        raise ValueError("branch outputs differ in shape")
    return float(np.dot(pa, pq))


class SiameseScorer(BaseEstimator):
    """Pair scorer sharing one classifier between both branches.

    Parameters
    ----------
    classifier : estimator with ``predict_proba``
        Fitted, or fitted by :meth:`fit` on labelled images.
    threshold : float
        Pairs scoring below this are reported as anomalous.
    """

    def __init__(self, classifier=None, threshold=0.5):
        self.classifier = classifier
        self.threshold = threshold

    def fit(self, X, y):
        self.classifier_ = clone(self.classifier).fit(X, y)
        return self

    @property
    def _clf(self):
        return getattr(self, "classifier_", None) or self.classifier

    def score_pairs(self, anchors, queries):
        anchors = np.asarray(anchors)
        queries = np.asarray(queries)
        if anchors.shape != queries.shape:
            raise ValueError("anchor and query batches differ in shape")
        clf = self._clf
        check_is_fitted(clf)
        return pair_scores(clf.predict_proba(anchors), clf.predict_proba(queries))

    def predict(self, anchors, queries):
        """True where the pair is anomalous."""
        return self.score_pairs(anchors, queries) < self.threshold


def _probe_centers(n, peak_indices, half, stride, clearance):
    valid = oob_centers(n, peak_indices, half, max(clearance, half))
    grid = np.arange(half, n - half, max(stride, 1))
    return [int(c) for c in grid if valid[c]]


def scan_signal(model, reference, query, pipeline, threshold=0.5):
    """Score query windows against reference windows at the same positions.

    Windows sit on the reference's detected peaks plus idle probes on a
    fixed stride over peak-free stretches. Returns verdicts ordered in time.
    """
    from .synth import residual_of

    if len(reference) != len(query) or reference.dt != query.dt:
        raise ScanError("reference and query must share length and dt")
    ref_res = residual_of(reference, pipeline)
    qry_res = residual_of(query, pipeline)
    peaks = [p.index for p in detect_peaks(ref_res, pipeline.peaks)]
    half = window_half_width(pipeline.window_seconds, reference.dt)
    stride = int(round(pipeline.probe_stride_seconds / reference.dt))
    clearance = int(round(pipeline.oob_clearance_seconds / reference.dt))
    probes = _probe_centers(len(reference), peaks, half, stride, clearance)
    if not peaks:
        warnings.warn(f"no reference peaks found in {reference.name!r}; scanning idle probes only")
    centers = sorted(set(peaks) | set(probes))
    if not centers:
        return []

    grid = pipeline.scale_grid
    ref_sc = [cwt_transform(extract_window(ref_res, c, pipeline.window_seconds), grid, ref_res.dt)
              for c in centers]
    qry_sc = [cwt_transform(extract_window(qry_res, c, pipeline.window_seconds), grid, qry_res.dt)
              for c in centers]
    amplitude = pipeline.amplitude
    if pipeline.normalization == "global" and amplitude is None:
        # shared colour range taken from the known-good reference
        amplitude = max(float(np.abs(s.coefficients).max()) for s in ref_sc) or None
    if pipeline.normalization == "per-image":
        amplitude = None
    anchors = np.stack([render_scalogram(s, pipeline.image_size, amplitude).pixels for s in ref_sc])
    queries = np.stack([render_scalogram(s, pipeline.image_size, amplitude).pixels for s in qry_sc])

    pa = model.predict_proba(anchors)
    pq = model.predict_proba(queries)
    scores = pair_scores(pa, pq)
    classes = np.asarray(model.classes_)
    out = []
    for t, (c, s) in enumerate(zip(centers, scores)):
        out.append(SimilarityVerdict(
            time_index=t, window_center_seconds=round(c * reference.dt, 10), score=float(s),
            anchor_class=str(classes[np.argmax(pa[t])]),
            query_class=str(classes[np.argmax(pq[t])]),
            is_anomaly=bool(s < threshold)))
    return out


def scan_trace(model, reference, query, pipeline, threshold=0.5):
    """Run :func:`scan_signal` on every variable.

    Returns ``{variable: [SimilarityVerdict, ...]}`` in the reference's
    variable order.
    """
    if sorted(reference.names) != sorted(query.names):
        raise ScanError(f"variable mismatch: {reference.names} vs {query.names}")
    if reference.dt != query.dt:
        raise ScanError("reference and query sampling intervals differ")
    return {name: scan_signal(model, reference[name], query[name], pipeline, threshold)
            for name in reference.names}


def verdicts_to_json(variable, verdicts, threshold, model_checksum=None):
    return {"variable": variable, "verdicts": [asdict(v) for v in verdicts],
            "threshold": threshold, "model_checksum": model_checksum}


def report_scan(verdicts, path, threshold=0.5, model_checksum=None, timeline_dir=None):
    """Write the scan report JSON and, optionally, one timeline PNG per variable.

    ``verdicts`` is the mapping returned by :func:`scan_trace` (a bare list is
    reported as variable ``"signal"``).
    """
    if not isinstance(verdicts, dict):
        verdicts = {"signal": list(verdicts)}
    path = Path(path)
    report = [verdicts_to_json(name, vs, threshold, model_checksum) for name, vs in verdicts.items()]
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    if timeline_dir is not None:
        from .plotting import plot_timeline
        for name, vs in verdicts.items():
            plot_timeline(vs, threshold, Path(timeline_dir) / f"timeline_{name}.png", title=name)
    return path


def load_report(path):
    """Parse a report back into ``{variable: [SimilarityVerdict, ...]}``."""
    data = json.loads(Path(path).read_text())
    return {d["variable"]: [SimilarityVerdict(**v) for v in d["verdicts"]] for d in data}


def count_flags(verdicts):
    if isinstance(verdicts, dict):
        return sum(count_flags(v) for v in verdicts.values())
    return sum(v.is_anomaly for v in verdicts)
