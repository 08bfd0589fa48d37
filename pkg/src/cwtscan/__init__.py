"""Anomaly detection on step-wise process traces via wavelet scalograms and
shared-weight similarity scoring."""

__version__ = "0.1.0"

from .classifier import ScalogramCNNClassifier, train_classifier
from .cwt import ScaleGrid, Scalogram, ScalogramImage, ScalogramImager, cwt_transform, render_scalogram, ricker
from .preprocess import (AlsConfig, BaselineCorrector, PeakConfig, PeakEvent, detect_peaks,
                         estimate_baseline_als, extract_oob_windows, extract_window,
                         normalize_minmax, subtract_baseline)
from .siamese import SiamesePair, SiameseScorer, SimilarityVerdict, scan_trace, similarity
from .trace import MultivariateTrace, Signal, TimeWindow, load_trace_csv, save_trace_csv

__all__ = [
    "AlsConfig", "BaselineCorrector", "MultivariateTrace", "PeakConfig", "PeakEvent",
    "ScaleGrid", "Scalogram", "ScalogramCNNClassifier", "ScalogramImage", "ScalogramImager",
    "SiamesePair", "SiameseScorer", "Signal", "SimilarityVerdict", "TimeWindow",
    "cwt_transform", "detect_peaks", "estimate_baseline_als", "extract_oob_windows",
    "extract_window", "load_trace_csv", "normalize_minmax", "render_scalogram", "ricker",
    "save_trace_csv", "scan_trace", "similarity", "subtract_baseline", "train_classifier",
]
