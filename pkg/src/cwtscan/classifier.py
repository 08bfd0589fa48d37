"""Estimator wrapper around :class:`~cwtscan.nn.CompactCnn`."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn

log = logging.getLogger(__name__)


def check_images(X, size=None):
    """Validate a batch of 8-bit RGB images, returning an ``(n, H, W, 3)`` uint8 array."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected (n, H, W, 3) images, got shape {X.shape}")
    if X.dtype != np.uint8:
        if np.issubdtype(X.dtype, np.integer) and X.size and (X.min() < 0 or X.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        if not np.issubdtype(X.dtype, np.integer):
            raise ValueError("images must be 8-bit integer arrays")
        X = X.astype(np.uint8)
    if size is not None and X.shape[1:3] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {X.shape[1:3]}")
    return X


class ScalogramCNNClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional classifier for rendered scalogram images.

    Parameters
    ----------
    channels : tuple of int
        Output channels of the conv blocks (conv 3x3, relu, maxpool 2x2).
    head : {'flatten', 'gap'}
        How the last feature map reaches the dense layer. Global average
        pooling discards where in the window a pattern sits.
    epochs, batch_size, learning_rate, momentum
        Plain SGD with momentum on mean cross-entropy.
    augment : {'task1', 'histeq', None}
        ``'task1'``: random rotation/flip/contrast/dropout;
        ``'histeq'``: per-channel histogram equalisation.
    augment_probability : float
        Chance that a training image is augmented when drawn into a batch.
    classes : sequence, optional
        Fixes the order of ``classes_``; otherwise sorted unique labels.
    init_model : CompactCnn, optional
        Start from these weights instead of a fresh initialisation.
    random_state : int
        Seeds initialisation, shuffling and augmentation.
    """

    def __init__(self, channels=(16, 32, 64), head="flatten", epochs=30, batch_size=32,
                 learning_rate=0.01, momentum=0.9, augment="task1", augment_probability=0.5,
                 classes=None, init_model=None, random_state=0):
        self.channels = channels
        self.head = head
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.augment = augment
        self.augment_probability = augment_probability
        self.classes = classes
        self.init_model = init_model
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg, **overrides):
        params = dict(channels=cfg.channels, head=cfg.head, epochs=cfg.epochs,
                      batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                      momentum=cfg.momentum, augment=cfg.augment,
                      augment_probability=cfg.augment_probability, random_state=cfg.rng_seed)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def from_model(cls, model, class_names):
        """Wrap an already trained network."""
        est = cls(classes=list(class_names))
        est.classes_ = np.asarray(class_names)
        est.model_ = model
        est.n_features_in_ = int(np.prod(model.input_shape))
        return est

    def _augment(self, image, rng):
        if self.augment == "task1":
            return nn.augment_task1(image, rng, self.augment_probability)
        if self.augment == "histeq":
            return nn.augment_task2_histeq(image, rng, self.augment_probability)
        if self.augment is None:
            return image
        raise ValueError(f"unknown augmentation {self.augment!r}")

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        classes = np.asarray(self.classes) if self.classes is not None else np.unique(y)
        if len(classes) < 2:
            raise ValueError("need at least two classes")
        index = {c: k for k, c in enumerate(classes.tolist())}
        try:
            labels = np.array([index[v] for v in y.tolist()], dtype=int)
        except KeyError as exc:
            raise ValueError(f"label {exc} not among classes") from None
        empty = [c for c, k in index.items() if not np.any(labels == k)]
        if empty:
            raise ValueError(f"classes without training samples: {empty}")

        if self.init_model is not None:
            model = self.init_model
            if model.num_classes != len(classes) or model.input_shape != X.shape[1:]:
                raise ValueError("init_model does not match the data")
            model = nn.CompactCnn(model.architecture, model.input_shape, model.seed)
            model.set_params([p.copy() for p in self.init_model.params])
        else:
            arch = nn.default_architecture(len(classes), self.channels, self.head)
            model = nn.CompactCnn(arch, X.shape[1:], self.random_state)

        rng = np.random.default_rng([int(self.random_state), 1])
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                batch = order[start:start + self.batch_size]
                images = np.stack([self._augment(X[i], rng) for i in batch])
                loss = nn.backward_and_step(model, images, labels[batch],
                                            self.learning_rate, self.momentum)
                total += loss * len(batch)
            self.loss_curve_.append(total / len(X))
            log.debug("epoch %d loss %.4f", epoch, self.loss_curve_[-1])

        self.model_ = model
        self.classes_ = classes
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.forward(check_images(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def train_classifier(dataset, cfg, seed=None, init_model=None):
    """Fit on the train split of ``dataset`` and score the test split.

    The split follows ``cfg.train_fraction``: the manifest's stored
    assignment when the fractions agree, otherwise a fresh stratified split
    with the manifest seed.

    Returns
    -------
    classifier : ScalogramCNNClassifier
    confusion : ConfusionMatrix
        On the test split. The split used is kept as ``classifier.splits_``.
    """
    from .evaluation import ConfusionMatrix

    if len(dataset.class_names) < 2:
        raise ValueError("need at least two classes")
    if abs(cfg.train_fraction - dataset.train_fraction) < 1e-12:
        splits = [e.split for e in dataset.entries]
    else:
        splits = dataset.resplit(cfg.train_fraction)
    X, y = dataset.arrays("train", splits)
    random_state = cfg.rng_seed if seed is None else derive_seed(seed, cfg.rng_seed)
    clf = ScalogramCNNClassifier.from_config(cfg, classes=list(dataset.class_names),
                                             init_model=init_model, random_state=random_state)
    clf.fit(X, y)
    Xt, yt = dataset.arrays("test", splits)
    cm = ConfusionMatrix.from_labels(yt, clf.predict(Xt), dataset.class_names)
    clf.splits_ = splits
    return clf, cm


def derive_seed(*key):
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])
