"""Confusion matrices, N-way similarity validation and the amplitude table."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .siamese import pair_scores


class EvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: list

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=int)
        c = len(self.class_names)
        if self.counts.shape != (c, c) or np.any(self.counts < 0):
            raise ValueError("counts must be a nonnegative C x C array")

    @classmethod
    def from_labels(cls, y_true, y_pred, class_names):
        index = {c: k for k, c in enumerate(class_names)}
        counts = np.zeros((len(class_names),) * 2, dtype=int)
        for t, p in zip(np.asarray(y_true).tolist(), np.asarray(y_pred).tolist()):
            counts[index[t], index[p]] += 1
        return cls(counts, list(class_names))

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def errors(self):
        """``(true, predicted, count)`` for every nonzero off-diagonal cell."""
        out = []
        for i, t in enumerate(self.class_names):
            for j, p in enumerate(self.class_names):
                if i != j and self.counts[i, j]:
                    out.append((t, p, int(self.counts[i, j])))
        return out

    def to_json(self):
        return {"class_names": list(self.class_names), "counts": self.counts.tolist(),
                "accuracy": round(self.accuracy, 10), "total": self.total}

    def render(self, path):
        from .plotting import plot_confusion
        plot_confusion(self, path)


def confusion_matrix(model, dataset, split="test", splits=None):
    """Confusion matrix of ``model`` on one split of a dataset manifest."""
    chosen = dataset.select(split, splits)
    if not chosen:
        raise EvaluationError(f"split {split!r} is empty")
    if list(model.classes_) != list(dataset.class_names):
        raise EvaluationError("model classes do not match dataset classes")
    X, y = dataset.arrays(split, splits)
    return ConfusionMatrix.from_labels(y, model.predict(X), dataset.class_names)


def expected_coupon_trials(M):
    """Expected draws to see all ``M`` items, ``sum_{i=1..M} M / i``, rounded half-up."""
    M = int(M)
    if M < 1:
        raise ValueError("M must be at least 1")
    total = math.fsum(M / i for i in range(1, M + 1))
    return int(math.floor(total + 0.5))


@dataclass
class NWayResult:
    accuracy: float
    n_way: int
    trials: int
    records: list = field(default_factory=list, repr=False)

    def to_json(self):
        return {"accuracy": round(self.accuracy, 10), "n_way": self.n_way, "trials": self.trials,
                "correct": int(sum(r["correct"] for r in self.records))}


MAX_RESAMPLES = 100


def n_way_validation(model, X, y, n_way=20, trials=None, rng_seed=0):
    """Fraction of trials in which the same-class candidate scores highest.

    Each trial draws an anchor, one other image of the anchor's class and
    ``n_way - 1`` images of other classes (without replacement), shuffles
    the candidates and predicts the one with the largest similarity to the
    anchor; ties go to the lowest candidate position. ``trials`` defaults to
    the coupon-collector expectation for ``len(X)`` images. Trial ``t`` uses
    its own generator seeded by ``(rng_seed, t)``.
    """
    y = np.asarray(y)
    M = len(y)
    if n_way < 2:
        raise ValueError("n_way must be at least 2")
    if n_way > M:
        raise EvaluationError(f"n_way={n_way} exceeds the {M} test images")
    if len(set(y.tolist())) < 2:
        raise EvaluationError("need at least two classes")
    k = expected_coupon_trials(M) if trials is None else int(trials)
    probs = np.asarray(model.predict_proba(X), dtype=float)

    records = []
    for t in range(k):
        rng = np.random.default_rng([int(rng_seed), t])
        for _ in range(MAX_RESAMPLES):
            anchor = int(rng.integers(M))
            same = np.flatnonzero((y == y[anchor]) & (np.arange(M) != anchor))
            other = np.flatnonzero(y != y[anchor])
            if same.size and other.size >= n_way - 1:
                break
        else:
            raise EvaluationError(
                f"could not draw a valid {n_way}-way trial after {MAX_RESAMPLES} attempts")
        match = int(rng.choice(same))
        cands = np.concatenate(([match], rng.choice(other, n_way - 1, replace=False)))
        cands = cands[rng.permutation(n_way)]
        scores = pair_scores(probs[anchor][None, :], probs[cands])
        pick = int(np.argmax(scores))
        records.append({"trial": t, "anchor": anchor, "candidates": cands.tolist(),
                        "scores": scores.tolist(), "pick": pick,
                        "correct": bool(cands[pick] == match)})
    acc = float(np.mean([r["correct"] for r in records]))
    return NWayResult(acc, n_way, k, records)


def amplitude_similarity_table(model, dataset):
    """Similarity of each amplitude-scaled image to its group's unscaled anchor.

    Returns a list of ``(group, factor, score)`` ordered by group then factor.
    """
    groups = {}
    for e in dataset.entries:
        if "group" not in e.meta or "factor" not in e.meta:
            raise EvaluationError(f"entry {e.path} lacks group/factor metadata")
        groups.setdefault(e.meta["group"], []).append(e)
    rows = []
    for g in sorted(groups):
        members = sorted(groups[g], key=lambda e: e.meta["factor"])
        anchors = [e for e in members if e.meta["factor"] == 1.0]
        if not anchors:
            raise EvaluationError(f"group {g} has no factor-1.0 anchor image")
        images = np.stack([dataset.image(e) for e in members])
        probs = model.predict_proba(images)
        a = probs[members.index(anchors[0])]
        for e, s in zip(members, pair_scores(np.broadcast_to(a, probs.shape), probs)):
            rows.append((g, float(e.meta["factor"]), float(s)))
    return rows
