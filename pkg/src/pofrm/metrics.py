"""Accuracy criteria for coefficient recovery and prediction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.stats import rankdata

from .errors import DimensionMismatchError, InvalidArgumentError

EXACT_AUC_LIMIT = 10_000


@dataclass
class ReplicateReport:
    """Metrics of one method on one simulated replicate.

    ``values`` maps metric names (``imse_beta1``, ``rmse``, ``auc``,
    ``misclassification``, confusion cells ...) to floats; ``times`` holds wall
    times in seconds. ``status`` is ``"ok"``, ``"infeasible"`` or ``"error"``.
    """

    scenario: str
    method: str
    rep_index: int
    values: dict = field(default_factory=dict)
    times: dict = field(default_factory=dict)
    status: str = "ok"
    message: str = ""


def imse(true_beta, est_beta, grids) -> float:
    """Integrated squared difference by (tensor) Simpson quadrature.

    Parameters
    ----------
    true_beta, est_beta : array
        Values on the grid; 1D arrays for curves, ``(n1, n2)`` for surfaces.
    grids : array or pair of arrays
    """
    a = np.asarray(true_beta, dtype=float)
    b = np.asarray(est_beta, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"grid mismatch: {a.shape} vs {b.shape}")
    if not isinstance(grids, (tuple, list)):
        grids = (grids,)
    grids = [np.asarray(g, dtype=float) for g in grids]
    if tuple(g.size for g in grids) != a.shape:
        raise DimensionMismatchError(f"values {a.shape} do not match grid sizes {[g.size for g in grids]}")
    sq = (a - b) ** 2
    for axis in reversed(range(len(grids))):
        sq = simpson(sq, x=grids[axis], axis=axis)
    return float(sq)


def rmse(y, yhat) -> float:
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.size == 0:
        raise InvalidArgumentError("rmse of an empty sample")
    if y.shape != yhat.shape:
        raise DimensionMismatchError(f"lengths differ: {y.size} vs {yhat.size}")
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def auc(labels, scores) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    labels = np.asarray(labels).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    if labels.shape != scores.shape:
        raise DimensionMismatchError("labels and scores differ in length")
    pos = labels == 1
    neg = labels == 0
    if not np.all(pos | neg):
        raise InvalidArgumentError("labels must be 0/1")
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("AUC needs both classes")
    if labels.size <= EXACT_AUC_LIMIT:
        diff = scores[pos][:, None] - scores[neg][None, :]
        return float((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / (n_pos * n_neg))
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion_matrix(labels, mu, threshold: float = 0.5) -> np.ndarray:
    """2x2 counts with rows = predicted (0, 1) and columns = true (0, 1)."""
    labels = np.asarray(labels).astype(int).ravel()
    pred = (np.asarray(mu, dtype=float).ravel() >= threshold).astype(int)
    if labels.shape != pred.shape:
        raise DimensionMismatchError("labels and probabilities differ in length")
    cm = np.zeros((2, 2), dtype=int)
    np.add.at(cm, (pred, labels), 1)
    return cm


def misclassification(labels, mu, threshold: float = 0.5) -> tuple[float, np.ndarray]:
    """Percentage of misclassified subjects (``mu >= threshold`` predicts 1) and the confusion matrix."""
    mu = np.asarray(mu, dtype=float)
    if np.any((mu < 0) | (mu > 1)):
        raise InvalidArgumentError("probabilities must lie in [0, 1]")
    cm = confusion_matrix(labels, mu, threshold)
    n = cm.sum()
    return float(100.0 * (cm[0, 1] + cm[1, 0]) / n), cm


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    return float(np.trace(cm) / cm.sum())


def roc_points(labels, scores):
    """(fpr, tpr) pairs for every distinct threshold, from (0, 0) to (1, 1)."""
    labels = np.asarray(labels).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(l == 1)[distinct]
    fps = np.cumsum(l == 0)[distinct]
    tpr = np.r_[0, tps] / max(tps[-1], 1)
    fpr = np.r_[0, fps] / max(fps[-1], 1)
    return fpr, tpr
