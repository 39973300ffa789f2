"""Adaptive confidence thresholds and the LE/HA/candidate partition.

Threshold updates are EMA steps and strictly sequential; the detection
functions are pure over immutable inputs and safe to evaluate concurrently.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigurationError, IntegrityError
from .laplace import PosteriorLinearClassifier, predict_meanfield, predictive_entropy

if TYPE_CHECKING:
    from .model import CheckpointTrace

BUCKET_LE = "LE"
BUCKET_HA = "HA"
BUCKET_CANDIDATE = "CAND"


@dataclass(frozen=True)
class ThresholdState:
    """Global/local EMA confidence statistics; all values stay in [0, 1]."""

    global_threshold: float
    local: np.ndarray  # (C,)
    eta: float
    skipped_updates: int = 0

    def __post_init__(self):
        object.__setattr__(self, "local", np.asarray(self.local, dtype=np.float64))
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError("eta must lie in [0, 1]")
        if not 0.0 <= self.global_threshold <= 1.0 or self.local.min() < 0.0 \
                or self.local.max() > 1.0:
            raise ConfigurationError("threshold values must lie in [0, 1]")

    @classmethod
    def initial(cls, num_classes: int, eta: float) -> "ThresholdState":
        return cls(1.0 / num_classes, np.full(num_classes, 1.0 / num_classes), eta)


@dataclass(frozen=True)
class FilterConfig:
    """q percentile for LE detection and the trailing-checkpoint persistence
    requirement for HA detection."""

    q: float = 10.0
    persistence_count: int = 5

    def __post_init__(self):
        if not 0.0 <= self.q <= 100.0:
            raise ConfigurationError(f"q must lie in [0, 100], got {self.q}")
        if not 1 <= self.persistence_count <= 8:
            raise ConfigurationError("persistence_count must lie in [1, 8]")


@dataclass(frozen=True)
class UncertaintyPartition:
    """Split of the unlabeled pool.  low_epistemic and high_aleatoric may
    overlap; candidates exclude their union exactly once."""

    low_epistemic: np.ndarray
    high_aleatoric: np.ndarray
    candidates: np.ndarray


def update_thresholds(state: ThresholdState, probs: np.ndarray) -> ThresholdState:
    """EMA step: global toward the batch mean of max confidences, each local
    toward the batch mean of that class's probability.  An empty batch is a
    no-op that bumps the warning counter."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        return replace(state, skipped_updates=state.skipped_updates + 1)
    if probs.ndim != 2 or probs.shape[1] != state.local.size:
        raise ConfigurationError("probability batch must be (n, C)")
    eta = state.eta
    # clip: the true convex combination lies in [0,1]; rounding must not escape
    g = float(np.clip(eta * state.global_threshold + (1.0 - eta) * probs.max(axis=1).mean(),
                      0.0, 1.0))
    local = np.clip(eta * state.local + (1.0 - eta) * probs.mean(axis=0), 0.0, 1.0)
    return replace(state, global_threshold=g, local=local)


def class_threshold(state: ThresholdState) -> np.ndarray:
    """tau_c = g * l_c / max(l); the ratio is computed first so the maximal
    class's threshold equals g exactly."""
    m = state.local.max()
    if m <= 0.0:
        raise ConfigurationError("local thresholds must have a positive maximum")
    return state.global_threshold * (state.local / m)


def nearest_rank_count(q: float, n: int) -> int:
    """ceil(q/100 * n); exact integer arithmetic for integral q; 0 selects nothing."""
    if not 0.0 <= q <= 100.0:
        raise ConfigurationError(f"q must lie in [0, 100], got {q}")
    if n <= 0 or q == 0.0:
        return 0
    if float(q).is_integer():
        return -((-int(q) * n) // 100)
    return math.ceil(q * n / 100.0)


def detect_le(post: PosteriorLinearClassifier, labeled_phi: np.ndarray,
              labeled_labels: np.ndarray, unlabeled_phi: np.ndarray,
              unlabeled_idx: np.ndarray, q: float) -> np.ndarray:
    """Low-epistemic rows: mean-field entropy strictly below the class's
    nearest-rank q-th percentile of labeled entropies.

    Labeled rows are grouped by ground-truth label; unlabeled rows are routed
    by the mean-field predicted class.  Classes without labeled rows (or
    q = 0) contribute nothing.
    """
    labeled_labels = np.asarray(labeled_labels, dtype=np.int64)
    unlabeled_idx = np.asarray(unlabeled_idx, dtype=np.int64)
    h_lab = np.asarray(predictive_entropy(predict_meanfield(post, labeled_phi))) \
        if labeled_phi.shape[0] else np.empty(0)
    probs_unl = predict_meanfield(post, unlabeled_phi)
    h_unl = np.asarray(predictive_entropy(probs_unl))
    pred_unl = probs_unl.argmax(axis=1)

    mask = np.zeros(unlabeled_idx.size, dtype=bool)
    for c in range(post.mu.shape[1]):
        class_h = h_lab[labeled_labels == c]
        k = nearest_rank_count(q, class_h.size)
        if k == 0:
            continue
        cutoff = np.sort(class_h)[k - 1]
        mask |= (pred_unl == c) & (h_unl < cutoff)
    return unlabeled_idx[mask]


def detect_ha(trace: "CheckpointTrace", persistence_count: int) -> np.ndarray:
    """High-aleatoric rows: confidence below the predicted class's threshold
    at every one of the trailing `persistence_count` checkpoints."""
    if not 1 <= persistence_count <= trace.confidences.shape[0]:
        raise ConfigurationError("persistence_count must lie in [1, 8]")
    conf, pred, tau = trace.confidences, trace.predicted, trace.thresholds
    if pred.shape != conf.shape or tau.shape[0] != conf.shape[0] \
            or trace.unlabeled_idx.size != conf.shape[1]:
        raise IntegrityError("trace arrays have inconsistent shapes")
    if pred.size and (pred.min() < 0 or pred.max() >= tau.shape[1]):
        raise IntegrityError("trace predicted classes out of range")
    window = slice(conf.shape[0] - persistence_count, conf.shape[0])
    below = conf[window] < np.take_along_axis(
        tau[window], pred[window], axis=1)
    return trace.unlabeled_idx[below.all(axis=0)]


def propose_candidates(unlabeled_idx: np.ndarray, low_epistemic: np.ndarray,
                       high_aleatoric: np.ndarray) -> UncertaintyPartition:
    """Candidates are the unlabeled pool minus the union of the two filtered
    sets, in original index order."""
    unlabeled_idx = np.asarray(unlabeled_idx, dtype=np.int64)
    low_epistemic = np.asarray(low_epistemic, dtype=np.int64)
    high_aleatoric = np.asarray(high_aleatoric, dtype=np.int64)
    for name, arr in (("LE", low_epistemic), ("HA", high_aleatoric)):
        if not np.all(np.isin(arr, unlabeled_idx)):
            raise IntegrityError(f"{name} set contains indices outside the unlabeled pool")
    excluded = np.union1d(low_epistemic, high_aleatoric)
    candidates = unlabeled_idx[~np.isin(unlabeled_idx, excluded)]
    return UncertaintyPartition(low_epistemic, high_aleatoric, candidates)


def save_partition_csv(partition: UncertaintyPartition, unlabeled_idx: np.ndarray,
                       path) -> None:
    """One `index,bucket` line per unlabeled row, in pool order.  Rows in
    both filtered sets are written once, as LE."""
    le = set(partition.low_epistemic.tolist())
    ha = set(partition.high_aleatoric.tolist())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("index,bucket\n")
        for i in np.asarray(unlabeled_idx, dtype=np.int64):
            bucket = BUCKET_LE if int(i) in le else (BUCKET_HA if int(i) in ha
                                                     else BUCKET_CANDIDATE)
            fh.write(f"{i},{bucket}\n")


def load_partition_csv(path) -> dict[int, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["index", "bucket"]:
            raise IntegrityError(f"{path}: bad header {header!r}")
        return {int(row[0]): row[1] for row in reader if row}
