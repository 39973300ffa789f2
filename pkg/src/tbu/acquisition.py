"""Acquisition strategies over an arbitrary candidate set.

Three scoring rules: highest softmax entropy, k-center greedy over feature
embeddings, and D-squared seeding over last-layer gradient embeddings.
Per-candidate scoring is pure; the greedy and sampling loops are sequential
by definition and take their RNG as an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .datapool import Dataset, PoolState
from .errors import BudgetError, ConfigurationError
from .model import ModelParams, forward_features, predict_softmax
from .laplace import predictive_entropy

ACQUISITION_KINDS = ("entropy", "coreset", "badge")


@dataclass(frozen=True)
class AcquisitionRequest:
    kind: str
    budget: int
    candidates: np.ndarray
    seed: int = 0  # consumed by badge only

    def __post_init__(self):
        object.__setattr__(self, "candidates", np.asarray(self.candidates, dtype=np.int64))
        if self.kind not in ACQUISITION_KINDS:
            raise ConfigurationError(f"unknown acquisition kind {self.kind!r}")
        if self.budget < 1:
            raise ConfigurationError("budget must be >= 1")


def _check_budget(budget: int, n_candidates: int) -> None:
    if budget > n_candidates:
        raise BudgetError(f"budget {budget} exceeds {n_candidates} candidates")


def select_entropy(model: ModelParams, dataset: Dataset, candidates: np.ndarray,
                   budget: int) -> np.ndarray:
    """Top-K softmax entropy, descending score; ties to the lowest index."""
    candidates = np.asarray(candidates, dtype=np.int64)
    _check_budget(budget, candidates.size)
    entropy = np.asarray(predictive_entropy(
        predict_softmax(model, dataset.features[candidates])))
    order = np.lexsort((candidates, -entropy))
    return candidates[order[:budget]]


def select_coreset(base_features: np.ndarray, candidate_features: np.ndarray,
                   candidates: np.ndarray, budget: int) -> np.ndarray:
    """k-center greedy: repeatedly take the candidate farthest (euclidean,
    min over base + picks so far) from coverage; ties to the lowest index."""
    candidates = np.asarray(candidates, dtype=np.int64)
    _check_budget(budget, candidates.size)
    if base_features.shape[0] == 0:
        raise ConfigurationError("coreset needs a non-empty labeled set")
    min_dist = cdist(candidate_features, base_features).min(axis=1)
    picks = []
    for _ in range(budget):
        far = np.nonzero(min_dist == min_dist.max())[0]
        pos = far[np.argmin(candidates[far])]
        picks.append(candidates[pos])
        dist_new = np.linalg.norm(candidate_features - candidate_features[pos], axis=1)
        min_dist = np.minimum(min_dist, dist_new)
        min_dist[pos] = -np.inf
    return np.asarray(picks, dtype=np.int64)


def badge_embeddings(model: ModelParams, dataset: Dataset,
                     candidates: np.ndarray) -> np.ndarray:
    """Last-layer cross-entropy gradient under the predicted label:
    block c of the (F*C)-vector equals (p_c - [c == argmax p]) * phi(x)."""
    candidates = np.asarray(candidates, dtype=np.int64)
    x = dataset.features[candidates]
    phi = forward_features(model, x)
    probs = predict_softmax(model, x)
    coef = probs.copy()
    coef[np.arange(len(candidates)), probs.argmax(axis=1)] -= 1.0
    return (coef[:, :, None] * phi[:, None, :]).reshape(len(candidates), -1)


def select_badge(embeddings: np.ndarray, candidates: np.ndarray, budget: int,
                 seed: int) -> np.ndarray:
    """D-squared seeding: first pick uniform, then each pick with probability
    proportional to squared distance to the nearest chosen embedding.
    Zero-distance rows have zero probability; if every remaining row is at
    distance zero, picks fall back to the lowest unchosen index.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    _check_budget(budget, candidates.size)
    rng = np.random.default_rng(seed)
    n = candidates.size

    first = int(rng.integers(n))
    chosen = [first]
    taken = np.zeros(n, dtype=bool)
    taken[first] = True
    d2 = ((embeddings - embeddings[first]) ** 2).sum(axis=1)
    d2[first] = 0.0
    while len(chosen) < budget:
        total = d2.sum()
        if total > 0.0:
            r = rng.random() * total
            pos = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            pos = min(pos, n - 1)
        else:
            open_pos = np.nonzero(~taken)[0]
            pos = int(open_pos[np.argmin(candidates[open_pos])])
        chosen.append(pos)
        taken[pos] = True
        d2 = np.minimum(d2, ((embeddings - embeddings[pos]) ** 2).sum(axis=1))
        d2[pos] = 0.0
    return candidates[chosen]


def select(model: ModelParams, dataset: Dataset, pool: PoolState,
           request: AcquisitionRequest) -> np.ndarray:
    """Dispatch to the kind-specific routine; the result has exactly
    `budget` unique candidate indices."""
    base_idx = pool.labeled_idx
    return select_with_base(model, dataset, base_idx, request)


def select_with_base(model: ModelParams, dataset: Dataset, base_idx: np.ndarray,
                     request: AcquisitionRequest) -> np.ndarray:
    """Like select(), with an explicit coverage base for coreset (used when
    backfilling treats already-picked rows as covered)."""
    if request.kind == "entropy":
        return select_entropy(model, dataset, request.candidates, request.budget)
    if request.kind == "coreset":
        base = forward_features(model, dataset.features[np.asarray(base_idx, dtype=np.int64)])
        cand = forward_features(model, dataset.features[request.candidates])
        return select_coreset(base, cand, request.candidates, request.budget)
    emb = badge_embeddings(model, dataset, request.candidates)
    return select_badge(emb, request.candidates, request.budget, request.seed)
