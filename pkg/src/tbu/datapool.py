"""Datasets, pool splits, planted-pool generation, perturbations, CSV I/O.

A Dataset keeps every label in memory; rows in the unlabeled partition are
simply not shown to the learner until acquired, so the labeling oracle is a
table lookup.  Datasets are read-only after construction and safe to share
across threads; acquisition builds a new PoolState between rounds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, NumericError, ParseError

REGION_CORE = "core"
REGION_NOISE = "noise-band"
REGION_FRONTIER = "frontier"

CORRUPTION_KINDS = ("noise", "scale", "offset")

# Planted-pool geometry, in units of the cluster standard deviation.
# Core prototypes sit on the far side of each cluster (away from the other
# class means), so their near-duplicates are unambiguous redundant points.
_DUPLICATES_PER_PROTOTYPE = 25
_PROTOTYPE_OUTWARD = 1.2
_PROTOTYPE_SPREAD = 0.3
_DUPLICATE_JITTER = 0.05
_NOISE_BAND_SPREAD = 0.10

# Corruption severity schedules (level 0 is always the identity).
_NOISE_STEP = 0.25       # additive gaussian sigma per level
_SCALE_STEP = 0.10       # multiplicative shrink per level: factor 1 - 0.1*level
_OFFSET_STEP = 0.25      # constant shift per level


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with per-row class labels.

    features: (N, d) float64, finite.
    labels:   (N,) ints in [0, num_classes).
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ConfigurationError(f"features must be a non-empty 2-D matrix, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ConfigurationError("labels must have one entry per feature row")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not np.all(np.isfinite(feats)):
            raise NumericError("features contain non-finite values")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigurationError("labels must lie in [0, num_classes)")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PoolState:
    """Disjoint role partition of dataset rows.

    Acquisition is the only mutation and it returns a fresh state, so a
    PoolState can be shared freely by concurrent readers within a round.
    """

    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    validation_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        for name in ("labeled_idx", "unlabeled_idx", "validation_idx", "test_idx"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        groups = [self.labeled_idx, self.unlabeled_idx, self.validation_idx, self.test_idx]
        total = sum(g.size for g in groups)
        if total and np.unique(np.concatenate(groups)).size != total:
            raise ConfigurationError("pool index sets must be pairwise disjoint")
        if self.labeled_idx.size == 0:
            raise ConfigurationError("labeled set must be non-empty")

    def acquire(self, selected: np.ndarray) -> "PoolState":
        """Move `selected` rows from the unlabeled to the labeled set."""
        selected = np.asarray(selected, dtype=np.int64)
        if np.unique(selected).size != selected.size:
            raise ConfigurationError("selected indices contain duplicates")
        if not np.all(np.isin(selected, self.unlabeled_idx)):
            raise ConfigurationError("selected indices must come from the unlabeled pool")
        remaining = self.unlabeled_idx[~np.isin(self.unlabeled_idx, selected)]
        labeled = np.sort(np.concatenate([self.labeled_idx, selected]))
        return replace(self, labeled_idx=labeled, unlabeled_idx=remaining)


@dataclass(frozen=True)
class PlantedPoolSpec:
    """Recipe for a synthetic pool with known redundancy/noise structure.

    Each class is an isotropic gaussian cluster.  Three planted regions:
      core      near-duplicate points clustered on a few prototypes
                (redundant; low information gain once one copy is labeled),
      noise-band points midway between two class means whose observed label
                is flipped to the neighbour class with probability flip_p,
      frontier  ordinary cluster draws (everything not core or noise).
    Rows not claimed by core_fraction/noise_fraction are frontier, so
    frontier_fraction acts as a validated floor rather than an exact share.
    """

    num_classes: int
    pool_size: int
    val_size: int
    test_size: int
    core_fraction: float = 0.0
    noise_fraction: float = 0.0
    frontier_fraction: float | None = None
    flip_p: float = 0.0
    class_sep: float = 3.0
    cluster_std: float = 1.0
    dim: int | None = None
    class_means: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if min(self.pool_size, self.val_size, self.test_size) < 0 or self.pool_size < 1:
            raise ConfigurationError("pool/val/test sizes must be non-negative with pool_size >= 1")
        fractions = [self.core_fraction, self.noise_fraction]
        if self.frontier_fraction is not None:
            fractions.append(self.frontier_fraction)
        if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
            raise ConfigurationError("region fractions must be >= 0 and sum to <= 1")
        if not 0.0 <= self.flip_p <= 0.5:
            raise ConfigurationError("flip_p must lie in [0, 0.5]")
        if self.cluster_std <= 0 or self.class_sep <= 0:
            raise ConfigurationError("cluster_std and class_sep must be positive")
        if self.class_means is None and self.dim is not None and self.dim < self.num_classes:
            raise ConfigurationError("dim must be >= num_classes when class_means is not given")

    @property
    def total_rows(self) -> int:
        return self.pool_size + self.val_size + self.test_size

    def resolved_means(self) -> np.ndarray:
        if self.class_means is not None:
            means = np.asarray(self.class_means, dtype=np.float64)
            if means.shape[0] != self.num_classes:
                raise ConfigurationError("class_means must have one row per class")
            return means
        d = self.dim if self.dim is not None else self.num_classes
        return self.class_sep * np.eye(self.num_classes, d)


@dataclass(frozen=True)
class PerturbationSpec:
    """Input perturbations: weak/strong augmentation views plus named
    corruption transforms at severity levels 0..5 (0 is the identity)."""

    weak_noise_scale: float = 0.25
    strong_noise_scale: float = 0.4
    dropout_rate: float = 0.05
    corruption_kinds: tuple = CORRUPTION_KINDS

    def __post_init__(self):
        if not (np.isfinite(self.weak_noise_scale) and np.isfinite(self.strong_noise_scale)):
            raise ConfigurationError("noise scales must be finite")
        if self.weak_noise_scale < 0 or self.strong_noise_scale < self.weak_noise_scale:
            raise ConfigurationError("need 0 <= weak_noise_scale <= strong_noise_scale")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        unknown = set(self.corruption_kinds) - set(CORRUPTION_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown corruption kinds: {sorted(unknown)}")


@dataclass(frozen=True)
class PoolAnnotations:
    """Ground-truth region per row of a planted dataset."""

    region: np.ndarray          # str per row
    true_label: np.ndarray      # int per row
    observed_label: np.ndarray  # int per row (flips applied)

    def __len__(self) -> int:
        return len(self.region)


def generate_planted_pool(spec: PlantedPoolSpec) -> tuple[Dataset, PoolAnnotations]:
    """Generate a planted pool; deterministic given spec.seed.

    True-label class counts are balanced within +-1.  Row order is a seeded
    shuffle so that random splits see all regions mixed.
    """
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    means = spec.resolved_means()
    d = means.shape[1]
    sigma = spec.cluster_std
    n_total = spec.total_rows

    centroid = means.mean(axis=0)
    base, rem = divmod(n_total, C)
    feats, regions, true_labels, observed = [], [], [], []
    for c in range(C):
        n_c = base + (1 if c < rem else 0)
        n_core = int(round(spec.core_fraction * n_c))
        n_noise = min(int(round(spec.noise_fraction * n_c)), n_c - n_core)
        n_frontier = n_c - n_core - n_noise

        if n_core:
            outward = means[c] - centroid
            norm = np.linalg.norm(outward)
            outward = outward / norm if norm > 0 else np.zeros(d)
            anchor = means[c] + _PROTOTYPE_OUTWARD * sigma * outward
            n_proto = max(1, n_core // _DUPLICATES_PER_PROTOTYPE)
            protos = anchor + _PROTOTYPE_SPREAD * sigma * rng.standard_normal((n_proto, d))
            assign = np.arange(n_core) % n_proto
            pts = protos[assign] + _DUPLICATE_JITTER * sigma * rng.standard_normal((n_core, d))
            feats.append(pts)
            regions += [REGION_CORE] * n_core
            true_labels.append(np.full(n_core, c))
            observed.append(np.full(n_core, c))

        if n_noise:
            partners = rng.integers(0, C - 1, size=n_noise)
            partners += partners >= c  # uniform over the other classes
            mid = 0.5 * (means[c] + means[partners])
            pts = mid + _NOISE_BAND_SPREAD * sigma * rng.standard_normal((n_noise, d))
            flips = rng.random(n_noise) < spec.flip_p
            feats.append(pts)
            regions += [REGION_NOISE] * n_noise
            true_labels.append(np.full(n_noise, c))
            observed.append(np.where(flips, partners, c))

        if n_frontier:
            pts = means[c] + sigma * rng.standard_normal((n_frontier, d))
            feats.append(pts)
            regions += [REGION_FRONTIER] * n_frontier
            true_labels.append(np.full(n_frontier, c))
            observed.append(np.full(n_frontier, c))

    features = np.concatenate(feats, axis=0)
    region_arr = np.asarray(regions)
    true_arr = np.concatenate(true_labels).astype(np.int64)
    obs_arr = np.concatenate(observed).astype(np.int64)

    perm = rng.permutation(n_total)
    dataset = Dataset(features[perm], obs_arr[perm], C)
    annotations = PoolAnnotations(region_arr[perm], true_arr[perm], obs_arr[perm])
    return dataset, annotations


def split_initial(dataset: Dataset, initial_count: int, val_count: int,
                  test_count: int, seed: int) -> PoolState:
    """Uniform random disjoint split; rows left over become the unlabeled pool."""
    n = dataset.n_rows
    if initial_count < 1:
        raise ConfigurationError("initial labeled count must be >= 1")
    if min(val_count, test_count) < 0 or initial_count + val_count + test_count > n:
        raise ConfigurationError(
            f"split counts {initial_count}+{val_count}+{test_count} exceed {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    a, b, c = initial_count, initial_count + val_count, initial_count + val_count + test_count
    return PoolState(
        labeled_idx=np.sort(perm[:a]),
        unlabeled_idx=np.sort(perm[c:]),
        validation_idx=np.sort(perm[a:b]),
        test_idx=np.sort(perm[b:c]),
    )


def standardize_features(dataset: Dataset, labeled_idx: np.ndarray) -> Dataset:
    """Zero-mean/unit-variance features using labeled-row statistics only.

    Refreshed each round by the caller; unlabeled labels never leak into
    the statistics.  Constant coordinates keep their raw scale.
    """
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    if labeled_idx.size == 0:
        raise ConfigurationError("cannot standardize with an empty labeled set")
    ref = dataset.features[labeled_idx]
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return Dataset((dataset.features - mean) / std, dataset.labels, dataset.num_classes)


def apply_perturbation(x: np.ndarray, spec: PerturbationSpec, kind: str,
                       rng: np.random.Generator | None = None, level: int = 0) -> np.ndarray:
    """Perturb a feature row or batch.

    kind "weak":   x + N(0, weak_noise_scale^2)
    kind "strong": x + N(0, strong_noise_scale^2), then each coordinate
                   zeroed with probability dropout_rate
    corruption kinds apply a deterministic transform scaled by `level`
    (except "noise", which draws from `rng`); level 0 is the identity.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("perturbation input contains non-finite values")

    if kind == "weak":
        if spec.weak_noise_scale == 0.0:
            return x.copy()
        return x + spec.weak_noise_scale * rng.standard_normal(x.shape)
    if kind == "strong":
        out = x.copy()
        if spec.strong_noise_scale > 0.0:
            out = out + spec.strong_noise_scale * rng.standard_normal(x.shape)
        if spec.dropout_rate > 0.0:
            out = out * (rng.random(x.shape) >= spec.dropout_rate)
        return out

    if kind not in spec.corruption_kinds or kind not in CORRUPTION_KINDS:
        raise ConfigurationError(f"unknown perturbation kind {kind!r}")
    if not 0 <= level <= 5:
        raise ConfigurationError(f"corruption level must lie in 0..5, got {level}")
    if level == 0:
        return x.copy()
    if kind == "noise":
        return x + _NOISE_STEP * level * rng.standard_normal(x.shape)
    if kind == "scale":
        return x * (1.0 - _SCALE_STEP * level)
    return x + _OFFSET_STEP * level


def save_dataset_csv(dataset: Dataset, path) -> None:
    """Write `f0,...,f{d-1},label` rows; floats at 17 significant digits."""
    d = dataset.n_features
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join([f"f{j}" for j in range(d)] + ["label"]) + "\n")
        for row, label in zip(dataset.features, dataset.labels):
            fh.write(",".join(format(v, ".17g") for v in row) + f",{label}\n")


def load_dataset_csv(path, num_classes: int | None = None) -> Dataset:
    """Parse a dataset CSV; errors carry the 1-based offending row number."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"f{j}" for j in range(d)] + ["label"]
        if d < 1 or header != expected:
            raise ParseError(f"{path}: row 1: bad header {header!r}")
        feats, labels = [], []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ParseError(f"{path}: row {rownum}: expected {d + 1} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:d]])
                label = int(row[d])
            except ValueError:
                raise ParseError(f"{path}: row {rownum}: non-numeric cell") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ParseError(f"{path}: row {rownum}: label {label} out of range")
            labels.append(label)
    if not feats:
        raise ParseError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = max(int(labels_arr.max()) + 1, 2)
    return Dataset(np.asarray(feats), labels_arr, num_classes)


def save_annotations_csv(annotations: PoolAnnotations, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("index,region,true_label,observed_label\n")
        for i in range(len(annotations)):
            fh.write(f"{i},{annotations.region[i]},{annotations.true_label[i]},"
                     f"{annotations.observed_label[i]}\n")


def load_annotations_csv(path) -> PoolAnnotations:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["index", "region", "true_label", "observed_label"]:
            raise ParseError(f"{path}: row 1: bad header {header!r}")
        rows = sorted((int(r[0]), r[1], int(r[2]), int(r[3])) for r in reader if r)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return PoolAnnotations(
        region=np.asarray([r[1] for r in rows]),
        true_label=np.asarray([r[2] for r in rows], dtype=np.int64),
        observed_label=np.asarray([r[3] for r in rows], dtype=np.int64),
    )
