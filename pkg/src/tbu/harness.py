"""Multi-round acquisition experiments across methods, acquisitions, seeds.

Four methods share the loop:
  same  one model trains on the labeled set and selects from the full pool.
  diff  a proxy of a different architecture selects on the target's behalf.
  semi  as diff, with the proxy trained semi-supervised.
  tbu   the semi-supervised proxy filters the pool into low-epistemic /
        high-aleatoric / candidate rows, and the target selects within the
        candidates.
Seeds run independently (optionally in parallel processes, capped by the
TBU_THREADS environment variable); rounds within a seed are sequential.
Every run is a pure function of the config and its seeds.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import jsonio
from .acquisition import (ACQUISITION_KINDS, AcquisitionRequest, select,
                          select_with_base)
from .bounding import (UncertaintyPartition, class_threshold, detect_ha,
                       detect_le, propose_candidates, save_partition_csv)
from .datapool import (CORRUPTION_KINDS, Dataset, PerturbationSpec,
                       PlantedPoolSpec, PoolState, generate_planted_pool,
                       load_dataset_csv, split_initial, standardize_features)
from .errors import BudgetError, ConfigurationError, TbuError
from .laplace import (PosteriorLinearClassifier, calibrate_lambda,
                      fit_shared_covariance)
from .model import (MlpSpec, TrainConfig, evaluate_accuracy, forward_features,
                    predict_softmax, train_semisupervised, train_supervised)

METHODS = ("same", "diff", "semi", "tbu")
SEVERITY_LEVELS = (1, 2, 3, 4, 5)

DEFAULT_PROXY_SPEC = MlpSpec(hidden_widths=(64,), activation="relu")
DEFAULT_TARGET_SPEC = MlpSpec(hidden_widths=(32, 32), activation="relu")
# small batches give the threshold EMA enough iterations to converge within
# round 1; the light decay lets late rounds saturate frontier confidence
DEFAULT_PROXY_TRAIN = TrainConfig(epochs=64, batch_size=8, learning_rate=0.1,
                                  weight_decay=1e-4, ema_eta=0.99, unlabeled_weight=1.5)
DEFAULT_TARGET_TRAIN = TrainConfig(epochs=48, batch_size=32, learning_rate=0.1,
                                   weight_decay=5e-4)


def benchmark_planted_spec(seed: int = 7) -> PlantedPoolSpec:
    """The default planted benchmark: 4-class pool of 5000 with 30% core
    near-duplicates and a 15% noise band flipped at rate 0.4."""
    return PlantedPoolSpec(num_classes=4, pool_size=5000, val_size=500, test_size=1000,
                           core_fraction=0.3, noise_fraction=0.15, flip_p=0.4,
                           class_sep=2.8, cluster_std=1.0, seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    method: str
    acquisition: str
    rounds: int
    initial_labeled: int
    budget: int
    seeds: tuple
    planted: PlantedPoolSpec | None = None
    csv_path: str | None = None
    q: float = 10.0
    persistence_count: int = 5
    val_count: int | None = None
    test_count: int | None = None
    proxy_spec: MlpSpec = DEFAULT_PROXY_SPEC
    proxy_train: TrainConfig = DEFAULT_PROXY_TRAIN
    target_spec: MlpSpec = DEFAULT_TARGET_SPEC
    target_train: TrainConfig = DEFAULT_TARGET_TRAIN
    backfill: bool = False
    perturbation: PerturbationSpec = PerturbationSpec()
    corruptions: tuple = CORRUPTION_KINDS

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "corruptions", tuple(self.corruptions))
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.acquisition not in ACQUISITION_KINDS:
            raise ConfigurationError(f"unknown acquisition {self.acquisition!r}")
        if self.rounds < 1 or self.budget < 1 or self.initial_labeled < 1:
            raise ConfigurationError("rounds, budget and initial_labeled must be >= 1")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if (self.planted is None) == (self.csv_path is None):
            raise ConfigurationError("exactly one of planted spec or csv_path is required")
        if self.csv_path is not None and (self.val_count is None or self.test_count is None):
            raise ConfigurationError("csv datasets need explicit val_count and test_count")
        if self.method == "same" and self.proxy_spec != self.target_spec:
            raise ConfigurationError("method 'same' requires proxy and target specs to match")
        if not 0.0 <= self.q <= 100.0:
            raise ConfigurationError("q must lie in [0, 100]")
        if not 1 <= self.persistence_count <= 8:
            raise ConfigurationError("persistence_count must lie in [1, 8]")
        unknown = set(self.corruptions) - set(CORRUPTION_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown corruption kinds: {sorted(unknown)}")

    def resolved_val_count(self) -> int:
        return self.val_count if self.val_count is not None else self.planted.val_size

    def resolved_test_count(self) -> int:
        return self.test_count if self.test_count is not None else self.planted.test_size


def default_experiment_config(method: str = "tbu", acquisition: str = "entropy",
                              name: str | None = None, seeds: tuple = (1, 2, 3),
                              **overrides) -> ExperimentConfig:
    """The desk protocol: pool 5000, I=100, K=100, R=4, q=10, three seeds."""
    proxy_spec = DEFAULT_TARGET_SPEC if method == "same" else DEFAULT_PROXY_SPEC
    proxy_train = DEFAULT_TARGET_TRAIN if method == "same" else DEFAULT_PROXY_TRAIN
    cfg = ExperimentConfig(
        name=name or f"{method}-{acquisition}",
        method=method,
        acquisition=acquisition,
        rounds=4,
        initial_labeled=100,
        budget=100,
        seeds=seeds,
        planted=benchmark_planted_spec(),
        proxy_spec=proxy_spec,
        proxy_train=proxy_train,
    )
    return replace(cfg, **overrides) if overrides else cfg


def default_benchmark_configs(seeds: tuple = (1, 2, 3)) -> list[ExperimentConfig]:
    """All 4 methods x 3 acquisitions on the default planted benchmark."""
    return [default_experiment_config(method, kind, seeds=seeds)
            for kind in ACQUISITION_KINDS for method in METHODS]


@dataclass
class RoundMetrics:
    round_index: int
    accuracy: float
    robustness: dict
    n_le: int
    n_ha: int
    n_cand: int
    pct_le: float
    pct_ha: float
    lambda_star: float | None
    tau: list | None
    backfilled: bool
    wall_ms: int

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "accuracy": self.accuracy,
            "robustness": self.robustness,
            "n_le": self.n_le,
            "n_ha": self.n_ha,
            "n_cand": self.n_cand,
            "pct_le": self.pct_le,
            "pct_ha": self.pct_ha,
            "lambda_star": self.lambda_star,
            "tau": self.tau,
            "backfilled": self.backfilled,
            "wall_ms": self.wall_ms,
        }


def load_config_dataset(config: ExperimentConfig) -> Dataset:
    if config.planted is not None:
        return generate_planted_pool(config.planted)[0]
    return load_dataset_csv(config.csv_path)


def _derived_seed(seed: int, round_index: int, salt: int) -> int:
    return (seed * 1_000_003 + round_index * 10_007 + salt) % (2 ** 31 - 1)


def evaluate_robustness(params, dataset: Dataset, test_idx: np.ndarray,
                        corruption_kinds, perturb: PerturbationSpec,
                        rng: np.random.Generator) -> dict:
    """Accuracy per (corruption, severity 0..5); severity 0 is the clean
    accuracy, reused exactly for every kind."""
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if test_idx.size == 0:
        raise ConfigurationError("test set must be non-empty")
    for kind in corruption_kinds:
        if kind not in CORRUPTION_KINDS:
            raise ConfigurationError(f"unknown corruption kind {kind!r}")
    clean = evaluate_accuracy(params, dataset, test_idx)
    table = {}
    for kind in corruption_kinds:
        row = {"0": clean}
        for level in SEVERITY_LEVELS:
            row[str(level)] = evaluate_accuracy(params, dataset, test_idx,
                                                perturb=perturb, kind=kind,
                                                level=level, rng=rng)
        table[kind] = row
    return table


def _select_batch(config: ExperimentConfig, selector, dataset: Dataset,
                  pool: PoolState, candidates: np.ndarray,
                  partition: UncertaintyPartition | None, acq_seed: int
                  ) -> tuple[np.ndarray, bool]:
    """Select the round's batch; when short and backfill is on, fill the
    remainder from the high-aleatoric then the low-epistemic rows, scored by
    the same acquisition."""
    if candidates.size >= config.budget:
        request = AcquisitionRequest(config.acquisition, config.budget, candidates, acq_seed)
        return select(selector, dataset, pool, request), False

    if not config.backfill or partition is None:
        raise BudgetError(f"round has {candidates.size} candidates but the budget "
                          f"is {config.budget} and backfill is disabled")
    picks: list[np.ndarray] = []
    picked_count = 0
    if candidates.size:
        request = AcquisitionRequest(config.acquisition, candidates.size, candidates, acq_seed)
        picks.append(select(selector, dataset, pool, request))
        picked_count = candidates.size
    ha = partition.high_aleatoric
    le_only = np.setdiff1d(partition.low_epistemic, ha)
    for stage, source in enumerate((ha, le_only), start=1):
        short = config.budget - picked_count
        if short == 0 or source.size == 0:
            continue
        take = min(short, source.size)
        base = np.concatenate([pool.labeled_idx] + picks) if picks else pool.labeled_idx
        request = AcquisitionRequest(config.acquisition, take, source, acq_seed + stage)
        picks.append(select_with_base(selector, dataset, base, request))
        picked_count += take
    if picked_count < config.budget:
        raise BudgetError(f"backfill exhausted: {picked_count} selected of "
                          f"budget {config.budget}")
    return np.concatenate(picks), True


def run_round(config: ExperimentConfig, dataset: Dataset, pool: PoolState,
              round_index: int, seed: int
              ) -> tuple[RoundMetrics, PoolState, UncertaintyPartition | None, np.ndarray]:
    """Train per the configured method, select a batch, move it to the
    labeled set, and record the round's metrics."""
    if pool.unlabeled_idx.size == 0:
        raise ConfigurationError("unlabeled pool is empty")
    t0 = time.perf_counter()
    std = standardize_features(dataset, pool.labeled_idx)
    proxy_cfg = replace(config.proxy_train, seed=_derived_seed(seed, round_index, 1))
    target_cfg = replace(config.target_train, seed=_derived_seed(seed, round_index, 2))
    acq_seed = _derived_seed(seed, round_index, 3)
    robust_rng = np.random.default_rng(_derived_seed(seed, round_index, 4))

    lambda_star = None
    tau = None
    partition = None

    target = train_supervised(std, pool.labeled_idx, config.target_spec, target_cfg)
    if config.method == "same":
        selector = target
        candidates = pool.unlabeled_idx
    elif config.method == "diff":
        selector = train_supervised(std, pool.labeled_idx, config.proxy_spec, proxy_cfg)
        candidates = pool.unlabeled_idx
    elif config.method == "semi":
        proxy, state, _ = train_semisupervised(std, pool, config.proxy_spec, proxy_cfg,
                                               config.perturbation)
        selector = proxy
        candidates = pool.unlabeled_idx
        tau = class_threshold(state).tolist()
    else:  # tbu
        proxy, state, trace = train_semisupervised(std, pool, config.proxy_spec, proxy_cfg,
                                                   config.perturbation)
        x_lab = std.features[pool.labeled_idx]
        phi_lab = forward_features(proxy, x_lab)
        p_star = predict_softmax(proxy, x_lab).max(axis=1)
        sigma_hat = fit_shared_covariance(phi_lab, p_star)
        if pool.validation_idx.size == 0:
            raise ConfigurationError("tbu needs a non-empty validation set")
        phi_val = forward_features(proxy, std.features[pool.validation_idx])
        lambda_star = calibrate_lambda(proxy.last_layer, sigma_hat, phi_val,
                                       std.labels[pool.validation_idx])
        posterior = PosteriorLinearClassifier(proxy.last_layer, sigma_hat, lambda_star)
        phi_unl = forward_features(proxy, std.features[pool.unlabeled_idx])
        s_le = detect_le(posterior, phi_lab, std.labels[pool.labeled_idx],
                         phi_unl, pool.unlabeled_idx, config.q)
        s_ha = detect_ha(trace, config.persistence_count)
        partition = propose_candidates(pool.unlabeled_idx, s_le, s_ha)
        selector = target
        candidates = partition.candidates
        tau = class_threshold(state).tolist()

    selected, backfilled = _select_batch(config, selector, std, pool, candidates,
                                         partition, acq_seed)
    new_pool = pool.acquire(selected)

    accuracy = evaluate_accuracy(target, std, pool.test_idx)
    robustness = evaluate_robustness(target, std, pool.test_idx, config.corruptions,
                                     config.perturbation, robust_rng)
    n_unl = pool.unlabeled_idx.size
    n_le = partition.low_epistemic.size if partition is not None else 0
    n_ha = partition.high_aleatoric.size if partition is not None else 0
    metrics = RoundMetrics(
        round_index=round_index,
        accuracy=accuracy,
        robustness=robustness,
        n_le=n_le,
        n_ha=n_ha,
        n_cand=int(candidates.size),
        pct_le=100.0 * n_le / n_unl,
        pct_ha=100.0 * n_ha / n_unl,
        lambda_star=lambda_star,
        tau=tau,
        backfilled=backfilled,
        wall_ms=int(round((time.perf_counter() - t0) * 1000.0)),
    )
    return metrics, new_pool, partition, selected


def _run_seed(config: ExperimentConfig, seed: int, exp_dir: Path | None) -> dict:
    record = {"seed": seed, "status": "ok", "error": None, "rounds": []}
    try:
        dataset = load_config_dataset(config)
        pool = split_initial(dataset, config.initial_labeled, config.resolved_val_count(),
                             config.resolved_test_count(), seed)
        for round_index in range(1, config.rounds + 1):
            metrics, new_pool, partition, selected = run_round(
                config, dataset, pool, round_index, seed)
            expected = config.initial_labeled + round_index * config.budget
            if new_pool.labeled_idx.size != expected:
                raise ConfigurationError(
                    f"labeled count {new_pool.labeled_idx.size} != {expected} "
                    f"after round {round_index}")
            if exp_dir is not None:
                round_dir = exp_dir / f"seed_{seed}" / f"round_{round_index}"
                round_dir.mkdir(parents=True, exist_ok=True)
                jsonio.dump(metrics.to_dict(), round_dir / "metrics.json")
                with open(round_dir / "selected_indices.csv", "w", encoding="utf-8") as fh:
                    fh.write("".join(f"{i}\n" for i in selected))
                if partition is None:
                    partition = UncertaintyPartition(
                        np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                        pool.unlabeled_idx)
                save_partition_csv(partition, pool.unlabeled_idx,
                                   round_dir / "partition.csv")
            record["rounds"].append(metrics.to_dict())
            pool = new_pool
    except TbuError as exc:
        record["status"] = "error"
        record["error"] = str(exc)
    return record


def _worker_count(n_seeds: int) -> int:
    env = os.environ.get("TBU_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(n_seeds, cap))


def _std(values: list[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _aggregate(per_seed: list[dict], rounds: int) -> list[dict]:
    aggregates = []
    for r in range(1, rounds + 1):
        rows = [rec["rounds"][r - 1] for rec in per_seed if len(rec["rounds"]) >= r]
        entry = {"round": r}
        for key in ("accuracy", "pct_le", "pct_ha", "n_cand"):
            values = [row[key] for row in rows]
            entry[f"{key}_mean"] = float(np.mean(values)) if values else None
            entry[f"{key}_std"] = _std(values) if values else None
        aggregates.append(entry)
    return aggregates


def run_experiment(config: ExperimentConfig, out_root=None) -> dict:
    """Run every seed (fresh split, `rounds` rounds each) and aggregate.

    A failed seed is recorded and flags the report as partial instead of
    aborting the others.  When out_root is given, writes
    out_root/runs/<name>/seed_<s>/round_<r>/{metrics.json,
    selected_indices.csv, partition.csv} and a summary.json.
    """
    exp_dir = Path(out_root) / "runs" / config.name if out_root is not None else None
    if exp_dir is not None:
        exp_dir.mkdir(parents=True, exist_ok=True)

    workers = _worker_count(len(config.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_seed, config, seed, exp_dir)
                       for seed in config.seeds]
            by_seed = {rec["seed"]: rec for rec in (f.result() for f in futures)}
        per_seed = [by_seed[seed] for seed in config.seeds]
    else:
        per_seed = [_run_seed(config, seed, exp_dir) for seed in config.seeds]

    report = {
        "name": config.name,
        "method": config.method,
        "acquisition": config.acquisition,
        "q": config.q,
        "rounds": config.rounds,
        "seeds": list(config.seeds),
        "partial": any(rec["status"] != "ok" for rec in per_seed),
        "per_seed": per_seed,
        "aggregates": _aggregate(per_seed, config.rounds),
    }
    if exp_dir is not None:
        jsonio.dump(report, exp_dir / "summary.json")
    return report


def summarize_scheduling(reports) -> list[dict]:
    """Per-round mean and sample std of the LE/HA percentages of one or more
    tbu reports, one flat row per round with per-report column groups."""
    if isinstance(reports, dict):
        reports = [reports]
    if not reports:
        raise ConfigurationError("no reports given")
    labels = []
    for rep in reports:
        if rep.get("method") != "tbu":
            raise ConfigurationError("scheduling summary requires tbu reports")
        label = rep["acquisition"]
        labels.append(label if label not in labels else rep["name"])
    rows = []
    for r in range(1, max(rep["rounds"] for rep in reports) + 1):
        row = {"round": r}
        for label, rep in zip(labels, reports):
            records = [rec["rounds"][r - 1] for rec in rep["per_seed"]
                       if len(rec["rounds"]) >= r]
            if not records:
                continue
            les = [m["pct_le"] for m in records]
            has = [m["pct_ha"] for m in records]
            row[f"{label}_le_mean"] = float(np.mean(les))
            row[f"{label}_le_std"] = _std(les)
            row[f"{label}_ha_mean"] = float(np.mean(has))
            row[f"{label}_ha_std"] = _std(has)
        rows.append(row)
    return rows


def format_scheduling_table(rows: list[dict]) -> str:
    """Render the scheduling rows as an aligned text table."""
    if not rows:
        return ""
    keys = [k for k in rows[0] if k != "round" and k.endswith("_mean")]
    header = ["round"] + [k.removesuffix("_mean") for k in keys]
    lines = ["  ".join(f"{h:>16}" for h in header)]
    for row in rows:
        cells = [f"{row['round']:>16}"]
        for key in keys:
            std_key = key.removesuffix("_mean") + "_std"
            cells.append(f"{row[key]:>8.1f} ± {row.get(std_key, 0.0):<5.1f}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
