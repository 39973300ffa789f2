"""Command-line front end.

Subcommands:
  run       execute an experiment described by a JSON config
  filter    partition an unlabeled CSV pool into LE/HA/candidate rows
  gen-data  write a planted dataset plus its region annotations
  report    render per-round accuracy (CSV + SVG) from a runs directory

All experiment structure lives in the JSON config; flags only locate files
and toggle --force/verbosity.  Exit codes: 0 success, 2 configuration or
input error, 3 runtime/numeric error.  TBU_THREADS caps seed parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bounding import propose_candidates, detect_ha, detect_le, save_partition_csv
from .datapool import (PerturbationSpec, PlantedPoolSpec, PoolState,
                       generate_planted_pool, load_dataset_csv,
                       save_annotations_csv, save_dataset_csv,
                       standardize_features)
from .errors import ConfigurationError, ParseError, TbuError
from .harness import (DEFAULT_PROXY_SPEC, DEFAULT_PROXY_TRAIN,
                      DEFAULT_TARGET_SPEC, DEFAULT_TARGET_TRAIN,
                      ExperimentConfig, benchmark_planted_spec, run_experiment)
from .laplace import PosteriorLinearClassifier, calibrate_lambda, fit_shared_covariance
from .model import (MlpSpec, TrainConfig, forward_features, predict_softmax,
                    train_semisupervised)
from .report import write_accuracy_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _reject_unknown(doc: dict, allowed, context: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigurationError(f"{context}: unknown keys {unknown}")


def _parse_planted(doc: dict) -> PlantedPoolSpec:
    allowed = ("num_classes", "pool_size", "val_size", "test_size", "core_fraction",
               "noise_fraction", "frontier_fraction", "flip_p", "class_sep",
               "cluster_std", "dim", "class_means", "seed")
    _reject_unknown(doc, allowed, "dataset.planted")
    kwargs = dict(doc)
    if "class_means" in kwargs and kwargs["class_means"] is not None:
        kwargs["class_means"] = tuple(tuple(row) for row in kwargs["class_means"])
    return PlantedPoolSpec(**kwargs)


def _parse_train(doc: dict, default: TrainConfig, context: str) -> TrainConfig:
    allowed = ("epochs", "batch_size", "learning_rate", "weight_decay", "ema_eta",
               "unlabeled_weight", "seed")
    _reject_unknown(doc, allowed, context)
    return replace(default, **doc)


def _parse_model(doc: dict, default_spec: MlpSpec, default_train: TrainConfig,
                 context: str) -> tuple[MlpSpec, TrainConfig]:
    _reject_unknown(doc, ("hidden_widths", "activation", "train"), context)
    spec = MlpSpec(
        hidden_widths=tuple(doc.get("hidden_widths", default_spec.hidden_widths)),
        activation=doc.get("activation", default_spec.activation),
    )
    train = _parse_train(doc.get("train", {}), default_train, f"{context}.train")
    return spec, train


def _parse_perturbation(doc: dict) -> PerturbationSpec:
    allowed = ("weak_noise_scale", "strong_noise_scale", "dropout_rate",
               "corruption_kinds")
    _reject_unknown(doc, allowed, "perturbation")
    kwargs = dict(doc)
    if "corruption_kinds" in kwargs:
        kwargs["corruption_kinds"] = tuple(kwargs["corruption_kinds"])
    return PerturbationSpec(**kwargs)


def config_from_doc(doc: dict) -> tuple[ExperimentConfig, str | None, int]:
    """Strictly parse a config document; returns (config, output_dir, verbosity)."""
    allowed = ("name", "dataset", "method", "acquisition", "rounds", "initial_labeled",
               "budget", "q", "persistence_count", "val_count", "test_count", "proxy",
               "target", "seeds", "backfill", "perturbation", "corruptions",
               "output_dir", "verbosity")
    _reject_unknown(doc, allowed, "config")

    dataset_doc = doc.get("dataset", {"planted": None})
    _reject_unknown(dataset_doc, ("planted", "csv"), "dataset")
    planted = None
    csv_path = None
    if "csv" in dataset_doc:
        csv_path = str(dataset_doc["csv"])
    else:
        spec_doc = dataset_doc.get("planted")
        planted = benchmark_planted_spec() if spec_doc is None else _parse_planted(spec_doc)

    method = doc.get("method", "tbu")
    proxy_spec, proxy_train = _parse_model(
        doc.get("proxy", {}),
        DEFAULT_TARGET_SPEC if method == "same" else DEFAULT_PROXY_SPEC,
        DEFAULT_TARGET_TRAIN if method == "same" else DEFAULT_PROXY_TRAIN, "proxy")
    target_spec, target_train = _parse_model(
        doc.get("target", {}), DEFAULT_TARGET_SPEC, DEFAULT_TARGET_TRAIN, "target")

    config = ExperimentConfig(
        name=doc.get("name", f"{method}-{doc.get('acquisition', 'entropy')}"),
        method=method,
        acquisition=doc.get("acquisition", "entropy"),
        rounds=int(doc.get("rounds", 4)),
        initial_labeled=int(doc.get("initial_labeled", 100)),
        budget=int(doc.get("budget", 100)),
        seeds=tuple(doc.get("seeds", (1, 2, 3))),
        planted=planted,
        csv_path=csv_path,
        q=float(doc.get("q", 10.0)),
        persistence_count=int(doc.get("persistence_count", 5)),
        val_count=doc.get("val_count"),
        test_count=doc.get("test_count"),
        proxy_spec=proxy_spec,
        proxy_train=proxy_train,
        target_spec=target_spec,
        target_train=target_train,
        backfill=bool(doc.get("backfill", False)),
        perturbation=_parse_perturbation(doc.get("perturbation", {})),
        corruptions=tuple(doc.get("corruptions", ("noise", "scale", "offset"))),
    )
    return config, doc.get("output_dir"), int(doc.get("verbosity", 0))


DEFAULT_CONFIG_DOC = {
    "name": "tbu-entropy",
    "dataset": {"planted": {"num_classes": 4, "pool_size": 5000, "val_size": 500,
                            "test_size": 1000, "core_fraction": 0.3,
                            "noise_fraction": 0.15, "flip_p": 0.4, "class_sep": 2.8,
                            "cluster_std": 1.0, "seed": 7}},
    "method": "tbu",
    "acquisition": "entropy",
    "rounds": 4,
    "initial_labeled": 100,
    "budget": 100,
    "q": 10,
    "persistence_count": 5,
    "proxy": {"hidden_widths": [64], "activation": "relu",
              "train": {"epochs": 64, "batch_size": 8, "learning_rate": 0.1,
                        "weight_decay": 1e-4, "ema_eta": 0.99, "unlabeled_weight": 1.5}},
    "target": {"hidden_widths": [32, 32], "activation": "relu",
               "train": {"epochs": 48, "batch_size": 32, "learning_rate": 0.1,
                         "weight_decay": 5e-4}},
    "seeds": [1, 2, 3],
    "backfill": False,
    "perturbation": {"weak_noise_scale": 0.25, "strong_noise_scale": 0.4,
                     "dropout_rate": 0.05},
    "corruptions": ["noise", "scale", "offset"],
}


def _check_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigurationError(f"output directory {path} is not empty (use --force)")


def _check_out_file(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigurationError(f"output file {path} exists (use --force)")


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None


def cmd_run(args) -> int:
    config, config_out, verbosity = config_from_doc(_load_json(Path(args.config)))
    out = args.out or config_out
    if out is None:
        raise ConfigurationError("no output directory: pass --out or set output_dir")
    out_path = Path(out)
    _check_out_dir(out_path, args.force)
    if verbosity or args.verbose:
        print(f"running {config.name}: method={config.method} "
              f"acquisition={config.acquisition} seeds={list(config.seeds)}",
              file=sys.stderr)
    report = run_experiment(config, out_path)
    summary = out_path / "runs" / config.name / "summary.json"
    if report["partial"]:
        print(f"partial: some seeds failed, see {summary}", file=sys.stderr)
        return EXIT_RUNTIME
    print(summary)
    return EXIT_OK


def _load_index_file(path: Path, n_rows: int) -> np.ndarray:
    if not path.exists():
        raise ConfigurationError(f"index file not found: {path}")
    values = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        for cell in line.split(","):
            cell = cell.strip()
            if not cell:
                continue
            try:
                values.append(int(cell))
            except ValueError:
                raise ParseError(f"{path}: row {lineno}: non-integer index {cell!r}") \
                    from None
    idx = np.asarray(sorted(set(values)), dtype=np.int64)
    if idx.size == 0:
        raise ConfigurationError(f"{path}: no indices")
    if idx.min() < 0 or idx.max() >= n_rows:
        raise ConfigurationError(f"{path}: indices out of range [0, {n_rows})")
    return idx


def cmd_filter(args) -> int:
    dataset = load_dataset_csv(Path(args.data))
    labeled = _load_index_file(Path(args.labeled), dataset.n_rows)
    unlabeled = np.setdiff1d(np.arange(dataset.n_rows), labeled)
    if unlabeled.size == 0:
        raise ConfigurationError("all rows are labeled: nothing to filter")
    if labeled.size < 2:
        raise ConfigurationError("need at least 2 labeled rows")
    out_path = Path(args.out)
    _check_out_file(out_path, args.force)

    # hold out part of the labeled rows to calibrate the posterior scaling
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(labeled.size)
    n_val = max(1, labeled.size // 5)
    val_idx = np.sort(labeled[perm[:n_val]])
    train_idx = np.sort(labeled[perm[n_val:]])

    std = standardize_features(dataset, train_idx)
    pool = PoolState(labeled_idx=train_idx, unlabeled_idx=unlabeled,
                     validation_idx=val_idx, test_idx=np.empty(0, dtype=np.int64))
    train_cfg = replace(DEFAULT_PROXY_TRAIN, seed=args.seed)
    proxy, _, trace = train_semisupervised(std, pool, DEFAULT_PROXY_SPEC, train_cfg,
                                           PerturbationSpec())
    x_lab = std.features[train_idx]
    phi_lab = forward_features(proxy, x_lab)
    p_star = predict_softmax(proxy, x_lab).max(axis=1)
    sigma_hat = fit_shared_covariance(phi_lab, p_star)
    phi_val = forward_features(proxy, std.features[val_idx])
    lam = calibrate_lambda(proxy.last_layer, sigma_hat, phi_val, std.labels[val_idx])
    posterior = PosteriorLinearClassifier(proxy.last_layer, sigma_hat, lam)

    phi_unl = forward_features(proxy, std.features[unlabeled])
    s_le = detect_le(posterior, phi_lab, std.labels[train_idx], phi_unl, unlabeled,
                     float(args.q))
    s_ha = detect_ha(trace, args.persistence)
    partition = propose_candidates(unlabeled, s_le, s_ha)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_partition_csv(partition, unlabeled, out_path)
    print(out_path)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec_doc = _load_json(Path(args.spec))
    spec = _parse_planted(spec_doc)
    out_path = Path(args.out)
    annotations_path = out_path.with_name(out_path.stem + ".annotations.csv")
    _check_out_file(out_path, args.force)
    _check_out_file(annotations_path, args.force)
    dataset, annotations = generate_planted_pool(spec)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset_csv(dataset, out_path)
    save_annotations_csv(annotations, annotations_path)
    print(out_path)
    print(annotations_path)
    return EXIT_OK


def cmd_report(args) -> int:
    out_path = Path(args.out)
    _check_out_dir(out_path, args.force)
    csv_path, svg_path = write_accuracy_report(Path(args.runs), out_path)
    print(csv_path)
    print(svg_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tbu",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser(
        "run", help="run an experiment from a JSON config",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Config defaults (any key may be omitted):\n"
               + json.dumps(DEFAULT_CONFIG_DOC, indent=2))
    run_p.add_argument("--config", required=True, help="path to the JSON config")
    run_p.add_argument("--out", help="output directory (default: config output_dir)")
    run_p.add_argument("--force", action="store_true",
                       help="allow a non-empty output directory")
    run_p.add_argument("-v", "--verbose", action="count", default=0)
    run_p.set_defaults(func=cmd_run)

    filter_p = sub.add_parser("filter",
                              help="partition an unlabeled pool into LE/HA/CAND rows")
    filter_p.add_argument("--data", required=True, help="dataset CSV (f0..fd-1,label)")
    filter_p.add_argument("--labeled", required=True,
                          help="file of labeled row indices, one per line")
    filter_p.add_argument("--q", type=float, default=10.0,
                          help="LE entropy percentile (default 10)")
    filter_p.add_argument("--persistence", type=int, default=5,
                          help="HA trailing-checkpoint count (default 5)")
    filter_p.add_argument("--seed", type=int, default=0,
                          help="seed for the internal proxy training (default 0)")
    filter_p.add_argument("--out", required=True, help="partition CSV to write")
    filter_p.add_argument("--force", action="store_true", help="overwrite the output")
    filter_p.set_defaults(func=cmd_filter)

    gen_p = sub.add_parser("gen-data", help="generate a planted dataset CSV")
    gen_p.add_argument("--spec", required=True, help="planted-pool spec JSON")
    gen_p.add_argument("--out", required=True, help="dataset CSV to write "
                       "(annotations go to <name>.annotations.csv)")
    gen_p.add_argument("--force", action="store_true", help="overwrite outputs")
    gen_p.set_defaults(func=cmd_gen_data)

    report_p = sub.add_parser("report",
                              help="per-round accuracy CSV + SVG from a runs dir")
    report_p.add_argument("--runs", required=True, help="directory containing runs")
    report_p.add_argument("--out", required=True, help="output directory")
    report_p.add_argument("--force", action="store_true",
                          help="allow a non-empty output directory")
    report_p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TbuError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
