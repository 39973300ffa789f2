"""Pool-based active learning with bounded-uncertainty candidate filtering.

A semi-supervised proxy model scores the unlabeled pool, a gaussian
posterior over its last layer flags low-epistemic (redundant) rows, the
adaptive confidence thresholds flag high-aleatoric (noisy) rows, and the
target model selects its labeling batch from what remains.
"""

from .acquisition import (AcquisitionRequest, badge_embeddings, select,
                          select_badge, select_coreset, select_entropy)
from .bounding import (FilterConfig, ThresholdState, UncertaintyPartition,
                       class_threshold, detect_ha, detect_le,
                       propose_candidates, update_thresholds)
from .datapool import (Dataset, PerturbationSpec, PlantedPoolSpec,
                       PoolAnnotations, PoolState, apply_perturbation,
                       generate_planted_pool, load_dataset_csv,
                       save_dataset_csv, split_initial, standardize_features)
from .errors import (BudgetError, ConfigurationError, IntegrityError,
                     NumericError, ParseError, ShapeError, TbuError,
                     TrainingError)
from .harness import (ExperimentConfig, RoundMetrics, default_benchmark_configs,
                      default_experiment_config, evaluate_robustness,
                      run_experiment, run_round, summarize_scheduling)
from .laplace import (PosteriorLinearClassifier, calibrate_lambda,
                      fit_shared_covariance, logit_variance, predict_meanfield,
                      predictive_entropy)
from .model import (CheckpointTrace, MlpSpec, ModelParams, TrainConfig,
                    evaluate_accuracy, forward_features, predict_softmax,
                    train_semisupervised, train_supervised)

__version__ = "0.1.0"
