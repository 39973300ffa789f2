"""MLP classifiers: supervised MAP training and semi-supervised training
with adaptive confidence thresholds.

The network is a plain feed-forward extractor followed by a linear layer.
The extractor output always carries an appended constant-1 coordinate, so
the final layer is a pure (F x C) matrix whose last row is the bias; a
gaussian posterior over that matrix then covers the bias as well.

Training is single-threaded mini-batch gradient descent, deterministic per
seed.  Inference functions are pure and reentrant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bounding, jsonio
from .datapool import Dataset, PerturbationSpec, PoolState, apply_perturbation
from .errors import ConfigurationError, ShapeError, TrainingError
from .numerics import softmax

N_CHECKPOINTS = 8  # confidence evaluations every 12.5% of training

_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(np.float64)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: hidden widths (empty means a linear model) and activation."""

    hidden_widths: tuple = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError("hidden widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def feature_dim(self, input_dim: int) -> int:
        """Width of the extractor output including the constant-1 coordinate."""
        return (self.hidden_widths[-1] if self.hidden_widths else input_dim) + 1


@dataclass
class ModelParams:
    spec: MlpSpec
    extractor: list            # [(W_i, b_i), ...] per hidden layer
    last_layer: np.ndarray     # (F, C)

    @property
    def num_classes(self) -> int:
        return self.last_layer.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, [(w.copy(), b.copy()) for w, b in self.extractor],
                           self.last_layer.copy())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 0.1
    weight_decay: float = 5e-4
    ema_eta: float = 0.99
    unlabeled_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < N_CHECKPOINTS:
            raise ConfigurationError(f"epochs must be >= {N_CHECKPOINTS}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.weight_decay <= 0:
            raise ConfigurationError("weight_decay must be > 0")
        if not 0.0 <= self.ema_eta < 1.0:
            raise ConfigurationError("ema_eta must lie in [0, 1)")
        if self.unlabeled_weight < 0:
            raise ConfigurationError("unlabeled_weight must be >= 0")


@dataclass
class CheckpointTrace:
    """Clean-pass confidence record of the unlabeled pool at the 8 checkpoints."""

    epochs: np.ndarray         # (8,) 1-based epoch numbers
    confidences: np.ndarray    # (8, n_unlabeled) max softmax per row
    predicted: np.ndarray      # (8, n_unlabeled) argmax class per row
    thresholds: np.ndarray     # (8, C) class threshold vector at the checkpoint
    unlabeled_idx: np.ndarray  # (n_unlabeled,) dataset indices, trace column order

    def __post_init__(self):
        if len(self.epochs) != N_CHECKPOINTS or self.confidences.shape[0] != N_CHECKPOINTS:
            raise ConfigurationError(f"trace must have exactly {N_CHECKPOINTS} checkpoints")
        if self.confidences.min() < 0.0 or self.confidences.max() > 1.0:
            raise ConfigurationError("trace confidences must lie in [0, 1]")


def checkpoint_epochs(total_epochs: int) -> list[int]:
    """The 8 evaluation epochs ceil(k*E/8), k = 1..8 (1-based, distinct for E >= 8)."""
    return [math.ceil(k * total_epochs / N_CHECKPOINTS) for k in range(1, N_CHECKPOINTS + 1)]


def init_params(spec: MlpSpec, input_dim: int, num_classes: int,
                rng: np.random.Generator) -> ModelParams:
    """He/Xavier extractor init; zero last layer so initial predictions are uniform."""
    extractor = []
    fan_in = input_dim
    gain = 2.0 if spec.activation == "relu" else 1.0
    for width in spec.hidden_widths:
        w = rng.normal(0.0, math.sqrt(gain / fan_in), size=(fan_in, width))
        extractor.append((w, np.zeros(width)))
        fan_in = width
    last = np.zeros((spec.feature_dim(input_dim), num_classes))
    return ModelParams(spec, extractor, last)


def _features_2d(params: ModelParams, x: np.ndarray) -> np.ndarray:
    h = x
    act = _ACTIVATIONS[params.spec.activation][0]
    for w, b in params.extractor:
        h = act(h @ w + b)
    return np.concatenate([h, np.ones((h.shape[0], 1))], axis=1)


def forward_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Extractor output phi(x) with the constant-1 coordinate appended.

    Accepts a single row (d,) or a batch (n, d) and mirrors the shape.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    expected = params.extractor[0][0].shape[0] if params.extractor \
        else params.last_layer.shape[0] - 1
    if x2.shape[1] != expected:
        raise ShapeError(f"input width {x2.shape[1]} does not match model width {expected}")
    phi = _features_2d(params, x2)
    return phi[0] if single else phi


def predict_logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward_features(params, x) @ params.last_layer


def predict_softmax(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return softmax(predict_logits(params, x))


def _ce_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray,
                  row_weight: np.ndarray | None = None, denom: float | None = None):
    """Mean cross-entropy (optionally row-weighted) and its parameter gradients.

    Returns (loss, extractor_grads, last_layer_grad) where the gradient tree
    mirrors the parameter tree.  `denom` overrides the averaging denominator
    (used to average masked batches over the full batch size).
    """
    act, dact = _ACTIVATIONS[params.spec.activation]
    h = x
    pre, post = [], [x]
    for w, b in params.extractor:
        z = h @ w + b
        pre.append(z)
        h = act(z)
        post.append(h)
    phi = np.concatenate([h, np.ones((h.shape[0], 1))], axis=1)
    logits = phi @ params.last_layer

    n = x.shape[0]
    denom = float(denom if denom is not None else n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), y] - log_z
    probs = np.exp(shifted - log_z[:, None])

    if row_weight is None:
        loss = -log_p.sum() / denom
    else:
        loss = -(row_weight * log_p).sum() / denom

    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    if row_weight is not None:
        dlogits *= row_weight[:, None]
    dlogits /= denom

    g_last = phi.T @ dlogits
    dh = (dlogits @ params.last_layer.T)[:, :-1]
    ext_grads = [None] * len(params.extractor)
    for i in range(len(params.extractor) - 1, -1, -1):
        dz = dh * dact(pre[i])
        ext_grads[i] = (post[i].T @ dz, dz.sum(axis=0))
        if i:
            dh = dz @ params.extractor[i][0].T
    return loss, ext_grads, g_last


def loss_and_gradients(params: ModelParams, x: np.ndarray, y: np.ndarray,
                       weight_decay: float):
    """Full objective (mean CE + L2 on every parameter) and its gradients."""
    loss, ext_grads, g_last = _ce_and_grads(params, x, y)
    sq = float(np.sum(params.last_layer ** 2))
    for w, b in params.extractor:
        sq += float(np.sum(w ** 2) + np.sum(b ** 2))
    loss += 0.5 * weight_decay * sq
    ext_grads = [(gw + weight_decay * w, gb + weight_decay * b)
                 for (gw, gb), (w, b) in zip(ext_grads, params.extractor)]
    g_last = g_last + weight_decay * params.last_layer
    return loss, ext_grads, g_last


def _apply_update(params: ModelParams, ext_grads, g_last, lr: float, wd: float) -> None:
    for (w, b), (gw, gb) in zip(params.extractor, ext_grads):
        w -= lr * (gw + wd * w)
        b -= lr * (gb + wd * b)
    params.last_layer -= lr * (g_last + wd * params.last_layer)


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    # step decay x0.5 at 60% and 80% of the epoch budget (epoch is 0-based)
    m1 = int(round(0.6 * cfg.epochs))
    m2 = int(round(0.8 * cfg.epochs))
    return cfg.learning_rate * 0.5 ** ((epoch >= m1) + (epoch >= m2))


def _check_finite(params: ModelParams, loss: float, epoch: int) -> None:
    if not np.isfinite(loss) or not np.all(np.isfinite(params.last_layer)):
        raise TrainingError(f"training diverged: non-finite loss at epoch {epoch + 1}")


def train_supervised(dataset: Dataset, labeled_idx: np.ndarray, spec: MlpSpec,
                     cfg: TrainConfig) -> ModelParams:
    """MAP training on the labeled rows: cross-entropy plus L2 on all weights."""
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    if labeled_idx.size == 0:
        raise ConfigurationError("labeled set must be non-empty")
    # Two RNG streams so the semi-supervised trainer can share the main one
    # bit-for-bit: init + labeled shuffling on stream 0, augmentation on 1.
    main_ss, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(main_ss)
    x_all = dataset.features[labeled_idx]
    y_all = dataset.labels[labeled_idx]
    params = init_params(spec, dataset.n_features, dataset.num_classes, rng)
    with np.errstate(over="ignore", invalid="ignore"):  # divergence raises below
        for epoch in range(cfg.epochs):
            lr = _epoch_lr(cfg, epoch)
            order = rng.permutation(labeled_idx.size)
            epoch_loss = 0.0
            for start in range(0, order.size, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                loss, ext_grads, g_last = _ce_and_grads(params, x_all[batch], y_all[batch])
                _apply_update(params, ext_grads, g_last, lr, cfg.weight_decay)
                epoch_loss += loss
            _check_finite(params, epoch_loss, epoch)
    return params


def train_semisupervised(dataset: Dataset, pool: PoolState, spec: MlpSpec,
                         cfg: TrainConfig, perturb: PerturbationSpec
                         ) -> tuple[ModelParams, "bounding.ThresholdState", CheckpointTrace]:
    """Pseudo-label training with adaptive class thresholds.

    Per unlabeled batch: the weak view's argmax becomes the pseudo-label, a
    row is kept when its weak-view confidence passes the current class
    threshold, and the strong view's cross-entropy against the pseudo-label
    (averaged over the full batch, weighted by cfg.unlabeled_weight) joins
    the labeled loss.  Thresholds are then updated with the weak-view batch.
    Clean forward passes fill the checkpoint trace at the 8 evaluation
    epochs.  With an everywhere-empty keep mask the parameter trajectory is
    identical to train_supervised at the same seed.
    """
    if pool.unlabeled_idx.size == 0:
        raise ConfigurationError("unlabeled pool must be non-empty")
    main_ss, aug_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(main_ss)
    rng_aug = np.random.default_rng(aug_ss)

    x_lab = dataset.features[pool.labeled_idx]
    y_lab = dataset.labels[pool.labeled_idx]
    x_unl = dataset.features[pool.unlabeled_idx]
    n_lab, n_unl = x_lab.shape[0], x_unl.shape[0]
    C = dataset.num_classes

    params = init_params(spec, dataset.n_features, C, rng)
    state = bounding.ThresholdState.initial(C, cfg.ema_eta)

    cp_epochs = checkpoint_epochs(cfg.epochs)
    cp_set = set(cp_epochs)
    cp_conf, cp_pred, cp_tau = [], [], []

    u_order = rng_aug.permutation(n_unl)
    u_pos = 0

    def next_unlabeled(size: int) -> np.ndarray:
        nonlocal u_order, u_pos
        taken = []
        need = size
        while need:
            if u_pos == n_unl:
                u_order = rng_aug.permutation(n_unl)
                u_pos = 0
            chunk = u_order[u_pos:u_pos + need]
            taken.append(chunk)
            u_pos += chunk.size
            need -= chunk.size
        return np.concatenate(taken)

    with np.errstate(over="ignore", invalid="ignore"):  # divergence raises below
        for epoch in range(cfg.epochs):
            lr = _epoch_lr(cfg, epoch)
            order = rng.permutation(n_lab)
            epoch_loss = 0.0
            for start in range(0, order.size, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                u_batch = x_unl[next_unlabeled(cfg.batch_size)]
                weak = apply_perturbation(u_batch, perturb, "weak", rng_aug)
                strong = apply_perturbation(u_batch, perturb, "strong", rng_aug)

                probs_weak = predict_softmax(params, weak)
                pseudo = probs_weak.argmax(axis=1)
                confidence = probs_weak[np.arange(len(pseudo)), pseudo]
                tau = bounding.class_threshold(state)
                keep = (confidence >= tau[pseudo]).astype(np.float64)
                state = bounding.update_thresholds(state, probs_weak)

                loss, ext_grads, g_last = _ce_and_grads(params, x_lab[batch], y_lab[batch])
                if cfg.unlabeled_weight > 0.0 and keep.any():
                    u_loss, u_ext, u_last = _ce_and_grads(
                        params, strong, pseudo, row_weight=keep, denom=len(u_batch))
                    loss += cfg.unlabeled_weight * u_loss
                    ext_grads = [(gw + cfg.unlabeled_weight * ugw,
                                  gb + cfg.unlabeled_weight * ugb)
                                 for (gw, gb), (ugw, ugb) in zip(ext_grads, u_ext)]
                    g_last = g_last + cfg.unlabeled_weight * u_last
                _apply_update(params, ext_grads, g_last, lr, cfg.weight_decay)
                epoch_loss += loss
            _check_finite(params, epoch_loss, epoch)

            if (epoch + 1) in cp_set:
                probs = predict_softmax(params, x_unl)
                cp_conf.append(probs.max(axis=1))
                cp_pred.append(probs.argmax(axis=1))
                cp_tau.append(bounding.class_threshold(state))

    trace = CheckpointTrace(
        epochs=np.asarray(cp_epochs, dtype=np.int64),
        confidences=np.asarray(cp_conf),
        predicted=np.asarray(cp_pred, dtype=np.int64),
        thresholds=np.asarray(cp_tau),
        unlabeled_idx=pool.unlabeled_idx.copy(),
    )
    return params, state, trace


def evaluate_accuracy(params: ModelParams, dataset: Dataset, idx: np.ndarray,
                      perturb: PerturbationSpec | None = None, kind: str | None = None,
                      level: int = 0, rng: np.random.Generator | None = None) -> float:
    """Fraction of argmax-correct rows; argmax ties go to the lowest class id."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ConfigurationError("cannot evaluate accuracy on an empty index set")
    x = dataset.features[idx]
    if kind is not None:
        x = apply_perturbation(x, perturb, kind, rng, level)
    pred = predict_logits(params, x).argmax(axis=1)
    return float(np.mean(pred == dataset.labels[idx]))


def save_params(params: ModelParams, path) -> None:
    """JSON document {"spec": ..., "layers": [row-major weight arrays]}."""
    layers = []
    for w, b in params.extractor:
        layers.append(w.tolist())
        layers.append(b.tolist())
    layers.append(params.last_layer.tolist())
    doc = {
        "spec": {"hidden_widths": list(params.spec.hidden_widths),
                 "activation": params.spec.activation},
        "layers": layers,
    }
    jsonio.dump(doc, path)


def load_params(path) -> ModelParams:
    doc = jsonio.load(path)
    spec = MlpSpec(tuple(doc["spec"]["hidden_widths"]), doc["spec"]["activation"])
    layers = [np.asarray(layer, dtype=np.float64) for layer in doc["layers"]]
    if len(layers) != 2 * len(spec.hidden_widths) + 1:
        raise ConfigurationError(f"{path}: layer count does not match spec")
    extractor = [(layers[2 * i], layers[2 * i + 1]) for i in range(len(spec.hidden_widths))]
    return ModelParams(spec, extractor, layers[-1])
