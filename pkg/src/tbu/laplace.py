"""Gaussian posterior over the last linear layer with a shared covariance.

The posterior mean is the trained last layer (MAP under L2).  The shared
covariance is the inverse of a generalized Gauss-Newton sum weighted by
p*(1 - p*) plus the identity prior precision; it is fitted once, after
which every prediction here is pure and safe to run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import xlogy

from . import jsonio
from .errors import ConfigurationError, NumericError, ShapeError
from .numerics import softmax

_SYMMETRY_TOL = 1e-10
_LOG10_LAMBDA_RANGE = (-4.0, 4.0)
_GOLDEN_ITERATIONS = 60


@dataclass
class PosteriorLinearClassifier:
    """(mu, sigma_hat, lam): posterior mean, shared covariance, and the
    calibrated scaling of the logit variance in the mean-field predictor."""

    mu: np.ndarray         # (F, C)
    sigma_hat: np.ndarray  # (F, F), symmetric positive-definite
    lam: float = 0.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma_hat = np.asarray(self.sigma_hat, dtype=np.float64)
        if self.mu.ndim != 2 or self.sigma_hat.shape != (self.mu.shape[0],) * 2:
            raise ShapeError("mu must be (F, C) and sigma_hat (F, F)")
        if np.abs(self.sigma_hat - self.sigma_hat.T).max() > _SYMMETRY_TOL:
            raise NumericError("sigma_hat is not symmetric")
        try:
            np.linalg.cholesky(self.sigma_hat)
        except np.linalg.LinAlgError:
            raise NumericError("sigma_hat is not positive-definite") from None
        if not (np.isfinite(self.lam) and self.lam >= 0.0):
            raise ConfigurationError(f"lambda must be finite and >= 0, got {self.lam}")


def fit_shared_covariance(phi: np.ndarray, p_star: np.ndarray) -> np.ndarray:
    """Invert (sum_i p*_i (1-p*_i) phi_i phi_i^T + I) via Cholesky.

    An empty sum returns the identity (prior-only covariance).
    """
    phi = np.asarray(phi, dtype=np.float64)
    p_star = np.asarray(p_star, dtype=np.float64)
    if phi.ndim != 2:
        raise ShapeError("phi must be a (n, F) matrix")
    if p_star.shape != (phi.shape[0],):
        raise ShapeError("p_star must have one entry per phi row")
    if not np.all(np.isfinite(phi)):
        raise NumericError("features contain non-finite values")
    if phi.shape[0] and (p_star.min() < 0.0 or p_star.max() > 1.0):
        raise NumericError("p_star values must lie in [0, 1]")
    f = phi.shape[1]
    precision = np.eye(f)
    if phi.shape[0]:
        weights = p_star * (1.0 - p_star)
        precision = precision + (phi * weights[:, None]).T @ phi
    cov = cho_solve(cho_factor(precision), np.eye(f))
    return 0.5 * (cov + cov.T)


def logit_variance(sigma_hat: np.ndarray, phi: np.ndarray) -> np.ndarray | float:
    """Quadratic form phi^T sigma_hat phi, per row for batched phi."""
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    single = phi.ndim == 1
    phi2 = phi[None, :] if single else phi
    if phi2.shape[1] != sigma_hat.shape[0]:
        raise ShapeError(f"phi width {phi2.shape[1]} does not match covariance "
                         f"size {sigma_hat.shape[0]}")
    v = np.einsum("ij,jk,ik->i", phi2, sigma_hat, phi2)
    return float(v[0]) if single else v


def predict_meanfield(post: PosteriorLinearClassifier, phi: np.ndarray) -> np.ndarray:
    """softmax(phi^T mu / sqrt(1 + lam * v(phi))); the argmax matches the
    plain logits for every lam >= 0."""
    phi = np.asarray(phi, dtype=np.float64)
    single = phi.ndim == 1
    phi2 = phi[None, :] if single else phi
    logits = phi2 @ post.mu
    v = logit_variance(post.sigma_hat, phi2)
    scaled = logits / np.sqrt(1.0 + post.lam * v)[:, None]
    probs = softmax(scaled)
    return probs[0] if single else probs


def predictive_entropy(p: np.ndarray) -> np.ndarray | float:
    """Shannon entropy -sum p ln p in nats; 0 ln 0 counts as 0."""
    p = np.asarray(p, dtype=np.float64)
    h = -xlogy(p, p).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def _mean_nll(logits: np.ndarray, v: np.ndarray, labels: np.ndarray, lam: float) -> float:
    scaled = logits / np.sqrt(1.0 + lam * v)[:, None]
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    log_p = shifted[np.arange(len(labels)), labels] - np.log(np.exp(shifted).sum(axis=1))
    return float(-log_p.mean())


def calibrate_lambda(mu: np.ndarray, sigma_hat: np.ndarray, phi_val: np.ndarray,
                     y_val: np.ndarray) -> float:
    """Pick lam minimizing mean validation NLL of the mean-field predictor.

    Deterministic golden-section search over log10(lam) in [-4, 4] plus
    probes at 0 and both endpoints; exact ties resolve to the smaller lam,
    so a lam-independent objective yields 0.
    """
    phi_val = np.asarray(phi_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if phi_val.ndim != 2 or phi_val.shape[0] == 0:
        raise ConfigurationError("validation set must be non-empty")
    logits = phi_val @ mu
    v = np.asarray(logit_variance(sigma_hat, phi_val))

    def objective(lam: float) -> float:
        return _mean_nll(logits, v, y_val, lam)

    lo, hi = _LOG10_LAMBDA_RANGE
    evals = [(0.0, objective(0.0)), (10.0 ** lo, objective(10.0 ** lo)),
             (10.0 ** hi, objective(10.0 ** hi))]

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = objective(10.0 ** c), objective(10.0 ** d)
    evals += [(10.0 ** c, fc), (10.0 ** d, fd)]
    for _ in range(_GOLDEN_ITERATIONS):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = objective(10.0 ** c)
            evals.append((10.0 ** c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = objective(10.0 ** d)
            evals.append((10.0 ** d, fd))

    best = min(val for _, val in evals)
    return min(lam for lam, val in evals if val == best)


def save_posterior(post: PosteriorLinearClassifier, path) -> None:
    jsonio.dump({"mu": post.mu.tolist(), "sigma_hat": post.sigma_hat.tolist(),
                 "lambda": post.lam}, path)


def load_posterior(path) -> PosteriorLinearClassifier:
    doc = jsonio.load(path)
    return PosteriorLinearClassifier(np.asarray(doc["mu"]), np.asarray(doc["sigma_hat"]),
                                     float(doc["lambda"]))
