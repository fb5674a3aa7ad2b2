"""Online prediction of training progress.

A job's progress fraction is modelled as ``Be(alpha, beta)`` where ``alpha``
counts processed epochs and ``beta`` comes from an affine regression on
training-log features, thresholded at 1.  The regression is refit by maximum
Beta likelihood whenever a job completes.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import betaln, digamma, polygamma

from ones.domain import JobRuntime

N_FEATURES = 5
RHO_EPS = 1e-6


@dataclass(frozen=True)
class PredictorFeatures:
    epoch_size: float
    loss_init: float
    processed: float
    loss_improvement: float
    accuracy: float

    def __post_init__(self):
        if self.epoch_size < 1:
            raise ValueError("epoch_size must be >= 1")
        if self.processed < 0:
            raise ValueError("processed must be >= 0")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.epoch_size, self.loss_init, self.processed,
                         self.loss_improvement, self.accuracy], dtype=float)

    @classmethod
    def of(cls, rt: JobRuntime) -> "PredictorFeatures":
        return cls(rt.spec.epoch_size, rt.spec.loss_init, rt.processed,
                   rt.loss_improvement, rt.current_accuracy)


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha >= 1.0 and self.beta >= 1.0):
            raise ValueError(f"Beta shapes must be >= 1, got ({self.alpha}, {self.beta})")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclass(frozen=True)
class ProgressSample:
    features: PredictorFeatures
    progress: float

    def __post_init__(self):
        if not 0.0 < self.progress < 1.0:
            raise ValueError("progress must lie strictly inside (0, 1)")


@dataclass
class PredictorConfig:
    cold_beta: float = 4.0
    buffer_cap: int = 2048
    per_job_quota: int = 32
    max_steps: int = 200
    step_size: float = 1.0
    tolerance: float = 1e-6


@dataclass
class ProgressModel:
    """Affine beta-regression plus its bounded training buffer.

    ``weights``/``bias`` act on standardized features
    ``(x - feature_mean) / feature_scale``.  Until the first fit (or until
    weights are given explicitly) the model answers ``config.cold_beta``.
    """

    weights: Optional[np.ndarray] = None
    bias: Optional[float] = None
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    feature_scale: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    config: PredictorConfig = field(default_factory=PredictorConfig)
    buffer: deque = field(init=False)
    fits: int = 0
    last_fit_ok: bool = True

    def __post_init__(self):
        self.buffer = deque(maxlen=self.config.buffer_cap)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (N_FEATURES,):
                raise ValueError(f"weights must have {N_FEATURES} entries")
            if self.bias is None:
                self.bias = 0.0
        elif self.bias is not None:
            self.weights = np.zeros(N_FEATURES)

    @property
    def is_cold(self) -> bool:
        return self.weights is None

    def linear_response(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.feature_mean) / self.feature_scale
        return z @ self.weights + self.bias

    def copy(self) -> "ProgressModel":
        clone = ProgressModel(
            weights=None if self.weights is None else self.weights.copy(),
            bias=self.bias,
            feature_mean=self.feature_mean.copy(),
            feature_scale=self.feature_scale.copy(),
            config=self.config,
        )
        clone.buffer.extend(self.buffer)
        clone.fits = self.fits
        clone.last_fit_ok = self.last_fit_ok
        return clone

    def dumps(self) -> str:
        return json.dumps({
            "weights": None if self.weights is None else [float(w) for w in self.weights],
            "bias": self.bias,
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_scale": [float(v) for v in self.feature_scale],
            "buffer_size": len(self.buffer),
            "fits": self.fits,
            "last_fit_ok": self.last_fit_ok,
        }, indent=2, sort_keys=True)


def alpha_of(features: PredictorFeatures) -> float:
    return max(features.processed / features.epoch_size, 1.0)


def beta_of(model: ProgressModel, features: PredictorFeatures) -> float:
    if model.is_cold:
        return max(model.config.cold_beta, 1.0)
    return max(float(model.linear_response(features.as_array())), 1.0)


def predict(model: ProgressModel, features: PredictorFeatures) -> BetaParams:
    return BetaParams(alpha_of(features), beta_of(model, features))


def sample_progress(params: BetaParams, rng: np.random.Generator) -> float:
    rho = float(rng.beta(params.alpha, params.beta))
    return min(max(rho, RHO_EPS), 1.0 - RHO_EPS)


def remaining_workload(processed: float, rho: float) -> float:
    if not 0.0 < rho < 1.0:
        raise ValueError(f"progress {rho} outside (0, 1)")
    if processed < 0:
        raise ValueError("processed must be >= 0")
    return processed * (1.0 / rho - 1.0)


def remaining_time(workload: float, throughput: float) -> float:
    if throughput <= 0:
        raise ValueError(f"throughput must be positive, got {throughput}")
    return workload / throughput


def record_completion(model: ProgressModel, job: JobRuntime,
                      rng: np.random.Generator) -> int:
    """Subsample the finished job's training log into the buffer.

    True progress at a checkpoint is ``processed / total processed at
    completion``.  Returns the number of samples appended.
    """
    log = job.checkpoints
    if len(log) < 2:
        return 0
    total = job.processed
    if total <= 0:
        return 0
    usable = [c for c in log if 0.0 < c.processed / total < 1.0]
    if not usable:
        return 0
    quota = model.config.per_job_quota
    if len(usable) > quota:
        picks = np.sort(rng.choice(len(usable), size=quota, replace=False))
        usable = [usable[i] for i in picks]
    spec = job.spec
    for c in usable:
        feats = PredictorFeatures(spec.epoch_size, spec.loss_init, c.processed,
                                  c.loss_improvement, c.accuracy)
        model.buffer.append(ProgressSample(feats, c.processed / total))
    return len(usable)


def _smooth_beta(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``1 + softplus(u - 1)`` and its derivative."""
    v = u - 1.0
    beta = 1.0 + np.logaddexp(0.0, v)
    dbeta = 0.5 * (1.0 + np.tanh(0.5 * v))
    return beta, dbeta


def _log_likelihood(alpha, beta, log_rho, log_1m_rho) -> float:
    ll = (alpha - 1.0) * log_rho + (beta - 1.0) * log_1m_rho - betaln(alpha, beta)
    return float(np.mean(ll))


def buffer_log_likelihood(model: ProgressModel, samples: Optional[Sequence[ProgressSample]] = None,
                          smooth: bool = True) -> float:
    """Mean Beta log-likelihood of the buffer under the current parameters."""
    samples = list(model.buffer if samples is None else samples)
    if not samples:
        return 0.0
    x = np.array([s.features.as_array() for s in samples])
    rho = np.array([s.progress for s in samples])
    alpha = np.maximum(x[:, 2] / x[:, 0], 1.0)
    if model.is_cold:
        beta = np.full(len(samples), max(model.config.cold_beta, 1.0 + 1e-6))
    else:
        u = model.linear_response(x)
        beta = _smooth_beta(u)[0] if smooth else np.maximum(u, 1.0)
    return _log_likelihood(alpha, beta, np.log(rho), np.log1p(-rho))


def fit(model: ProgressModel) -> ProgressModel:
    """Refit ``(weights, bias)`` by maximum Beta likelihood over the buffer.

    Fisher-scoring ascent from the previous parameters; a step is only taken
    when it improves the (smoothed) likelihood, otherwise the step length is
    halved.  Non-finite likelihoods revert the model and clear ``last_fit_ok``.
    """
    if not model.buffer:
        return model
    cfg = model.config
    x = np.array([s.features.as_array() for s in model.buffer])
    rho = np.array([s.progress for s in model.buffer])
    log_rho, log_1m_rho = np.log(rho), np.log1p(-rho)
    alpha = np.maximum(x[:, 2] / x[:, 0], 1.0)

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = (x - mean) / scale
    design = np.hstack([z, np.ones((len(z), 1))])

    # re-express the previous affine map in the new standardization
    if model.is_cold:
        theta = np.zeros(N_FEATURES + 1)
        # inverse of the smoothed threshold, so the start reproduces cold_beta
        theta[-1] = 1.0 + math.log(math.expm1(max(cfg.cold_beta, 1.0 + 1e-6) - 1.0))
    else:
        w_old = model.weights / model.feature_scale
        b_old = model.bias - float(w_old @ model.feature_mean)
        theta = np.append(w_old * scale, b_old + float(w_old @ mean))
    saved = (model.weights, model.bias, model.feature_mean, model.feature_scale)

    def objective(th):
        beta, _ = _smooth_beta(design @ th)
        return _log_likelihood(alpha, beta, log_rho, log_1m_rho)

    current = objective(theta)
    if not math.isfinite(current):
        model.last_fit_ok = False
        return model
    step = cfg.step_size
    n = len(rho)
    for _ in range(cfg.max_steps):
        u = design @ theta
        beta, dbeta = _smooth_beta(u)
        score = log_1m_rho - digamma(beta) + digamma(alpha + beta)
        grad = design.T @ (score * dbeta) / n
        info = polygamma(1, beta) - polygamma(1, alpha + beta)
        fisher = (design * (info * dbeta ** 2)[:, None]).T @ design / n
        fisher += 1e-8 * np.eye(len(theta))
        try:
            direction = np.linalg.solve(fisher, grad)
        except np.linalg.LinAlgError:
            direction = grad
        improved = False
        while step > 1e-8:
            trial = theta + step * direction
            value = objective(trial)
            if math.isfinite(value) and value > current:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        gain = value - current
        theta, current = trial, value
        step = min(step * 2.0, cfg.step_size)
        if gain <= cfg.tolerance * max(abs(current), 1e-12):
            break

    if not np.all(np.isfinite(theta)):
        model.weights, model.bias, model.feature_mean, model.feature_scale = saved
        model.last_fit_ok = False
        return model
    model.weights = theta[:-1].copy()
    model.bias = float(theta[-1])
    model.feature_mean = mean
    model.feature_scale = scale
    model.fits += 1
    model.last_fit_ok = True
    return model
