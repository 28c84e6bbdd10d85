"""Distributions used by the trainers and the marginal-KL estimators.

Graph-valued operations (Tensor in, Tensor out) carry gradients for
training. The estimators evaluate densities over large sample blocks where
graph bookkeeping is dead weight, so the Gaussian log-density also exists
as a plain-array twin; a test pins the two to each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor, as_tensor
from .errors import ContractError, NumericsError
from .rng import RngStream

# Variances below this are clamped. Posterior collapse still shows up as the
# floor being hit; it just cannot take the loss to -inf any more.
VAR_FLOOR = 1e-6
LOGVAR_FLOOR = float(np.log(VAR_FLOOR))

_LOG_2PI = float(np.log(2.0 * np.pi))


def _sum_features(t: Tensor) -> Tensor:
    """Sum everything except the leading batch axis (if there is one)."""
    if t.data.ndim <= 1:
        return engine.tsum(t)
    flat = engine.reshape(t, (t.data.shape[0], -1))
    return engine.tsum(flat, axis=1)


class DiagGaussian:
    """Gaussian with diagonal covariance, parameterized by log-variance.

    ``mean`` and ``logvar`` may be batched row-wise. The variance floor is
    applied at construction.
    """

    def __init__(self, mean, logvar, floor: bool = True):
        self.mean = as_tensor(mean)
        logvar = as_tensor(logvar)
        self.logvar = engine.clamp_min(logvar, LOGVAR_FLOOR) if floor else logvar


def reparam(q: DiagGaussian, rng: RngStream) -> Tensor:
    """One reparameterized draw per row of ``q``; gradients flow to μ, logσ²."""
    eps = Tensor(rng.normal(q.mean.data.shape))
    return q.mean + engine.exp(0.5 * q.logvar) * eps


def diag_sample(q: DiagGaussian, rng: RngStream, n: int) -> Tensor:
    """n draws from an unbatched q over R^d, shape (n, d)."""
    if n < 1:
        raise ContractError("need at least one sample")
    d = q.mean.data.reshape(-1).shape[0]
    eps = Tensor(rng.normal((n, d)))
    return q.mean + engine.exp(0.5 * q.logvar) * eps


def diag_log_prob(q: DiagGaussian, z) -> Tensor:
    """Log density per row."""
    z = as_tensor(z)
    diff = z - q.mean
    quad = diff * diff * engine.exp(-q.logvar)
    return -0.5 * _sum_features(quad + q.logvar + _LOG_2PI)


def kl_diag_standard(q: DiagGaussian) -> Tensor:
    """KL(q ‖ N(0, I)) per row, closed form."""
    var = engine.exp(q.logvar)
    terms = q.mean * q.mean + var - 1.0 - q.logvar
    return 0.5 * _sum_features(terms)


def kl_diag_standard_per_dim(q: DiagGaussian) -> np.ndarray:
    """Per-coordinate KL contributions, batch-averaged; plain array."""
    mean, logvar = q.mean.data, q.logvar.data
    var = np.exp(logvar)
    per = 0.5 * (mean * mean + var - 1.0 - logvar)
    return per.mean(axis=0) if per.ndim > 1 else per


@dataclass
class StandardPrior:
    dim: int

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        return rng.normal((n, self.dim))

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return -0.5 * (z * z + _LOG_2PI).sum(axis=-1)


# ---------------------------------------------------------------------------
# Full-covariance Gaussians from affine pushforwards.


@dataclass
class AffineGaussian:
    """x = W^T z + b with z ~ N(0, I_k), so x ~ N(b, W^T W)."""

    W: np.ndarray
    b: np.ndarray

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        k = self.W.shape[0]
        z = rng.normal((n, k))
        return z @ self.W + self.b


def affine_to_moments(g: AffineGaussian):
    W = np.asarray(g.W, dtype=np.float64)
    b = np.asarray(g.b, dtype=np.float64)
    return b, W.T @ W


def kl_full_gauss(p0, p1) -> float:
    """KL(N(m0,S0) ‖ N(m1,S1)); S1 must be positive definite."""
    m0, s0 = (np.asarray(a, dtype=np.float64) for a in p0)
    m1, s1 = (np.asarray(a, dtype=np.float64) for a in p1)
    d = m0.shape[0]
    try:
        chol1 = np.linalg.cholesky(s1)
    except np.linalg.LinAlgError:
        raise NumericsError("second covariance is not positive definite")
    s1_inv_s0 = np.linalg.solve(s1, s0)
    diff = m1 - m0
    y = np.linalg.solve(chol1, diff)
    maha = float(y @ y)
    sign0, logdet0 = np.linalg.slogdet(s0)
    logdet1 = 2.0 * float(np.log(np.diag(chol1)).sum())
    if sign0 <= 0:
        raise NumericsError("first covariance is not positive definite")
    return 0.5 * (np.trace(s1_inv_s0) + maha - d + logdet1 - logdet0)


def sample_full_gauss(mean: np.ndarray, cov: np.ndarray, n: int,
                      rng: RngStream) -> np.ndarray:
    chol = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    eps = rng.normal((n, len(mean)))
    return np.asarray(mean) + eps @ chol.T


def mc_kl_full_gauss(p0, p1, n: int, rng: RngStream):
    """Monte Carlo KL(N(p0) ‖ N(p1)) with its standard error.

    Independent route to the closed form: draws from p0, averages the
    log-density difference.
    """
    m0, s0 = p0
    x = sample_full_gauss(m0, s0, n, rng)
    terms = full_gauss_logpdf(x, m0, s0) - full_gauss_logpdf(x, *p1)
    stderr = float(terms.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(terms.mean()), stderr


def full_gauss_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Row-wise log density of N(mean, cov); cov must be positive definite."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericsError("covariance is not positive definite")
    diff = x - mean
    y = np.linalg.solve(chol, diff.T)
    maha = (y * y).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * _LOG_2PI + logdet + maha)


# ---------------------------------------------------------------------------
# Visible distributions.


class BernoulliVisible:
    def __init__(self, logits):
        self.logits = as_tensor(logits)

    def mean(self) -> Tensor:
        return engine.sigmoid(self.logits)


def bernoulli_log_prob(v: BernoulliVisible, x) -> Tensor:
    """Σ x·log σ(l) + (1−x)·log(1−σ(l)) per row, via x·l − softplus(l).

    Targets in [0,1] are accepted; the cross-entropy extends to them.
    """
    x = as_tensor(x)
    return _sum_features(x * v.logits - engine.softplus(v.logits))


class QuantizedNormalVisible:
    """Gaussian density on integer data dequantized with fresh uniform noise."""

    def __init__(self, mean, logvar, floor: bool = True):
        self.mean = as_tensor(mean)
        logvar = as_tensor(logvar)
        self.logvar = engine.clamp_min(logvar, LOGVAR_FLOOR) if floor else logvar


def quantized_log_prob(v: QuantizedNormalVisible, x, rng: RngStream) -> Tensor:
    """Log density at x + u with u ~ Uniform[0,1) drawn from ``rng``."""
    # x is a constant target; the noise rides outside the graph.
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    noised = Tensor(x + rng.uniform(x.shape))
    diff = noised - v.mean
    quad = diff * diff * engine.exp(-v.logvar)
    return -0.5 * _sum_features(quad + v.logvar + _LOG_2PI)


# ---------------------------------------------------------------------------
# Array-side helpers shared by the estimators.


def gauss_logpdf_np(z: np.ndarray, mean: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density; broadcasts, sums the last axis."""
    z = np.asarray(z, dtype=np.float64)
    diff = z - mean
    return -0.5 * (diff * diff * np.exp(-logvar) + logvar + _LOG_2PI).sum(axis=-1)


def log_mean_exp(values, axis=None):
    """log(mean(exp(values))), max-shifted so huge inputs do not overflow."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError("log_mean_exp of an empty collection")
    if axis is None:
        hi = float(values.max())
        return float(np.log(np.mean(np.exp(values - hi))) + hi)
    hi = values.max(axis=axis, keepdims=True)
    out = np.log(np.mean(np.exp(values - hi), axis=axis, keepdims=True)) + hi
    return np.squeeze(out, axis=axis)
